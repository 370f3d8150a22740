"""Training loop: per-graph optimizer steps, seeded shuffles, KL annealing,
validation-based early stopping, and best-checkpoint retention.

Every source of randomness derives from the one run seed through fixed
SeedSequence lanes: [seed, 0] initializes parameters, [seed, 1, epoch]
shuffles, [seed, 2, epoch, window_id] drives a graph's training
transforms, and [seed, 3, window_id] drives validation transforms — the
last without an epoch term so the early-stop signal is noise-free.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward, zero_grads
from .model import (
    ModelConfig,
    _discriminator_losses,
    disc_param_names,
    draw_eval_transforms,
    draw_training_transforms,
    forward_pass,
    init_params,
    kl_anneal_weight,
    model_param_names,
    total_loss,
)
from .optim import AdamWState, adamw_step

logger = logging.getLogger(__name__)


@dataclass
class TrainState:
    """Mutable bookkeeping for one training run."""

    epoch: int = 0
    best_val_loss: float = float("inf")
    best_epoch: int = -1
    best_params: dict | None = None  # {name: ndarray} snapshot
    patience_counter: int = 0
    history: list = field(default_factory=list)  # (epoch, train_loss, val_loss, kl_weight)


def validate(graphs, params: dict, config: ModelConfig, seed: int) -> float:
    """Mean total loss over graphs with no masking, no edge dropping, and
    kl weight 1. Negatives and latent noise come from per-window fixed
    seeds, so the value depends only on (graphs, params, config, seed)."""
    total = 0.0
    for g in graphs:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3, g.window_id]))
        draw = draw_eval_transforms(g, config, rng, sample_z=True)
        bundle, _ = forward_pass(g, params, config, draw)
        total += float(total_loss(bundle, config.struct_weight, config.feat_weight, 1.0).values)
    return total / len(graphs)


def train(train_graphs, val_graphs, config: ModelConfig, seed: int):
    """Fit the model; returns (best params, history).

    Per epoch: shuffle the training graphs, take one AdamW step per graph
    on the annealed objective (plus the generator-side term when the
    regularizer is on, with the discriminator updated on its own
    alternating step), then validate. The parameter snapshot with the
    lowest validation loss wins; training stops after ``patience`` epochs
    without strict improvement or at ``max_epochs``.
    """
    if not train_graphs or not val_graphs:
        raise ValueError("train: need nonempty train and val graph lists")
    width = train_graphs[0].feature_width
    params = init_params(config, width, np.random.default_rng(np.random.SeedSequence([seed, 0])))
    model_params = {n: params[n] for n in model_param_names(params)}
    disc_params = {n: params[n] for n in disc_param_names(params)}
    model_opt = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    disc_opt = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    state = TrainState()

    for epoch in range(config.max_epochs):
        state.epoch = epoch
        klw = kl_anneal_weight(epoch, config)
        order = np.random.default_rng(np.random.SeedSequence([seed, 1, epoch])).permutation(len(train_graphs))
        epoch_losses = []
        for gi in order:
            g = train_graphs[gi]
            rng = np.random.default_rng(np.random.SeedSequence([seed, 2, epoch, g.window_id]))
            draw = draw_training_transforms(g, config, rng)
            with Tape() as tape:
                bundle, latent = forward_pass(g, params, config, draw)
                loss = total_loss(bundle, config.struct_weight, config.feat_weight, klw)
                if bundle.gen is not None:
                    loss = ad.add(loss, bundle.gen)
            loss_value = float(loss.values)
            if not np.isfinite(loss_value):
                tape.clear()
                raise FloatingPointError(
                    f"non-finite training loss {loss_value} at epoch {epoch}, window {g.window_id}"
                )
            backward(loss, tape)
            adamw_step(model_params, model_opt)
            zero_grads(params.values())
            if config.use_regularizer:
                z0 = latent.z_draws[0].values
                z_conn = Tensor(z0[g.ip_count:])  # detached: the encoder is frozen here
                with Tape() as disc_tape:
                    disc_loss, _ = _discriminator_losses(z_conn, draw.disc_real, params)
                backward(disc_loss, disc_tape)
                adamw_step(disc_params, disc_opt)
                zero_grads(params.values())
            epoch_losses.append(loss_value)

        train_loss = float(np.mean(epoch_losses))
        val_loss = validate(val_graphs, params, config, seed)
        state.history.append((epoch, train_loss, val_loss, klw))
        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            state.best_epoch = epoch
            state.best_params = {n: t.values.copy() for n, t in params.items()}
            state.patience_counter = 0
        else:
            state.patience_counter += 1
        logger.info(
            "epoch %d: train %.6f val %.6f (kl weight %.2f, best %.6f @ %d)",
            epoch, train_loss, val_loss, klw, state.best_val_loss, state.best_epoch,
        )
        if state.patience_counter >= config.patience:
            break

    best = {n: Tensor(v.copy(), requires_grad=True) for n, v in state.best_params.items()}
    return best, state.history


def save_history(path, history) -> None:
    """Delimited text: epoch, train_loss, val_loss, kl_weight."""
    lines = ["epoch,train_loss,val_loss,kl_weight"]
    for epoch, train_loss, val_loss, klw in history:
        lines.append(f"{epoch},{train_loss!r},{val_loss!r},{klw!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_history(path) -> list:
    lines = Path(path).read_text().strip().splitlines()
    out = []
    for line in lines[1:]:
        e, tr, vl, kw = line.split(",")
        out.append((int(e), float(tr), float(vl), float(kw)))
    return out
