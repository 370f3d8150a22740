"""The variational graph autoencoder.

Encoder: num_layers heterogeneous GraphSAGE layers (mean aggregation per
relation, per-relation linear maps plus a self map per node type, ReLU),
then linear mu / logvar heads. Latent: reparameterized Gaussian draws.
Decoders: a per-relation diagonally-weighted dot product for structure
and a one-layer SAGE + linear head for connection features.

All parameters live in a flat {name: Tensor} dict. Linear maps carry no
bias terms. Message passing is dense: per relation a constant
row-normalized incidence matrix multiplied into the source-type feature
matrix, which keeps every backward rule inside the autodiff substrate.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import (
    RELATIONS,
    EdgeDropPlan,
    HetGraph,
    NegativeEdgeSet,
    drop_edges,
    keep_all_edges,
    mask_nodes,
    sample_negative_edges,
)

CHECKPOINT_FORMAT_VERSION = 1

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0

FEATURE_LOSSES = ("mse", "cosine")

# relations whose target type is a connection node (the others target IPs)
_CONN_TARGET = ("src_to_conn", "dst_to_conn")


@dataclass
class ModelConfig:
    """Architecture, objective, transform, and training hyperparameters."""

    num_layers: int = 1
    hidden: int = 32
    latent: int = 32
    feature_loss: str = "mse"
    use_regularizer: bool = False
    num_draws: int = 1
    kl_annealing: bool = True
    kl_anneal_epochs: int = 10
    kl_min_weight: float = 0.0
    struct_weight: float = 1.0
    feat_weight: float = 1.0
    mask_rate: float = 0.3
    drop_rate: float = 0.1
    negative_rate: float = 0.2
    max_epochs: int = 100
    patience: int = 20
    lr: float = 1e-3
    weight_decay: float = 1e-5

    def __post_init__(self):
        if self.num_layers not in (1, 2):
            raise ValueError(f"num_layers must be 1 or 2, got {self.num_layers}")
        if self.num_draws < 1:
            raise ValueError(f"num_draws must be >= 1, got {self.num_draws}")
        if self.feature_loss not in FEATURE_LOSSES:
            raise ValueError(f"feature_loss must be one of {FEATURE_LOSSES}, got {self.feature_loss!r}")


@dataclass
class LatentState:
    """Posterior parameters and sampled embeddings, IP rows first."""

    mu: Tensor  # [N_total x latent]
    logvar: Tensor  # [N_total x latent]
    z_draws: list  # num_draws tensors [N_total x latent]
    n_ip: int


@dataclass
class LossBundle:
    """Scalar loss terms (alive on the tape) plus detached per-connection
    vectors for scoring. Structural and feature terms are averages over
    the latent draws; KL depends only on (mu, logvar) and appears once."""

    struct: Tensor
    feat: Tensor
    kl: Tensor
    struct_per_node: np.ndarray
    feat_per_node: np.ndarray
    kl_per_node: np.ndarray
    gen: Tensor | None = None


@dataclass
class TransformDraw:
    """Pre-sampled stochasticity for one forward pass, so a pass is a
    deterministic function of (graph, params, draw)."""

    mask_ids: np.ndarray | None
    drop_plan: EdgeDropPlan
    negatives: NegativeEdgeSet
    eps: list = field(default_factory=list)  # [N_total x latent] per draw; empty -> z = mu
    disc_real: np.ndarray | None = None  # [N_conn x latent] standard-normal reference batch


def init_params(config: ModelConfig, feature_width: int, rng) -> dict:
    """Glorot-uniform weights; structural relation weights start at all-ones
    (plain dot product) and the mask token at zero."""

    def glorot(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)

    params: dict = {}
    for layer in range(config.num_layers):
        d_in = feature_width if layer == 0 else config.hidden
        for rel in RELATIONS:
            params[f"enc{layer}.{rel}"] = glorot(d_in, config.hidden)
        params[f"enc{layer}.self_conn"] = glorot(d_in, config.hidden)
        params[f"enc{layer}.self_ip"] = glorot(d_in, config.hidden)
    params["head.mu"] = glorot(config.hidden, config.latent)
    params["head.logvar"] = glorot(config.hidden, config.latent)
    for rel in _CONN_TARGET:
        params[f"dec.{rel}"] = glorot(config.latent, config.hidden)
    params["dec.self_conn"] = glorot(config.latent, config.hidden)
    params["dec.out"] = glorot(config.hidden, feature_width)
    for rel in RELATIONS:
        params[f"struct.{rel}"] = Tensor(np.ones(config.latent), requires_grad=True)
    params["mask_token"] = Tensor(np.zeros(feature_width), requires_grad=True)
    if config.use_regularizer:
        params["disc.w1"] = glorot(config.latent, config.hidden)
        params["disc.w2"] = glorot(config.hidden, 1)
    return params


def model_param_names(params) -> list:
    return [n for n in params if not n.startswith("disc.")]


def disc_param_names(params) -> list:
    return [n for n in params if n.startswith("disc.")]


def message_matrices(graph: HetGraph, plan: EdgeDropPlan) -> dict:
    """Constant mean-aggregation matrices over the plan's surviving edges.

    ip->conn relations give [N_conn x N_ip] selectors (each connection has
    at most one surviving neighbor per relation); conn->ip relations give
    [N_ip x N_conn] rows normalized by surviving in-degree. Nodes with no
    surviving in-edges aggregate to zero.
    """
    n_conn, n_ip = graph.n_conn, graph.ip_count
    conn_idx = np.arange(n_conn)
    mats = {}
    for rel in RELATIONS:
        ip_ids = graph.ip_of_conn(rel)
        keep = plan.keep_for(rel)
        if rel in _CONN_TARGET:
            m = np.zeros((n_conn, n_ip))
            m[conn_idx[keep], ip_ids[keep]] = 1.0
        else:
            m = np.zeros((n_ip, n_conn))
            m[ip_ids[keep], conn_idx[keep]] = 1.0
            deg = m.sum(axis=1, keepdims=True)
            deg[deg == 0.0] = 1.0
            m = m / deg
        mats[rel] = m
    return mats


def sage_layer(feats: dict, weights: dict, mats: dict, activate: bool = True) -> dict:
    """One heterogeneous GraphSAGE layer over {'ip','conn'} feature tensors.

    Per target type: self map plus the per-relation maps of the
    mean-aggregated in-neighbors, summed, then ReLU.
    """
    agg = {rel: ad.matmul(Tensor(mats[rel]), feats["ip" if rel in _CONN_TARGET else "conn"]) for rel in RELATIONS}
    conn = ad.matmul(feats["conn"], weights["self_conn"])
    conn = ad.add(conn, ad.matmul(agg["src_to_conn"], weights["src_to_conn"]))
    conn = ad.add(conn, ad.matmul(agg["dst_to_conn"], weights["dst_to_conn"]))
    ip = ad.matmul(feats["ip"], weights["self_ip"])
    ip = ad.add(ip, ad.matmul(agg["conn_to_src"], weights["conn_to_src"]))
    ip = ad.add(ip, ad.matmul(agg["conn_to_dst"], weights["conn_to_dst"]))
    if activate:
        conn, ip = ad.relu(conn), ad.relu(ip)
    return {"ip": ip, "conn": conn}


def _layer_weights(params: dict, layer: int) -> dict:
    prefix = f"enc{layer}."
    return {name[len(prefix):]: t for name, t in params.items() if name.startswith(prefix)}


def encode(graph: HetGraph, params: dict, config: ModelConfig, conn_input: Tensor | None = None,
           drop_plan: EdgeDropPlan | None = None) -> LatentState:
    """Run the SAGE stack and heads; logvar is clamped to [-10, 10].

    ``conn_input`` is the (possibly masked) connection feature tensor;
    IP nodes always enter as all-ones placeholder rows. No sampling
    happens here — z draws are attached by the caller.
    """
    if conn_input is None:
        conn_input = Tensor(graph.conn_features)
    if conn_input.shape[1] != graph.feature_width:
        raise ValueError(f"conn feature width {conn_input.shape[1]} != graph width {graph.feature_width}")
    mats = message_matrices(graph, drop_plan if drop_plan is not None else keep_all_edges(graph))
    feats = {"ip": Tensor(np.ones((graph.ip_count, graph.feature_width))), "conn": conn_input}
    for layer in range(config.num_layers):
        feats = sage_layer(feats, _layer_weights(params, layer), mats)
    h = ad.vstack([feats["ip"], feats["conn"]])
    mu = ad.matmul(h, params["head.mu"])
    logvar = ad.clamp(ad.matmul(h, params["head.logvar"]), LOGVAR_MIN, LOGVAR_MAX)
    return LatentState(mu=mu, logvar=logvar, z_draws=[], n_ip=graph.ip_count)


def reparameterize_with(mu: Tensor, logvar: Tensor, eps_list) -> list:
    """z = mu + exp(logvar / 2) * eps for each pre-drawn eps array."""
    std = ad.exp(ad.mul(0.5, logvar))
    return [ad.add(mu, ad.mul(std, Tensor(e))) for e in eps_list]


def reparameterize(mu: Tensor, logvar: Tensor, rng, num_draws: int) -> list:
    eps = [rng.standard_normal(mu.shape) for _ in range(num_draws)]
    return reparameterize_with(mu, logvar, eps)


def decode_structure(z: Tensor, params: dict, pairs_by_rel: dict, n_ip: int) -> dict:
    """Edge logits: logit(ip, conn | r) = sum_k z_ip[k] * W_r[k] * z_conn[k].

    Pairs are (ip_id, conn_id); conn rows sit after the IP block in z.
    W_r = all-ones reduces this to the plain dot product exactly.
    """
    n_total = z.shape[0]
    logits = {}
    for rel, pairs in pairs_by_rel.items():
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if pairs.size and (pairs[:, 0].max() >= n_ip or n_ip + pairs[:, 1].max() >= n_total):
            raise ValueError(f"{rel}: pair references a node id out of range")
        zu = ad.gather_rows(z, pairs[:, 0])
        zv = ad.gather_rows(z, n_ip + pairs[:, 1])
        logits[rel] = ad.rowsum(ad.scale_columns(ad.mul(zu, zv), params[f"struct.{rel}"]))
    return logits


def positive_pairs(graph: HetGraph) -> dict:
    """The original (pre-drop) edges as (ip_id, conn_id) pairs per relation."""
    conn = np.arange(graph.n_conn)
    return {rel: np.column_stack([graph.ip_of_conn(rel), conn]) for rel in RELATIONS}


def structural_loss(pos_logits: dict, neg_logits: dict, pos_pairs: dict, neg_pairs: dict, n_conn: int):
    """BCE over all pairs: original edges target 1, sampled non-edges target 0.

    Returns the scalar mean over every pair plus a detached per-connection
    vector averaging the pair losses incident to each connection node.
    """
    pieces = []  # (per-pair loss tensor, conn ids)
    for rel in RELATIONS:
        if rel in pos_logits and pos_logits[rel].shape[0]:
            t = ad.bce_with_logits(pos_logits[rel], Tensor(np.ones(pos_logits[rel].shape[0])), reduction="none")
            pieces.append((t, np.asarray(pos_pairs[rel])[:, 1]))
        if rel in neg_logits and neg_logits[rel].shape[0]:
            t = ad.bce_with_logits(neg_logits[rel], Tensor(np.zeros(neg_logits[rel].shape[0])), reduction="none")
            pieces.append((t, np.asarray(neg_pairs[rel])[:, 1]))
    if not pieces:
        raise ValueError("structural_loss: no pairs at all")
    scalar = ad.mean_(ad.concat([t for t, _ in pieces]))
    acc = np.zeros(n_conn)
    cnt = np.zeros(n_conn)
    for t, ids in pieces:
        np.add.at(acc, ids, t.values)
        np.add.at(cnt, ids, 1.0)
    per_node = acc / np.maximum(cnt, 1.0)
    return scalar, per_node


def decode_features(graph: HetGraph, z: Tensor, params: dict, mats: dict) -> Tensor:
    """One SAGE layer over the same (dropped) edges, conn side only, then a
    linear head back to feature width."""
    n_ip = graph.ip_count
    z_ip = ad.gather_rows(z, np.arange(n_ip))
    z_conn = ad.gather_rows(z, n_ip + np.arange(graph.n_conn))
    h = ad.matmul(z_conn, params["dec.self_conn"])
    h = ad.add(h, ad.matmul(ad.matmul(Tensor(mats["src_to_conn"]), z_ip), params["dec.src_to_conn"]))
    h = ad.add(h, ad.matmul(ad.matmul(Tensor(mats["dst_to_conn"]), z_ip), params["dec.dst_to_conn"]))
    return ad.matmul(ad.relu(h), params["dec.out"])


def kl_divergence(mu: Tensor, logvar: Tensor, n_ip: int = 0):
    """Per-node KL to the standard normal: -1/2 * sum_k (1 + logvar - mu^2 - exp(logvar)).

    Scalar = mean over connection nodes (rows from n_ip on); IP rows are
    placeholder-driven and excluded.
    """
    n_total = mu.shape[0]
    conn_rows = np.arange(n_ip, n_total)
    mu_c = ad.gather_rows(mu, conn_rows)
    lv_c = ad.gather_rows(logvar, conn_rows)
    term = ad.sub(ad.add(1.0, lv_c), ad.add(ad.mul(mu_c, mu_c), ad.exp(lv_c)))
    per_node = ad.mul(-0.5, ad.rowsum(term))
    return ad.mean_(per_node), per_node


def kl_anneal_weight(epoch: int, config: ModelConfig) -> float:
    """Linear ramp kl_min_weight -> 1.0 across kl_anneal_epochs, then flat 1.0."""
    if not config.kl_annealing:
        return 1.0
    if epoch >= config.kl_anneal_epochs:
        return 1.0
    w0 = config.kl_min_weight
    return w0 + (1.0 - w0) * (epoch / config.kl_anneal_epochs)


def total_loss(bundle: LossBundle, alpha: float, beta: float, kl_weight: float) -> Tensor:
    """alpha * structural + beta * feature + kl_weight * KL."""
    return ad.add(
        ad.add(ad.mul(alpha, bundle.struct), ad.mul(beta, bundle.feat)),
        ad.mul(kl_weight, bundle.kl),
    )


def _disc_logits(x: Tensor, params: dict) -> Tensor:
    return ad.rowsum(ad.matmul(ad.relu(ad.matmul(x, params["disc.w1"])), params["disc.w2"]))


def _discriminator_losses(z_conn: Tensor, real: np.ndarray, params: dict):
    """(discriminator loss, generator-side loss) from a pre-drawn real batch.

    The discriminator loss sees z detached (it must not shape the encoder);
    the generator-side loss keeps z attached and rewards latents the
    discriminator mistakes for real standard-normal samples.
    """
    z_detached = Tensor(z_conn.values)
    logits = ad.concat([_disc_logits(Tensor(real), params), _disc_logits(z_detached, params)])
    targets = Tensor(np.concatenate([np.ones(real.shape[0]), np.zeros(z_conn.shape[0])]))
    disc = ad.bce_with_logits(logits, targets)
    gen = ad.bce_with_logits(_disc_logits(z_conn, params), Tensor(np.ones(z_conn.shape[0])))
    return disc, gen


def discriminator_loss(z_conn: Tensor, rng, params: dict):
    """Spec'd entry point drawing the real reference batch from ``rng``."""
    real = rng.standard_normal((z_conn.shape[0], z_conn.shape[1]))
    return _discriminator_losses(z_conn, real, params)


def _mean_tensors(tensors) -> Tensor:
    out = tensors[0]
    for t in tensors[1:]:
        out = ad.add(out, t)
    return ad.mul(1.0 / len(tensors), out) if len(tensors) > 1 else out


def forward_pass(graph: HetGraph, params: dict, config: ModelConfig, draw: TransformDraw):
    """One full pass: mask -> encode -> draws -> both decoders -> losses.

    Returns (LossBundle, LatentState). Deterministic given its arguments;
    all randomness arrives pre-sampled inside ``draw``. An empty
    ``draw.eps`` scores with z = mu (the inference path).
    """
    n_ip, n_conn = graph.ip_count, graph.n_conn
    conn_input = Tensor(graph.conn_features)
    if draw.mask_ids is not None and len(draw.mask_ids):
        conn_input = ad.mask_rows(conn_input, params["mask_token"], draw.mask_ids)
    latent = encode(graph, params, config, conn_input=conn_input, drop_plan=draw.drop_plan)
    if draw.eps:
        latent.z_draws = reparameterize_with(latent.mu, latent.logvar, draw.eps)
    else:
        latent.z_draws = [latent.mu]

    mats = message_matrices(graph, draw.drop_plan)
    pos_pairs = positive_pairs(graph)
    neg_pairs = draw.negatives.pairs
    target = Tensor(graph.conn_features)

    struct_scalars, feat_scalars = [], []
    struct_acc = np.zeros(n_conn)
    feat_acc = np.zeros(n_conn)
    for z in latent.z_draws:
        pos_logits = decode_structure(z, params, pos_pairs, n_ip)
        neg_logits = decode_structure(z, params, neg_pairs, n_ip)
        s_scalar, s_per = structural_loss(pos_logits, neg_logits, pos_pairs, neg_pairs, n_conn)
        recon = decode_features(graph, z, params, mats)
        if config.feature_loss == "mse":
            f_per = ad.mse_rowwise(target, recon)
        else:
            f_per = ad.cosine_rowwise(target, recon)
        struct_scalars.append(s_scalar)
        feat_scalars.append(ad.mean_(f_per))
        struct_acc += s_per
        feat_acc += f_per.values
    n_draws = len(latent.z_draws)
    kl_scalar, kl_per = kl_divergence(latent.mu, latent.logvar, n_ip)

    gen = None
    if config.use_regularizer and draw.disc_real is not None:
        z_conn = ad.gather_rows(latent.z_draws[0], n_ip + np.arange(n_conn))
        _, gen = _discriminator_losses(z_conn, draw.disc_real, params)

    bundle = LossBundle(
        struct=_mean_tensors(struct_scalars),
        feat=_mean_tensors(feat_scalars),
        kl=kl_scalar,
        struct_per_node=struct_acc / n_draws,
        feat_per_node=feat_acc / n_draws,
        kl_per_node=kl_per.values.copy(),
        gen=gen,
    )
    return bundle, latent


def draw_training_transforms(graph: HetGraph, config: ModelConfig, rng) -> TransformDraw:
    """Sample mask / edge-drop / negatives / eps (and the regularizer's real
    batch) in a fixed order so one generator state fixes the whole draw."""
    _, mask_plan = mask_nodes(graph.conn_features, config.mask_rate, np.zeros(graph.feature_width), rng)
    drop_plan = drop_edges_or_keep(graph, config.drop_rate, rng)
    negatives = sample_negative_edges(graph, config.negative_rate, rng)
    n_total = graph.ip_count + graph.n_conn
    eps = [rng.standard_normal((n_total, config.latent)) for _ in range(config.num_draws)]
    disc_real = rng.standard_normal((graph.n_conn, config.latent)) if config.use_regularizer else None
    return TransformDraw(mask_ids=mask_plan.masked_ids, drop_plan=drop_plan, negatives=negatives,
                         eps=eps, disc_real=disc_real)


def draw_eval_transforms(graph: HetGraph, config: ModelConfig, rng, sample_z: bool) -> TransformDraw:
    """Transforms for validation (sample_z=True) and scoring (sample_z=False):
    no masking, no edge dropping; negatives and any z noise come from the
    caller's (fixed-seed) generator."""
    negatives = sample_negative_edges(graph, config.negative_rate, rng)
    n_total = graph.ip_count + graph.n_conn
    eps = [rng.standard_normal((n_total, config.latent)) for _ in range(config.num_draws)] if sample_z else []
    disc_real = rng.standard_normal((graph.n_conn, config.latent)) if (config.use_regularizer and sample_z) else None
    return TransformDraw(mask_ids=None, drop_plan=keep_all_edges(graph), negatives=negatives,
                         eps=eps, disc_real=disc_real)


def drop_edges_or_keep(graph: HetGraph, rate: float, rng) -> EdgeDropPlan:
    """drop_edges, except rate 0 skips the generator entirely."""
    if rate == 0.0:
        return keep_all_edges(graph)
    return drop_edges(graph, rate, rng)


def save_checkpoint(path, params: dict, config: ModelConfig, epoch: int, rng_state: dict | None = None) -> None:
    """Versioned npz: config + every parameter by name + rng state + epoch."""
    arrays = {
        "format_version": np.array(CHECKPOINT_FORMAT_VERSION),
        "epoch": np.array(epoch),
        "config_json": np.array(json.dumps(asdict(config), sort_keys=True)),
        "rng_json": np.array(json.dumps(rng_state if rng_state is not None else {}, sort_keys=True)),
    }
    for name, t in params.items():
        arrays[f"param/{name}"] = t.values
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Returns (params, config, epoch, rng_state); values round-trip bit-exactly."""
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {version}")
        config = ModelConfig(**json.loads(str(data["config_json"])))
        epoch = int(data["epoch"])
        rng_state = json.loads(str(data["rng_json"]))
        params = {}
        for key in data.files:
            if key.startswith("param/"):
                params[key[len("param/"):]] = Tensor(data[key].copy(), requires_grad=True)
    return params, config, epoch, rng_state
