"""Command-line pipeline driver.

Eight subcommands cover the pipeline end to end::

    synth     write a synthetic flow file
    ingest    fit the feature encoder on the training split, encode all flows
    windows   build per-window graphs and the split manifest
    train     fit the model, write checkpoint + loss history
    score     dump per-connection anomaly scores for one split
    tune      grid-search scoring weights and threshold percentile
    evaluate  classification metrics on the test split
    bench     wall-clock timing of the scoring path

Configuration is one flat key set: every key has a built-in default, may
be overridden in a ``key = value`` config file, and again by the matching
command-line flag. Every run writes a ``<stage>.manifest.json`` recording
the effective config, its hash, and sha256 digests of the artifacts read
and written, which is enough to reproduce the run bit for bit.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .anomaly import (
    ScoreConfig,
    _pool,
    benchmark,
    classify,
    compute_metrics,
    fit_threshold,
    graph_channels,
    grid_search,
    roc_auc,
    save_metrics,
    save_scores,
    save_timing,
    scale_channels,
    score_graphs,
)
from .flows import clean, encode_matrix, fit_encoder, load_encoder, parse_flows, save_encoder, write_flows
from .graphs import build_graph, load_graphs, save_graphs
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .synth import AnomalyRecipe, SynthSpec, generate
from .train import save_history, train
from .windows import WINDOW_WIDTH_MS, SplitSpec, apply_contamination, build_windows, save_split_manifest, stratified_split

logger = logging.getLogger(__name__)

MANIFEST_FORMAT_VERSION = 1
TUNING_FORMAT_VERSION = 1


class MissingArtifactError(Exception):
    """A required upstream artifact does not exist yet."""


@dataclass
class RunConfig:
    """Every tunable of the pipeline, flat, with reproducible defaults."""

    # paths (relative names resolve inside the artifacts directory)
    flows: str = "flows.csv"
    # windowing and split
    window_width_ms: int = WINDOW_WIDTH_MS
    train_frac: float = 0.70
    val_frac: float = 0.20
    test_frac: float = 0.10
    contamination: float = 0.0
    seed: int = 0
    # model architecture and objective
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
    # optimization
    max_epochs: int = 100
    patience: int = 20
    lr: float = 1e-3
    weight_decay: float = 1e-5
    # scoring
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    use_mse: bool = True
    percentile: float = 95.0
    use_tuned: bool = False
    score_split: str = "test"
    # synthetic data
    synth_duration_s: int = 1800
    synth_hosts: int = 12
    synth_flows_per_window: int = 40
    synth_recipes: str = ""

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def score_config(self) -> ScoreConfig:
        return ScoreConfig(alpha=self.alpha, beta=self.beta, gamma=self.gamma,
                           use_mse=self.use_mse, percentile=self.percentile)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(train=self.train_frac, val=self.val_frac, test=self.test_frac,
                         seed=self.seed, contamination=self.contamination)


FLAG_HELP = {
    "flows": "flow CSV path; relative names live in the artifacts directory",
    "window_width_ms": "time-window width in milliseconds",
    "train_frac": "training fraction of windows",
    "val_frac": "validation fraction of windows",
    "test_frac": "test fraction of windows",
    "contamination": "anomalous-window fraction kept in the training split",
    "seed": "root seed; every random stream derives from it",
    "num_layers": "graph encoder depth (1 or 2)",
    "hidden": "encoder hidden width",
    "latent": "latent embedding width",
    "feature_loss": "feature reconstruction loss: mse or cosine",
    "use_regularizer": "adversarially regularize the latent space",
    "num_draws": "latent samples averaged per training step",
    "kl_annealing": "ramp the KL weight from 0 to 1",
    "kl_anneal_epochs": "epochs to reach full KL weight",
    "kl_min_weight": "KL weight floor during annealing",
    "struct_weight": "structural loss weight",
    "feat_weight": "feature loss weight",
    "mask_rate": "fraction of connection nodes masked per step",
    "drop_rate": "fraction of edges dropped per step",
    "negative_rate": "negative edges sampled per relation, as a fraction of connections",
    "max_epochs": "training epoch cap",
    "patience": "epochs without validation improvement before stopping",
    "lr": "learning rate",
    "weight_decay": "decoupled weight decay",
    "alpha": "anomaly-score weight on the feature channel",
    "beta": "anomaly-score weight on the structural channel",
    "gamma": "anomaly-score weight on the KL channel",
    "use_mse": "score with the squared-error feature channel (false = cosine)",
    "percentile": "threshold percentile of pooled training scores",
    "use_tuned": "score and evaluate with the tuned config from the tune stage",
    "score_split": "which split the score stage dumps: train, val, or test",
    "synth_duration_s": "synthetic capture length in seconds",
    "synth_hosts": "synthetic benign host count",
    "synth_flows_per_window": "benign flows per window",
    "synth_recipes": "comma list of attacks, e.g. 'scan@7x25,volumetric@9x30'",
}


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("true", "1", "yes", "on"):
        return True
    if value in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _convert(kind: type, raw: str):
    if kind is bool:
        return _parse_bool(raw)
    return kind(raw)


def parse_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; unknown keys rejected."""
    known = {f.name: f.type for f in fields(RunConfig)}
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    pairs = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ValueError(f"{path}:{line_no}: expected key = value, got {line!r}")
        key, _, raw = text.partition("=")
        key = key.strip()
        if key not in known:
            raise ValueError(f"{path}:{line_no}: unknown key {key!r} (valid: {', '.join(sorted(known))})")
        pairs[key] = _convert(types[key], raw.strip())
    return pairs


def build_run_config(args) -> RunConfig:
    values = {}
    if args.config:
        values.update(parse_config_file(args.config))
    for f in fields(RunConfig):
        override = getattr(args, f.name, None)
        if override is not None:
            values[f.name] = override
    return RunConfig(**values)


# ----------------------------------------------------------- artifacts


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _config_hash(rc: RunConfig) -> str:
    text = "\n".join(f"{k}={v!r}" for k, v in sorted(asdict(rc).items()))
    return hashlib.sha256(text.encode()).hexdigest()


def _flows_path(rc: RunConfig, artifacts: Path) -> Path:
    p = Path(rc.flows)
    return p if p.is_absolute() else artifacts / p


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(
            f"required input {path.name} is missing; run the `{stage}` stage first")
    return path


def write_manifest(artifacts: Path, stage: str, rc: RunConfig, inputs, outputs) -> Path:
    payload = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "stage": stage,
        "config": asdict(rc),
        "config_sha256": _config_hash(rc),
        "inputs": {p.name: _sha256(p) for p in inputs},
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    path = artifacts / f"{stage}.manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


# ----------------------------------------------------------- shared steps


def _load_records(rc: RunConfig, artifacts: Path, consumer_stage: str):
    path = _require(_flows_path(rc, artifacts), "synth")
    records = clean(parse_flows(path))
    if not records:
        raise ValueError(f"{consumer_stage}: no usable flow records in {path}")
    return records, path


def _window_split(rc: RunConfig, records):
    """Windows -> stratified split -> contaminated training split; every
    stage that needs the split recomputes it from the same config."""
    windows = build_windows(records, rc.window_width_ms)
    train_w, val_w, test_w = stratified_split(windows, rc.split_spec())
    rng = np.random.default_rng(np.random.SeedSequence([rc.seed, 4]))
    train_w = apply_contamination(train_w, rc.contamination, rng)
    return train_w, val_w, test_w


def _graph_paths(artifacts: Path) -> dict:
    return {split: artifacts / f"graphs_{split}.npz" for split in ("train", "val", "test")}


def _load_split_graphs(artifacts: Path, splits) -> dict:
    paths = _graph_paths(artifacts)
    out = {s: load_graphs(_require(paths[s], "windows")) for s in splits}
    for split, graphs in out.items():
        if not graphs:
            raise ValueError(
                f"the {split} split holds no windows; rerun `windows` on more data "
                f"or with different split fractions")
    return out


def _checkpoint(artifacts: Path):
    path = _require(artifacts / "model.npz", "train")
    params, config, _epoch, _rng = load_checkpoint(path)
    return params, config, path


def _effective_score_config(rc: RunConfig, artifacts: Path, inputs: list) -> ScoreConfig:
    if not rc.use_tuned:
        return rc.score_config()
    path = _require(artifacts / "tuning.json", "tune")
    payload = json.loads(path.read_text())
    inputs.append(path)
    return ScoreConfig(**payload["best"])


def _fit_threshold_on_train(train_graphs, params, config: ModelConfig, sc: ScoreConfig, seed: int):
    scaled = scale_channels([graph_channels(g, params, config, seed) for g in train_graphs])
    pooled, _ = _pool(scaled, sc)
    return fit_threshold(pooled, sc.percentile, provenance="train")


# ----------------------------------------------------------- subcommands


def _parse_recipes(text: str) -> list:
    recipes = []
    for chunk in filter(None, (c.strip() for c in text.split(","))):
        head, _, count = chunk.partition("x")
        kind, _, window = head.partition("@")
        if not window:
            raise ValueError(f"recipe {chunk!r} must look like kind@window or kind@windowxCOUNT")
        recipes.append(AnomalyRecipe(kind=kind.strip(), window=int(window),
                                     count=int(count) if count else 25))
    return recipes


def cmd_synth(rc: RunConfig, artifacts: Path) -> None:
    spec = SynthSpec(
        seed=rc.seed,
        duration_s=rc.synth_duration_s,
        host_count=rc.synth_hosts,
        flows_per_window=rc.synth_flows_per_window,
        recipes=_parse_recipes(rc.synth_recipes),
    )
    records = generate(spec)
    out = _flows_path(rc, artifacts)
    write_flows(records, out)
    logger.info("synth: %d records (%d anomalous) -> %s", len(records),
                sum(r.classification for r in records), out)
    write_manifest(artifacts, "synth", rc, [], [out])


def cmd_ingest(rc: RunConfig, artifacts: Path) -> None:
    records, flows_file = _load_records(rc, artifacts, "ingest")
    train_w, _, _ = _window_split(rc, records)
    train_records = [records[i] for w in train_w for i in w.flow_indices]
    if not train_records:
        raise ValueError("ingest: the training split contains no flows")
    encoder = fit_encoder(train_records)
    features = encode_matrix(records, encoder)
    enc_path = artifacts / "encoder.json"
    feat_path = artifacts / "features.npy"
    save_encoder(encoder, enc_path)
    np.save(feat_path, features)
    logger.info("ingest: encoder width %d fit on %d training flows; %d rows encoded",
                encoder.width, len(train_records), features.shape[0])
    write_manifest(artifacts, "ingest", rc, [flows_file], [enc_path, feat_path])


def cmd_windows(rc: RunConfig, artifacts: Path) -> None:
    records, flows_file = _load_records(rc, artifacts, "windows")
    enc_path = _require(artifacts / "encoder.json", "ingest")
    feat_path = _require(artifacts / "features.npy", "ingest")
    encoder = load_encoder(enc_path)
    features = np.load(feat_path)
    if features.shape != (len(records), encoder.width):
        raise ValueError(
            f"windows: features {features.shape} do not match {len(records)} records "
            f"x width {encoder.width}; rerun `ingest`")
    split_windows = dict(zip(("train", "val", "test"), _window_split(rc, records)))
    outputs = []
    paths = _graph_paths(artifacts)
    for split, ws in split_windows.items():
        graphs = [build_graph(w, records, features) for w in ws]
        save_graphs(graphs, paths[split])
        outputs.append(paths[split])
        logger.info("windows: %s split -> %d graphs", split, len(graphs))
    manifest_path = artifacts / "split.json"
    save_split_manifest(manifest_path, split_windows["train"], split_windows["val"],
                        split_windows["test"], rc.split_spec())
    outputs.append(manifest_path)
    write_manifest(artifacts, "windows", rc, [flows_file, enc_path, feat_path], outputs)


def cmd_train(rc: RunConfig, artifacts: Path) -> None:
    graphs = _load_split_graphs(artifacts, ("train", "val"))
    params, history = train(graphs["train"], graphs["val"], rc.model_config(), rc.seed)
    ckpt_path = artifacts / "model.npz"
    hist_path = artifacts / "history.csv"
    best_epoch = min(history, key=lambda h: h[2])[0]
    save_checkpoint(ckpt_path, params, rc.model_config(), epoch=best_epoch)
    save_history(hist_path, history)
    logger.info("train: %d epochs, best val %.6f at epoch %d",
                len(history), min(h[2] for h in history), best_epoch)
    paths = _graph_paths(artifacts)
    write_manifest(artifacts, "train", rc, [paths["train"], paths["val"]],
                   [ckpt_path, hist_path])


def cmd_score(rc: RunConfig, artifacts: Path) -> None:
    if rc.score_split not in ("train", "val", "test"):
        raise ValueError(f"score_split must be train, val, or test, got {rc.score_split!r}")
    params, config, ckpt_path = _checkpoint(artifacts)
    inputs = [ckpt_path]
    sc = _effective_score_config(rc, artifacts, inputs)
    graphs = _load_split_graphs(artifacts, ("train", rc.score_split))
    threshold = _fit_threshold_on_train(graphs["train"], params, config, sc, rc.seed)
    rows = score_graphs(graphs[rc.score_split], params, config, sc, rc.seed)
    out = artifacts / "scores.csv"
    save_scores(out, rows, threshold)
    logger.info("score: %d connection scores (%s split) -> %s", len(rows), rc.score_split, out)
    paths = _graph_paths(artifacts)
    write_manifest(artifacts, "score", rc,
                   inputs + [paths["train"], paths[rc.score_split]], [out])


def cmd_tune(rc: RunConfig, artifacts: Path) -> None:
    params, config, ckpt_path = _checkpoint(artifacts)
    graphs = _load_split_graphs(artifacts, ("train", "val"))
    best_cfg, threshold, results = grid_search(graphs["train"], graphs["val"],
                                               params, config, rc.seed)
    payload = {
        "format_version": TUNING_FORMAT_VERSION,
        "best": asdict(best_cfg),
        "threshold": threshold.value,
        "combinations": len(results),
        "results": results,
    }
    out = artifacts / "tuning.json"
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    logger.info("tune: %d combinations, best f1 %.4f", len(results),
                max(r["f1_macro"] for r in results))
    paths = _graph_paths(artifacts)
    write_manifest(artifacts, "tune", rc, [ckpt_path, paths["train"], paths["val"]], [out])


def cmd_evaluate(rc: RunConfig, artifacts: Path) -> None:
    params, config, ckpt_path = _checkpoint(artifacts)
    inputs = [ckpt_path]
    sc = _effective_score_config(rc, artifacts, inputs)
    graphs = _load_split_graphs(artifacts, ("train", "test"))
    threshold = _fit_threshold_on_train(graphs["train"], params, config, sc, rc.seed)
    scaled = scale_channels([graph_channels(g, params, config, rc.seed)
                             for g in graphs["test"]])
    scores, labels = _pool(scaled, sc)
    metrics = compute_metrics(classify(scores, threshold), labels)
    try:
        auc = roc_auc(scores, labels)
    except ValueError:
        auc = None  # single-class test split
    out = artifacts / "metrics.json"
    save_metrics(out, metrics, extra={
        "roc_auc": auc,
        "threshold": threshold.value,
        "score_config": asdict(sc),
        "test_connections": int(labels.size),
    })
    logger.info("evaluate: accuracy %.4f f1 %.4f recall %.4f auc %s",
                metrics.accuracy, metrics.f1_macro, metrics.recall_macro,
                "n/a" if auc is None else f"{auc:.4f}")
    paths = _graph_paths(artifacts)
    write_manifest(artifacts, "evaluate", rc,
                   inputs + [paths["train"], paths["test"]], [out])


def cmd_bench(rc: RunConfig, artifacts: Path) -> None:
    params, config, ckpt_path = _checkpoint(artifacts)
    inputs = [ckpt_path]
    sc = _effective_score_config(rc, artifacts, inputs)
    graphs = _load_split_graphs(artifacts, ("test",))
    report = benchmark(graphs["test"], params, config, sc, rc.seed)
    out = artifacts / "timing.json"
    save_timing(out, report)
    logger.info("bench: %.6f s/graph scoring over %d graphs",
                report.anomaly_score_s, report.graph_count)
    write_manifest(artifacts, "bench", rc, inputs + [_graph_paths(artifacts)["test"]], [out])


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic labeled flow file"),
    "ingest": (cmd_ingest, "fit the encoder on the training split and encode all flows"),
    "windows": (cmd_windows, "build per-window graphs and the split manifest"),
    "train": (cmd_train, "fit the model and write checkpoint + history"),
    "score": (cmd_score, "dump per-connection anomaly scores"),
    "tune": (cmd_tune, "grid-search scoring weights and percentile"),
    "evaluate": (cmd_evaluate, "metrics on the test split"),
    "bench": (cmd_bench, "time the scoring pipeline"),
}


def _build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--artifacts", default="artifacts",
                        help="directory holding every pipeline artifact (default: artifacts)")
    shared.add_argument("--config", help="key = value config file applied before flag overrides")
    shared.add_argument("--verbose", action="store_true", help="log progress to stderr")
    for f in fields(RunConfig):
        default = getattr(RunConfig(), f.name)
        kind = type(default)
        shared.add_argument(
            f"--{f.name.replace('_', '-')}",
            dest=f.name,
            default=None,
            type=(lambda raw, k=kind: _convert(k, raw)),
            metavar=kind.__name__.upper(),
            help=f"{FLAG_HELP[f.name]} (default: {default})",
        )
    parser = argparse.ArgumentParser(
        prog="flowvgae",
        description="windowed network-flow anomaly detection with a graph autoencoder",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[shared], help=help_text,
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = build_run_config(args)
        artifacts = Path(args.artifacts)
        artifacts.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command][0](rc, artifacts)
    except (MissingArtifactError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
