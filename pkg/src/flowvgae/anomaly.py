"""Per-connection anomaly scoring on a frozen model.

Three loss channels per connection node — feature reconstruction (MSE or
cosine), structural BCE over incident pairs, and KL — are robust-scaled
per window per channel, combined with user weights into one score, and
thresholded at a percentile fit on held-out-from-test data. Inference is
deterministic: z = mu, no masking, no edge dropping, fixed negative seed.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass
from itertools import product
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .graphs import keep_all_edges
from .model import (
    ModelConfig,
    decode_features,
    decode_structure,
    draw_eval_transforms,
    encode,
    kl_divergence,
    message_matrices,
    positive_pairs,
    structural_loss,
)
from . import autodiff as ad
from .autodiff import Tensor

GRID_WEIGHTS = (0.1, 0.5, 1.0)
GRID_PERCENTILES = (95.0, 97.0, 98.0, 99.0)

METRICS_FORMAT_VERSION = 1
TIMING_FORMAT_VERSION = 1


@dataclass
class ScoreConfig:
    """Channel weights, which feature channel to use, and the threshold percentile."""

    alpha: float = 1.0  # feature channel
    beta: float = 1.0  # structural channel
    gamma: float = 1.0  # KL channel
    use_mse: bool = True
    percentile: float = 95.0


@dataclass
class Threshold:
    percentile: float
    value: float
    provenance: str  # which split the scores came from


@dataclass
class Metrics:
    accuracy: float
    f1_macro: float
    recall_macro: float
    tp: int
    fp: int
    tn: int
    fn: int


@dataclass
class GraphChannels:
    """Raw (or scaled) per-connection channel vectors for one window."""

    window_id: int
    labels: np.ndarray
    feat_mse: np.ndarray
    feat_cos: np.ndarray
    struct: np.ndarray
    kl: np.ndarray


@dataclass
class TimingReport:
    """Mean per-graph wall-clock seconds per pipeline stage."""

    anomaly_score_s: float
    threshold_calc_s: float
    threshold_infer_s: float
    training_s: float  # anomaly score + threshold calculation
    inference_s: float  # anomaly score + threshold inference
    graph_count: int


def graph_channels(graph, params: dict, config: ModelConfig, seed: int) -> GraphChannels:
    """All four channel vectors for one graph with z = mu (both feature
    kinds are computed so a scoring config can pick either later)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, graph.window_id]))
    draw = draw_eval_transforms(graph, config, rng, sample_z=False)
    latent = encode(graph, params, config)
    z = latent.mu
    n_ip = graph.ip_count
    pos = positive_pairs(graph)
    pos_logits = decode_structure(z, params, pos, n_ip)
    neg_logits = decode_structure(z, params, draw.negatives.pairs, n_ip)
    _, struct_per = structural_loss(pos_logits, neg_logits, pos, draw.negatives.pairs, graph.n_conn)
    mats = message_matrices(graph, keep_all_edges(graph))
    recon = decode_features(graph, z, params, mats)
    target = Tensor(graph.conn_features)
    _, kl_per = kl_divergence(latent.mu, latent.logvar, n_ip)
    return GraphChannels(
        window_id=graph.window_id,
        labels=graph.conn_labels.copy(),
        feat_mse=ad.mse_rowwise(target, recon).values,
        feat_cos=ad.cosine_rowwise(target, recon).values,
        struct=struct_per,
        kl=kl_per.values[:],
    )


def per_node_losses(graph, params: dict, config: ModelConfig, seed: int, use_mse: bool = True):
    """The three raw channel vectors (feature, structural, KL) for one graph."""
    ch = graph_channels(graph, params, config, seed)
    return (ch.feat_mse if use_mse else ch.feat_cos), ch.struct, ch.kl


def robust_scale(values) -> np.ndarray:
    """(x - median) / IQR with linearly interpolated quartiles; an IQR of
    zero degrades to centering only."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("robust_scale: empty input")
    median = np.percentile(x, 50.0)
    q1, q3 = np.percentile(x, [25.0, 75.0])
    iqr = q3 - q1
    if iqr == 0.0:
        iqr = 1.0
    return (x - median) / iqr


def scale_channels(channels) -> list:
    """Robust-scale each channel independently, one window at a time."""
    return [
        GraphChannels(
            window_id=ch.window_id,
            labels=ch.labels,
            feat_mse=robust_scale(ch.feat_mse),
            feat_cos=robust_scale(ch.feat_cos),
            struct=robust_scale(ch.struct),
            kl=robust_scale(ch.kl),
        )
        for ch in channels
    ]


def anomaly_score(scaled_channels, config: ScoreConfig) -> np.ndarray:
    """score = alpha * feature + beta * structural + gamma * KL."""
    feat, struct, kl = scaled_channels
    feat, struct, kl = np.asarray(feat), np.asarray(struct), np.asarray(kl)
    if not (feat.shape == struct.shape == kl.shape):
        raise ValueError("anomaly_score: channel lengths differ")
    return config.alpha * feat + config.beta * struct + config.gamma * kl


def scores_for(scaled: GraphChannels, config: ScoreConfig) -> np.ndarray:
    feat = scaled.feat_mse if config.use_mse else scaled.feat_cos
    return anomaly_score((feat, scaled.struct, scaled.kl), config)


def fit_threshold(scores, percentile: float, provenance: str = "train") -> Threshold:
    """Linear-interpolation percentile of the pooled scores."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("fit_threshold: empty scores")
    return Threshold(percentile=float(percentile), value=float(np.percentile(scores, percentile)),
                     provenance=provenance)


def classify(scores, threshold: Threshold) -> np.ndarray:
    """Strictly above the threshold means anomalous."""
    return np.asarray(scores, dtype=np.float64) > threshold.value


def compute_metrics(flags, labels) -> Metrics:
    """Accuracy plus macro recall and macro F1 over the two classes.

    A class with no true members is skipped in the recall mean; a class
    with no true and no predicted members is skipped in the F1 mean.
    (An all-benign evaluation should not be punished for the absent class.)
    """
    flags = np.asarray(flags).astype(bool)
    labels = np.asarray(labels).astype(bool)
    if flags.shape != labels.shape:
        raise ValueError(f"compute_metrics: {flags.shape} flags vs {labels.shape} labels")
    tp = int(np.sum(flags & labels))
    fp = int(np.sum(flags & ~labels))
    fn = int(np.sum(~flags & labels))
    tn = int(np.sum(~flags & ~labels))
    n = tp + fp + fn + tn
    recalls, f1s = [], []
    for positive in (False, True):
        if positive:
            ctp, cfp, cfn = tp, fp, fn
        else:
            ctp, cfp, cfn = tn, fn, fp
        has_true = (ctp + cfn) > 0
        has_pred = (ctp + cfp) > 0
        if has_true:
            recalls.append(ctp / (ctp + cfn))
        if has_true or has_pred:
            precision = ctp / (ctp + cfp) if has_pred else 0.0
            recall = ctp / (ctp + cfn) if has_true else 0.0
            f1s.append(2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0)
    return Metrics(
        accuracy=(tp + tn) / n if n else 0.0,
        f1_macro=float(np.mean(f1s)) if f1s else 0.0,
        recall_macro=float(np.mean(recalls)) if recalls else 0.0,
        tp=tp, fp=fp, tn=tn, fn=fn,
    )


def roc_auc(scores, labels) -> float:
    """Rank-based AUC (ties get average ranks)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc: need both classes")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _pool(scaled, config: ScoreConfig):
    scores = np.concatenate([scores_for(ch, config) for ch in scaled])
    labels = np.concatenate([ch.labels for ch in scaled])
    return scores, labels


def grid_search(train_graphs, val_graphs, params: dict, config: ModelConfig, seed: int,
                weights=GRID_WEIGHTS, percentiles=GRID_PERCENTILES):
    """Exhaustive scoring-hyperparameter search on a frozen model.

    For every (alpha, beta, gamma, use_mse, percentile) combination the
    threshold is fit on the pooled training-split scores and macro F1 is
    measured on the validation split. Returns (best ScoreConfig, its
    Threshold, all results); ties prefer higher recall macro, then the
    lexicographically smaller combination.
    """
    if not weights or not percentiles:
        raise ValueError("grid_search: empty grid")
    train_scaled = scale_channels([graph_channels(g, params, config, seed) for g in train_graphs])
    val_scaled = scale_channels([graph_channels(g, params, config, seed) for g in val_graphs])
    results = []
    best = None
    best_key = None
    for alpha, beta, gamma, use_mse, pct in product(weights, weights, weights, (False, True), percentiles):
        combo = ScoreConfig(alpha=alpha, beta=beta, gamma=gamma, use_mse=use_mse, percentile=pct)
        fit_scores, _ = _pool(train_scaled, combo)
        threshold = fit_threshold(fit_scores, pct, provenance="train")
        val_scores, val_labels = _pool(val_scaled, combo)
        m = compute_metrics(classify(val_scores, threshold), val_labels)
        results.append({**asdict(combo), "f1_macro": m.f1_macro, "recall_macro": m.recall_macro,
                        "threshold": threshold.value})
        key = (m.f1_macro, m.recall_macro)
        if best_key is None or key > best_key:  # lexicographic tie-break = first seen wins
            best_key = key
            best = (combo, threshold)
    return best[0], best[1], results


def score_graphs(graphs, params: dict, config: ModelConfig, score_config: ScoreConfig, seed: int):
    """Scaled scores for a graph list, flattened, with ids for the dump."""
    scaled = scale_channels([graph_channels(g, params, config, seed) for g in graphs])
    rows = []
    for ch in scaled:
        feat = ch.feat_mse if score_config.use_mse else ch.feat_cos
        scores = anomaly_score((feat, ch.struct, ch.kl), score_config)
        for conn_id in range(scores.size):
            rows.append({
                "window_id": ch.window_id,
                "conn_id": conn_id,
                "feat": float(feat[conn_id]),
                "struct": float(ch.struct[conn_id]),
                "kl": float(ch.kl[conn_id]),
                "score": float(scores[conn_id]),
                "label": int(ch.labels[conn_id]),
            })
    return rows


def benchmark(graphs, params: dict, config: ModelConfig, score_config: ScoreConfig, seed: int) -> TimingReport:
    """Wall-clock the scoring pipeline with perf_counter_ns.

    Anomaly scoring is timed per graph individually; threshold fitting and
    threshold inference are timed once over the pooled scores and divided
    by the graph count. One untimed warm-up pass precedes measurement.
    """
    if not graphs:
        raise ValueError("benchmark: no graphs")
    warm = scale_channels([graph_channels(graphs[0], params, config, seed)])
    _ = scores_for(warm[0], score_config)

    per_graph_ns = []
    all_scores = []
    for g in graphs:
        t0 = time.perf_counter_ns()
        ch = scale_channels([graph_channels(g, params, config, seed)])[0]
        scores = scores_for(ch, score_config)
        t1 = time.perf_counter_ns()
        per_graph_ns.append(t1 - t0)
        all_scores.append(scores)
    pooled = np.concatenate(all_scores)

    t0 = time.perf_counter_ns()
    threshold = fit_threshold(pooled, score_config.percentile)
    t_fit = time.perf_counter_ns() - t0

    t0 = time.perf_counter_ns()
    classify(pooled, threshold)
    t_infer = time.perf_counter_ns() - t0

    n = len(graphs)
    score_s = float(np.mean(per_graph_ns)) / 1e9
    fit_s = t_fit / n / 1e9
    infer_s = t_infer / n / 1e9
    return TimingReport(
        anomaly_score_s=score_s,
        threshold_calc_s=fit_s,
        threshold_infer_s=infer_s,
        training_s=score_s + fit_s,
        inference_s=score_s + infer_s,
        graph_count=n,
    )


def save_scores(path, rows, threshold: Threshold) -> None:
    """Score dump: window_id, conn_id, feat, struct, kl, score, flag, label."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window_id", "conn_id", "feat", "struct", "kl", "score", "flag", "label"])
        for r in rows:
            flag = int(r["score"] > threshold.value)
            writer.writerow([r["window_id"], r["conn_id"], repr(float(r["feat"])),
                             repr(float(r["struct"])), repr(float(r["kl"])),
                             repr(float(r["score"])), flag, r["label"]])


def save_metrics(path, metrics: Metrics, extra: dict | None = None) -> None:
    payload = {"format_version": METRICS_FORMAT_VERSION, **asdict(metrics)}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def save_timing(path, report: TimingReport) -> None:
    payload = {
        "format_version": TIMING_FORMAT_VERSION,
        "graph_count": report.graph_count,
        "seconds_per_graph": {
            "training": report.training_s,
            "inference": report.inference_s,
            "anomaly_score": report.anomaly_score_s,
            "threshold_calculation": report.threshold_calc_s,
            "threshold_inference": report.threshold_infer_s,
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
