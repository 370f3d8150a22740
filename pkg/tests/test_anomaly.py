"""Scoring-layer tests: robust scaling, score weighting, thresholding,
metrics against hand-counted oracles, grid-search mechanics, timing report
shape, and artifact dumps."""

import json
import math

import numpy as np
import pytest

from flowvgae.anomaly import (
    GRID_PERCENTILES,
    GRID_WEIGHTS,
    Metrics,
    ScoreConfig,
    Threshold,
    anomaly_score,
    benchmark,
    classify,
    compute_metrics,
    fit_threshold,
    graph_channels,
    grid_search,
    per_node_losses,
    robust_scale,
    roc_auc,
    save_metrics,
    save_scores,
    save_timing,
    scale_channels,
    score_graphs,
)
from flowvgae.graphs import HetGraph
from flowvgae.model import ModelConfig, init_params


def make_graph(window_id=0, n_conn=8, n_ip=4, width=6, seed=0, twins=False):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n_conn, width))
    src = rng.integers(0, n_ip, size=n_conn)
    dst = rng.integers(0, n_ip, size=n_conn)
    if twins:  # make conns 0 and 1 indistinguishable
        feats[1] = feats[0]
        src[1], dst[1] = src[0], dst[0]
    labels = np.zeros(n_conn, dtype=np.int64)
    labels[-1] = 1
    return HetGraph(conn_features=feats, conn_labels=labels,
                    ip_index={f"h{i}": i for i in range(n_ip)},
                    src_ip_ids=src, dst_ip_ids=dst, window_id=window_id)


def frozen_model(width=6, **kw):
    cfg = ModelConfig(hidden=4, latent=4, num_layers=1, **kw)
    params = init_params(cfg, width, np.random.default_rng(0))
    return params, cfg


# ------------------------------------------------------------- scaling


def test_robust_scale_oracle():
    out = robust_scale([1.0, 2.0, 3.0, 4.0, 5.0])
    assert np.array_equal(out, [-1.0, -0.5, 0.0, 0.5, 1.0])


def test_robust_scale_constant_input():
    out = robust_scale(np.full(7, 3.25))
    assert np.array_equal(out, np.zeros(7))


def test_robust_scale_recentres_and_rescales():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 10.0, size=101)  # odd length: median is a data point
    out = robust_scale(x)
    assert np.percentile(out, 50.0) == 0.0
    q1, q3 = np.percentile(out, [25.0, 75.0])
    assert abs((q3 - q1) - 1.0) <= 1e-9
    # even length: interpolated median still lands at ~0
    out2 = robust_scale(rng.normal(size=100))
    assert abs(np.percentile(out2, 50.0)) <= 1e-12


def test_robust_scale_empty_errors():
    with pytest.raises(ValueError):
        robust_scale([])


# ------------------------------------------------------------- scoring


def test_anomaly_score_zero_channels():
    cfg = ScoreConfig(alpha=1.0, beta=1.0, gamma=1.0)
    out = anomaly_score((np.zeros(4), np.zeros(4), np.zeros(4)), cfg)
    assert np.array_equal(out, np.zeros(4))


def test_anomaly_score_weighted_oracle():
    cfg = ScoreConfig(alpha=0.5, beta=0.1, gamma=1.0)
    out = anomaly_score((np.array([1.0]), np.array([2.0]), np.array([3.0])), cfg)
    assert out[0] == pytest.approx(3.7, abs=1e-12)


def test_anomaly_score_positive_scaling_preserves_ranking():
    rng = np.random.default_rng(1)
    channels = (rng.normal(size=50), rng.normal(size=50), rng.normal(size=50))
    base = anomaly_score(channels, ScoreConfig(alpha=0.5, beta=0.1, gamma=1.0))
    scaled = anomaly_score(channels, ScoreConfig(alpha=1.5, beta=0.3, gamma=3.0))
    assert np.allclose(scaled, 3.0 * base)
    assert np.array_equal(np.argsort(base), np.argsort(scaled))


def test_anomaly_score_length_mismatch():
    with pytest.raises(ValueError):
        anomaly_score((np.zeros(3), np.zeros(4), np.zeros(3)), ScoreConfig())


# ------------------------------------------------------------- threshold


def test_fit_threshold_linear_interpolation():
    thr = fit_threshold(np.arange(100, dtype=np.float64), 95.0)
    assert thr.value == pytest.approx(94.05, abs=1e-12)
    assert thr.percentile == 95.0
    assert thr.provenance == "train"


def test_threshold_flags_bounded_fraction():
    rng = np.random.default_rng(0)
    scores = rng.normal(size=997)
    thr = fit_threshold(scores, 95.0)
    frac = classify(scores, thr).mean()
    assert frac <= 0.05 + 1.0 / scores.size


def test_classify_is_strict():
    thr = Threshold(percentile=50.0, value=1.0, provenance="train")
    assert classify(np.array([1.0, 1.0000001, 0.5]), thr).tolist() == [False, True, False]
    # all-equal scores: nothing strictly above their own percentile
    scores = np.full(20, 2.0)
    assert classify(scores, fit_threshold(scores, 95.0)).sum() == 0


def test_fit_threshold_empty_errors():
    with pytest.raises(ValueError):
        fit_threshold([], 95.0)


# ------------------------------------------------------------- metrics


def test_metrics_perfect_prediction():
    labels = np.array([0, 0, 1, 1, 0, 1], dtype=bool)
    m = compute_metrics(labels, labels)
    assert (m.accuracy, m.f1_macro, m.recall_macro) == (1.0, 1.0, 1.0)
    assert (m.tp, m.fp, m.tn, m.fn) == (3, 0, 3, 0)


def test_metrics_all_benign_predictions_on_half_anomalous():
    labels = np.array([0] * 5 + [1] * 5, dtype=bool)
    flags = np.zeros(10, dtype=bool)
    m = compute_metrics(flags, labels)
    assert m.accuracy == 0.5
    assert m.recall_macro == 0.5  # benign 1.0, anomalous 0.0
    assert m.f1_macro == pytest.approx(1.0 / 3.0, abs=1e-12)  # benign 2/3, anomalous 0


def test_metrics_all_benign_world():
    labels = np.zeros(8, dtype=bool)
    m = compute_metrics(np.zeros(8, dtype=bool), labels)
    assert (m.accuracy, m.f1_macro, m.recall_macro) == (1.0, 1.0, 1.0)


def test_metrics_flip_symmetry():
    rng = np.random.default_rng(2)
    for _ in range(20):
        labels = rng.random(30) < 0.4
        flags = rng.random(30) < 0.4
        a = compute_metrics(flags, labels)
        b = compute_metrics(~flags, ~labels)
        assert a.accuracy == b.accuracy
        assert a.f1_macro == pytest.approx(b.f1_macro, abs=1e-12)
        assert a.recall_macro == pytest.approx(b.recall_macro, abs=1e-12)
        assert (a.tp, a.fp, a.tn, a.fn) == (b.tn, b.fn, b.tp, b.fp)


def test_metrics_against_brute_force_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        labels = rng.random(40) < 0.5
        flags = rng.random(40) < 0.5
        if labels.all() or not labels.any() or flags.all() or not flags.any():
            continue  # both classes present and predicted: standard macro applies
        m = compute_metrics(flags, labels)
        recalls, f1s = [], []
        for positive in (False, True):
            y = labels == positive
            p = flags == positive
            rec = np.sum(y & p) / np.sum(y)
            prec = np.sum(y & p) / np.sum(p)
            recalls.append(rec)
            f1s.append(0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec))
        assert m.recall_macro == pytest.approx(np.mean(recalls), abs=1e-12)
        assert m.f1_macro == pytest.approx(np.mean(f1s), abs=1e-12)
        assert m.accuracy == pytest.approx(np.mean(flags == labels), abs=1e-12)


def test_metrics_shape_mismatch():
    with pytest.raises(ValueError):
        compute_metrics(np.zeros(3, dtype=bool), np.zeros(4, dtype=bool))


def test_roc_auc_oracles():
    labels = np.array([0, 0, 0, 1, 1], dtype=bool)
    assert roc_auc(np.array([0.1, 0.2, 0.3, 0.8, 0.9]), labels) == 1.0
    assert roc_auc(np.array([0.9, 0.8, 0.7, 0.2, 0.1]), labels) == 0.0
    assert roc_auc(np.ones(5), labels) == 0.5  # all tied
    rng = np.random.default_rng(0)
    random_labels = rng.random(2000) < 0.5
    assert abs(roc_auc(rng.normal(size=2000), random_labels) - 0.5) < 0.05
    with pytest.raises(ValueError):
        roc_auc(np.ones(3), np.zeros(3, dtype=bool))


# ------------------------------------------------------------- model channels


def test_graph_channels_deterministic():
    params, cfg = frozen_model()
    g = make_graph()
    a = graph_channels(g, params, cfg, seed=9)
    b = graph_channels(g, params, cfg, seed=9)
    for field in ("feat_mse", "feat_cos", "struct", "kl"):
        assert np.array_equal(getattr(a, field), getattr(b, field))
    assert a.feat_mse.shape == (g.n_conn,)


def test_identical_conns_get_identical_channels():
    params, cfg = frozen_model(negative_rate=0.0)  # no sampled negatives
    g = make_graph(twins=True)
    ch = graph_channels(g, params, cfg, seed=4)
    for field in ("feat_mse", "feat_cos", "struct", "kl"):
        vec = getattr(ch, field)
        assert vec[0] == pytest.approx(vec[1], abs=1e-12)


def test_per_node_losses_selects_feature_kind():
    params, cfg = frozen_model()
    g = make_graph()
    feat_mse, struct, kl = per_node_losses(g, params, cfg, seed=1, use_mse=True)
    feat_cos, struct2, kl2 = per_node_losses(g, params, cfg, seed=1, use_mse=False)
    assert np.array_equal(struct, struct2)
    assert np.array_equal(kl, kl2)
    assert not np.array_equal(feat_mse, feat_cos)


# ------------------------------------------------------------- grid search


def test_grid_search_full_size_and_argmax():
    params, cfg = frozen_model()
    train_graphs = [make_graph(window_id=i, seed=i) for i in range(2)]
    val_graphs = [make_graph(window_id=10 + i, seed=10 + i) for i in range(2)]
    best_cfg, best_thr, results = grid_search(train_graphs, val_graphs, params, cfg, seed=0)
    assert len(results) == len(GRID_WEIGHTS) ** 3 * 2 * len(GRID_PERCENTILES) == 216
    best_f1 = max(r["f1_macro"] for r in results)
    assert any(r["f1_macro"] == best_f1 and r["alpha"] == best_cfg.alpha
               and r["percentile"] == best_cfg.percentile for r in results)
    assert best_cfg.alpha in GRID_WEIGHTS and best_cfg.percentile in GRID_PERCENTILES
    assert best_thr.provenance == "train"


def test_grid_search_tie_break_first_seen():
    params, cfg = frozen_model()
    train_graphs = [make_graph(window_id=0)]
    val_graphs = [make_graph(window_id=1, seed=1)]
    # a single percentile and one weight level: every combo differs only by use_mse
    best_cfg, _, results = grid_search(train_graphs, val_graphs, params, cfg, seed=0,
                                       weights=(1.0,), percentiles=(95.0,))
    assert len(results) == 2
    if results[0]["f1_macro"] == results[1]["f1_macro"] and \
       results[0]["recall_macro"] == results[1]["recall_macro"]:
        assert best_cfg.use_mse is False  # False enumerates first


def test_grid_search_empty_grid_errors():
    params, cfg = frozen_model()
    with pytest.raises(ValueError):
        grid_search([make_graph()], [make_graph()], params, cfg, 0, weights=())


# ------------------------------------------------------------- end to end


def test_score_graphs_rows_and_determinism():
    params, cfg = frozen_model()
    graphs = [make_graph(window_id=i, seed=i) for i in range(3)]
    rows1 = score_graphs(graphs, params, cfg, ScoreConfig(), seed=2)
    rows2 = score_graphs(graphs, params, cfg, ScoreConfig(), seed=2)
    assert rows1 == rows2
    assert len(rows1) == sum(g.n_conn for g in graphs)
    assert set(rows1[0]) == {"window_id", "conn_id", "feat", "struct", "kl", "score", "label"}


def test_benchmark_report():
    params, cfg = frozen_model()
    graphs = [make_graph(window_id=i, seed=i) for i in range(3)]
    report = benchmark(graphs, params, cfg, ScoreConfig(), seed=0)
    assert report.graph_count == 3
    for value in (report.anomaly_score_s, report.threshold_calc_s,
                  report.threshold_infer_s, report.training_s, report.inference_s):
        assert value > 0.0 and np.isfinite(value)
    assert report.training_s == report.anomaly_score_s + report.threshold_calc_s
    assert report.inference_s == report.anomaly_score_s + report.threshold_infer_s
    assert report.threshold_infer_s < report.anomaly_score_s


# ------------------------------------------------------------- artifacts


def test_save_scores_csv(tmp_path):
    params, cfg = frozen_model()
    rows = score_graphs([make_graph()], params, cfg, ScoreConfig(), seed=0)
    thr = Threshold(percentile=95.0, value=0.0, provenance="train")
    path = tmp_path / "scores.csv"
    save_scores(path, rows, thr)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "window_id,conn_id,feat,struct,kl,score,flag,label"
    assert len(lines) == 1 + len(rows)
    for line, row in zip(lines[1:], rows):
        cells = line.split(",")
        assert cells[6] == str(int(row["score"] > thr.value))
        assert float(cells[5]) == row["score"]  # repr round-trips


def test_save_metrics_json(tmp_path):
    m = Metrics(accuracy=0.9, f1_macro=0.8, recall_macro=0.85, tp=1, fp=2, tn=3, fn=4)
    path = tmp_path / "metrics.json"
    save_metrics(path, m, extra={"threshold": 1.5})
    payload = json.loads(path.read_text())
    assert payload["format_version"] == 1
    assert payload["accuracy"] == 0.9
    assert payload["threshold"] == 1.5
    assert list(payload) == sorted(payload)


def test_save_timing_json(tmp_path):
    params, cfg = frozen_model()
    report = benchmark([make_graph()], params, cfg, ScoreConfig(), seed=0)
    path = tmp_path / "timing.json"
    save_timing(path, report)
    payload = json.loads(path.read_text())
    assert payload["format_version"] == 1
    assert set(payload["seconds_per_graph"]) == {
        "training", "inference", "anomaly_score", "threshold_calculation", "threshold_inference"}
