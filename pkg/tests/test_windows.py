"""Windowing, stratified splitting, and contamination tests."""

import dataclasses
import math

import numpy as np
import pytest

from flowvgae.synth import SynthSpec, generate
from flowvgae.windows import (
    WINDOW_WIDTH_MS,
    SplitSpec,
    TimeWindow,
    apply_contamination,
    build_windows,
    load_split_manifest,
    save_split_manifest,
    stratified_split,
)


def _flow_at(t_ms, classification=0):
    r = generate(SynthSpec(seed=1, duration_s=180, host_count=4, flows_per_window=1))[0]
    return dataclasses.replace(r, bidirectional_first_seen_ms=float(t_ms), classification=classification)


def _windows(n_benign, n_anomalous):
    out = []
    for i in range(n_benign + n_anomalous):
        out.append(TimeWindow(window_id=i, start_ms=i * 180000.0, end_ms=(i + 1) * 180000.0,
                              flow_indices=[i], is_anomalous=i >= n_benign))
    return out


def test_build_windows_boundaries():
    records = [_flow_at(0.0), _flow_at(1.0), _flow_at(179_999.0), _flow_at(180_000.0)]
    wins = build_windows(records)
    assert len(wins) == 2
    assert wins[0].flow_indices == [0, 1, 2]
    assert wins[1].flow_indices == [3]
    assert wins[0].end_ms - wins[0].start_ms == WINDOW_WIDTH_MS


def test_build_windows_gaps_drop_empty():
    records = [_flow_at(0.0), _flow_at(200_000.0), _flow_at(400_000.0)]
    wins = build_windows(records)
    assert [w.window_id for w in wins] == [0, 1, 2]
    assert all(len(w.flow_indices) == 1 for w in wins)
    # 400s lands in tile index 2 even though tile 1 covers 180-360s
    assert wins[2].start_ms == 2 * WINDOW_WIDTH_MS


def test_build_windows_every_flow_exactly_once():
    records = generate(SynthSpec(seed=5, duration_s=1800, host_count=8, flows_per_window=15))
    wins = build_windows(records)
    seen = sorted(i for w in wins for i in w.flow_indices)
    assert seen == list(range(len(records)))


def test_window_anomaly_flag():
    records = [_flow_at(0.0), _flow_at(10.0, classification=1), _flow_at(190_000.0)]
    wins = build_windows(records)
    assert wins[0].is_anomalous is True
    assert wins[1].is_anomalous is False


def test_stratified_split_counts():
    wins = _windows(10, 0)
    train, val, test = stratified_split(wins, SplitSpec(seed=7))
    assert (len(train), len(val), len(test)) == (7, 2, 1)

    wins = _windows(10, 10)
    train, val, test = stratified_split(wins, SplitSpec(seed=7))
    assert (len(train), len(val), len(test)) == (14, 4, 2)
    assert sum(w.is_anomalous for w in train) == 7
    assert sum(w.is_anomalous for w in val) == 2
    assert sum(w.is_anomalous for w in test) == 1


def test_stratified_split_partition_and_determinism():
    wins = _windows(23, 9)
    spec = SplitSpec(seed=11)
    train, val, test = stratified_split(wins, spec)
    ids = sorted(w.window_id for w in train + val + test)
    assert ids == [w.window_id for w in wins]
    train2, val2, test2 = stratified_split(wins, SplitSpec(seed=11))
    assert [w.window_id for w in train2] == [w.window_id for w in train]
    assert [w.window_id for w in val2] == [w.window_id for w in val]
    assert [w.window_id for w in test2] == [w.window_id for w in test]
    diff = stratified_split(wins, SplitSpec(seed=12))[0]
    assert [w.window_id for w in diff] != [w.window_id for w in train]


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(train=0.5, val=0.2, test=0.1)
    with pytest.raises(ValueError):
        SplitSpec(contamination=0.42)
    with pytest.raises(ValueError):
        stratified_split([], SplitSpec())


def test_contamination_zero_removes_all_anomalous():
    wins = _windows(90, 10)
    rng = np.random.default_rng(0)
    out = apply_contamination(wins, 0.0, rng)
    assert len(out) == 90
    assert not any(w.is_anomalous for w in out)


def test_contamination_natural_identity():
    wins = _windows(90, 10)
    out = apply_contamination(wins, 0.0336, np.random.default_rng(0))
    assert out == wins


def test_contamination_downsample_to_576():
    wins = _windows(500, 10)
    out = apply_contamination(wins, 0.0576, np.random.default_rng(3))
    anomalous = sum(w.is_anomalous for w in out)
    benign = len(out) - anomalous
    assert anomalous == 10
    assert benign == math.floor(10 / 0.0576 - 10) == 163
    frac = anomalous / len(out)
    assert abs(frac - 0.0576) <= 0.0025


def test_contamination_downsample_deterministic():
    wins = _windows(500, 10)
    a = apply_contamination(wins, 0.0576, np.random.default_rng(3))
    b = apply_contamination(wins, 0.0576, np.random.default_rng(3))
    assert [w.window_id for w in a] == [w.window_id for w in b]


def test_contamination_unreachable_errors():
    with pytest.raises(ValueError, match="no anomalous"):
        apply_contamination(_windows(50, 0), 0.0576, np.random.default_rng(0))
    # natural fraction far above the target cannot be fixed by removal
    with pytest.raises(ValueError, match="natural fraction"):
        apply_contamination(_windows(10, 10), 0.0576, np.random.default_rng(0))


def test_split_manifest_roundtrip(tmp_path):
    wins = _windows(8, 2)
    spec = SplitSpec(seed=5, contamination=0.0)
    train, val, test = stratified_split(wins, spec)
    path = tmp_path / "split.json"
    save_split_manifest(path, train, val, test, spec)
    payload = load_split_manifest(path)
    assert payload["seed"] == 5
    assert payload["assignment"][str(train[0].window_id)] == "train"
    assert len(payload["assignment"]) == 10
