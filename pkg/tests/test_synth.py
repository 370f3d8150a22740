"""Synthetic traffic generator tests."""

import numpy as np
import pytest

from flowvgae.flows import clean, encode_matrix, fit_encoder, write_flows
from flowvgae.synth import AnomalyRecipe, SynthSpec, generate
from flowvgae.windows import WINDOW_WIDTH_MS, build_windows


def small_spec(**kw):
    defaults = dict(seed=42, duration_s=540, host_count=8, flows_per_window=12)
    defaults.update(kw)
    return SynthSpec(**defaults)


def test_generate_deterministic(tmp_path):
    spec = small_spec(recipes=[AnomalyRecipe("scan", window=1)])
    a = generate(spec)
    b = generate(small_spec(recipes=[AnomalyRecipe("scan", window=1)]))
    assert a == b
    pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
    write_flows(a, pa)
    write_flows(b, pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_benign_only_labels():
    records = generate(small_spec())
    assert all(r.classification == 0 for r in records)
    assert all(r.category == "Benign" for r in records)
    assert len(records) == 3 * 12


def test_records_sorted_and_consistent():
    spec = small_spec(recipes=[AnomalyRecipe("volumetric", window=0),
                               AnomalyRecipe("scan", window=2)])
    records = generate(spec)
    times = [r.bidirectional_first_seen_ms for r in records]
    assert times == sorted(times)
    for r in records:
        assert r.bidirectional_duration_ms >= 0.0
        assert r.bidirectional_last_seen_ms >= r.bidirectional_first_seen_ms
        assert r.bidirectional_packets >= 1.0
        assert (r.bidirectional_min_packet_size
                <= r.bidirectional_mean_packet_size
                <= r.bidirectional_max_packet_size)
        assert r.src2dst_packets + r.dst2src_packets == r.bidirectional_packets
        assert r.src2dst_bytes + r.dst2src_bytes == r.bidirectional_bytes


def test_generated_records_survive_clean():
    records = generate(small_spec(recipes=[AnomalyRecipe("volumetric", window=1)]))
    assert len(clean(records)) == len(records)


def test_scan_recipe_shape():
    spec = small_spec(recipes=[AnomalyRecipe("scan", window=1, count=25)])
    records = generate(spec)
    scans = [r for r in records if r.classification == 1]
    assert len(scans) == 25
    assert len({r.src_ip for r in scans}) == 1
    assert len({r.dst_ip for r in scans}) == 25
    lo, hi = 1 * WINDOW_WIDTH_MS, 2 * WINDOW_WIDTH_MS
    assert all(lo <= r.bidirectional_first_seen_ms < hi for r in scans)


def test_volumetric_recipe_inflates_bytes():
    spec = small_spec(recipes=[AnomalyRecipe("volumetric", window=1, count=25)])
    records = generate(spec)
    hot = [r.bidirectional_bytes for r in records if r.classification == 1]
    cold = [r.bidirectional_bytes for r in records if r.classification == 0]
    assert len(hot) == 25
    assert np.mean(hot) > 10.0 * np.mean(cold)
    pairs = {(r.src_ip, r.dst_ip) for r in records if r.classification == 1}
    assert len(pairs) == 1


def test_window_labels_match_recipes():
    spec = small_spec(recipes=[AnomalyRecipe("scan", window=0),
                               AnomalyRecipe("volumetric", window=2)])
    records = generate(spec)
    windows = build_windows(records)
    assert len(windows) == spec.window_count
    flagged = {w.window_id for w in windows if w.is_anomalous}
    assert flagged == spec.anomalous_windows() == {0, 2}


def test_recipe_validation():
    with pytest.raises(ValueError, match="kind"):
        AnomalyRecipe("noise", window=0)
    with pytest.raises(ValueError, match="targets"):
        AnomalyRecipe("scan", window=0, count=5)
    with pytest.raises(ValueError, match="outside"):
        generate(small_spec(recipes=[AnomalyRecipe("scan", window=99)]))


def test_encoding_integration():
    records = generate(small_spec(recipes=[AnomalyRecipe("scan", window=1)]))
    enc = fit_encoder(records)
    matrix = encode_matrix(records, enc)
    assert matrix.shape == (len(records), enc.width)
    assert np.all(np.isfinite(matrix))
