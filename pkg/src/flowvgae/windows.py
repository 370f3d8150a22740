"""Time windowing and dataset splitting.

Flows are tiled into non-overlapping 180-second windows keyed on the
bidirectional first-seen timestamp. Windows (not flows) are the unit of
train/val/test splitting, stratified by whether the window contains any
attack flow, and of training-set contamination control.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

WINDOW_WIDTH_MS = 180_000

# Training-set anomalous-window fractions the pipeline supports: attack-free,
# the natural rate of the source data, and an elevated rate reached by
# downsampling benign windows.
CONTAMINATION_LEVELS = (0.0, 0.0336, 0.0576)
CONTAMINATION_TOLERANCE = 0.0025

MANIFEST_FORMAT_VERSION = 1


@dataclass
class TimeWindow:
    """One 180 s slice: which flow rows fall in it and whether any is an attack."""

    window_id: int
    start_ms: float
    end_ms: float
    flow_indices: list[int]
    is_anomalous: bool


@dataclass
class SplitSpec:
    """Split fractions, shuffle seed, and target contamination level."""

    train: float = 0.70
    val: float = 0.20
    test: float = 0.10
    seed: int = 0
    contamination: float = 0.0

    def __post_init__(self):
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {self.train}+{self.val}+{self.test}")
        if self.contamination not in CONTAMINATION_LEVELS:
            raise ValueError(f"contamination must be one of {CONTAMINATION_LEVELS}, got {self.contamination}")


def build_windows(records, width_ms: int = WINDOW_WIDTH_MS) -> list[TimeWindow]:
    """Assign each flow to the half-open window [t0 + k*width, t0 + (k+1)*width).

    t0 is the earliest first-seen timestamp. Empty windows are dropped;
    window ids keep the tiling index k so gaps stay visible.
    """
    if not records:
        return []
    t = np.array([r.bidirectional_first_seen_ms for r in records])
    t0 = t.min()
    ks = np.floor((t - t0) / width_ms).astype(int)
    members: dict[int, list[int]] = {}
    for i, k in enumerate(ks):
        members.setdefault(int(k), []).append(i)
    windows = []
    for k in sorted(members):
        idx = members[k]
        windows.append(
            TimeWindow(
                window_id=k,
                start_ms=float(t0 + k * width_ms),
                end_ms=float(t0 + (k + 1) * width_ms),
                flow_indices=idx,
                is_anomalous=any(records[i].classification == 1 for i in idx),
            )
        )
    return windows


def _split_counts(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    n_train = math.floor(n * spec.train)
    n_val = math.floor(n * spec.val)
    n_test = math.floor(n * spec.test)
    rem = n - (n_train + n_val + n_test)
    # leftover windows go to train, then val, then test
    for i in range(rem):
        if i % 3 == 0:
            n_train += 1
        elif i % 3 == 1:
            n_val += 1
        else:
            n_test += 1
    return n_train, n_val, n_test


def stratified_split(windows, spec: SplitSpec):
    """Split windows 70/20/10 within each stratum (anomalous / benign).

    Each stratum is shuffled with the seeded generator and cut by
    floor-based counts; remainders spill train -> val -> test. Output
    lists preserve the original window order.
    """
    if not windows:
        raise ValueError("stratified_split: empty window list")
    rng = np.random.default_rng(spec.seed)
    train, val, test = [], [], []
    for stratum_flag in (False, True):
        stratum = [w for w in windows if w.is_anomalous == stratum_flag]
        if not stratum:
            continue
        order = rng.permutation(len(stratum))
        n_train, n_val, _ = _split_counts(len(stratum), spec)
        for pos, j in enumerate(order):
            if pos < n_train:
                train.append(stratum[j])
            elif pos < n_train + n_val:
                val.append(stratum[j])
            else:
                test.append(stratum[j])
    key = lambda w: w.window_id
    return sorted(train, key=key), sorted(val, key=key), sorted(test, key=key)


def apply_contamination(train_windows, level: float, rng) -> list[TimeWindow]:
    """Adjust the anomalous-window fraction of the training set.

    level 0.0    -> drop every anomalous window.
    level 0.0336 -> identity (the natural stratified rate).
    level 0.0576 -> keep all anomalous windows and downsample benign ones
                    (seeded, without replacement) until the anomalous
                    fraction lands within +/-0.25 pp of the target.
    """
    if level not in CONTAMINATION_LEVELS:
        raise ValueError(f"contamination must be one of {CONTAMINATION_LEVELS}, got {level}")
    if level == 0.0:
        return [w for w in train_windows if not w.is_anomalous]
    if level == 0.0336:
        return list(train_windows)

    anomalous = [w for w in train_windows if w.is_anomalous]
    benign = [w for w in train_windows if not w.is_anomalous]
    a, b = len(anomalous), len(benign)
    if a == 0:
        raise ValueError(
            "cannot reach 5.76% anomalous fraction: training set has no anomalous windows (achievable maximum 0%)"
        )
    b_target = math.floor(a / level - a)
    natural = a / (a + b)
    if b_target > b:
        if abs(natural - level) <= CONTAMINATION_TOLERANCE:
            return list(train_windows)
        raise ValueError(
            f"cannot reach 5.76% anomalous fraction by downsampling benign windows: "
            f"natural fraction is already {natural:.4f} (achievable minimum with {a} anomalous windows)"
        )
    keep = set(rng.choice(b, size=b_target, replace=False).tolist())
    out = anomalous + [w for i, w in enumerate(benign) if i in keep]
    out.sort(key=lambda w: w.window_id)
    achieved = a / (a + b_target)
    if abs(achieved - level) > CONTAMINATION_TOLERANCE:
        raise ValueError(
            f"contamination target {level} missed: achieved {achieved:.4f} with {a} anomalous windows"
        )
    return out


def save_split_manifest(path, train, val, test, spec: SplitSpec) -> None:
    """Serialize split membership so an experiment can be replayed exactly."""
    assignment = {}
    for name, group in (("train", train), ("val", val), ("test", test)):
        for w in group:
            assignment[str(w.window_id)] = name
    payload = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "seed": spec.seed,
        "contamination": spec.contamination,
        "fractions": {"train": spec.train, "val": spec.val, "test": spec.test},
        "assignment": assignment,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_split_manifest(path) -> dict:
    payload = json.loads(Path(path).read_text())
    if payload.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise ValueError(f"unsupported split manifest version: {payload.get('format_version')!r}")
    return payload
