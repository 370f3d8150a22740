"""Flow-record ingestion: parse the 37-column CSV schema, drop rows with
missing or non-finite numerics, and encode records into fixed-width
feature vectors (L2-normalized continuous block + one-hot blocks).

The categorical encoder is fit once (training data only) and frozen as an
EncoderSpec so later encoding is reproducible bit for bit.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

ENCODER_FORMAT_VERSION = 1

# Rare protocols collapse into the last slot of the 3-wide protocol block.
PROTOCOL_SLOTS = 3
RARE_SLOT = PROTOCOL_SLOTS - 1


@dataclass(slots=True)
class FlowRecord:
    """One bidirectional flow, straight off the wire format."""

    src_ip: str
    src_port: int
    dst_ip: str
    protocol: int
    ip_version: int
    bidirectional_first_seen_ms: float
    bidirectional_last_seen_ms: float
    bidirectional_duration_ms: float
    bidirectional_packets: float
    bidirectional_bytes: float
    bidirectional_min_packet_size: float
    bidirectional_max_packet_size: float
    bidirectional_mean_packet_size: float
    bidirectional_mean_packet_iat_ms: float
    bidirectional_cumulative_flags: float
    src2dst_first_seen_ms: float
    src2dst_last_seen_ms: float
    src2dst_duration_ms: float
    src2dst_packets: float
    src2dst_bytes: float
    src2dst_min_packet_size: float
    src2dst_max_packet_size: float
    src2dst_mean_packet_size: float
    src2dst_mean_packet_iat_ms: float
    src2dst_cumulative_flags: float
    dst2src_first_seen_ms: float
    dst2src_last_seen_ms: float
    dst2src_duration_ms: float
    dst2src_packets: float
    dst2src_bytes: float
    dst2src_min_packet_size: float
    dst2src_max_packet_size: float
    dst2src_mean_packet_size: float
    dst2src_mean_packet_iat_ms: float
    dst2src_cumulative_flags: float
    classification: int
    category: str


COLUMNS = tuple(f.name for f in fields(FlowRecord))
STRING_COLUMNS = ("src_ip", "dst_ip", "category")
INT_COLUMNS = ("src_port", "protocol", "ip_version", "classification")
FLOAT_COLUMNS = tuple(c for c in COLUMNS if c not in STRING_COLUMNS + INT_COLUMNS)

# Model inputs: per-direction traffic statistics. Identifier-like columns
# (addresses, ports) and absolute timestamps are deliberately excluded.
CONTINUOUS_COLUMNS = tuple(
    f"{prefix}_{stat}"
    for prefix in ("bidirectional", "src2dst", "dst2src")
    for stat in (
        "duration_ms",
        "packets",
        "bytes",
        "min_packet_size",
        "max_packet_size",
        "mean_packet_size",
        "mean_packet_iat_ms",
        "cumulative_flags",
    )
)


@dataclass
class EncoderSpec:
    """Frozen encoding layout: which protocols get their own slot, which
    ip_version values exist, and the continuous column order."""

    protocol_keep: list[int]
    ip_versions: list[int]
    continuous_columns: list[str]

    @property
    def width(self) -> int:
        return len(self.continuous_columns) + PROTOCOL_SLOTS + len(self.ip_versions)


def _parse_float(cell: str, column: str, line_no: int) -> float:
    s = cell.strip()
    if s == "":
        return math.nan  # missing value; clean() drops the record
    try:
        return float(s)
    except ValueError:
        raise ValueError(f"line {line_no}: cannot parse {column}={cell!r} as a number") from None


def _parse_int(cell: str, column: str, line_no: int) -> int:
    s = cell.strip()
    try:
        return int(s)
    except ValueError:
        try:
            f = float(s)
        except ValueError:
            f = math.nan
        if math.isfinite(f) and f == int(f):
            return int(f)
        raise ValueError(f"line {line_no}: cannot parse {column}={cell!r} as an integer") from None


def parse_flows(path) -> list[FlowRecord]:
    """Read a flow CSV into records, preserving row order.

    The header must contain every expected column (extras are ignored).
    A malformed cell raises with the 1-based line number of the row.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise ValueError(f"{path.name}: missing columns: {', '.join(missing)}")
        records = []
        for line_no, row in enumerate(reader, start=2):
            kwargs = {}
            for col in COLUMNS:
                cell = row[col]
                if cell is None:
                    raise ValueError(f"line {line_no}: row has too few cells")
                if col in STRING_COLUMNS:
                    kwargs[col] = cell.strip()
                elif col in INT_COLUMNS:
                    kwargs[col] = _parse_int(cell, col, line_no)
                else:
                    kwargs[col] = _parse_float(cell, col, line_no)
            if kwargs["classification"] not in (0, 1):
                raise ValueError(f"line {line_no}: classification must be 0 or 1, got {kwargs['classification']}")
            records.append(FlowRecord(**kwargs))
    return records


def write_flows(records, path) -> None:
    """Write records as CSV with round-trippable float formatting."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(COLUMNS)
        for r in records:
            row = []
            for col in COLUMNS:
                v = getattr(r, col)
                row.append(repr(float(v)) if isinstance(v, float) else str(v))
            writer.writerow(row)


def clean(records) -> list[FlowRecord]:
    """Drop records carrying any missing (NaN) or infinite numeric value."""
    kept = [r for r in records if all(math.isfinite(getattr(r, c)) for c in FLOAT_COLUMNS)]
    dropped = len(records) - len(kept)
    if dropped:
        logger.info("clean: dropped %d of %d records with missing or non-finite values", dropped, len(records))
    return kept


def fit_encoder(records) -> EncoderSpec:
    """Learn the categorical layout from (training) records.

    The two most frequent protocol values each get a one-hot slot, ties
    going to the smaller protocol number; everything else maps to the
    Rare slot. ip_version values are enumerated from the data.
    """
    if not records:
        raise ValueError("fit_encoder: empty record list")
    counts = Counter(r.protocol for r in records)
    keep = sorted(counts, key=lambda v: (-counts[v], v))[:2]
    ip_versions = sorted({r.ip_version for r in records})
    return EncoderSpec(protocol_keep=keep, ip_versions=ip_versions, continuous_columns=list(CONTINUOUS_COLUMNS))


def encode(record: FlowRecord, spec: EncoderSpec) -> np.ndarray:
    """Encode one cleaned record as a feature vector of width spec.width.

    Continuous block first (L2-normalized; an all-zero block stays zero),
    then the protocol one-hot, then the ip_version one-hot.
    """
    cont = np.array([getattr(record, c) for c in spec.continuous_columns], dtype=np.float64)
    norm = np.linalg.norm(cont)
    if norm > 0.0:
        cont = cont / norm
    proto = np.zeros(PROTOCOL_SLOTS)
    if record.protocol in spec.protocol_keep:
        proto[spec.protocol_keep.index(record.protocol)] = 1.0
    else:
        proto[RARE_SLOT] = 1.0
    ipv = np.zeros(len(spec.ip_versions))
    try:
        ipv[spec.ip_versions.index(record.ip_version)] = 1.0
    except ValueError:
        raise ValueError(f"encode: ip_version {record.ip_version} not seen when the encoder was fit") from None
    return np.concatenate([cont, proto, ipv])


def encode_matrix(records, spec: EncoderSpec) -> np.ndarray:
    """Stack encode() over records into an [N x width] matrix."""
    if not records:
        return np.zeros((0, spec.width))
    return np.stack([encode(r, spec) for r in records])


def save_encoder(spec: EncoderSpec, path) -> None:
    payload = {
        "format_version": ENCODER_FORMAT_VERSION,
        "protocol_keep": list(spec.protocol_keep),
        "ip_versions": list(spec.ip_versions),
        "continuous_columns": list(spec.continuous_columns),
        "width": spec.width,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_encoder(path) -> EncoderSpec:
    payload = json.loads(Path(path).read_text())
    version = payload.get("format_version")
    if version != ENCODER_FORMAT_VERSION:
        raise ValueError(f"unsupported encoder format version: {version!r}")
    spec = EncoderSpec(
        protocol_keep=[int(v) for v in payload["protocol_keep"]],
        ip_versions=[int(v) for v in payload["ip_versions"]],
        continuous_columns=[str(c) for c in payload["continuous_columns"]],
    )
    if spec.width != payload["width"]:
        raise ValueError(f"encoder width mismatch: stored {payload['width']}, derived {spec.width}")
    return spec
