"""Deterministic synthetic flow traffic.

Benign flows are built from three coupled draws — a log-normal packet
count, a log-normal per-packet size, and a floored-exponential per-packet
gap — so byte totals and durations are products of those draws rather
than independent numbers. That keeps the benign population on a
low-dimensional surface a compact model can actually learn, the way real
sessions tie volume to packet count. Two anomaly recipes are available,
chosen because each distorts both the feature channels and the graph
structure:

* volumetric — an amplification-style flood between one host pair: tiny
  requests answered by runs of MTU-sized frames sent back to back, so
  nearly all packets travel dst->src and the whole burst lasts
  milliseconds where benign sessions last seconds;
* scan — one source touching many distinct destinations with tiny
  unanswered probes, creating a high-degree star.

Everything derives from the spec seed (per-window child seeds), so the
same spec always yields the identical record list.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flows import FlowRecord
from .windows import WINDOW_WIDTH_MS

VOLUMETRIC_FACTOR = 50.0


@dataclass
class AnomalyRecipe:
    """One attack placed in one window. ``count`` is the flow count for
    volumetric bursts and the number of distinct targets for scans."""

    kind: str  # "volumetric" | "scan"
    window: int
    count: int = 25

    def __post_init__(self):
        if self.kind not in ("volumetric", "scan"):
            raise ValueError(f"unknown anomaly recipe kind {self.kind!r}")
        if self.kind == "scan" and self.count < 20:
            raise ValueError("scan recipes need at least 20 targets")


@dataclass
class SynthSpec:
    seed: int = 0
    duration_s: int = 1800
    host_count: int = 12
    flows_per_window: int = 40
    packets_log_mean: float = 2.5
    packets_log_sigma: float = 0.35
    pkt_size_log_mean: float = 5.7  # e^5.7 ~ 300 bytes per packet
    pkt_size_log_sigma: float = 0.3
    # benign sessions are long-lived: per-packet gaps have a floor plus an
    # exponential tail, so attack bursts (sub-ms gaps) sit far outside them
    iat_floor_ms: float = 100.0
    iat_scale_ms: float = 250.0
    recipes: list = field(default_factory=list)

    @property
    def window_count(self) -> int:
        return max(1, self.duration_s * 1000 // WINDOW_WIDTH_MS)

    def anomalous_windows(self) -> set:
        return {r.window for r in self.recipes}


def _hosts(spec: SynthSpec) -> list:
    return [f"192.168.1.{i + 1}" for i in range(spec.host_count)]


def _make_flow(rng, start_ms: float, src: str, dst: str, protocol: int, ip_version: int,
               packets: float, total_bytes: float, duration_ms: float,
               classification: int, category: str,
               fwd_frac: tuple = (0.4, 0.8)) -> FlowRecord:
    """Assemble one record with consistent directional splits and
    min <= mean <= max packet sizes. ``fwd_frac`` bounds the share of
    packets travelling src->dst."""
    packets = max(1.0, float(round(packets)))
    total_bytes = max(packets * 20.0, float(round(total_bytes)))
    duration_ms = max(0.0, float(duration_ms))

    fwd_packets = float(round(packets * rng.uniform(*fwd_frac)))
    fwd_packets = min(packets, max(1.0, fwd_packets))
    rev_packets = packets - fwd_packets
    fwd_bytes = float(round(total_bytes * (fwd_packets / packets)))
    rev_bytes = total_bytes - fwd_bytes

    # flags mirror the session shape instead of being free noise: a full
    # TCP exchange raises SYN|PSH|ACK|FIN, a bare probe raises SYN only
    flag_word = 0.0 if protocol != 6 else (2.0 if packets <= 2 else 27.0)

    def direction(d_packets, d_bytes, d_start, d_duration):
        if d_packets <= 0:
            return dict(first=0.0, last=0.0, duration=0.0, packets=0.0, bytes=0.0,
                        pmin=0.0, pmax=0.0, pmean=0.0, iat=0.0, flags=0.0)
        mean_size = d_bytes / d_packets
        if d_packets == 1:
            pmin = pmax = mean_size
            iat = 0.0
            d_duration = 0.0
        else:
            pmin = mean_size * rng.uniform(0.82, 0.88)
            pmax = mean_size * rng.uniform(1.12, 1.18)
            iat = d_duration / (d_packets - 1)
        return dict(first=d_start, last=d_start + d_duration, duration=d_duration,
                    packets=d_packets, bytes=d_bytes, pmin=pmin, pmax=pmax,
                    pmean=mean_size, iat=iat, flags=flag_word)

    rev_delay = rng.uniform(0.02, 0.06) * duration_ms if rev_packets > 0 else 0.0
    fwd = direction(fwd_packets, fwd_bytes, start_ms, duration_ms * rng.uniform(0.93, 0.97))
    rev = direction(rev_packets, rev_bytes, start_ms + rev_delay,
                    max(0.0, duration_ms - rev_delay) * rng.uniform(0.88, 0.94))
    last = max(fwd["last"], rev["last"], start_ms + duration_ms)

    mean_size = total_bytes / packets
    pmin = min(v for v in (fwd["pmin"], rev["pmin"], mean_size) if v > 0.0)
    pmax = max(fwd["pmax"], rev["pmax"], mean_size)
    iat = (last - start_ms) / (packets - 1) if packets > 1 else 0.0

    return FlowRecord(
        src_ip=src,
        src_port=int(rng.integers(1024, 65536)),
        dst_ip=dst,
        protocol=protocol,
        ip_version=ip_version,
        bidirectional_first_seen_ms=start_ms,
        bidirectional_last_seen_ms=last,
        bidirectional_duration_ms=last - start_ms,
        bidirectional_packets=packets,
        bidirectional_bytes=total_bytes,
        bidirectional_min_packet_size=pmin,
        bidirectional_max_packet_size=pmax,
        bidirectional_mean_packet_size=mean_size,
        bidirectional_mean_packet_iat_ms=iat,
        bidirectional_cumulative_flags=fwd["flags"] + rev["flags"],
        src2dst_first_seen_ms=fwd["first"],
        src2dst_last_seen_ms=fwd["last"],
        src2dst_duration_ms=fwd["duration"],
        src2dst_packets=fwd["packets"],
        src2dst_bytes=fwd["bytes"],
        src2dst_min_packet_size=fwd["pmin"],
        src2dst_max_packet_size=fwd["pmax"],
        src2dst_mean_packet_size=fwd["pmean"],
        src2dst_mean_packet_iat_ms=fwd["iat"],
        src2dst_cumulative_flags=fwd["flags"],
        dst2src_first_seen_ms=rev["first"],
        dst2src_last_seen_ms=rev["last"],
        dst2src_duration_ms=rev["duration"],
        dst2src_packets=rev["packets"],
        dst2src_bytes=rev["bytes"],
        dst2src_min_packet_size=rev["pmin"],
        dst2src_max_packet_size=rev["pmax"],
        dst2src_mean_packet_size=rev["pmean"],
        dst2src_mean_packet_iat_ms=rev["iat"],
        dst2src_cumulative_flags=rev["flags"],
        classification=classification,
        category=category,
    )


def _benign_window(spec: SynthSpec, window: int, rng) -> list:
    hosts = _hosts(spec)
    start = window * float(WINDOW_WIDTH_MS)
    offsets = np.sort(rng.uniform(0.0, WINDOW_WIDTH_MS, size=spec.flows_per_window))
    if window == 0 and offsets.size:
        offsets[0] = 0.0  # anchor the tiling origin
    records = []
    for off in offsets:
        src, dst = rng.choice(len(hosts), size=2, replace=False)
        packets = max(2.0, float(round(np.exp(rng.normal(spec.packets_log_mean,
                                                         spec.packets_log_sigma)))))
        # short lookup-style exchanges ride UDP, longer sessions TCP, so the
        # protocol follows the session shape instead of being free noise
        protocol = 17 if packets <= 6.0 else 6
        pkt_size = float(np.clip(np.exp(rng.normal(spec.pkt_size_log_mean,
                                                   spec.pkt_size_log_sigma)), 80.0, 1400.0))
        gap_ms = spec.iat_floor_ms + rng.exponential(spec.iat_scale_ms)
        duration = gap_ms * (packets - 1.0)
        # benign sessions are near-symmetric request/response exchanges, so
        # the directional split hugs 50/50; floods and probes break that law
        records.append(_make_flow(rng, start + float(off), hosts[src], hosts[dst], protocol,
                                  4, packets, packets * pkt_size, duration, 0, "Benign",
                                  fwd_frac=(0.45, 0.55)))
    return records


def _recipe_flows(spec: SynthSpec, recipe: AnomalyRecipe, rng) -> list:
    hosts = _hosts(spec)
    start = recipe.window * float(WINDOW_WIDTH_MS)
    records = []
    if recipe.kind == "volumetric":
        src, dst = rng.choice(len(hosts), size=2, replace=False)
        offsets = np.sort(rng.uniform(0.0, WINDOW_WIDTH_MS * 0.5, size=recipe.count))
        for off in offsets:
            packets = float(round(VOLUMETRIC_FACTOR
                                  * np.exp(rng.normal(spec.packets_log_mean,
                                                      spec.packets_log_sigma))))
            pkt_size = rng.uniform(1200.0, 1460.0)  # near-MTU flood frames
            # UDP amplification: back-to-back packets, the whole burst lasts
            # milliseconds, and nearly everything flows back at the requester
            duration = (0.05 + rng.exponential(0.3)) * max(1.0, packets - 1.0)
            records.append(_make_flow(rng, start + float(off), hosts[src], hosts[dst], 17, 4,
                                      packets, packets * pkt_size, duration, 1, "Volumetric",
                                      fwd_frac=(0.01, 0.08)))
    else:  # scan
        src = hosts[int(rng.integers(len(hosts)))]
        offsets = np.sort(rng.uniform(0.0, WINDOW_WIDTH_MS * 0.3, size=recipe.count))
        for j, off in enumerate(offsets):
            target = f"10.99.0.{j + 1}"
            records.append(_make_flow(rng, start + float(off), src, target, 6, 4,
                                      packets=2.0, total_bytes=rng.uniform(80.0, 120.0),
                                      duration_ms=rng.uniform(0.5, 5.0), classification=1,
                                      category="Scan", fwd_frac=(0.9, 0.99)))
    return records


def generate(spec: SynthSpec) -> list:
    """All records for the spec, sorted by first-seen timestamp."""
    for r in spec.recipes:
        if not 0 <= r.window < spec.window_count:
            raise ValueError(f"recipe window {r.window} outside [0, {spec.window_count})")
    records = []
    for w in range(spec.window_count):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, w]))
        records.extend(_benign_window(spec, w, rng))
    for i, recipe in enumerate(spec.recipes):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1000 + i]))
        records.extend(_recipe_flows(spec, recipe, rng))
    records.sort(key=lambda r: r.bidirectional_first_seen_ms)
    return records
