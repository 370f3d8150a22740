"""Per-window heterogeneous graphs (IP nodes + connection nodes) and the
stochastic training transforms: connection-node masking, paired edge
dropping, and negative-edge sampling.

Every connection node touches exactly one source IP and one destination
IP, so the four typed edge lists (src/dst x forward/reverse) are fully
determined by two id arrays; the lists are derived views.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RELATIONS = ("src_to_conn", "conn_to_src", "dst_to_conn", "conn_to_dst")

GRAPH_FORMAT_VERSION = 1


@dataclass
class HetGraph:
    """One window's graph: connection rows plus the IP endpoints they touch."""

    conn_features: np.ndarray  # [N_conn x F]
    conn_labels: np.ndarray  # [N_conn], 0/1
    ip_index: dict  # ip string -> ip node id
    src_ip_ids: np.ndarray  # [N_conn] source IP node id per connection
    dst_ip_ids: np.ndarray  # [N_conn]
    window_id: int

    @property
    def n_conn(self) -> int:
        return self.conn_features.shape[0]

    @property
    def ip_count(self) -> int:
        return len(self.ip_index)

    @property
    def feature_width(self) -> int:
        return self.conn_features.shape[1]

    @property
    def is_anomalous(self) -> bool:
        return bool(self.conn_labels.any())

    def edges(self) -> dict:
        """The four typed edge lists as [k x 2] arrays of (from_id, to_id)."""
        conn = np.arange(self.n_conn)
        return {
            "src_to_conn": np.column_stack([self.src_ip_ids, conn]),
            "conn_to_src": np.column_stack([conn, self.src_ip_ids]),
            "dst_to_conn": np.column_stack([self.dst_ip_ids, conn]),
            "conn_to_dst": np.column_stack([conn, self.dst_ip_ids]),
        }

    def ip_of_conn(self, relation: str) -> np.ndarray:
        """The IP endpoint each connection touches under the given relation."""
        if relation in ("src_to_conn", "conn_to_src"):
            return self.src_ip_ids
        if relation in ("dst_to_conn", "conn_to_dst"):
            return self.dst_ip_ids
        raise ValueError(f"unknown relation {relation!r}")


@dataclass
class MaskPlan:
    masked_ids: np.ndarray  # sorted conn node ids replaced by the mask token
    rate: float


@dataclass
class EdgeDropPlan:
    """Which connection->IP incidences survive for message passing.

    An entry covers the forward and reverse edge of that incidence: the
    pair lives or dies together. The structural loss ignores this plan
    and always targets the original edges.
    """

    keep_src: np.ndarray  # bool [N_conn]
    keep_dst: np.ndarray  # bool [N_conn]
    rate: float

    def keep_for(self, relation: str) -> np.ndarray:
        if relation in ("src_to_conn", "conn_to_src"):
            return self.keep_src
        if relation in ("dst_to_conn", "conn_to_dst"):
            return self.keep_dst
        raise ValueError(f"unknown relation {relation!r}")


@dataclass
class NegativeEdgeSet:
    pairs: dict  # relation -> [k x 2] array of verified non-edges (ip_id, conn_id)
    rate: float


def build_graph(window, records, features) -> HetGraph:
    """Assemble the graph for one window.

    ``records`` is the full cleaned record list and ``features`` the
    encoded matrix aligned with it; the window's flow indices select the
    member rows. IP node ids follow first appearance (src before dst,
    flows in window order). A flow from a host to itself yields a
    self-referential pair of edges on one IP node.
    """
    if not window.flow_indices:
        raise ValueError("build_graph: window has no member flows")
    ip_index: dict = {}
    src_ids, dst_ids = [], []
    for i in window.flow_indices:
        r = records[i]
        for ip in (r.src_ip, r.dst_ip):
            if ip not in ip_index:
                ip_index[ip] = len(ip_index)
        src_ids.append(ip_index[r.src_ip])
        dst_ids.append(ip_index[r.dst_ip])
    return HetGraph(
        conn_features=np.asarray(features[window.flow_indices], dtype=np.float64),
        conn_labels=np.array([records[i].classification for i in window.flow_indices], dtype=np.int64),
        ip_index=ip_index,
        src_ip_ids=np.array(src_ids, dtype=np.int64),
        dst_ip_ids=np.array(dst_ids, dtype=np.int64),
        window_id=window.window_id,
    )


def mask_nodes(conn_features, rate, mask_token, rng):
    """Replace floor(rate * N_conn) uniformly chosen rows with the mask token."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"mask rate must be in [0, 1], got {rate}")
    mask_token = np.asarray(mask_token, dtype=np.float64)
    n, width = conn_features.shape
    if mask_token.shape != (width,):
        raise ValueError(f"mask token width {mask_token.shape} does not match features ({width},)")
    k = math.floor(rate * n)
    ids = np.sort(rng.choice(n, size=k, replace=False))
    masked = np.array(conn_features, dtype=np.float64, copy=True)
    masked[ids] = mask_token
    return masked, MaskPlan(masked_ids=ids, rate=rate)


def drop_edges(graph: HetGraph, rate: float, rng) -> EdgeDropPlan:
    """Drop each forward+reverse edge pair independently with probability rate."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"edge drop rate must be in [0, 1), got {rate}")
    return EdgeDropPlan(
        keep_src=rng.random(graph.n_conn) >= rate,
        keep_dst=rng.random(graph.n_conn) >= rate,
        rate=rate,
    )


def keep_all_edges(graph: HetGraph) -> EdgeDropPlan:
    """The identity plan used for validation and scoring."""
    ones = np.ones(graph.n_conn, dtype=bool)
    return EdgeDropPlan(keep_src=ones.copy(), keep_dst=ones.copy(), rate=0.0)


def sample_negative_edges(graph: HetGraph, rate: float, rng) -> NegativeEdgeSet:
    """Sample round(rate * positives) verified non-edges per relation.

    Rejection sampling over the (ip, conn) universe, falling back to
    enumerating the complement when the graph is too dense for rejection
    to finish. Relations with fewer non-edges than requested return what
    exists and warn.
    """
    n_conn, n_ip = graph.n_conn, graph.ip_count
    out = {}
    for rel in RELATIONS:
        ip_of_conn = graph.ip_of_conn(rel)
        target = int(round(rate * n_conn))
        available = n_conn * (n_ip - 1)
        if target > available:
            warnings.warn(
                f"{rel}: wanted {target} negative edges but only {available} non-edges exist",
                stacklevel=2,
            )
            target = available
        chosen: set = set()
        pairs: list = []
        tries, limit = 0, 200 + 40 * target
        while len(pairs) < target and tries < limit:
            m = max(16, 2 * (target - len(pairs)))
            ips = rng.integers(0, n_ip, size=m)
            conns = rng.integers(0, n_conn, size=m)
            ok = ips != ip_of_conn[conns]
            for ip, c in zip(ips[ok].tolist(), conns[ok].tolist()):
                if len(pairs) >= target:
                    break
                key = (ip, c)
                if key not in chosen:
                    chosen.add(key)
                    pairs.append(key)
            tries += m
        if len(pairs) < target:
            rest = [
                (ip, c)
                for c in range(n_conn)
                for ip in range(n_ip)
                if ip != ip_of_conn[c] and (ip, c) not in chosen
            ]
            pick = rng.choice(len(rest), size=target - len(pairs), replace=False)
            pairs.extend(rest[j] for j in pick)
        out[rel] = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return NegativeEdgeSet(pairs=out, rate=rate)


def save_graphs(graphs, path) -> None:
    """Write graphs to a single versioned npz container."""
    arrays = {
        "format_version": np.array(GRAPH_FORMAT_VERSION),
        "count": np.array(len(graphs)),
    }
    for i, g in enumerate(graphs):
        names = sorted(g.ip_index, key=g.ip_index.get)
        arrays[f"{i}/features"] = g.conn_features
        arrays[f"{i}/labels"] = g.conn_labels
        arrays[f"{i}/src_ids"] = g.src_ip_ids
        arrays[f"{i}/dst_ids"] = g.dst_ip_ids
        arrays[f"{i}/ip_names"] = np.array(names)
        arrays[f"{i}/window_id"] = np.array(g.window_id)
    np.savez(path, **arrays)


def load_graphs(path) -> list:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != GRAPH_FORMAT_VERSION:
            raise ValueError(f"unsupported graph container version: {version}")
        graphs = []
        for i in range(int(data["count"])):
            names = [str(s) for s in data[f"{i}/ip_names"]]
            graphs.append(
                HetGraph(
                    conn_features=data[f"{i}/features"],
                    conn_labels=data[f"{i}/labels"],
                    ip_index={name: j for j, name in enumerate(names)},
                    src_ip_ids=data[f"{i}/src_ids"],
                    dst_ip_ids=data[f"{i}/dst_ids"],
                    window_id=int(data[f"{i}/window_id"]),
                )
            )
    return graphs


def graph_summary(graphs) -> str:
    """Human-readable node/edge counts, one line per graph."""
    lines = []
    for g in graphs:
        lines.append(
            f"window {g.window_id}: {g.ip_count} ip nodes, {g.n_conn} conn nodes, "
            f"{4 * g.n_conn} typed edges, {int(g.conn_labels.sum())} anomalous flows"
        )
    total_conn = sum(g.n_conn for g in graphs)
    anom = sum(1 for g in graphs if g.is_anomalous)
    lines.append(f"total: {len(graphs)} graphs, {total_conn} conn nodes, {anom} anomalous windows")
    return "\n".join(lines) + "\n"
