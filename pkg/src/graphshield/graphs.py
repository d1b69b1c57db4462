"""Dynamic heterogeneous graph store: ingestion, bucketing, labels, features.

A ``DynamicGraph`` is an ordered list of per-bucket snapshots over a shared
node registry, plus the implicit per-node temporal chain (node at t -> node at
its next active t). Instances are immutable after construction and safe to
read concurrently.
"""

from __future__ import annotations

import csv
import gzip
import io
import math
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

SECONDS_PER_DAY = 86400.0

FREQ_WEEKLY = "weekly"
FREQ_BIWEEKLY = "biweekly"
FREQ_MONTHLY = "monthly"
FREQ_QUARTERLY = "quarterly"
FREQUENCIES = (FREQ_WEEKLY, FREQ_BIWEEKLY, FREQ_MONTHLY, FREQ_QUARTERLY)


class GraphError(ValueError):
    pass


class CsvFormatError(GraphError):
    """A data row could not be parsed; message carries the 1-based line number."""


@dataclass(frozen=True)
class NodeRef:
    id: int
    node_type: int = 0


@dataclass(frozen=True)
class EdgeRecord:
    src: int
    dst: int
    weight: float
    timestamp: float
    edge_type: int = 0

    def __post_init__(self):
        if not math.isfinite(self.weight):
            raise GraphError(f"edge {self.src}->{self.dst}: weight not finite")
        if self.src == self.dst:
            raise GraphError(f"edge {self.src}->{self.dst}: self-loops are rejected")


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for delimited edge lists (0-based indices)."""
    src: int = 0
    dst: int = 1
    weight: int = 2
    time: int = 3
    delimiter: str = ","
    has_header: bool = False


class Snapshot:
    """One time bucket: directed typed edges among the nodes active in it."""

    __slots__ = ("index", "start_ts", "end_ts", "edges", "nodes", "_out_adj", "_in_adj")

    def __init__(self, index: int, start_ts: float, end_ts: float,
                 edges: Sequence[tuple[int, int, int, float]]):
        self.index = index
        self.start_ts = start_ts
        self.end_ts = end_ts
        self.edges = tuple(edges)
        nodes = set()
        out_adj: dict[int, dict[int, set]] = {}
        in_adj: dict[int, dict[int, set]] = {}
        for src, dst, etype, _w in self.edges:
            nodes.add(src)
            nodes.add(dst)
            out_adj.setdefault(etype, {}).setdefault(src, set()).add(dst)
            in_adj.setdefault(etype, {}).setdefault(dst, set()).add(src)
        self.nodes = tuple(sorted(nodes))
        # neighbor lists sorted by id for deterministic iteration
        self._out_adj = {et: {u: tuple(sorted(vs)) for u, vs in adj.items()}
                         for et, adj in out_adj.items()}
        self._in_adj = {et: {u: tuple(sorted(vs)) for u, vs in adj.items()}
                        for et, adj in in_adj.items()}

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def out_neighbors(self, u: int, edge_type: int | None = None) -> tuple[int, ...]:
        if edge_type is not None:
            return self._out_adj.get(edge_type, {}).get(u, ())
        merged: set = set()
        for adj in self._out_adj.values():
            merged.update(adj.get(u, ()))
        return tuple(sorted(merged))

    def in_neighbors(self, u: int, edge_type: int | None = None) -> tuple[int, ...]:
        if edge_type is not None:
            return self._in_adj.get(edge_type, {}).get(u, ())
        merged: set = set()
        for adj in self._in_adj.values():
            merged.update(adj.get(u, ()))
        return tuple(sorted(merged))

    def edge_pairs(self) -> set[tuple[int, int]]:
        """Deduplicated directed (src, dst) pairs over all edge types."""
        return {(s, d) for s, d, _t, _w in self.edges}


class DynamicGraph:
    """Ordered snapshots plus node registry; immutable after construction."""

    def __init__(self, snapshots: Sequence[Snapshot], node_types: dict[int, int] | None = None,
                 freq: str = "", span: tuple[float, float] | None = None):
        snaps = list(snapshots)
        for i, s in enumerate(snaps[1:], start=1):
            if s.index != snaps[i - 1].index + 1:
                raise GraphError("snapshot indices must be strictly increasing and contiguous")
        self.snapshots = tuple(snaps)
        ids = sorted({u for s in snaps for u in s.nodes})
        self.node_ids = tuple(ids)
        nt = dict(node_types) if node_types else {}
        self.node_types = {u: nt.get(u, 0) for u in ids}
        self.type_set = tuple(sorted(set(self.node_types.values()))) if ids else (0,)
        self.edge_type_set = tuple(sorted({e[2] for s in snaps for e in s.edges})) or (0,)
        self.freq = freq
        self.span = span

    @property
    def n_steps(self) -> int:
        return len(self.snapshots)

    def snapshot_at(self, t: int) -> Snapshot:
        first = self.snapshots[0].index
        if not (first <= t <= first + len(self.snapshots) - 1):
            raise GraphError(f"snapshot index {t} outside [{first}, {first + len(self.snapshots) - 1}]")
        return self.snapshots[t - first]

    def node_chains(self) -> dict[int, list[int]]:
        """Each node's ordered list of snapshot indices where it is active."""
        chains: dict[int, list[int]] = {}
        for s in self.snapshots:
            for u in s.nodes:
                chains.setdefault(u, []).append(s.index)
        return chains

    def total_edges(self) -> int:
        return sum(s.n_edges for s in self.snapshots)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _open_maybe_gzip(path):
    with open(path, "rb") as probe:
        magic = probe.read(2)
    if magic == b"\x1f\x8b":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def parse_edge_csv(path, schema: CsvSchema = CsvSchema()) -> list[EdgeRecord]:
    """Read SOURCE,TARGET,RATING,TIME rows (optionally gzipped) in file order.

    Raises ``CsvFormatError`` with the offending 1-based line number on the
    first malformed row; ``FileNotFoundError`` if the file is missing.
    """
    records: list[EdgeRecord] = []
    needed = max(schema.src, schema.dst, schema.weight, schema.time) + 1
    with _open_maybe_gzip(path) as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        for lineno, row in enumerate(reader, start=1):
            if schema.has_header and lineno == 1:
                continue
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < needed:
                raise CsvFormatError(f"line {lineno}: expected >= {needed} columns, got {len(row)}")
            try:
                src = int(float(row[schema.src]))
                dst = int(float(row[schema.dst]))
                weight = float(row[schema.weight])
                ts = float(row[schema.time])
            except ValueError as err:
                raise CsvFormatError(f"line {lineno}: non-numeric field ({err})") from err
            try:
                records.append(EdgeRecord(src=src, dst=dst, weight=weight, timestamp=ts))
            except GraphError as err:
                raise CsvFormatError(f"line {lineno}: {err}") from err
    return records


# ---------------------------------------------------------------------------
# snapshot bucketing
# ---------------------------------------------------------------------------

def _utc_date(ts: float) -> date:
    return datetime.fromtimestamp(ts, tz=timezone.utc).date()


def _week_ordinal(ts: float) -> int:
    d = _utc_date(ts)
    iso = d.isocalendar()
    monday = date.fromisocalendar(iso[0], iso[1], 1)
    return monday.toordinal() // 7


def _month_ordinal(ts: float) -> int:
    d = _utc_date(ts)
    return d.year * 12 + (d.month - 1)


def _quarter_ordinal(ts: float) -> int:
    d = _utc_date(ts)
    return d.year * 4 + (d.month - 1) // 3


def _bucket_bounds(freq: str, ordinal: int, anchor_ts: float) -> tuple[float, float]:
    if freq == FREQ_BIWEEKLY:
        start = anchor_ts + ordinal * 14 * SECONDS_PER_DAY
        return start, start + 14 * SECONDS_PER_DAY
    if freq == FREQ_WEEKLY:
        monday = date.fromordinal(ordinal * 7 + 1)  # Monday ordinals are 1 mod 7
        start = datetime(monday.year, monday.month, monday.day, tzinfo=timezone.utc).timestamp()
        return start, start + 7 * SECONDS_PER_DAY
    if freq == FREQ_MONTHLY:
        y, m = divmod(ordinal, 12)
        start = datetime(y, m + 1, 1, tzinfo=timezone.utc).timestamp()
        y2, m2 = divmod(ordinal + 1, 12)
        end = datetime(y2, m2 + 1, 1, tzinfo=timezone.utc).timestamp()
        return start, end
    if freq == FREQ_QUARTERLY:
        y, q = divmod(ordinal, 4)
        start = datetime(y, q * 3 + 1, 1, tzinfo=timezone.utc).timestamp()
        y2, q2 = divmod(ordinal + 1, 4)
        end = datetime(y2, q2 * 3 + 1, 1, tzinfo=timezone.utc).timestamp()
        return start, end
    raise GraphError(f"unknown bucket frequency {freq!r}")


def bucket_snapshots(edges: Sequence[EdgeRecord], freq: str,
                     span: tuple[float, float] | None = None,
                     node_types: dict[int, int] | None = None) -> DynamicGraph:
    """Bucket an edge list into T contiguous snapshots.

    ``weekly``/``monthly``/``quarterly`` buckets are calendar-aligned (ISO week
    or month/quarter boundaries, UTC); ``biweekly`` uses 14-day windows
    anchored at the span start. Edges outside ``span`` are dropped.
    """
    if freq not in FREQUENCIES:
        raise GraphError(f"freq must be one of {FREQUENCIES}, got {freq!r}")
    if not edges:
        raise GraphError("bucket_snapshots: empty edge list")
    if span is None:
        span = (min(e.timestamp for e in edges), max(e.timestamp for e in edges))
    t0, t1 = span
    if t1 < t0:
        raise GraphError(f"bucket_snapshots: empty span ({t0} > {t1})")

    if freq == FREQ_BIWEEKLY:
        def ordinal(ts: float) -> int:
            return int((ts - t0) // (14 * SECONDS_PER_DAY))
        anchor = t0
    else:
        ordinal = {FREQ_WEEKLY: _week_ordinal, FREQ_MONTHLY: _month_ordinal,
                   FREQ_QUARTERLY: _quarter_ordinal}[freq]
        anchor = t0

    o0, o1 = ordinal(t0), ordinal(t1)
    n_buckets = o1 - o0 + 1
    if n_buckets <= 0:
        raise GraphError("bucket_snapshots: span produces zero buckets")

    buckets: list[list[tuple[int, int, int, float]]] = [[] for _ in range(n_buckets)]
    for e in edges:
        if not (t0 <= e.timestamp <= t1):
            continue
        buckets[ordinal(e.timestamp) - o0].append((e.src, e.dst, e.edge_type, e.weight))

    snapshots = []
    for k, bucket in enumerate(buckets):
        start, end = _bucket_bounds(freq, o0 + k, anchor)
        snapshots.append(Snapshot(index=k + 1, start_ts=start, end_ts=end, edges=bucket))
    return DynamicGraph(snapshots, node_types=node_types, freq=freq, span=span)


def train_test_split(g: DynamicGraph, train_steps: int) -> tuple[DynamicGraph, DynamicGraph]:
    """First ``train_steps`` snapshots and the remainder; registry shared."""
    if not (0 < train_steps < g.n_steps):
        raise GraphError(f"train_steps must be in (0, {g.n_steps}), got {train_steps}")
    train = DynamicGraph(g.snapshots[:train_steps], node_types=g.node_types,
                         freq=g.freq, span=g.span)
    test = DynamicGraph(g.snapshots[train_steps:], node_types=g.node_types,
                        freq=g.freq, span=g.span)
    return train, test


# ---------------------------------------------------------------------------
# adjacency matrices
# ---------------------------------------------------------------------------

def adjacency_matrix(g: DynamicGraph, t: int) -> tuple[np.ndarray, tuple[int, ...]]:
    """Dense 0/1 matrix over snapshot t's active nodes (sorted by id).

    Entry (i, j) is 1 iff a directed edge i->j of any type exists at t.
    """
    snap = g.snapshot_at(t)
    nodes = snap.nodes
    pos = {u: i for i, u in enumerate(nodes)}
    mat = np.zeros((len(nodes), len(nodes)))
    for s, d in snap.edge_pairs():
        mat[pos[s], pos[d]] = 1.0
    return mat, nodes


def chain_adjacency(length: int) -> np.ndarray:
    """Adjacency of a temporal chain u_1 -> u_2 -> ... (superdiagonal ones)."""
    mat = np.zeros((length, length))
    if length > 1:
        idx = np.arange(length - 1)
        mat[idx, idx + 1] = 1.0
    return mat


def snapshot_from_adjacency(mat: np.ndarray, nodes: Sequence[int], index: int = 1) -> Snapshot:
    """Rebuild a single-type snapshot from a dense 0/1 adjacency matrix."""
    edges = []
    n = len(nodes)
    if mat.shape != (n, n):
        raise GraphError(f"adjacency shape {mat.shape} does not match {n} nodes")
    for i in range(n):
        for j in range(n):
            if mat[i, j] != 0 and i != j:
                edges.append((nodes[i], nodes[j], 0, 1.0))
    return Snapshot(index=index, start_ts=0.0, end_ts=0.0, edges=edges)


# ---------------------------------------------------------------------------
# synthetic risk-label protocol
# ---------------------------------------------------------------------------

class LabelStatus(Enum):
    RISKY = "risky"
    SAFE = "safe"
    UNLABELED = "unlabeled"


@dataclass
class TimestampLabels:
    active: tuple[int, ...]
    risky: frozenset
    unlabeled: frozenset


class LabelSet:
    """Ground-truth risk labels with a per-timestamp unlabeled mask.

    ``status`` is what training may see; ``truth`` is the full ground truth
    used for evaluation.
    """

    def __init__(self, per_step: dict[int, TimestampLabels], risk_ratio: float,
                 unlabeled_ratio: float, seed: int):
        self.per_step = per_step
        self.risk_ratio = risk_ratio
        self.unlabeled_ratio = unlabeled_ratio
        self.seed = seed

    def status(self, node: int, t: int) -> LabelStatus:
        step = self.per_step[t]
        if node in step.unlabeled:
            return LabelStatus.UNLABELED
        return LabelStatus.RISKY if node in step.risky else LabelStatus.SAFE

    def truth(self, node: int, t: int) -> bool:
        return node in self.per_step[t].risky


def cumulative_in_rating(g: DynamicGraph) -> dict[int, dict[int, float]]:
    """Per snapshot index: node -> mean incoming rating over all edges up to t.

    Nodes with no incoming ratings yet score 0 (neutral).
    """
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    out: dict[int, dict[int, float]] = {}
    for snap in g.snapshots:
        for _s, d, _et, w in snap.edges:
            sums[d] = sums.get(d, 0.0) + w
            counts[d] = counts.get(d, 0) + 1
        out[snap.index] = {u: (sums[u] / counts[u] if counts.get(u) else 0.0)
                           for u in snap.nodes}
    return out


def derive_labels(g: DynamicGraph, risk_ratio: float, unlabeled_ratio: float,
                  seed: int) -> LabelSet:
    """Quantile ground truth plus a label-independent random unlabeled mask.

    A node is risky at t iff its cumulative mean incoming rating up to t ranks
    in the bottom ``risk_ratio`` fraction of the nodes active at t (ties break
    toward the lower node id). The mask draws from a (seed, t) stream, so it is
    identical for any risk_ratio at a fixed seed.
    """
    if not (0 < risk_ratio < 1):
        raise GraphError(f"risk_ratio must be in (0, 1), got {risk_ratio}")
    if not (0 <= unlabeled_ratio < 1):
        raise GraphError(f"unlabeled_ratio must be in [0, 1), got {unlabeled_ratio}")
    scores = cumulative_in_rating(g)
    per_step: dict[int, TimestampLabels] = {}
    for snap in g.snapshots:
        active = snap.nodes
        n = len(active)
        step_scores = scores[snap.index]
        n_risky = int(round(risk_ratio * n))
        ranked = sorted(active, key=lambda u: (step_scores[u], u))
        risky = frozenset(ranked[:n_risky])
        rng = np.random.default_rng([seed, snap.index])
        n_mask = int(round(unlabeled_ratio * n))
        mask = frozenset(rng.choice(np.array(active), size=n_mask, replace=False).tolist()) \
            if n_mask else frozenset()
        per_step[snap.index] = TimestampLabels(active=active, risky=risky, unlabeled=mask)
    return LabelSet(per_step, risk_ratio, unlabeled_ratio, seed)


# ---------------------------------------------------------------------------
# input features
# ---------------------------------------------------------------------------

FEATURE_DIM = 8
FEATURE_NAMES = (
    "in_degree", "out_degree", "mean_in_rating", "mean_out_rating",
    "min_in_rating", "neg_in_count", "log_activity", "bias",
)


@dataclass
class FeatureTable:
    """Per-snapshot feature matrices aligned with each snapshot's sorted nodes."""
    dim: int
    mean: np.ndarray
    std: np.ndarray
    per_step: dict[int, np.ndarray] = field(default_factory=dict)

    def matrix(self, t: int) -> np.ndarray:
        return self.per_step[t]


def compute_features(g: DynamicGraph, train_steps: int) -> FeatureTable:
    """Cumulative degree/rating features, z-scored over the training span.

    Columns: cumulative in/out degree, cumulative mean in/out rating,
    cumulative min in-rating, cumulative negative in-rating count,
    log(1 + activity in the current bucket), and a constant bias (left raw;
    z-scoring a constant column would zero it out).
    """
    if not (0 < train_steps <= g.n_steps):
        raise GraphError(f"train_steps must be in (0, {g.n_steps}], got {train_steps}")
    in_deg: dict[int, int] = {}
    out_deg: dict[int, int] = {}
    in_sum: dict[int, float] = {}
    out_sum: dict[int, float] = {}
    in_min: dict[int, float] = {}
    neg_in: dict[int, int] = {}

    raw: dict[int, np.ndarray] = {}
    first = g.snapshots[0].index
    for snap in g.snapshots:
        activity: dict[int, int] = {}
        for s, d, _et, w in snap.edges:
            out_deg[s] = out_deg.get(s, 0) + 1
            in_deg[d] = in_deg.get(d, 0) + 1
            out_sum[s] = out_sum.get(s, 0.0) + w
            in_sum[d] = in_sum.get(d, 0.0) + w
            in_min[d] = min(in_min.get(d, w), w)
            if w < 0:
                neg_in[d] = neg_in.get(d, 0) + 1
            activity[s] = activity.get(s, 0) + 1
            activity[d] = activity.get(d, 0) + 1
        rows = np.zeros((len(snap.nodes), FEATURE_DIM))
        for i, u in enumerate(snap.nodes):
            di, do = in_deg.get(u, 0), out_deg.get(u, 0)
            rows[i] = (
                di, do,
                in_sum.get(u, 0.0) / di if di else 0.0,
                out_sum.get(u, 0.0) / do if do else 0.0,
                in_min.get(u, 0.0),
                neg_in.get(u, 0),
                math.log1p(activity.get(u, 0)),
                1.0,
            )
        raw[snap.index] = rows

    train_rows = [raw[t] for t in range(first, first + train_steps) if raw[t].size]
    stacked = np.concatenate(train_rows, axis=0) if train_rows else np.zeros((1, FEATURE_DIM))
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), 1e-8)
    mean[FEATURE_DIM - 1] = 0.0  # keep the bias column intact
    std[FEATURE_DIM - 1] = 1.0
    table = FeatureTable(dim=FEATURE_DIM, mean=mean, std=std)
    for t, rows in raw.items():
        table.per_step[t] = (rows - mean) / std
    return table


# ---------------------------------------------------------------------------
# snapshot manifest
# ---------------------------------------------------------------------------

def format_manifest(g: DynamicGraph) -> str:
    """Line-oriented manifest: header then one `t start end nodes edges` row."""
    lines = ["# snapshot manifest v1"]
    lines.append(f"snapshots\t{g.n_steps}")
    lines.append(f"freq\t{g.freq or 'unknown'}")
    if g.span:
        lines.append(f"span\t{g.span[0]:.0f}\t{g.span[1]:.0f}")
    lines.append(f"nodes_total\t{len(g.node_ids)}")
    lines.append(f"edges_total\t{g.total_edges()}")
    lines.append("# t\tbucket_start\tbucket_end\tnodes\tedges")
    for s in g.snapshots:
        start = _utc_date(s.start_ts).isoformat() if s.start_ts else "-"
        end = _utc_date(s.end_ts).isoformat() if s.end_ts else "-"
        lines.append(f"{s.index}\t{start}\t{end}\t{s.n_nodes}\t{s.n_edges}")
    return "\n".join(lines) + "\n"


def write_manifest(g: DynamicGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_manifest(g))
