"""Sandwich-stacked spatial/temporal separable-kernel attention encoder.

Each layer runs a spatial pass over every snapshot (per-node-type Q/K/V,
kernel ELU(x)+1, messages normalized by the kernel mass) and then a temporal
pass over every node's activity chain after rotary position encoding. Both
passes cost O(edges + rows) instead of the quadratic dense-similarity form;
tests compare against that dense oracle directly.

The batched path packs all (snapshot, node) rows into one matrix and drives
the fixed-sparsity aggregation operators from ``tape``. The single-row
reference functions below mirror the update equations one neighbor set at a
time and are used to cross-check the batched path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tape
from .graphs import DynamicGraph, FeatureTable, GraphError, chain_adjacency
from .tape import (GraphAgg, Param, SegmentMap, Tensor, add, bucketed_chain_attention,
                   concat_cols, constant, div_heads, elu, frobenius_sq, gather_rows,
                   matmul, mul, multihead_edge_attention, multihead_rowdot,
                   neighbor_sum, rowdot, shift, sigmoid, sub, total_sum, transpose)

ROTARY_BASE = 10000.0


@dataclass
class EncoderConfig:
    dim: int = 64          # embedding width
    layers: int = 3        # sandwich layers (spatial + temporal each)
    heads: int = 4
    feature_dim: int = 8   # input feature width
    recon_mode: str = "auto"        # auto | exact | sampled
    recon_exact_limit: int = 512    # max snapshot/chain size for exact mode

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise GraphError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 2 != 0:
            raise GraphError(f"dim {self.dim} must be even for rotary encoding")
        if self.layers < 1:
            raise GraphError("layers must be >= 1")
        if self.recon_mode not in ("auto", "exact", "sampled"):
            raise GraphError(f"unknown recon_mode {self.recon_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class LayerParams:
    """Per-layer maps: type-keyed spatial Q/K/V, shared temporal Q/K/V, mix logits."""
    sq: dict[int, Param]
    sk: dict[int, Param]
    sv: dict[int, Param]
    tq: Param
    tk: Param
    tv: Param
    tau1_logit: Param
    tau2_logit: Param


@dataclass
class EncoderParams:
    input_proj: dict[int, Param]
    layers: list[LayerParams]

    def all_params(self) -> list[Param]:
        out: list[Param] = [self.input_proj[b] for b in sorted(self.input_proj)]
        for lp in self.layers:
            for m in (lp.sq, lp.sk, lp.sv):
                out.extend(m[b] for b in sorted(m))
            out.extend([lp.tq, lp.tk, lp.tv, lp.tau1_logit, lp.tau2_logit])
        return out


def init_encoder_params(cfg: EncoderConfig, node_types: Sequence[int],
                        rng: np.random.Generator) -> EncoderParams:
    """Gaussian init scaled by fan-in; mix logits start at 0 (tau = 0.5)."""
    types = sorted(set(node_types)) or [0]
    d, d0 = cfg.dim, cfg.feature_dim

    def lin(fan_in, fan_out, name):
        return Param(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in), name)

    input_proj = {b: lin(d0, d, f"enc.in.{b}") for b in types}
    layers = []
    for l in range(cfg.layers):
        layers.append(LayerParams(
            sq={b: lin(d, d, f"enc.l{l}.sq.{b}") for b in types},
            sk={b: lin(d, d, f"enc.l{l}.sk.{b}") for b in types},
            sv={b: lin(d, d, f"enc.l{l}.sv.{b}") for b in types},
            tq=lin(d, d, f"enc.l{l}.tq"),
            tk=lin(d, d, f"enc.l{l}.tk"),
            tv=lin(d, d, f"enc.l{l}.tv"),
            tau1_logit=Param(np.zeros((1, 1)), f"enc.l{l}.tau1"),
            tau2_logit=Param(np.zeros((1, 1)), f"enc.l{l}.tau2"),
        ))
    return EncoderParams(input_proj=input_proj, layers=layers)


# ---------------------------------------------------------------------------
# kernel and rotary encoding
# ---------------------------------------------------------------------------

def kernel_phi(x: Tensor) -> Tensor:
    """ELU(x) + 1: strictly positive separable attention kernel."""
    return shift(elu(x), 1.0)


def kernel_phi_np(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x + 1.0, np.exp(x))


def rotary_angles(positions: np.ndarray, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin matrices (n, dim) for pairwise rotations at the given timestamps.

    Pair i (columns 2i, 2i+1) rotates by t / 10000^(2i/dim).
    """
    if dim % 2 != 0:
        raise GraphError(f"rotary dimension {dim} is odd")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    inv_freq = ROTARY_BASE ** (-np.arange(0, dim, 2) / dim)
    theta = pos * inv_freq[None, :]
    cos = np.repeat(np.cos(theta), 2, axis=1)
    sin = np.repeat(np.sin(theta), 2, axis=1)
    return cos, sin


def rotary_encode(seq: np.ndarray, positions: np.ndarray | None = None) -> np.ndarray:
    """Rotate coordinate pairs of each row by its timestamp-dependent angle.

    out[2i]   =  x[2i] cos(th) + x[2i+1] sin(th)
    out[2i+1] =  x[2i+1] cos(th) - x[2i] sin(th)
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim == 1:
        seq = seq[None, :]
    n, d = seq.shape
    if positions is None:
        positions = np.arange(1, n + 1)
    cos, sin = rotary_angles(positions, d)
    swapped = np.empty_like(seq)
    swapped[:, 0::2] = seq[:, 1::2]
    swapped[:, 1::2] = -seq[:, 0::2]
    return seq * cos + swapped * sin


def rotary_encode_tensor(h: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    return add(mul(h, cos), mul(tape.rotate_pairs(h), sin))


# ---------------------------------------------------------------------------
# single-row reference operations (mirror the update equations directly)
# ---------------------------------------------------------------------------

def _heads(mat: np.ndarray, heads: int) -> list[np.ndarray]:
    dh = mat.shape[1] // heads
    return [mat[:, h * dh:(h + 1) * dh] for h in range(heads)]


def spatial_attention(target_vec: np.ndarray, target_type: int,
                      neighbor_vecs: np.ndarray, neighbor_types: Sequence[int],
                      layer: LayerParams, heads: int) -> np.ndarray:
    """One node's spatial update from its neighbor set (self-loop is the
    caller's responsibility; an empty neighbor set is an error).

    Per head: M = phi(Q) S_kv / (phi(Q) S_k) with S_kv = sum phi(K_j)^T V_j and
    S_k = sum phi(K_j)^T cached over the neighbor set; output mixes the input
    with the concatenated heads through tau1.
    """
    nbr = np.asarray(neighbor_vecs, dtype=np.float64)
    if nbr.ndim != 2 or nbr.shape[0] == 0:
        raise GraphError("spatial_attention: empty neighbor set (isolated node)")
    tvec = np.asarray(target_vec, dtype=np.float64).reshape(1, -1)
    types = list(neighbor_types)
    if len(types) != nbr.shape[0]:
        raise GraphError("spatial_attention: neighbor type count mismatch")

    q_full = tvec @ layer.sq[target_type].value
    k_full = np.vstack([nbr[j:j + 1] @ layer.sk[types[j]].value for j in range(len(types))])
    v_full = np.vstack([nbr[j:j + 1] @ layer.sv[types[j]].value for j in range(len(types))])

    messages = []
    for qh, kh, vh in zip(_heads(q_full, heads), _heads(k_full, heads), _heads(v_full, heads)):
        pq = kernel_phi_np(qh)[0]
        pk = kernel_phi_np(kh)
        s_kv = pk.T @ vh                    # cached sums, reused per query
        s_k = pk.sum(axis=0)
        messages.append((pq @ s_kv) / float(pq @ s_k))
    mixed = np.concatenate(messages)
    tau1 = 1.0 / (1.0 + np.exp(-layer.tau1_logit.value[0, 0]))
    return tvec[0] + (1.0 - tau1) * (mixed - tvec[0])


def temporal_attention(seq: np.ndarray, positions: Sequence[int],
                       layer: LayerParams, heads: int) -> np.ndarray:
    """One node's temporal update over its full chain.

    Rotary-encodes the sequence, runs the separable attention over all
    positions (cached sums shared by every query), and mixes with the
    un-rotated input through tau2.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim == 1:
        seq = seq[None, :]
    enc = rotary_encode(seq, np.asarray(positions))
    q_full = enc @ layer.tq.value
    k_full = enc @ layer.tk.value
    v_full = enc @ layer.tv.value
    outs = []
    for qh, kh, vh in zip(_heads(q_full, heads), _heads(k_full, heads), _heads(v_full, heads)):
        pq = kernel_phi_np(qh)
        pk = kernel_phi_np(kh)
        s_kv = pk.T @ vh
        s_k = pk.sum(axis=0)
        outs.append((pq @ s_kv) / (pq @ s_k)[:, None])
    mixed = np.concatenate(outs, axis=1)
    tau2 = 1.0 / (1.0 + np.exp(-layer.tau2_logit.value[0, 0]))
    return seq + (1.0 - tau2) * (mixed - seq)


# ---------------------------------------------------------------------------
# packed window: all (snapshot, node) rows of a span in one matrix
# ---------------------------------------------------------------------------

@dataclass
class ReconPlan:
    """Precomputed index plan for the sampled reconstruction estimator."""
    pos_i: np.ndarray          # all positive entries (global rows)
    pos_j: np.ndarray
    sp_draw_lo: np.ndarray     # per spatial negative draw: snapshot row offset
    sp_draw_n: np.ndarray      # ... snapshot size
    sp_draw_w: np.ndarray      # ... weight (negatives in grid / draws)
    sp_pos_keys: np.ndarray    # sorted global i*N+j keys of spatial positives
    ch_draw_k: np.ndarray      # per chain negative draw: chain length
    ch_draw_start: np.ndarray  # ... offset into flat_members
    ch_draw_w: np.ndarray
    flat_members: np.ndarray   # concatenated chain rows


@dataclass
class PackedWindow:
    steps: tuple[int, ...]
    rows: list[tuple[int, int]]               # (t, node), sorted by (t, node)
    row_index: dict[tuple[int, int], int]
    features: np.ndarray                      # (n_rows, feature_dim)
    positions: np.ndarray                     # snapshot index per row
    type_rows: dict[int, np.ndarray]          # node type -> row indices
    spatial: GraphAgg                         # in-neighbors + self-loops
    chains: SegmentMap                        # row -> chain segment
    chain_nodes: list[int]
    step_row_range: dict[int, tuple[int, int]]
    step_pos_pairs: dict[int, np.ndarray]     # (k, 2) row pairs with an edge
    chain_rows: list[np.ndarray]              # rows of each chain, time order
    chain_buckets: list[np.ndarray]           # -1-padded row matrices by length
    recon_plan: ReconPlan | None = None

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def plan(self) -> ReconPlan:
        if self.recon_plan is None:
            self.recon_plan = _build_recon_plan(self)
        return self.recon_plan


def pack_window(g: DynamicGraph, features: FeatureTable,
                steps: Sequence[int] | None = None) -> PackedWindow:
    """Flatten the active (snapshot, node) pairs of the chosen steps."""
    if steps is None:
        steps = [s.index for s in g.snapshots]
    steps = tuple(steps)
    rows: list[tuple[int, int]] = []
    feats = []
    step_row_range: dict[int, tuple[int, int]] = {}
    for t in steps:
        snap = g.snapshot_at(t)
        lo = len(rows)
        rows.extend((t, u) for u in snap.nodes)
        step_row_range[t] = (lo, len(rows))
        feats.append(features.matrix(t))
    row_index = {key: i for i, key in enumerate(rows)}
    n = len(rows)
    if n == 0:
        raise GraphError("pack_window: no active rows in the chosen steps")
    x0 = np.concatenate(feats, axis=0) if feats else np.zeros((0, features.dim))

    # spatial aggregation: deduplicated in-edges plus one self-loop per row
    tgt, src = [], []
    step_pos_pairs: dict[int, np.ndarray] = {}
    for t in steps:
        snap = g.snapshot_at(t)
        pairs = sorted(snap.edge_pairs())
        pos_rows = []
        for s_node, d_node in pairs:
            rs, rd = row_index[(t, s_node)], row_index[(t, d_node)]
            tgt.append(rd)
            src.append(rs)
            pos_rows.append((rs, rd))
        step_pos_pairs[t] = np.asarray(pos_rows, dtype=np.int64).reshape(-1, 2)
    all_rows = np.arange(n, dtype=np.int64)
    tgt_arr = np.concatenate([np.asarray(tgt, dtype=np.int64), all_rows])
    src_arr = np.concatenate([np.asarray(src, dtype=np.int64), all_rows])
    spatial = GraphAgg(tgt_arr, src_arr, n)

    # temporal chains in node order
    chains = g.node_chains()
    chain_nodes = sorted(u for u in chains if any(t in step_row_range for t in chains[u]))
    seg_of_row = np.empty(n, dtype=np.int64)
    chain_rows: list[np.ndarray] = []
    for ci, u in enumerate(chain_nodes):
        member = np.asarray([row_index[(t, u)] for t in chains[u] if t in step_row_range],
                            dtype=np.int64)
        chain_rows.append(member)
        seg_of_row[member] = ci
    seg = SegmentMap(seg_of_row, len(chain_nodes))

    types = np.asarray([g.node_types.get(u, 0) for (_t, u) in rows])
    type_rows = {b: np.where(types == b)[0] for b in sorted(set(types.tolist()))}

    return PackedWindow(steps=steps, rows=rows, row_index=row_index, features=x0,
                        positions=np.asarray([t for (t, _u) in rows], dtype=np.float64),
                        type_rows=type_rows, spatial=spatial, chains=seg,
                        chain_nodes=chain_nodes, step_row_range=step_row_range,
                        step_pos_pairs=step_pos_pairs, chain_rows=chain_rows,
                        chain_buckets=_bucket_chains(chain_rows))


def _bucket_chains(chain_rows: list[np.ndarray]) -> list[np.ndarray]:
    """Group chains by padded length (next power of two) into -1-padded
    row-index matrices, for the dense within-chain attention kernel."""
    groups: dict[int, list[np.ndarray]] = {}
    for member in chain_rows:
        k = len(member)
        pad = 1 << (k - 1).bit_length() if k > 1 else 1
        groups.setdefault(pad, []).append(member)
    buckets = []
    for pad in sorted(groups):
        rows = np.full((len(groups[pad]), pad), -1, dtype=np.int64)
        for r, member in enumerate(groups[pad]):
            rows[r, :len(member)] = member
        buckets.append(rows)
    return buckets


def _typed_linear(h: Tensor, weights: dict[int, Param], pw: PackedWindow) -> Tensor:
    """Row-type-specific linear map; avoids masking when only one type exists."""
    if len(pw.type_rows) == 1:
        (only,) = pw.type_rows
        return matmul(h, weights[only])
    acc = None
    for b, rows_b in pw.type_rows.items():
        mask = np.zeros((pw.n_rows, 1))
        mask[rows_b] = 1.0
        term = mul(matmul(h, weights[b]), constant(mask))
        acc = term if acc is None else add(acc, term)
    return acc


def _mix(h: Tensor, message: Tensor, tau_logit: Param) -> Tensor:
    # h + (1 - tau) (message - h): exactly h when message == h
    tau = sigmoid(tau_logit)
    return add(h, mul(sub(message, h), sub(constant(np.ones((1, 1))), tau)))


def _spatial_pass(h: Tensor, layer: LayerParams, cfg: EncoderConfig,
                  pw: PackedWindow) -> Tensor:
    pq = kernel_phi(_typed_linear(h, layer.sq, pw))
    pk = kernel_phi(_typed_linear(h, layer.sk, pw))
    v = _typed_linear(h, layer.sv, pw)
    agg = pw.spatial
    num = multihead_edge_attention(agg, pq, pk, v, cfg.heads)
    den = multihead_rowdot(pq, neighbor_sum(agg, pk), cfg.heads)
    return _mix(h, div_heads(num, den, cfg.heads), layer.tau1_logit)


def _temporal_pass(h: Tensor, layer: LayerParams, cfg: EncoderConfig,
                   pw: PackedWindow, cos: Tensor, sin: Tensor) -> Tensor:
    enc = rotary_encode_tensor(h, cos, sin)
    pq = kernel_phi(matmul(enc, layer.tq))
    pk = kernel_phi(matmul(enc, layer.tk))
    v = matmul(enc, layer.tv)
    msg = bucketed_chain_attention(pw.chain_buckets, pq, pk, v, cfg.heads)
    return _mix(h, msg, layer.tau2_logit)


@dataclass
class EmbeddingTable:
    """Final per-(snapshot, node) embeddings with their packed row index."""
    packed: PackedWindow
    z: Tensor

    def values(self) -> np.ndarray:
        return self.z.value

    def vector(self, node: int, t: int) -> np.ndarray:
        return self.z.value[self.packed.row_index[(t, node)]]


def encode(g: DynamicGraph, cfg: EncoderConfig, params: EncoderParams,
           features: FeatureTable, steps: Sequence[int] | None = None,
           packed: PackedWindow | None = None) -> EmbeddingTable:
    """Run the full sandwich stack over a window; returns one row per
    active (snapshot, node) pair."""
    pw = packed if packed is not None else pack_window(g, features, steps)
    cos_np, sin_np = rotary_angles(pw.positions, cfg.dim)
    cos, sin = constant(cos_np), constant(sin_np)
    h = _typed_linear(constant(pw.features), params.input_proj, pw)
    for layer in params.layers:
        h = _spatial_pass(h, layer, cfg, pw)
        h = _temporal_pass(h, layer, cfg, pw, cos, sin)
    return EmbeddingTable(packed=pw, z=h)


# ---------------------------------------------------------------------------
# graph reconstruction penalty
# ---------------------------------------------------------------------------

def recon_entry_count(pw: PackedWindow) -> int:
    """Total compared entries: sum n_t^2 over snapshots + sum k_u^2 over chains."""
    total = sum((hi - lo) ** 2 for lo, hi in pw.step_row_range.values())
    total += sum(len(c) ** 2 for c in pw.chain_rows)
    return total


def _choose_mode(cfg: EncoderConfig, pw: PackedWindow) -> str:
    if cfg.recon_mode != "auto":
        return cfg.recon_mode
    big = max([hi - lo for lo, hi in pw.step_row_range.values()] +
              [len(c) for c in pw.chain_rows])
    small = big <= cfg.recon_exact_limit and len(pw.chain_rows) <= 64 \
        and len(pw.step_row_range) <= 64
    return "exact" if small else "sampled"


def reconstruction_loss(z: Tensor, pw: PackedWindow, cfg: EncoderConfig,
                        rng: np.random.Generator | None = None) -> Tensor:
    """Squared error between sigmoid(z_i . z_j) and the observed adjacency,
    summed over every snapshot grid and every chain grid.

    Exact mode enumerates all entries; sampled mode keeps every positive entry
    and an equal number of uniformly drawn negatives per grid, scaled to the
    full negative count (an unbiased estimate of the same sum).
    """
    mode = _choose_mode(cfg, pw)
    if mode == "exact":
        return _recon_exact(z, pw)
    if rng is None:
        rng = np.random.default_rng(0)
    return _recon_sampled(z, pw, rng)


def _recon_exact(z: Tensor, pw: PackedWindow) -> Tensor:
    total = None
    for t in pw.steps:
        lo, hi = pw.step_row_range[t]
        if hi == lo:
            continue
        zt = gather_rows(z, np.arange(lo, hi))
        pred = sigmoid(matmul(zt, transpose(zt)))
        target = np.zeros((hi - lo, hi - lo))
        if pw.step_pos_pairs[t].size:
            target[pw.step_pos_pairs[t][:, 0] - lo, pw.step_pos_pairs[t][:, 1] - lo] = 1.0
        term = frobenius_sq(sub(pred, constant(target)))
        total = term if total is None else add(total, term)
    for member in pw.chain_rows:
        k = len(member)
        zc = gather_rows(z, member)
        pred = sigmoid(matmul(zc, transpose(zc)))
        term = frobenius_sq(sub(pred, constant(chain_adjacency(k))))
        total = term if total is None else add(total, term)
    return total if total is not None else constant(np.zeros((1, 1)))


def _build_recon_plan(pw: PackedWindow) -> ReconPlan:
    n_total = pw.n_rows
    pos_i, pos_j = [], []
    sp_lo, sp_n, sp_w = [], [], []
    sp_keys = []
    for t in pw.steps:
        lo, hi = pw.step_row_range[t]
        n = hi - lo
        pos = pw.step_pos_pairs[t]
        k = len(pos)
        if n == 0 or k == 0:
            continue
        pos_i.append(pos[:, 0])
        pos_j.append(pos[:, 1])
        sp_keys.append(pos[:, 0].astype(np.int64) * n_total + pos[:, 1])
        neg_total = n * n - k
        take = min(k, neg_total)
        if take > 0:
            sp_lo.append(np.full(take, lo, dtype=np.int64))
            sp_n.append(np.full(take, n, dtype=np.int64))
            sp_w.append(np.full(take, neg_total / take))

    ch_k, ch_start, ch_w = [], [], []
    flat = []
    offset = 0
    for member in pw.chain_rows:
        k = len(member)
        flat.append(member)
        if k >= 2:
            pos_i.append(member[:-1])
            pos_j.append(member[1:])
            neg_total = k * k - (k - 1)
            take = k - 1
            ch_k.append(np.full(take, k, dtype=np.int64))
            ch_start.append(np.full(take, offset, dtype=np.int64))
            ch_w.append(np.full(take, neg_total / take))
        offset += k

    def cat(parts, dtype=np.int64):
        return np.concatenate(parts).astype(dtype) if parts else np.empty(0, dtype=dtype)

    return ReconPlan(
        pos_i=cat(pos_i), pos_j=cat(pos_j),
        sp_draw_lo=cat(sp_lo), sp_draw_n=cat(sp_n), sp_draw_w=cat(sp_w, np.float64),
        sp_pos_keys=np.sort(cat(sp_keys)),
        ch_draw_k=cat(ch_k), ch_draw_start=cat(ch_start), ch_draw_w=cat(ch_w, np.float64),
        flat_members=cat(flat))


def _draw_spatial_negatives(plan: ReconPlan, n_total: int,
                            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if plan.sp_draw_n.size == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    ii = rng.integers(0, plan.sp_draw_n) + plan.sp_draw_lo
    jj = rng.integers(0, plan.sp_draw_n) + plan.sp_draw_lo
    last = plan.sp_pos_keys.size - 1
    for _ in range(64):
        keys = ii * n_total + jj
        hit = np.minimum(np.searchsorted(plan.sp_pos_keys, keys), last)
        bad = plan.sp_pos_keys[hit] == keys
        if not bad.any():
            break
        ii[bad] = rng.integers(0, plan.sp_draw_n[bad]) + plan.sp_draw_lo[bad]
        jj[bad] = rng.integers(0, plan.sp_draw_n[bad]) + plan.sp_draw_lo[bad]
    return ii, jj


def _draw_chain_negatives(plan: ReconPlan,
                          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    ii = rng.integers(0, plan.ch_draw_k)
    jj = rng.integers(0, plan.ch_draw_k)
    for _ in range(64):
        bad = jj == ii + 1
        if not bad.any():
            break
        ii[bad] = rng.integers(0, plan.ch_draw_k[bad])
        jj[bad] = rng.integers(0, plan.ch_draw_k[bad])
    rows_i = plan.flat_members[plan.ch_draw_start + ii]
    rows_j = plan.flat_members[plan.ch_draw_start + jj]
    return rows_i, rows_j


def _recon_sampled(z: Tensor, pw: PackedWindow, rng: np.random.Generator) -> Tensor:
    plan = pw.plan()
    if plan.pos_i.size == 0:
        return constant(np.zeros((1, 1)))
    sp_i, sp_j = _draw_spatial_negatives(plan, pw.n_rows, rng)
    ch_i, ch_j = _draw_chain_negatives(plan, rng)
    ii = np.concatenate([plan.pos_i, sp_i, ch_i])
    jj = np.concatenate([plan.pos_j, sp_j, ch_j])
    yy = np.concatenate([np.ones(plan.pos_i.size),
                         np.zeros(sp_i.size + ch_i.size)]).reshape(-1, 1)
    ww = np.concatenate([np.ones(plan.pos_i.size), plan.sp_draw_w,
                         plan.ch_draw_w]).reshape(-1, 1)
    pred = sigmoid(rowdot(gather_rows(z, ii), gather_rows(z, jj)))
    diff = sub(pred, constant(yy))
    return total_sum(mul(mul(diff, diff), constant(ww)))
