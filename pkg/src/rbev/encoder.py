"""Multi-camera to BEV fusion encoder.

Each layer runs temporal self-attention over the previous BEV maps, then a
relation-weighted spatial cross-attention step that (1) scores every visible
camera-to-cell edge with a graph attention network over node features and
geometric edge descriptors, (2) normalizes scores into per-cell fusion
weights with a visibility-masked softmax, and (3) convexly combines
deformably-sampled per-camera features, followed by a feed-forward block.
Residual + normalization follow every sub-block.

All reductions across the camera axis use order-canonical sums, so encoder
outputs and fusion weights are bitwise equivariant under camera permutation
and unchanged by appended dummy cameras.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .geometry import (BevGridSpec, CameraRig, VisibilityMask, point_sampling,
                       reference_pillars, visibility)
from .graph import RelationGraph, build_graph

NEG_INF = float("-inf")


@dataclass
class GatConfig:
    layers: int = 3
    heads: int = 4
    hidden: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigError(f"gat hidden {self.hidden} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.layers < 1:
            raise ConfigError("gat needs at least one layer")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


@dataclass
class EncoderConfig:
    layers: int = 6
    channels: int = 256
    n_ref: int = 8
    temporal_frames: int = 2
    attn_heads: int = 4
    ffn_width: int = 0  # 0 means 2 * channels
    sample_points: int = 4

    def __post_init__(self):
        if self.ffn_width == 0:
            self.ffn_width = 2 * self.channels
        for name in ("layers", "channels", "n_ref", "temporal_frames", "attn_heads",
                     "ffn_width", "sample_points"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.channels % self.attn_heads != 0:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.attn_heads}")
        if self.channels % 4 != 0:
            raise ConfigError(f"channels must be a multiple of 4 for the grid embedding, got {self.channels}")


@dataclass
class FusionField:
    """Per-cell per-camera fusion logits and normalized weights."""

    logits: T.Tensor   # [num_cells, num_cams], -inf where no edge
    weights: T.Tensor  # [num_cells, num_cams], exact zeros off-edge
    uncovered: np.ndarray = field(default=None)  # [num_cells] bool, no visible camera


def sinusoidal_grid_embedding(cells: tuple[int, int], channels: int) -> np.ndarray:
    """Fixed positional code [num_cells, channels]: half row phase, half column."""
    h, w = cells
    half = channels // 2
    quarter = half // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(quarter) / max(1, quarter))
    out = np.zeros((h, w, channels))
    rows = np.arange(h)[:, None] * freqs[None, :]
    cols = np.arange(w)[:, None] * freqs[None, :]
    out[..., 0:2 * quarter:2] = np.sin(rows)[:, None, :]
    out[..., 1:2 * quarter:2] = np.cos(rows)[:, None, :]
    out[..., half::2] = np.sin(cols)[None, :, :]
    out[..., half + 1::2] = np.cos(cols)[None, :, :]
    return out.reshape(h * w, channels)


# ---------------------------------------------------------------------------
# parameter construction


def _linear(ps: T.ParameterSet, rng, name: str, d_in: int, d_out: int, zero: bool = False):
    ps.create(f"{name}.w", (d_in, d_out), rng, init="zeros" if zero else "xavier")
    ps.create(f"{name}.b", (d_out,), rng, init="zeros")


def _norm(ps: T.ParameterSet, rng, name: str, dim: int):
    ps.add(T.Parameter(f"{name}.gamma", T.Tensor(np.ones(dim), requires_grad=True)))
    ps.create(f"{name}.beta", (dim,), rng, init="zeros")


def init_encoder_params(ps: T.ParameterSet, grid: BevGridSpec, enc: EncoderConfig,
                        gat: GatConfig, rng: np.random.Generator):
    c = enc.channels
    ps.create("encoder.bev_query", (grid.num_cells, c), rng, init="normal", scale=0.02)
    for layer in range(enc.layers):
        pre = f"encoder.l{layer}"
        _linear(ps, rng, f"{pre}.tsa.q", c, c)
        _linear(ps, rng, f"{pre}.tsa.k", c, c)
        _linear(ps, rng, f"{pre}.tsa.v", c, c)
        _linear(ps, rng, f"{pre}.tsa.o", c, c, zero=True)
        _norm(ps, rng, f"{pre}.norm1", c)
        init_gat_params(ps, f"{pre}.gat", c, gat, rng)
        _linear(ps, rng, f"{pre}.deform.off", c, enc.n_ref * enc.sample_points * 2, zero=True)
        _linear(ps, rng, f"{pre}.deform.att", c, enc.n_ref * enc.sample_points, zero=True)
        _norm(ps, rng, f"{pre}.norm2", c)
        _linear(ps, rng, f"{pre}.ffn.fc1", c, enc.ffn_width)
        _linear(ps, rng, f"{pre}.ffn.fc2", enc.ffn_width, c, zero=True)
        _norm(ps, rng, f"{pre}.norm3", c)


def init_gat_params(ps: T.ParameterSet, prefix: str, channels: int, gat: GatConfig,
                    rng: np.random.Generator):
    _linear(ps, rng, f"{prefix}.proj", channels, gat.hidden)
    for k in range(gat.layers):
        pre = f"{prefix}.k{k}"
        ps.create(f"{pre}.w_dst", (gat.hidden, gat.hidden), rng, init="xavier")
        ps.create(f"{pre}.w_src", (gat.hidden, gat.hidden), rng, init="xavier")
        ps.create(f"{pre}.w_edge", (8, gat.hidden), rng, init="xavier")
        ps.create(f"{pre}.bias", (gat.hidden,), rng, init="zeros")
        ps.create(f"{pre}.att", (gat.heads, gat.head_dim), rng, init="xavier")
    ps.create(f"{prefix}.out.w_cell", (gat.hidden, 1), rng, init="zeros")
    ps.create(f"{prefix}.out.w_cam", (gat.hidden, 1), rng, init="zeros")
    ps.create(f"{prefix}.out.w_edge", (8, 1), rng, init="zeros")
    ps.create(f"{prefix}.out.b", (1,), rng, init="zeros")


def _apply_linear(x: T.Tensor, ps: T.ParameterSet, name: str) -> T.Tensor:
    w = ps[f"{name}.w"]
    if x.shape[-1] != w.shape[0]:
        raise ConfigError(f"{name}: input width {x.shape[-1]} does not match weight {w.shape}")
    return T.matmul(x, w) + ps[f"{name}.b"]


def _apply_norm(x: T.Tensor, ps: T.ParameterSet, name: str) -> T.Tensor:
    return T.layer_norm(x, ps[f"{name}.gamma"], ps[f"{name}.beta"])


# ---------------------------------------------------------------------------
# graph attention scoring


def gat_score(graph: RelationGraph, params: T.ParameterSet, cfg: GatConfig | None = None,
              prefix: str = "gat", train: bool = False,
              rng: np.random.Generator | None = None) -> T.Tensor:
    """Dense per-cell per-camera logits; entries without an edge are -inf."""
    cfg = cfg or GatConfig()
    mask = graph.visibility.m
    p, n = mask.shape
    cells = _apply_linear(graph.bev_nodes, params, f"{prefix}.proj")
    cams = _apply_linear(graph.cam_nodes, params, f"{prefix}.proj")
    g_edges = T.Tensor(graph.attr_table.reshape(p * n, 8))
    d, heads, hd = cfg.hidden, cfg.heads, cfg.head_dim
    mask3 = np.broadcast_to(mask[:, :, None], (p, n, heads))
    drop_rng = rng if train else None

    for k in range(cfg.layers):
        pre = f"{prefix}.k{k}"
        a_dst = T.matmul(cells, params[f"{pre}.w_dst"])   # [P, D]
        a_src = T.matmul(cams, params[f"{pre}.w_src"])    # [N, D]
        a_edge = T.matmul(g_edges, params[f"{pre}.w_edge"]).reshape(p, n, d)
        z = T.broadcast_to(a_dst.reshape(p, 1, d), (p, n, d)) \
            + T.broadcast_to(a_src.reshape(1, n, d), (p, n, d)) \
            + a_edge + params[f"{pre}.bias"]
        act = T.leaky_relu(z.reshape(p, n, heads, hd), 0.2)
        e = (act * params[f"{pre}.att"]).sum(axis=-1)      # [P, N, heads]
        alpha, _ = T.softmax_masked(e, mask3, axis=1)
        msg = (T.broadcast_to(a_src.reshape(1, n, d), (p, n, d)) + a_edge).reshape(p, n, heads, hd)
        weighted = msg * T.broadcast_to(alpha.reshape(p, n, heads, 1), (p, n, heads, hd))
        agg = weighted.sum(axis=1, canonical=True).reshape(p, d)
        cells = T.elu(agg + cells)
        cells = T.dropout(cells, cfg.dropout, drop_rng)

    s = T.broadcast_to(T.matmul(cells, params[f"{prefix}.out.w_cell"]).reshape(p, 1), (p, n)) \
        + T.broadcast_to(T.matmul(cams, params[f"{prefix}.out.w_cam"]).reshape(1, n), (p, n)) \
        + T.matmul(g_edges, params[f"{prefix}.out.w_edge"]).reshape(p, n) \
        + T.broadcast_to(params[f"{prefix}.out.b"], (p, n))
    return T.masked_fill(s, mask, NEG_INF)


def fusion_weights(logits: T.Tensor, vis: VisibilityMask) -> FusionField:
    """Visibility-masked softmax across cameras; uncovered cells get all zeros."""
    if logits.shape != vis.m.shape:
        raise DimensionError(f"logits {logits.shape} vs visibility {vis.m.shape}")
    weights, empty = T.softmax_masked(logits, vis.m, axis=1)
    return FusionField(logits=logits, weights=weights, uncovered=empty)


# ---------------------------------------------------------------------------
# deformable sampling


def _deform_batch(queries: T.Tensor, uv_norm: np.ndarray, valid: np.ndarray, fmap: T.Tensor,
                  params: T.ParameterSet, prefix: str, n_ref: int, n_pts: int) -> T.Tensor:
    """Deformable read of one camera's [C, Hf, Wf] map for every cell.

    uv_norm: [P, n_ref, 2] projected anchors in normalized [0,1] image coords.
    valid:   [P, n_ref] anchor validity; invalid anchors contribute zero.
    Offsets and per-point attention come from a linear map of each query;
    attention is normalized per anchor and the anchor sum is scaled by
    1/n_ref so a constant feature field passes through unchanged.
    """
    p, c = queries.shape
    cf, hf, wf = fmap.shape
    offsets = _apply_linear(queries, params, f"{prefix}.off").reshape(p, n_ref, n_pts, 2)
    att_logits = _apply_linear(queries, params, f"{prefix}.att").reshape(p, n_ref, n_pts)
    att = T.softmax(att_logits, axis=-1)
    base_x = uv_norm[:, :, 0] * wf - 0.5
    base_y = uv_norm[:, :, 1] * hf - 0.5
    bx = T.broadcast_to(T.Tensor(base_x).reshape(p, n_ref, 1), (p, n_ref, n_pts))
    by = T.broadcast_to(T.Tensor(base_y).reshape(p, n_ref, 1), (p, n_ref, n_pts))
    sx = bx + _slice_last(offsets, 0)
    sy = by + _slice_last(offsets, 1)
    samples = T.bilinear_sample(fmap, sx.reshape(p * n_ref * n_pts), sy.reshape(p * n_ref * n_pts))
    samples = samples.reshape(p, n_ref, n_pts, cf)
    weighted = samples * T.broadcast_to(att.reshape(p, n_ref, n_pts, 1), (p, n_ref, n_pts, cf))
    per_ref = weighted.sum(axis=2)  # [P, n_ref, C]
    gated = per_ref * T.Tensor(np.repeat(valid[:, :, None], cf, axis=2).astype(np.float64))
    return gated.sum(axis=1) * (1.0 / n_ref)


def _slice_last(t: T.Tensor, index: int) -> T.Tensor:
    """Select one component of the trailing axis, keeping the rest."""
    lead = int(np.prod(t.shape[:-1]))
    last = t.shape[-1]
    flat = t.reshape(lead, last)
    sel = np.zeros((last, 1))
    sel[index, 0] = 1.0
    return T.matmul(flat, T.Tensor(sel)).reshape(t.shape[:-1])


def deform_sample(query: T.Tensor, ref_uvs, feature_map: T.Tensor, params: T.ParameterSet,
                  prefix: str = "deform", n_pts: int = 4, valid=None) -> T.Tensor:
    """Single-cell contract: query [C], ref_uvs [(u, v), ...] normalized."""
    uv = np.asarray(ref_uvs, dtype=np.float64).reshape(1, -1, 2)
    n_ref = uv.shape[1]
    v = np.ones((1, n_ref), dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(1, n_ref)
    out = _deform_batch(query.reshape(1, -1), uv, v, feature_map, params, prefix, n_ref, n_pts)
    return out.reshape(query.shape[0])


# ---------------------------------------------------------------------------
# spatial fusion (per-layer cross-attention step)


@dataclass
class FusionStep:
    queries: T.Tensor      # post residual+norm
    fused: T.Tensor        # pre-residual convex combination [P, C]
    field: FusionField
    per_camera: list       # per-camera sampled features (None for dummies)


def resca(queries: T.Tensor, feature_maps: list[T.Tensor], pillar_uv_norm: np.ndarray,
          validity: np.ndarray, graph: RelationGraph, params: T.ParameterSet,
          enc: EncoderConfig, gat: GatConfig, prefix: str = "encoder.l0",
          train: bool = False, rng: np.random.Generator | None = None,
          rigs: list[CameraRig] | None = None) -> FusionStep:
    """Relation-weighted fusion of all visible views into each cell.

    pillar_uv_norm: [N, P, n_ref, 2] normalized coords; validity [N, P, n_ref].
    Cells without any visible camera keep their query (zero update) through
    the residual path.
    """
    p, c = queries.shape
    n = len(feature_maps)
    vis = graph.visibility
    logits = gat_score(graph, params, gat, prefix=f"{prefix}.gat", train=train, rng=rng)
    field = fusion_weights(logits, vis)
    per_cam = []
    sampled = []
    for i in range(n):
        is_dummy = rigs[i].is_dummy if rigs is not None else not validity[i].any()
        if is_dummy:
            per_cam.append(None)
            sampled.append(T.Tensor(np.zeros((p, 1, c))))
            continue
        f_i = _deform_batch(queries, pillar_uv_norm[i], validity[i], feature_maps[i],
                            params, f"{prefix}.deform", enc.n_ref, enc.sample_points)
        per_cam.append(f_i)
        sampled.append(f_i.reshape(p, 1, c))
    stack = T.concat(sampled, axis=1)  # [P, N, C]
    w = T.broadcast_to(field.weights.reshape(p, n, 1), (p, n, c))
    fused = (stack * w).sum(axis=1, canonical=True)
    updated = _apply_norm(queries + fused, params, f"{prefix}.norm2")
    return FusionStep(queries=updated, fused=fused, field=field, per_camera=per_cam)


# ---------------------------------------------------------------------------
# temporal self-attention


def _neighbor_table(cells: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """3x3 neighborhood cell indices [P, 9] and validity [P, 9]."""
    h, w = cells
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    idx = np.zeros((h * w, 9), dtype=np.int64)
    ok = np.zeros((h * w, 9), dtype=bool)
    k = 0
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            nr = rr + dr
            nc = cc + dc
            inside = (nr >= 0) & (nr < h) & (nc >= 0) & (nc < w)
            flat = np.where(inside, nr * w + nc, 0)
            idx[:, k] = flat.reshape(-1)
            ok[:, k] = inside.reshape(-1)
            k += 1
    return idx, ok


def temporal_self_attention(queries: T.Tensor, history: list[T.Tensor], cells: tuple[int, int],
                            params: T.ParameterSet, prefix: str, heads: int,
                            max_frames: int) -> T.Tensor:
    """Each cell attends to its 3x3 neighborhood across the history frames.

    Static rigs: no ego-motion warp, cell indices align across frames. Empty
    history substitutes a single zero frame, making the block a pure function
    of the current queries. Returns queries + attention output (pre-norm).
    """
    p, c = queries.shape
    frames = [h for h in history[-max_frames:]] if history else [T.Tensor(np.zeros((p, c)))]
    for f in frames:
        if f.shape != (p, c):
            raise DimensionError(f"history frame shape {f.shape} != {(p, c)}")
    t_eff = len(frames)
    idx, ok = _neighbor_table(cells)
    s = 9 * t_eff
    token_idx = np.concatenate([idx + t * p for t in range(t_eff)], axis=1).reshape(-1)
    token_ok = np.concatenate([ok for _ in range(t_eff)], axis=1)
    bank = T.concat(frames, axis=0)  # [t_eff * P, C]
    tokens = T.take(bank, token_idx, axis=0).reshape(p, s, c)

    hd = c // heads
    q = _apply_linear(queries, params, f"{prefix}.q").reshape(p, heads, 1, hd)
    k = _apply_linear(tokens.reshape(p * s, c), params, f"{prefix}.k") \
        .reshape(p, s, heads, hd).transpose(0, 2, 3, 1)  # [P, heads, hd, S]
    v = _apply_linear(tokens.reshape(p * s, c), params, f"{prefix}.v") \
        .reshape(p, s, heads, hd).transpose(0, 2, 1, 3)  # [P, heads, S, hd]
    scores = T.matmul(q, k) * (1.0 / math.sqrt(hd))      # [P, heads, 1, S]
    mask = np.broadcast_to(token_ok[:, None, None, :], scores.shape)
    attn, _ = T.softmax_masked(scores, mask, axis=-1)
    ctx = T.matmul(attn, v).reshape(p, c)
    out = _apply_linear(ctx, params, f"{prefix}.o")
    return queries + out


# ---------------------------------------------------------------------------
# full encoder


@dataclass
class EncodeResult:
    bev: T.Tensor                 # [num_cells, channels]
    fusion: FusionField           # from the final layer
    vis: VisibilityMask
    fields: list[FusionField]


def encode(rigs: list[CameraRig], feature_maps: list[T.Tensor], history: list[T.Tensor],
           grid: BevGridSpec, enc: EncoderConfig, gat: GatConfig, params: T.ParameterSet,
           train: bool = False, rng: np.random.Generator | None = None) -> EncodeResult:
    """Run the full L-layer encoding loop over projected reference pillars."""
    if len(rigs) != len(feature_maps):
        raise DimensionError(f"{len(rigs)} rigs vs {len(feature_maps)} feature maps")
    if grid.n_ref != enc.n_ref:
        raise ConfigError(f"grid has {grid.n_ref} anchor heights but encoder expects {enc.n_ref}")
    for f in feature_maps:
        if f.shape[0] != enc.channels:
            raise ConfigError(f"feature map channels {f.shape[0]} != encoder channels {enc.channels}")

    # geometry: computed once, reused by every layer
    pillars = reference_pillars(grid)
    uv, valid = point_sampling(pillars, rigs)
    vis = visibility(valid)
    n = len(rigs)
    p = grid.num_cells
    uv_norm = np.zeros((n, p, enc.n_ref, 2))
    val = np.zeros((n, p, enc.n_ref), dtype=bool)
    for i, rig in enumerate(rigs):
        iw, ih = rig.image_size
        u = uv[i, ..., 0].reshape(enc.n_ref, p).T / iw
        v = uv[i, ..., 1].reshape(enc.n_ref, p).T / ih
        uv_norm[i, :, :, 0] = u
        uv_norm[i, :, :, 1] = v
        val[i] = valid[i].reshape(enc.n_ref, p).T

    pe = T.Tensor(sinusoidal_grid_embedding(grid.cells, enc.channels))
    b = params["encoder.bev_query"] + pe
    hist = [h if isinstance(h, T.Tensor) else T.Tensor(h) for h in history]

    fields = []
    for layer in range(enc.layers):
        pre = f"encoder.l{layer}"
        b = temporal_self_attention(b, hist, grid.cells, params, f"{pre}.tsa",
                                    enc.attn_heads, enc.temporal_frames)
        b = _apply_norm(b, params, f"{pre}.norm1")
        graph = build_graph(rigs, feature_maps, b, vis, grid)
        step = resca(b, feature_maps, uv_norm, val, graph, params, enc, gat,
                     prefix=pre, train=train, rng=rng, rigs=rigs)
        b = step.queries
        fields.append(step.field)
        f1 = T.relu(_apply_linear(b, params, f"{pre}.ffn.fc1"))
        b = _apply_norm(b + _apply_linear(f1, params, f"{pre}.ffn.fc2"), params, f"{pre}.norm3")
    return EncodeResult(bev=b, fusion=fields[-1], vis=vis, fields=fields)
