"""Detection decoder, dual BEV segmentation decoders, and the multi-task loss.

Detection is set-based: object queries cross-attend to BEV features, each
query emits a class distribution (with background) and box parameters in a
normalized space. Matching is one-to-one by minimal cost; classification
uses a focal loss and regression an L1 over the normalized parameters.
Both segmentation decoders are four 3x3 conv blocks (group norm + ReLU) at
full BEV resolution followed by a 1x1 classifier.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .errors import ConfigError, DimensionError
from .geometry import BevGridSpec, wrap_angle

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
LAMBDA_CLS = 2.0
LAMBDA_REG = 0.25
LAMBDA_SEG = 2.0
BACKGROUND = -1


@dataclass
class Box3D:
    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float
    vx: float = 0.0
    vy: float = 0.0
    class_id: int = BACKGROUND
    score: float = 1.0

    def __post_init__(self):
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ConfigError(f"box dimensions must be positive, got {(self.l, self.w, self.h)}")
        self.yaw = wrap_angle(self.yaw)

    def center_bev(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass
class SegMasks:
    map_logits: T.Tensor     # [n_map, H_bev, W_bev]
    object_logits: T.Tensor  # [n_obj + 1, H_bev, W_bev]


@dataclass
class LossBreakdown:
    cls: float
    reg: float
    seg_map: float
    seg_obj: float
    total: float

    def __post_init__(self):
        recomputed = (LAMBDA_CLS * self.cls + LAMBDA_REG * self.reg
                      + LAMBDA_SEG * (self.seg_map + self.seg_obj))
        if abs(recomputed - self.total) > 1e-9 * max(1.0, abs(self.total)):
            raise ConfigError(f"loss total {self.total} does not recompose from parts ({recomputed})")
        for name in ("cls", "reg", "seg_map", "seg_obj", "total"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss component {name} is negative")


@dataclass
class HeadConfig:
    channels: int = 256
    n_obj: int = 4
    n_map: int = 7
    n_queries: int = 200
    decoder_layers: int = 2
    attn_heads: int = 4
    ffn_width: int = 0
    seg_groups: int = 8
    dim_scale: float = 10.0   # box size normalizer (meters)
    vel_scale: float = 10.0   # velocity normalizer (m/s)
    with_velocity: bool = False

    def __post_init__(self):
        if self.ffn_width == 0:
            self.ffn_width = 2 * self.channels
        if self.channels % self.attn_heads != 0:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.attn_heads}")
        if self.channels % self.seg_groups != 0:
            raise ConfigError(f"channels {self.channels} not divisible by seg groups {self.seg_groups}")

    @property
    def n_box(self) -> int:
        return 10 if self.with_velocity else 8

    @property
    def n_cls(self) -> int:
        return self.n_obj + 1  # foreground classes + background


@dataclass
class DetOutputs:
    cls_logits: T.Tensor  # [n_q, n_obj + 1]
    box_norm: T.Tensor    # [n_q, n_box], positions/sizes already squashed


# ---------------------------------------------------------------------------
# box parameter coding


def encode_box(box: Box3D, grid: BevGridSpec, cfg: HeadConfig) -> np.ndarray:
    """Box3D -> normalized regression target."""
    x0, x1 = grid.x_range
    y0, y1 = grid.y_range
    vec = [
        (box.x - x0) / (x1 - x0),
        (box.y - y0) / (y1 - y0),
        box.z / grid.z_max,
        box.l / cfg.dim_scale,
        box.w / cfg.dim_scale,
        box.h / cfg.dim_scale,
        math.sin(box.yaw),
        math.cos(box.yaw),
    ]
    if cfg.with_velocity:
        vec += [box.vx / cfg.vel_scale, box.vy / cfg.vel_scale]
    return np.array(vec)


def decode_box(vec: np.ndarray, grid: BevGridSpec, cfg: HeadConfig,
               class_id: int = BACKGROUND, score: float = 1.0) -> Box3D:
    x0, x1 = grid.x_range
    y0, y1 = grid.y_range
    tiny = 1e-6
    vx = vy = 0.0
    if cfg.with_velocity:
        vx, vy = vec[8] * cfg.vel_scale, vec[9] * cfg.vel_scale
    return Box3D(
        x=x0 + vec[0] * (x1 - x0),
        y=y0 + vec[1] * (y1 - y0),
        z=vec[2] * grid.z_max,
        l=max(vec[3], tiny) * cfg.dim_scale,
        w=max(vec[4], tiny) * cfg.dim_scale,
        h=max(vec[5], tiny) * cfg.dim_scale,
        yaw=math.atan2(vec[6], vec[7]),
        vx=vx, vy=vy, class_id=class_id, score=score,
    )


# ---------------------------------------------------------------------------
# parameters and decoder forward


def _linear(ps: T.ParameterSet, rng, name: str, d_in: int, d_out: int, zero=False):
    ps.create(f"{name}.w", (d_in, d_out), rng, init="zeros" if zero else "xavier")
    ps.create(f"{name}.b", (d_out,), rng, init="zeros")


def _norm(ps: T.ParameterSet, rng, name: str, dim: int):
    ps.add(T.Parameter(f"{name}.gamma", T.Tensor(np.ones(dim), requires_grad=True)))
    ps.create(f"{name}.beta", (dim,), rng, init="zeros")


def init_head_params(ps: T.ParameterSet, cfg: HeadConfig, rng: np.random.Generator):
    c = cfg.channels
    ps.create("heads.det.queries", (cfg.n_queries, c), rng, init="normal", scale=0.02)
    for layer in range(cfg.decoder_layers):
        pre = f"heads.det.l{layer}"
        for blk in ("self", "cross"):
            _linear(ps, rng, f"{pre}.{blk}.q", c, c)
            _linear(ps, rng, f"{pre}.{blk}.k", c, c)
            _linear(ps, rng, f"{pre}.{blk}.v", c, c)
            _linear(ps, rng, f"{pre}.{blk}.o", c, c, zero=True)
        _norm(ps, rng, f"{pre}.norm1", c)
        _norm(ps, rng, f"{pre}.norm2", c)
        _linear(ps, rng, f"{pre}.ffn.fc1", c, cfg.ffn_width)
        _linear(ps, rng, f"{pre}.ffn.fc2", cfg.ffn_width, c, zero=True)
        _norm(ps, rng, f"{pre}.norm3", c)
    _linear(ps, rng, "heads.det.cls", c, cfg.n_cls)
    _linear(ps, rng, "heads.det.box", c, cfg.n_box)
    for head, n_out in (("map", cfg.n_map), ("obj", cfg.n_obj + 1)):
        for k in range(4):
            ps.create(f"heads.seg.{head}.conv{k}.w", (c, c, 3, 3), rng, init="xavier")
            ps.create(f"heads.seg.{head}.conv{k}.b", (c,), rng, init="zeros")
            _norm(ps, rng, f"heads.seg.{head}.gn{k}", c)
        ps.create(f"heads.seg.{head}.cls.w", (n_out, c, 1, 1), rng, init="xavier")
        ps.create(f"heads.seg.{head}.cls.b", (n_out,), rng, init="zeros")


def _apply_linear(x: T.Tensor, ps: T.ParameterSet, name: str) -> T.Tensor:
    w = ps[f"{name}.w"]
    if x.shape[-1] != w.shape[0]:
        raise ConfigError(f"{name}: input width {x.shape[-1]} does not match weight {w.shape}")
    return T.matmul(x, w) + ps[f"{name}.b"]


def _mha(x: T.Tensor, kv: T.Tensor, ps: T.ParameterSet, prefix: str, heads: int) -> T.Tensor:
    m, c = x.shape
    n = kv.shape[0]
    hd = c // heads
    q = _apply_linear(x, ps, f"{prefix}.q").reshape(m, heads, hd).transpose(1, 0, 2)
    k = _apply_linear(kv, ps, f"{prefix}.k").reshape(n, heads, hd).transpose(1, 2, 0)
    v = _apply_linear(kv, ps, f"{prefix}.v").reshape(n, heads, hd).transpose(1, 0, 2)
    scores = T.matmul(q, k) * (1.0 / math.sqrt(hd))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v).transpose(1, 0, 2).reshape(m, c)
    return x + _apply_linear(ctx, ps, f"{prefix}.o")


def detect_forward(bev: T.Tensor, params: T.ParameterSet, cfg: HeadConfig) -> DetOutputs:
    """Object queries attend to BEV tokens; returns logits and squashed boxes."""
    x = params["heads.det.queries"]
    if x.shape[0] != cfg.n_queries:
        raise ConfigError(f"query bank {x.shape} does not match n_queries {cfg.n_queries}")
    for layer in range(cfg.decoder_layers):
        pre = f"heads.det.l{layer}"
        x = T.layer_norm(_mha(x, x, params, f"{pre}.self", cfg.attn_heads),
                         params[f"{pre}.norm1.gamma"], params[f"{pre}.norm1.beta"])
        x = T.layer_norm(_mha(x, bev, params, f"{pre}.cross", cfg.attn_heads),
                         params[f"{pre}.norm2.gamma"], params[f"{pre}.norm2.beta"])
        f1 = T.relu(_apply_linear(x, params, f"{pre}.ffn.fc1"))
        x = T.layer_norm(x + _apply_linear(f1, params, f"{pre}.ffn.fc2"),
                         params[f"{pre}.norm3.gamma"], params[f"{pre}.norm3.beta"])
    cls_logits = _apply_linear(x, params, "heads.det.cls")
    raw = _apply_linear(x, params, "heads.det.box")
    squash_mask = np.zeros((cfg.n_queries, cfg.n_box), dtype=bool)
    squash_mask[:, :6] = True
    squashed = T.sigmoid(raw)
    box_norm = T.masked_fill(squashed, squash_mask, 0.0) + T.masked_fill(raw, ~squash_mask, 0.0)
    return DetOutputs(cls_logits=cls_logits, box_norm=box_norm)


def detect(bev: T.Tensor, n_q: int, params: T.ParameterSet, cfg: HeadConfig,
           grid: BevGridSpec) -> list[Box3D]:
    """Decode every query into a Box3D; background argmax keeps class_id -1."""
    if n_q != cfg.n_queries:
        raise ConfigError(f"n_q {n_q} != configured query bank {cfg.n_queries}")
    out = detect_forward(bev, params, cfg)
    probs = T.softmax(out.cls_logits, axis=1).data
    boxes = []
    for i in range(n_q):
        best = int(np.argmax(probs[i]))
        cls = BACKGROUND if best == cfg.n_obj else best
        boxes.append(decode_box(out.box_norm.data[i], grid, cfg, class_id=cls,
                                score=float(probs[i, best])))
    return boxes


# ---------------------------------------------------------------------------
# bipartite matching


def hungarian_match(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimal-cost one-to-one assignment of rows (GT) to columns (preds).

    Among equal-cost optima, returns the lexicographically smallest column
    sequence ordered by row index (ties resolved toward low indices).
    """
    cost = np.asarray(cost, dtype=np.float64)
    g, q = cost.shape if cost.ndim == 2 else (0, 0)
    if g == 0:
        return []
    if g > q:
        raise DimensionError(f"need at least as many predictions as GTs: {cost.shape}")
    rows, cols = linear_sum_assignment(cost)
    best = float(cost[rows, cols].sum())
    tol = 1e-9 * max(1.0, abs(best))
    chosen: list[int] = []
    prefix = 0.0
    # fix rows in order; the first column (ascending) that still admits an
    # optimal completion is the lexicographic choice for this row
    for i in range(g):
        remaining_rows = list(range(i + 1, g))
        accepted = None
        for j in range(q):
            if j in chosen:
                continue
            if remaining_rows:
                free = [c for c in range(q) if c not in chosen and c != j]
                sub = cost[np.ix_(remaining_rows, free)]
                r2, c2 = linear_sum_assignment(sub)
                completion = float(sub[r2, c2].sum())
            else:
                completion = 0.0
            if prefix + cost[i, j] + completion <= best + tol:
                accepted = j
                break
        if accepted is None:  # cannot happen for a consistent prefix; be safe
            accepted = int(cols[np.where(rows == i)[0][0]])
        chosen.append(accepted)
        prefix += cost[i, accepted]
    return [(i, j) for i, j in enumerate(chosen)]


def match_cost_matrix(det: DetOutputs, gt_classes: np.ndarray, gt_boxnorm: np.ndarray,
                      lambda_cls: float = LAMBDA_CLS, lambda_reg: float = LAMBDA_REG) -> np.ndarray:
    """cost[i, j] = lambda_cls * (-p_j(class_i)) + lambda_reg * L1(box_j, box_i)."""
    probs = T.softmax(det.cls_logits, axis=1).data
    boxes = det.box_norm.data
    g = len(gt_classes)
    cost = np.zeros((g, boxes.shape[0]))
    for i in range(g):
        cls_cost = -probs[:, int(gt_classes[i])]
        l1 = np.abs(boxes - gt_boxnorm[i]).sum(axis=1)
        cost[i] = lambda_cls * cls_cost + lambda_reg * l1
    return cost


# ---------------------------------------------------------------------------
# losses


def focal_terms(cls_logits: T.Tensor, targets: np.ndarray, n_cls: int,
                gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_ALPHA) -> T.Tensor:
    """Mean focal loss over all queries; background queries weigh 1 - alpha."""
    n_q = cls_logits.shape[0]
    onehot = np.zeros((n_q, n_cls))
    onehot[np.arange(n_q), targets] = 1.0
    alpha_t = np.where(targets == n_cls - 1, 1.0 - alpha, alpha)
    logp = T.log_softmax(cls_logits, axis=1)
    logp_t = (logp * T.Tensor(onehot)).sum(axis=1)
    p_t = T.exp(logp_t)
    focus = T.power(1.0 + (-1.0 * p_t), gamma) if gamma != 0.0 else T.Tensor(np.ones(n_q))
    per_query = focus * logp_t * T.Tensor(-alpha_t)
    return per_query.mean()


def detection_loss(det: DetOutputs, gt_classes: np.ndarray, gt_boxnorm: np.ndarray,
                   assignment: list[tuple[int, int]], cfg: HeadConfig,
                   gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_ALPHA):
    """(cls, reg) tensors; weights are applied by total_loss."""
    n_q = det.cls_logits.shape[0]
    targets = np.full(n_q, cfg.n_obj, dtype=np.int64)  # background by default
    for gi, qj in assignment:
        targets[qj] = int(gt_classes[gi])
    cls = focal_terms(det.cls_logits, targets, cfg.n_cls, gamma=gamma, alpha=alpha)
    if assignment:
        pred_idx = np.array([qj for _, qj in assignment], dtype=np.int64)
        gt_mat = np.stack([gt_boxnorm[gi] for gi, _ in assignment])
        matched = T.take(det.box_norm, pred_idx, axis=0)
        reg = T.absolute(matched + T.Tensor(-gt_mat)).sum() * (1.0 / max(1, len(gt_classes)))
    else:
        reg = T.Tensor(0.0)
    return cls, reg


def segmentation_loss(seg: SegMasks, gt_map: np.ndarray, gt_obj: np.ndarray):
    """Per-pixel softmax cross-entropy for each head, mean-reduced.

    Ground truths are one-hot channel rasters matching the logits' shapes.
    """
    losses = []
    for logits, gt in ((seg.map_logits, gt_map), (seg.object_logits, gt_obj)):
        k, h, w = logits.shape
        if gt.shape != (k, h, w):
            raise DimensionError(f"gt mask {gt.shape} does not match logits {logits.shape}")
        flat = logits.reshape(k, h * w).transpose(1, 0)
        logp = T.log_softmax(flat, axis=1)
        onehot = T.Tensor(gt.reshape(k, h * w).T)
        losses.append((logp * onehot).sum() * (-1.0 / (h * w)))
    return losses[0], losses[1]


def total_loss(det: tuple[T.Tensor, T.Tensor], seg: tuple[T.Tensor, T.Tensor],
               lambda_cls: float = LAMBDA_CLS, lambda_reg: float = LAMBDA_REG,
               lambda_seg: float = LAMBDA_SEG):
    """Combined multi-task objective; returns (tensor, breakdown)."""
    cls, reg = det
    seg_map, seg_obj = seg
    total = cls * lambda_cls + reg * lambda_reg + (seg_map + seg_obj) * lambda_seg
    breakdown = LossBreakdown(cls=cls.item(), reg=reg.item(), seg_map=seg_map.item(),
                              seg_obj=seg_obj.item(), total=total.item())
    return total, breakdown


# ---------------------------------------------------------------------------
# segmentation decoders


def _seg_branch(x: T.Tensor, params: T.ParameterSet, cfg: HeadConfig, head: str) -> T.Tensor:
    for k in range(4):
        pre = f"heads.seg.{head}"
        x = T.conv2d(x, params[f"{pre}.conv{k}.w"], params[f"{pre}.conv{k}.b"])
        x = T.group_norm(x, params[f"{pre}.gn{k}.gamma"], params[f"{pre}.gn{k}.beta"],
                         groups=cfg.seg_groups)
        x = T.relu(x)
    return T.conv2d(x, params[f"heads.seg.{head}.cls.w"], params[f"heads.seg.{head}.cls.b"])


def seg_decode(bev_features: T.Tensor, params: T.ParameterSet, cfg: HeadConfig,
               cells: tuple[int, int]) -> SegMasks:
    """Both decoders on the shared [num_cells, C] BEV map at full resolution."""
    h, w = cells
    p, c = bev_features.shape
    if p != h * w:
        raise DimensionError(f"{p} cells do not tile {h}x{w}")
    x = bev_features.reshape(h, w, c).transpose(2, 0, 1)
    return SegMasks(
        map_logits=_seg_branch(x, params, cfg, "map"),
        object_logits=_seg_branch(x, params, cfg, "obj"),
    )


def resize_bilinear(logits: T.Tensor, out_hw: tuple[int, int]) -> T.Tensor:
    """Align logits with differently-sized label maps when needed."""
    k, h, w = logits.shape
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return logits
    ys = (np.arange(oh) + 0.5) * h / oh - 0.5
    xs = (np.arange(ow) + 0.5) * w / ow - 0.5
    gx, gy = np.meshgrid(np.clip(xs, 0, w - 1), np.clip(ys, 0, h - 1))
    out = T.bilinear_sample(logits, T.Tensor(gx.reshape(-1)), T.Tensor(gy.reshape(-1)))
    return out.transpose(1, 0).reshape(k, oh, ow)


# ---------------------------------------------------------------------------
# detection serialization


def detections_to_json(boxes: list[Box3D]) -> list[dict]:
    return [
        {
            "class": int(b.class_id),
            "score": float(b.score),
            "box": [float(v) for v in (b.x, b.y, b.z, b.l, b.w, b.h, b.yaw)],
            "vel": [float(b.vx), float(b.vy)],
        }
        for b in boxes
    ]


def detections_from_json(items: list[dict]) -> list[Box3D]:
    out = []
    for d in items:
        x, y, z, l, w, h, yaw = d["box"]
        vx, vy = d.get("vel", [0.0, 0.0])
        out.append(Box3D(x, y, z, l, w, h, yaw, vx, vy, class_id=int(d["class"]),
                         score=float(d["score"])))
    return out


def save_detections(path, boxes: list[Box3D]):
    with open(path, "w") as fh:
        json.dump(detections_to_json(boxes), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_detections(path) -> list[Box3D]:
    with open(path) as fh:
        return detections_from_json(json.load(fh))
