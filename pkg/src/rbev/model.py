"""Full pipeline assembly: backbone, fusion encoder, heads, toy training.

All randomness flows from one integer seed through named substreams (scene,
init, masking, ...) so each source can be varied independently and every run
is reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import heads as Hd
from . import tensor as T
from .degradation import TRAIN_MASK_PROB, fnv1a64, mask_views_train
from .encoder import EncoderConfig, GatConfig, EncodeResult, encode, init_encoder_params
from .errors import ConfigError, NumericError
from .geometry import BevGridSpec, CameraRig
from .scene import OBJECT_CLASSES, Scene, init_backbone_params, render_view, toy_backbone


def substream(seed: int, name: str) -> np.random.Generator:
    """Named child generator of the run seed."""
    digest = fnv1a64(name)
    return np.random.default_rng(np.random.SeedSequence(
        [int(seed) & (2**64 - 1), digest & 0xFFFFFFFF, digest >> 32]))


@dataclass
class ModelConfig:
    channels: int = 16
    encoder: EncoderConfig = field(default=None)
    gat: GatConfig = field(default=None)
    heads: Hd.HeadConfig = field(default=None)

    def __post_init__(self):
        if self.encoder is None:
            self.encoder = EncoderConfig(layers=2, channels=self.channels, n_ref=8,
                                         temporal_frames=2, attn_heads=4, ffn_width=0,
                                         sample_points=4)
        if self.gat is None:
            self.gat = GatConfig(layers=2, heads=2, hidden=32, dropout=0.1)
        if self.heads is None:
            self.heads = Hd.HeadConfig(channels=self.channels, n_obj=len(OBJECT_CLASSES),
                                       n_map=7, n_queries=20, decoder_layers=2,
                                       attn_heads=4, seg_groups=min(8, self.channels))
        if self.encoder.channels != self.channels or self.heads.channels != self.channels:
            raise ConfigError("encoder/head channel widths must match the model channels")

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        """Full-size profile: 256 channels, 6 layers, 128-wide 3-layer GAT."""
        return cls(channels=256,
                   encoder=EncoderConfig(),
                   gat=GatConfig(),
                   heads=Hd.HeadConfig(channels=256))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        channels = int(d.get("channels", 16))
        enc = d.get("encoder", {})
        gat = d.get("gat", {})
        hd = d.get("heads", {})
        return cls(
            channels=channels,
            encoder=EncoderConfig(
                layers=int(enc.get("layers", 2)),
                channels=channels,
                n_ref=int(enc.get("n_ref", 8)),
                temporal_frames=int(enc.get("temporal_frames", 2)),
                attn_heads=int(enc.get("attn_heads", 4)),
                ffn_width=int(enc.get("ffn_width", 0)),
                sample_points=int(enc.get("sample_points", 4)),
            ),
            gat=GatConfig(
                layers=int(gat.get("layers", 2)),
                heads=int(gat.get("heads", 2)),
                hidden=int(gat.get("hidden", 32)),
                dropout=float(gat.get("dropout", 0.1)),
            ),
            heads=Hd.HeadConfig(
                channels=channels,
                n_obj=int(hd.get("n_obj", len(OBJECT_CLASSES))),
                n_map=int(hd.get("n_map", 7)),
                n_queries=int(hd.get("n_queries", 20)),
                decoder_layers=int(hd.get("decoder_layers", 2)),
                attn_heads=int(hd.get("attn_heads", 4)),
                ffn_width=int(hd.get("ffn_width", 0)),
                seg_groups=int(hd.get("seg_groups", min(8, channels))),
                dim_scale=float(hd.get("dim_scale", 10.0)),
                with_velocity=bool(hd.get("with_velocity", False)),
            ),
        )

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "encoder": {"layers": self.encoder.layers, "n_ref": self.encoder.n_ref,
                        "temporal_frames": self.encoder.temporal_frames,
                        "attn_heads": self.encoder.attn_heads,
                        "ffn_width": self.encoder.ffn_width,
                        "sample_points": self.encoder.sample_points},
            "gat": {"layers": self.gat.layers, "heads": self.gat.heads,
                    "hidden": self.gat.hidden, "dropout": self.gat.dropout},
            "heads": {"n_obj": self.heads.n_obj, "n_map": self.heads.n_map,
                      "n_queries": self.heads.n_queries,
                      "decoder_layers": self.heads.decoder_layers,
                      "attn_heads": self.heads.attn_heads,
                      "ffn_width": self.heads.ffn_width,
                      "seg_groups": self.heads.seg_groups,
                      "dim_scale": self.heads.dim_scale,
                      "with_velocity": self.heads.with_velocity},
        }


@dataclass
class ForwardResult:
    encoded: EncodeResult
    det: Hd.DetOutputs
    seg: Hd.SegMasks
    feature_maps: list


class PerceptionModel:
    """Backbone + encoder + heads over one BEV grid."""

    def __init__(self, grid: BevGridSpec, cfg: ModelConfig, seed: int = 0):
        self.grid = grid
        self.cfg = cfg
        self.seed = seed
        self.params = T.ParameterSet()
        rng = substream(seed, "init")
        init_backbone_params(self.params, cfg.channels, rng)
        init_encoder_params(self.params, grid, cfg.encoder, cfg.gat, rng)
        Hd.init_head_params(self.params, cfg.heads, rng)

    def forward(self, images: list[np.ndarray], rigs: list[CameraRig],
                history: list | None = None, train: bool = False,
                drop_rng: np.random.Generator | None = None) -> ForwardResult:
        if len(images) != len(rigs):
            raise ConfigError(f"{len(images)} images vs {len(rigs)} rigs")
        fmaps = [toy_backbone(T.as_tensor(img), self.params) for img in images]
        enc = encode(rigs, fmaps, history or [], self.grid, self.cfg.encoder, self.cfg.gat,
                     self.params, train=train, rng=drop_rng)
        det = Hd.detect_forward(enc.bev, self.params, self.cfg.heads)
        seg = Hd.seg_decode(enc.bev, self.params, self.cfg.heads, self.grid.cells)
        return ForwardResult(encoded=enc, det=det, seg=seg, feature_maps=fmaps)

    def loss(self, fwd: ForwardResult, gt_boxes: list[Hd.Box3D], gt_map: np.ndarray,
             gt_obj: np.ndarray):
        gt_cls = np.array([b.class_id for b in gt_boxes], dtype=np.int64)
        if len(gt_boxes) > self.cfg.heads.n_queries:
            raise ConfigError(f"{len(gt_boxes)} GT boxes exceed {self.cfg.heads.n_queries} queries")
        if len(gt_boxes):
            gt_box = np.stack([Hd.encode_box(b, self.grid, self.cfg.heads) for b in gt_boxes])
        else:
            gt_box = np.zeros((0, self.cfg.heads.n_box))
        cost = Hd.match_cost_matrix(fwd.det, gt_cls, gt_box)
        assignment = Hd.hungarian_match(cost)
        cls, reg = Hd.detection_loss(fwd.det, gt_cls, gt_box, assignment, self.cfg.heads)
        sm, so = Hd.segmentation_loss(fwd.seg, gt_map, gt_obj)
        return Hd.total_loss((cls, reg), (sm, so))

    def detections(self, fwd: ForwardResult) -> list[Hd.Box3D]:
        probs = T.softmax(fwd.det.cls_logits, axis=1).data
        boxes = []
        n_obj = self.cfg.heads.n_obj
        for i in range(self.cfg.heads.n_queries):
            best = int(np.argmax(probs[i]))
            cls = Hd.BACKGROUND if best == n_obj else best
            boxes.append(Hd.decode_box(fwd.det.box_norm.data[i], self.grid, self.cfg.heads,
                                       class_id=cls, score=float(probs[i, best])))
        return boxes


# ---------------------------------------------------------------------------
# plain gradient-descent training on one scene


def clip_global_norm(params: T.ParameterSet, max_norm: float) -> float:
    total = 0.0
    for p in params.learnable():
        if p.tensor.grad is not None:
            total += float((p.tensor.grad ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params.learnable():
            if p.tensor.grad is not None:
                p.tensor.grad *= scale
    return norm


@dataclass
class TrainRow:
    step: int
    lr: float
    total: float
    cls: float
    reg: float
    seg_map: float
    seg_obj: float


def train_toy(scene: Scene, model: PerceptionModel, steps: int, lr: float = 2e-4,
              p_m: float = TRAIN_MASK_PROB, cosine: bool = False, clip_norm: float = 1.0,
              min_lr_ratio: float = 1e-3) -> list[TrainRow]:
    """Full forward+backward gradient descent on one fixed scene.

    View masking draws from the run's "masking" substream; everything else
    is deterministic, so the loss curve reproduces bit for bit per seed.
    """
    base_images = [render_view(scene, rig).data for rig in scene.rigs]
    is_real = [not rig.is_dummy for rig in scene.rigs]
    gt_boxes = [a.box for a in scene.agents]
    mask_rng = substream(model.seed, "masking")
    rows: list[TrainRow] = []
    for step in range(steps):
        images, _ = mask_views_train(base_images, is_real, p_m, mask_rng)
        fwd = model.forward(images, scene.rigs, train=True)
        total, breakdown = model.loss(fwd, gt_boxes, scene.gt_map, scene.gt_obj)
        if not math.isfinite(breakdown.total):
            raise NumericError(f"non-finite training loss at step {step}")
        model.params.zero_grads()
        total.backward()
        clip_global_norm(model.params, clip_norm)
        if cosine:
            frac = step / max(1, steps - 1)
            lr_t = lr * (min_lr_ratio + (1.0 - min_lr_ratio) * 0.5 * (1.0 + math.cos(math.pi * frac)))
        else:
            lr_t = lr
        for p in model.params.learnable():
            if p.tensor.grad is not None:
                p.tensor.data -= lr_t * p.tensor.grad
        rows.append(TrainRow(step, lr_t, breakdown.total, breakdown.cls, breakdown.reg,
                             breakdown.seg_map, breakdown.seg_obj))
    return rows
