"""Camera rigs, the BEV grid, projection, and per-cell visibility.

Conventions: the world frame is right-handed with z up and the BEV origin at
the scene center. The camera frame has +z forward (depth is camera-frame z),
+x image-right, +y image-down. Extrinsics are 4x4 world-to-camera rigid
transforms. The pixel domain is half-open: u in [0, width), v in [0, height).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

WORLD_UP = np.array([0.0, 0.0, 1.0])
MIN_DEPTH = 1e-12


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = math.fmod(a + math.pi, 2.0 * math.pi)
    if r < 0.0:
        r += 2.0 * math.pi
    r -= math.pi
    return math.pi if r == -math.pi else r


@dataclass
class CameraRig:
    """One camera: intrinsics (pixels), world-to-camera extrinsics (meters)."""

    intrinsics: np.ndarray
    extrinsics: np.ndarray
    image_size: tuple[int, int]  # (width, height)
    is_dummy: bool = False
    position: np.ndarray = field(init=False)
    yaw: float = field(init=False)
    pitch: float = field(init=False)

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64).reshape(4, 4)
        K, E = self.intrinsics, self.extrinsics
        R = E[:3, :3]
        if not self.is_dummy:
            if np.abs(R @ R.T - np.eye(3)).max() > 1e-9:
                raise ConfigError("extrinsics rotation block is not orthonormal within 1e-9")
            if K[0, 0] <= 0 or K[1, 1] <= 0:
                raise ConfigError(f"intrinsics must have positive focal entries, got {K[0,0]}, {K[1,1]}")
            if np.abs(K[2] - [0.0, 0.0, 1.0]).max() > 0:
                raise ConfigError(f"intrinsics bottom row must be [0,0,1], got {K[2]}")
        # pose summary derived from the extrinsics, then cached
        self.position = -R.T @ E[:3, 3]
        forward = R[2, :]  # world direction of the camera +z axis
        self.yaw = math.atan2(forward[1], forward[0])
        self.pitch = math.asin(min(1.0, max(-1.0, forward[2])))

    @classmethod
    def from_pose(cls, position, yaw: float, pitch: float, intrinsics, image_size,
                  ) -> "CameraRig":
        position = np.asarray(position, dtype=np.float64)
        cp = math.cos(pitch)
        forward = np.array([math.cos(yaw) * cp, math.sin(yaw) * cp, math.sin(pitch)])
        right = np.cross(forward, WORLD_UP)
        n = np.linalg.norm(right)
        if n < 1e-9:
            raise ConfigError("camera forward axis is parallel to world up; pose is degenerate")
        right /= n
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        E = np.eye(4)
        E[:3, :3] = R
        E[:3, 3] = -R @ position
        return cls(intrinsics=np.asarray(intrinsics), extrinsics=E, image_size=tuple(image_size))

    @classmethod
    def dummy(cls, image_size=(1, 1)) -> "CameraRig":
        return cls(intrinsics=np.eye(3), extrinsics=np.eye(4), image_size=tuple(image_size), is_dummy=True)


@dataclass
class BevGridSpec:
    """Perception range and resolution of the BEV query grid."""

    x_range: tuple[float, float]
    y_range: tuple[float, float]
    cells: tuple[int, int]  # (H_bev rows over y, W_bev cols over x)
    anchor_heights: tuple[float, ...]
    z_max: float

    def __post_init__(self):
        self.x_range = (float(self.x_range[0]), float(self.x_range[1]))
        self.y_range = (float(self.y_range[0]), float(self.y_range[1]))
        self.cells = (int(self.cells[0]), int(self.cells[1]))
        self.anchor_heights = tuple(float(z) for z in self.anchor_heights)
        if self.x_range[1] <= self.x_range[0] or self.y_range[1] <= self.y_range[0]:
            raise ConfigError(f"degenerate ranges x={self.x_range} y={self.y_range}")
        if self.cells[0] < 1 or self.cells[1] < 1:
            raise ConfigError(f"grid needs at least one cell per axis, got {self.cells}")
        if len(self.anchor_heights) < 1:
            raise ConfigError("at least one anchor height is required")
        if any(b <= a for a, b in zip(self.anchor_heights, self.anchor_heights[1:])):
            raise ConfigError(f"anchor heights must be strictly increasing, got {self.anchor_heights}")
        if self.z_max <= 0:
            raise ConfigError(f"z_max must be positive, got {self.z_max}")

    @property
    def n_ref(self) -> int:
        return len(self.anchor_heights)

    @property
    def cell_size(self) -> tuple[float, float]:
        h, w = self.cells
        return ((self.x_range[1] - self.x_range[0]) / w, (self.y_range[1] - self.y_range[0]) / h)

    @property
    def half_extent(self) -> tuple[float, float]:
        return ((self.x_range[1] - self.x_range[0]) / 2.0, (self.y_range[1] - self.y_range[0]) / 2.0)

    @property
    def num_cells(self) -> int:
        return self.cells[0] * self.cells[1]

    def cell_centers(self) -> np.ndarray:
        """[num_cells, 2] (x, y) centers in row-major (row over y, col over x) order."""
        h, w = self.cells
        dx, dy = self.cell_size
        xs = self.x_range[0] + (np.arange(w) + 0.5) * dx
        ys = self.y_range[0] + (np.arange(h) + 0.5) * dy
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)

    def to_dict(self) -> dict:
        return {
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
            "cells": list(self.cells),
            "anchor_heights": list(self.anchor_heights),
            "z_max": self.z_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BevGridSpec":
        return cls(
            x_range=tuple(d["x_range"]),
            y_range=tuple(d["y_range"]),
            cells=tuple(d["cells"]),
            anchor_heights=tuple(d["anchor_heights"]),
            z_max=float(d["z_max"]),
        )


@dataclass
class ProjectionResult:
    uv: tuple[float, float]
    depth: float
    valid: bool


@dataclass
class VisibilityMask:
    """m[p, n] is True when cell p has any pillar point inside camera n."""

    m: np.ndarray


def reference_pillars(grid: BevGridSpec) -> np.ndarray:
    """3D anchor points [N_ref, H_bev, W_bev, 3] above each cell center."""
    h, w = grid.cells
    centers = grid.cell_centers().reshape(h, w, 2)
    pts = np.zeros((grid.n_ref, h, w, 3))
    pts[..., 0] = centers[..., 0]
    pts[..., 1] = centers[..., 1]
    for j, z in enumerate(grid.anchor_heights):
        pts[j, ..., 2] = z
    return pts


def project(point, rig: CameraRig) -> ProjectionResult:
    """Project a world point into one camera; dummies never see anything."""
    if rig.is_dummy:
        return ProjectionResult((0.0, 0.0), 0.0, False)
    p = np.asarray(point, dtype=np.float64)
    cam = rig.extrinsics[:3, :3] @ p + rig.extrinsics[:3, 3]
    depth = float(cam[2])
    if depth <= MIN_DEPTH:
        return ProjectionResult((0.0, 0.0), depth, False)
    pix = rig.intrinsics @ cam
    u = float(pix[0] / depth)
    v = float(pix[1] / depth)
    w, h = rig.image_size
    valid = (0.0 <= u < w) and (0.0 <= v < h)
    return ProjectionResult((u, v), depth, valid)


def backproject(uv, depth: float, rig: CameraRig) -> np.ndarray:
    """Invert project: the world point at given pixel and camera-frame depth."""
    K = rig.intrinsics
    u, v = uv
    x = (u - K[0, 2]) * depth / K[0, 0]
    y = (v - K[1, 2]) * depth / K[1, 1]
    cam = np.array([x, y, depth])
    R = rig.extrinsics[:3, :3]
    t = rig.extrinsics[:3, 3]
    return R.T @ (cam - t)


def point_sampling(pillars: np.ndarray, rigs: list[CameraRig]):
    """Vectorized projection of every pillar point into every rig.

    Returns (uv, valid): uv [N, N_ref, H, W, 2] in pixels and a boolean
    validity array [N, N_ref, H, W]. Dummy rigs are all-invalid.
    """
    n_ref, h, w, _ = pillars.shape
    flat = pillars.reshape(-1, 3)
    n = len(rigs)
    uv = np.zeros((n, n_ref, h, w, 2))
    valid = np.zeros((n, n_ref, h, w), dtype=bool)
    for i, rig in enumerate(rigs):
        if rig.is_dummy:
            continue
        R = rig.extrinsics[:3, :3]
        t = rig.extrinsics[:3, 3]
        cam = flat @ R.T + t
        depth = cam[:, 2]
        front = depth > MIN_DEPTH
        safe = np.where(front, depth, 1.0)
        pix = cam @ rig.intrinsics.T
        u = pix[:, 0] / safe
        v = pix[:, 1] / safe
        iw, ih = rig.image_size
        ok = front & (u >= 0.0) & (u < iw) & (v >= 0.0) & (v < ih)
        uv[i, ..., 0] = np.where(ok, u, 0.0).reshape(n_ref, h, w)
        uv[i, ..., 1] = np.where(ok, v, 0.0).reshape(n_ref, h, w)
        valid[i] = ok.reshape(n_ref, h, w)
    return uv, valid


def visibility(point_validity: np.ndarray) -> VisibilityMask:
    """Reduce per-point validity [N, N_ref, H, W] to cell coverage [num_cells, N]."""
    n = point_validity.shape[0]
    any_ref = point_validity.any(axis=1)  # [N, H, W]
    return VisibilityMask(any_ref.reshape(n, -1).T.copy())


def pad_rigs(rigs: list[CameraRig], n_max: int) -> list[CameraRig]:
    """Pad with identity-calibrated dummy rigs up to n_max entries."""
    if len(rigs) > n_max:
        raise ConfigError(f"{len(rigs)} rigs exceed the maximum of {n_max}")
    image_size = rigs[0].image_size if rigs else (1, 1)
    return list(rigs) + [CameraRig.dummy(image_size) for _ in range(n_max - len(rigs))]


# ---------------------------------------------------------------------------
# rig file format: JSON array of flat row-major matrices


def rigs_to_json(rigs: list[CameraRig]) -> list[dict]:
    return [
        {
            "intrinsics": [float(x) for x in rig.intrinsics.reshape(-1)],
            "extrinsics": [float(x) for x in rig.extrinsics.reshape(-1)],
            "width": rig.image_size[0],
            "height": rig.image_size[1],
            "dummy": bool(rig.is_dummy),
        }
        for rig in rigs
    ]


def rigs_from_json(items: list[dict]) -> list[CameraRig]:
    rigs = []
    for d in items:
        rigs.append(
            CameraRig(
                intrinsics=np.array(d["intrinsics"], dtype=np.float64).reshape(3, 3),
                extrinsics=np.array(d["extrinsics"], dtype=np.float64).reshape(4, 4),
                image_size=(int(d["width"]), int(d["height"])),
                is_dummy=bool(d.get("dummy", False)),
            )
        )
    return rigs


def save_rigs(path, rigs: list[CameraRig]):
    with open(path, "w") as fh:
        json.dump(rigs_to_json(rigs), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_rigs(path) -> list[CameraRig]:
    with open(path) as fh:
        return rigs_from_json(json.load(fh))
