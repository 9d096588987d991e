"""Bipartite camera-to-cell relation graph with geometric edge descriptors.

Each edge (camera n -> cell p) carries an 8-component descriptor: planar
offset normalized by the grid half-extents, camera height over z_max,
planar distance over the half-diagonal, and sine/cosine pairs for the
heading difference and the camera pitch. Heading angles enter only through
sin/cos so nothing jumps when the raw difference crosses +-pi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .geometry import BevGridSpec, CameraRig, VisibilityMask, wrap_angle

DEGENERATE_OFFSET = 1e-9


@dataclass
class EdgeGeometry:
    g: np.ndarray  # shape (8,)


def edge_geometry(cell_center, rig: CameraRig, grid: BevGridSpec) -> EdgeGeometry:
    """Descriptor for one (cell, camera) pair; camera must not be a dummy."""
    if rig.is_dummy:
        raise ConfigError("edge geometry is undefined for dummy cameras")
    x_p, y_p = float(cell_center[0]), float(cell_center[1])
    x_n, y_n, z_n = rig.position
    rx, ry = grid.half_extent
    dx = x_p - x_n
    dy = y_p - y_n
    dist = math.hypot(dx, dy)
    if dist < DEGENERATE_OFFSET:
        delta = 0.0  # camera directly under the cell column: heading is meaningless
    else:
        delta = wrap_angle(math.atan2(dy, dx) - rig.yaw)
    g = np.array([
        dx / rx,
        dy / ry,
        z_n / grid.z_max,
        dist / math.sqrt(rx * rx + ry * ry),
        math.cos(delta),
        math.sin(delta),
        math.cos(rig.pitch),
        math.sin(rig.pitch),
    ])
    return EdgeGeometry(g)


def edge_geometry_table(rigs: list[CameraRig], grid: BevGridSpec) -> np.ndarray:
    """Vectorized descriptors [num_cells, num_cams, 8]; dummy columns are zero."""
    centers = grid.cell_centers()
    p = centers.shape[0]
    rx, ry = grid.half_extent
    diag = math.sqrt(rx * rx + ry * ry)
    table = np.zeros((p, len(rigs), 8))
    for n, rig in enumerate(rigs):
        if rig.is_dummy:
            continue
        x_n, y_n, z_n = rig.position
        dx = centers[:, 0] - x_n
        dy = centers[:, 1] - y_n
        dist = np.hypot(dx, dy)
        ang = np.arctan2(dy, dx) - rig.yaw
        delta = np.where(dist < DEGENERATE_OFFSET, 0.0, ang)
        table[:, n, 0] = dx / rx
        table[:, n, 1] = dy / ry
        table[:, n, 2] = z_n / grid.z_max
        table[:, n, 3] = dist / diag
        table[:, n, 4] = np.cos(delta)
        table[:, n, 5] = np.sin(delta)
        table[:, n, 6] = math.cos(rig.pitch)
        table[:, n, 7] = math.sin(rig.pitch)
    return table


def pool_camera_node(feature_map: T.Tensor) -> T.Tensor:
    """Mean over all H*W token positions of a [C, H, W] feature map."""
    if feature_map.ndim != 3:
        raise DimensionError(f"expected [C, H, W] feature map, got shape {feature_map.shape}")
    c, h, w = feature_map.shape
    if h * w < 1:
        raise DimensionError(f"feature map has no tokens: shape {feature_map.shape}")
    return feature_map.reshape(c, h * w).mean(axis=1)


@dataclass
class RelationGraph:
    bev_nodes: T.Tensor  # [num_cells, C]
    cam_nodes: T.Tensor  # [num_cams, C]
    edges: list[tuple[int, int]]  # (camera n, cell p), sorted by (p, n)
    edge_attrs: T.Tensor  # [num_edges, 8]
    visibility: VisibilityMask
    attr_table: np.ndarray  # dense [num_cells, num_cams, 8] convenience view

    @property
    def num_cells(self) -> int:
        return self.bev_nodes.shape[0]

    @property
    def num_cams(self) -> int:
        return self.cam_nodes.shape[0]

    def validate(self):
        seen = set()
        prev = (-1, -1)
        for n, p in self.edges:
            if not self.visibility.m[p, n]:
                raise ConfigError(f"edge ({n}, {p}) without visibility")
            if (n, p) in seen:
                raise ConfigError(f"duplicate edge ({n}, {p})")
            seen.add((n, p))
            if (p, n) <= prev:
                raise ConfigError("edges are not sorted by (cell, camera)")
            prev = (p, n)
        if len(self.edges) != int(self.visibility.m.sum()):
            raise ConfigError("edge count does not match visibility mask")


def build_graph(rigs: list[CameraRig], feature_maps: list[T.Tensor], bev_queries: T.Tensor,
                vis: VisibilityMask, grid: BevGridSpec) -> RelationGraph:
    """Assemble node features, visible edges, and their descriptors.

    Dummy cameras contribute a node (pooled from their zero feature map) but
    never an edge; with an all-false mask the graph is valid and empty.
    """
    if len(rigs) != len(feature_maps):
        raise DimensionError(f"{len(rigs)} rigs but {len(feature_maps)} feature maps")
    p = grid.num_cells
    if bev_queries.shape[0] != p:
        raise DimensionError(f"queries {bev_queries.shape} do not cover {p} cells")
    if vis.m.shape != (p, len(rigs)):
        raise DimensionError(f"visibility {vis.m.shape} != ({p}, {len(rigs)})")
    for n, rig in enumerate(rigs):
        if rig.is_dummy and vis.m[:, n].any():
            raise ConfigError(f"dummy camera {n} has visible cells")
        if not rig.is_dummy and rig.position[2] > grid.z_max:
            raise ConfigError(f"camera {n} height {rig.position[2]:.3f} exceeds z_max {grid.z_max}")

    cam_nodes = T.concat([pool_camera_node(f).reshape(1, -1) for f in feature_maps], axis=0)
    table = edge_geometry_table(rigs, grid)
    cell_idx, cam_idx = np.nonzero(vis.m)  # row-major: sorted by (p, then n)
    edges = list(zip(cam_idx.tolist(), cell_idx.tolist()))
    edge_attrs = T.Tensor(table[cell_idx, cam_idx])
    return RelationGraph(
        bev_nodes=bev_queries,
        cam_nodes=cam_nodes,
        edges=edges,
        edge_attrs=edge_attrs,
        visibility=vis,
        attr_table=table,
    )


def graph_to_json(graph: RelationGraph) -> dict:
    """JSON-friendly dump consumed by the weight-visualization command."""
    return {
        "num_cells": graph.num_cells,
        "num_cams": graph.num_cams,
        "bev_nodes": [[float(v) for v in row] for row in graph.bev_nodes.data],
        "cam_nodes": [[float(v) for v in row] for row in graph.cam_nodes.data],
        "edges": [[int(n), int(p)] for n, p in graph.edges],
        "edge_attrs": [[float(v) for v in row] for row in graph.edge_attrs.data],
    }
