"""Synthetic roadside scenes: rig sampling, agents, toy rendering, GT rasters.

Scenes are flat road layouts (four-way, three-way, T-junction, straight)
populated with cars, trucks, pedestrians, and cyclists. Per-view images are
flat-shaded perspective rasters: each agent's 3D box projects to a convex
hull filled with a class-coded intensity over a background gradient. Ground
truth comes in two rasters over the BEV grid: exclusive map classes from the
layout polygons and object classes from rotated box footprints.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ConfigError
from .geometry import BevGridSpec, CameraRig
from .heads import Box3D

LAYOUTS = ("four-way", "three-way", "t-junction", "straight")
TRAFFIC_LEVELS = ("low", "med", "high")
MAX_CAMERAS = 4

MAP_CLASSES = ("background", "road", "intersection", "sidewalk", "crosswalk",
               "lane_marking", "stop_line")  # n_map = 7
OBJECT_CLASSES = ("car", "truck", "pedestrian", "cyclist")  # background channel appended last

CLASS_SIZES = {  # (length, width, height) meters
    "car": (4.5, 1.9, 1.6),
    "truck": (8.0, 2.5, 3.0),
    "pedestrian": (0.6, 0.6, 1.7),
    "cyclist": (1.8, 0.6, 1.7),
}
CLASS_SPEED = {"car": (2.0, 15.0), "truck": (2.0, 12.0), "pedestrian": (0.3, 2.0),
               "cyclist": (1.0, 8.0)}
CLASS_WEIGHTS = (0.5, 0.15, 0.2, 0.15)
CLASS_INTENSITY = {"car": 0.55, "truck": 0.7, "pedestrian": 0.85, "cyclist": 0.95}

ROAD_HALF = 8.0
SIDEWALK_W = 2.5
CROSSWALK_W = 3.0
STOPLINE_W = 0.6
MARKING_W = 0.3
CORNER_OFFSET = ROAD_HALF + 3.0

FOCAL_PX = 800.0
IMAGE_SIZE = (800, 600)
HEIGHT_RANGE = (3.0, 10.0)
PITCH_RANGE = (math.radians(-35.0), math.radians(-5.0))

DESK_ANCHORS = tuple(np.linspace(0.25, 3.75, 8))


def grid_preset(name: str) -> BevGridSpec:
    if name == "desk":
        return BevGridSpec((-25.6, 25.6), (-25.6, 25.6), (100, 100), DESK_ANCHORS, 12.0)
    if name == "m2i":
        return BevGridSpec((-51.2, 51.2), (-51.2, 51.2), (200, 200), DESK_ANCHORS, 12.0)
    raise ConfigError(f"unknown grid preset {name!r} (expected 'desk' or 'm2i')")


@dataclass
class SceneConfig:
    layout: str
    num_cameras: int
    traffic_level: str
    grid: BevGridSpec
    seed: int

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ConfigError(f"layout {self.layout!r} not in {LAYOUTS}")
        if not 1 <= self.num_cameras <= MAX_CAMERAS:
            raise ConfigError(f"num_cameras must be 1..{MAX_CAMERAS}, got {self.num_cameras}")
        if self.traffic_level not in TRAFFIC_LEVELS:
            raise ConfigError(f"traffic level {self.traffic_level!r} not in {TRAFFIC_LEVELS}")

    def to_dict(self) -> dict:
        return {"layout": self.layout, "num_cameras": self.num_cameras,
                "traffic_level": self.traffic_level, "seed": self.seed,
                "grid": self.grid.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(layout=d["layout"], num_cameras=int(d["num_cameras"]),
                   traffic_level=d["traffic_level"], grid=BevGridSpec.from_dict(d["grid"]),
                   seed=int(d["seed"]))


def save_scenario(path, config: SceneConfig):
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_scenario(path) -> SceneConfig:
    with open(path) as fh:
        return SceneConfig.from_dict(json.load(fh))


@dataclass
class Agent:
    kind: str
    box: Box3D
    velocity: tuple[float, float]

    def __post_init__(self):
        if self.kind not in OBJECT_CLASSES:
            raise ConfigError(f"unknown agent class {self.kind!r}")


@dataclass
class Scene:
    config: SceneConfig
    agents: list[Agent]
    rigs: list[CameraRig]
    gt_map: np.ndarray = field(default=None)   # [n_map, H, W] one-hot
    gt_obj: np.ndarray = field(default=None)   # [n_obj + 1, H, W] one-hot


# ---------------------------------------------------------------------------
# layout geometry: axis-aligned rectangles (x0, x1, y0, y1) per map class


def _arms(layout: str) -> list[str]:
    if layout == "four-way":
        return ["east", "west", "north", "south"]
    if layout == "three-way":
        return ["east", "west", "north"]
    if layout == "t-junction":
        return ["east", "west", "south"]
    return ["east", "west"]


def layout_rects(layout: str, grid: BevGridSpec) -> list[tuple[str, tuple[float, float, float, float]]]:
    """(map class, rect) list painted in order; later entries overwrite."""
    x0, x1 = grid.x_range
    y0, y1 = grid.y_range
    r = ROAD_HALF
    arms = _arms(layout)
    spans = {
        "east": (r, x1, -r, r), "west": (x0, -r, -r, r),
        "north": (-r, r, r, y1), "south": (-r, r, y0, -r),
    }
    rects = []
    # roads with sidewalk strips along their outer edges
    for arm in arms:
        ax0, ax1, ay0, ay1 = spans[arm]
        rects.append(("road", (ax0, ax1, ay0, ay1)))
        if arm in ("east", "west"):
            rects.append(("sidewalk", (ax0, ax1, ay1, ay1 + SIDEWALK_W)))
            rects.append(("sidewalk", (ax0, ax1, ay0 - SIDEWALK_W, ay0)))
        else:
            rects.append(("sidewalk", (ax1, ax1 + SIDEWALK_W, ay0, ay1)))
            rects.append(("sidewalk", (ax0 - SIDEWALK_W, ax0, ay0, ay1)))
    if layout != "straight":
        rects.append(("intersection", (-r, r, -r, r)))
    # center lane markings along each arm
    for arm in arms:
        ax0, ax1, ay0, ay1 = spans[arm]
        if arm in ("east", "west"):
            rects.append(("lane_marking", (ax0, ax1, -MARKING_W / 2, MARKING_W / 2)))
        else:
            rects.append(("lane_marking", (-MARKING_W / 2, MARKING_W / 2, ay0, ay1)))
    if layout != "straight":
        # crosswalks across each arm mouth, stop lines just behind them
        mouths = {
            "east": (r, r + CROSSWALK_W, -r, r), "west": (-r - CROSSWALK_W, -r, -r, r),
            "north": (-r, r, r, r + CROSSWALK_W), "south": (-r, r, -r - CROSSWALK_W, -r),
        }
        lines = {
            "east": (r + CROSSWALK_W, r + CROSSWALK_W + STOPLINE_W, -r, r),
            "west": (-r - CROSSWALK_W - STOPLINE_W, -r - CROSSWALK_W, -r, r),
            "north": (-r, r, r + CROSSWALK_W, r + CROSSWALK_W + STOPLINE_W),
            "south": (-r, r, -r - CROSSWALK_W - STOPLINE_W, -r - CROSSWALK_W),
        }
        for arm in arms:
            rects.append(("crosswalk", mouths[arm]))
            rects.append(("stop_line", lines[arm]))
    return rects


# ---------------------------------------------------------------------------
# rig sampling


def sample_rigs(config: SceneConfig, rng: np.random.Generator) -> list[CameraRig]:
    """Cameras on layout corners; heights, pitches, and yaws from the
    deployment statistics (heights 3-10 m, pitch -35..-5 deg, yaw full circle)."""
    corners = [(CORNER_OFFSET, CORNER_OFFSET), (-CORNER_OFFSET, CORNER_OFFSET),
               (-CORNER_OFFSET, -CORNER_OFFSET), (CORNER_OFFSET, -CORNER_OFFSET)]
    intr = np.array([[FOCAL_PX, 0.0, IMAGE_SIZE[0] / 2], [0.0, FOCAL_PX, IMAGE_SIZE[1] / 2],
                     [0.0, 0.0, 1.0]])
    rigs = []
    for i in range(config.num_cameras):
        cx, cy = corners[i % 4]
        pos = (cx + rng.uniform(-2.0, 2.0), cy + rng.uniform(-2.0, 2.0),
               rng.uniform(*HEIGHT_RANGE))
        yaw = rng.uniform(0.0, 2.0 * math.pi)
        pitch = rng.uniform(*PITCH_RANGE)
        rigs.append(CameraRig.from_pose(pos, yaw, pitch, intr, IMAGE_SIZE))
    return rigs


# ---------------------------------------------------------------------------
# agents


def _rect_corners(x, y, half_l, half_w, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    pts = []
    for dx, dy in ((half_l, half_w), (half_l, -half_w), (-half_l, -half_w), (-half_l, half_w)):
        pts.append((x + c * dx - s * dy, y + s * dx + c * dy))
    return pts


def _rects_overlap(a, b) -> bool:
    """Separating-axis test for two rotated rectangles given as corner lists."""
    for rect in (a, b):
        for i in range(4):
            x1, y1 = rect[i]
            x2, y2 = rect[(i + 1) % 4]
            nx, ny = y2 - y1, x1 - x2
            pa = [nx * px + ny * py for px, py in a]
            pb = [nx * px + ny * py for px, py in b]
            if max(pa) < min(pb) or max(pb) < min(pa):
                return False
    return True


def _agent_count(level: str, rng: np.random.Generator) -> int:
    if level == "low":
        return int(rng.integers(3, 9))
    if level == "med":
        return int(rng.integers(10, 21))
    n = int(round(rng.normal(40.0, 5.0)))
    return max(30, min(55, n))


def _sample_position(kind: str, layout: str, grid: BevGridSpec, rng: np.random.Generator):
    """(x, y, yaw) on the road network (vehicles) or walkable strips (peds)."""
    arms = _arms(layout)
    arm = arms[rng.integers(0, len(arms))]
    x0, x1 = grid.x_range
    y0, y1 = grid.y_range
    margin = 1.2
    if kind == "pedestrian":
        lo = ROAD_HALF + 0.2
        hi = ROAD_HALF + SIDEWALK_W - 0.2
        side = 1.0 if rng.random() < 0.5 else -1.0
        if arm in ("east", "west"):
            x = rng.uniform(x0 + margin, -ROAD_HALF) if arm == "west" else rng.uniform(ROAD_HALF, x1 - margin)
            y = side * rng.uniform(lo, hi)
        else:
            y = rng.uniform(y0 + margin, -ROAD_HALF) if arm == "south" else rng.uniform(ROAD_HALF, y1 - margin)
            x = side * rng.uniform(lo, hi)
        yaw = rng.uniform(0, 2 * math.pi)
        return x, y, yaw
    lane = rng.uniform(-ROAD_HALF + margin, ROAD_HALF - margin)
    if arm == "east":
        x, y, yaw = rng.uniform(2.0, x1 - margin), lane, 0.0
    elif arm == "west":
        x, y, yaw = rng.uniform(x0 + margin, -2.0), lane, math.pi
    elif arm == "north":
        x, y, yaw = lane, rng.uniform(2.0, y1 - margin), math.pi / 2
    else:
        x, y, yaw = lane, rng.uniform(y0 + margin, -2.0), -math.pi / 2
    if rng.random() < 0.5:
        yaw = yaw + math.pi
    yaw += rng.uniform(-0.06, 0.06)
    return x, y, yaw


def _inside_range(corners, grid: BevGridSpec) -> bool:
    x0, x1 = grid.x_range
    y0, y1 = grid.y_range
    return all(x0 <= x <= x1 and y0 <= y <= y1 for x, y in corners)


def sample_agents(config: SceneConfig, rng: np.random.Generator) -> list[Agent]:
    count = _agent_count(config.traffic_level, rng)
    agents: list[Agent] = []
    footprints: list[list[tuple[float, float]]] = []
    for _ in range(count):
        kind = OBJECT_CLASSES[rng.choice(len(OBJECT_CLASSES), p=CLASS_WEIGHTS)]
        length, width, height = CLASS_SIZES[kind]
        for _attempt in range(50):
            x, y, yaw = _sample_position(kind, config.layout, config.grid, rng)
            corners = _rect_corners(x, y, length / 2, width / 2, yaw)
            if not _inside_range(corners, config.grid):
                continue
            if any(_rects_overlap(corners, other) for other in footprints):
                continue
            speed = rng.uniform(*CLASS_SPEED[kind])
            box = Box3D(x, y, height / 2, length, width, height, yaw,
                        vx=speed * math.cos(yaw), vy=speed * math.sin(yaw),
                        class_id=OBJECT_CLASSES.index(kind), score=1.0)
            agents.append(Agent(kind, box, (box.vx, box.vy)))
            footprints.append(corners)
            break
    return agents


def generate_scene(config: SceneConfig, rng: np.random.Generator):
    """(agents, rigs, (map one-hot, object one-hot)) for one scene draw."""
    agents = sample_agents(config, rng)
    rigs = sample_rigs(config, rng)
    gt_map, gt_obj = rasterize_gt(agents, config.layout, config.grid)
    return agents, rigs, (gt_map, gt_obj)


def simulate(config: SceneConfig) -> Scene:
    """Deterministic scene draw from the config's own seed."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5CE4E]))
    agents, rigs, (gt_map, gt_obj) = generate_scene(config, rng)
    return Scene(config=config, agents=agents, rigs=rigs, gt_map=gt_map, gt_obj=gt_obj)


# ---------------------------------------------------------------------------
# toy rendering


def _box_corners_3d(box: Box3D) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    out = np.zeros((8, 3))
    i = 0
    for dz in (-box.h / 2, box.h / 2):
        for dx, dy in ((box.l / 2, box.w / 2), (box.l / 2, -box.w / 2),
                       (-box.l / 2, -box.w / 2), (-box.l / 2, box.w / 2)):
            out[i] = (box.x + c * dx - s * dy, box.y + s * dx + c * dy, box.z + dz)
            i += 1
    return out


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; returns CCW hull vertices."""
    pts = sorted({(float(x), float(y)) for x, y in points})
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def background_image(image_size: tuple[int, int]) -> np.ndarray:
    w, h = image_size
    rows = 0.15 + 0.2 * (np.arange(h) / max(1, h - 1))
    return np.tile(rows[:, None], (1, w))


def render_view(scene: Scene, rig: CameraRig) -> T.Tensor:
    """Flat-shaded raster of the scene from one rig; dummies render zeros."""
    w, h = rig.image_size
    if rig.is_dummy:
        return T.Tensor(np.zeros((h, w)))
    img = background_image(rig.image_size)
    R = rig.extrinsics[:3, :3]
    t = rig.extrinsics[:3, 3]
    order = sorted(scene.agents, key=lambda a: -float(np.linalg.norm(
        np.array([a.box.x, a.box.y, a.box.z]) - rig.position)))
    for agent in order:
        corners = _box_corners_3d(agent.box)
        cam = corners @ R.T + t
        if (cam[:, 2] <= 1e-6).any():
            continue  # conservative culling for partially-behind boxes
        pix = cam @ rig.intrinsics.T
        uv = pix[:, :2] / cam[:, 2:3]
        if uv[:, 0].max() < 0 or uv[:, 0].min() >= w or uv[:, 1].max() < 0 or uv[:, 1].min() >= h:
            continue
        hull = _convex_hull(uv)
        if len(hull) < 3:
            continue
        kernels.fill_convex_polygon(img, np.ascontiguousarray(hull[:, 0]),
                                    np.ascontiguousarray(hull[:, 1]),
                                    CLASS_INTENSITY[agent.kind])
    return T.Tensor(img)


# ---------------------------------------------------------------------------
# toy feature extractor (stand-in for a pretrained backbone)

PATCH = 8


def init_backbone_params(ps: T.ParameterSet, channels: int, rng: np.random.Generator):
    ps.create("backbone.patch.w", (PATCH * PATCH, channels), rng, init="xavier")
    ps.create("backbone.patch.b", (channels,), rng, init="zeros")
    ps.create("backbone.conv.w", (channels, channels, 3, 3), rng, init="xavier", scale=0.5)
    ps.create("backbone.conv.b", (channels,), rng, init="zeros")


def toy_backbone(image: T.Tensor, params: T.ParameterSet) -> T.Tensor:
    """8x8 patch embedding then one 3x3 conv block -> [C, H/8, W/8]."""
    h, w = image.shape
    if h % PATCH or w % PATCH:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {PATCH}")
    hp, wp = h // PATCH, w // PATCH
    channels = params["backbone.patch.w"].shape[1]
    patches = image.reshape(hp, PATCH, wp, PATCH).transpose(0, 2, 1, 3).reshape(hp * wp, PATCH * PATCH)
    emb = T.matmul(patches, params["backbone.patch.w"]) + params["backbone.patch.b"]
    fmap = emb.reshape(hp, wp, channels).transpose(2, 0, 1)
    out = T.conv2d(fmap, params["backbone.conv.w"], params["backbone.conv.b"], padding="edge")
    return T.relu(out)


# ---------------------------------------------------------------------------
# ground-truth rasterization


def rasterize_gt(agents: list[Agent], layout: str, grid: BevGridSpec):
    """(map one-hot [n_map, H, W], object one-hot [n_obj+1, H, W])."""
    h, w = grid.cells
    dx, dy = grid.cell_size
    x0 = grid.x_range[0]
    y0 = grid.y_range[0]

    map_idx = np.zeros((h, w), dtype=np.int64)  # background = 0
    for cls_name, (rx0, rx1, ry0, ry1) in layout_rects(layout, grid):
        label = MAP_CLASSES.index(cls_name)
        cx = (rx0 + rx1) / 2.0
        cy = (ry0 + ry1) / 2.0
        kernels.paint_rects(map_idx, np.array([cx]), np.array([cy]),
                            np.array([(rx1 - rx0) / 2.0]), np.array([(ry1 - ry0) / 2.0]),
                            np.array([0.0]), np.array([label], dtype=np.int64),
                            x0, y0, dx, dy)

    background = len(OBJECT_CLASSES)
    obj_idx = np.full((h, w), background, dtype=np.int64)
    if agents:
        kernels.paint_rects(
            obj_idx,
            np.array([a.box.x for a in agents]),
            np.array([a.box.y for a in agents]),
            np.array([a.box.l / 2.0 for a in agents]),
            np.array([a.box.w / 2.0 for a in agents]),
            np.array([a.box.yaw for a in agents]),
            np.array([OBJECT_CLASSES.index(a.kind) for a in agents], dtype=np.int64),
            x0, y0, dx, dy,
        )

    def one_hot(idx, k):
        out = np.zeros((k, h, w))
        for c in range(k):
            out[c][idx == c] = 1.0
        return out

    return one_hot(map_idx, len(MAP_CLASSES)), one_hot(obj_idx, background + 1)


def gt_boxes(agents: list[Agent]) -> list[Box3D]:
    return [a.box for a in agents]
