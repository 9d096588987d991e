import math

import numpy as np
import pytest
from shapely.geometry import Point, Polygon

from rbev import geometry as G
from rbev import scene as S
from rbev import tensor as T
from rbev.errors import ConfigError


def desk_config(seed=0, layout="four-way", cams=2, traffic="low", cells=(50, 50), half=25.6):
    grid = G.BevGridSpec((-half, half), (-half, half), cells, S.DESK_ANCHORS, 12.0)
    return S.SceneConfig(layout=layout, num_cameras=cams, traffic_level=traffic,
                         grid=grid, seed=seed)


class TestSampleRigs:
    def test_ranges_over_many_draws(self):
        rng = np.random.default_rng(0)
        cfg = desk_config(cams=4)
        heights, pitches = [], []
        for _ in range(250):
            for rig in S.sample_rigs(cfg, rng):
                heights.append(rig.position[2])
                pitches.append(rig.pitch)
        heights = np.array(heights)
        pitches = np.array(pitches)
        assert heights.min() >= 3.0 and heights.max() <= 10.0
        assert pitches.min() >= math.radians(-35) - 1e-9
        assert pitches.max() <= math.radians(-5) + 1e-9

    def test_fixed_seed_reproducible(self):
        cfg = desk_config(cams=3)
        a = S.sample_rigs(cfg, np.random.default_rng(42))
        b = S.sample_rigs(cfg, np.random.default_rng(42))
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.extrinsics, rb.extrinsics)

    def test_yaw_roughly_uniform_chi2(self):
        rng = np.random.default_rng(1)
        cfg = desk_config(cams=1)
        yaws = [S.sample_rigs(cfg, rng)[0].yaw % (2 * math.pi) for _ in range(10_000)]
        counts, _ = np.histogram(yaws, bins=8, range=(0, 2 * math.pi))
        expected = len(yaws) / 8
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < 40.0  # chi2_0.999 with 7 dof is ~24; generous smoke bound

    def test_intrinsics_fixed_pinhole(self):
        cfg = desk_config(cams=2)
        for rig in S.sample_rigs(cfg, np.random.default_rng(2)):
            assert rig.intrinsics[0, 0] == 800.0 and rig.intrinsics[1, 1] == 800.0
            assert rig.image_size == (800, 600)


class TestGenerateScene:
    def test_low_traffic_bounded(self):
        for seed in range(10):
            agents = S.sample_agents(desk_config(seed=seed, traffic="low"),
                                     np.random.default_rng(seed))
            assert len(agents) <= 8

    def test_high_traffic_mean_near_forty(self):
        grid_cfg = desk_config(traffic="high", half=51.2, cells=(100, 100))
        counts = [len(S.sample_agents(grid_cfg, np.random.default_rng(s))) for s in range(12)]
        assert 30 <= np.mean(counts) <= 50

    def test_boxes_inside_perception_range(self):
        cfg = desk_config(traffic="med", seed=3)
        agents = S.sample_agents(cfg, np.random.default_rng(3))
        x0, x1 = cfg.grid.x_range
        y0, y1 = cfg.grid.y_range
        for a in agents:
            for x, y in S._rect_corners(a.box.x, a.box.y, a.box.l / 2, a.box.w / 2, a.box.yaw):
                assert x0 <= x <= x1 and y0 <= y <= y1

    def test_no_overlaps_shapely_oracle(self):
        cfg = desk_config(traffic="med", seed=4)
        agents = S.sample_agents(cfg, np.random.default_rng(4))
        polys = [Polygon(S._rect_corners(a.box.x, a.box.y, a.box.l / 2, a.box.w / 2, a.box.yaw))
                 for a in agents]
        for i in range(len(polys)):
            for j in range(i + 1, len(polys)):
                inter = polys[i].intersection(polys[j]).area
                assert inter < 1e-9

    def test_simulate_deterministic(self):
        a = S.simulate(desk_config(seed=7))
        b = S.simulate(desk_config(seed=7))
        assert len(a.agents) == len(b.agents)
        for x, y in zip(a.agents, b.agents):
            assert x.kind == y.kind
            assert x.box.x == y.box.x and x.box.yaw == y.box.yaw
        np.testing.assert_array_equal(a.gt_map, b.gt_map)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            desk_config(cams=5)
        with pytest.raises(ConfigError):
            desk_config(layout="roundabout")


class TestRenderView:
    def rig_looking_at_center(self):
        intr = np.array([[800.0, 0, 400.0], [0, 800.0, 300.0], [0, 0, 1.0]])
        return G.CameraRig.from_pose((-20.0, 0.0, 8.0), 0.0, math.radians(-20), intr, (800, 600))

    def test_empty_scene_pure_background(self):
        cfg = desk_config(seed=0)
        scene = S.Scene(config=cfg, agents=[], rigs=[])
        rig = self.rig_looking_at_center()
        img = S.render_view(scene, rig).data
        np.testing.assert_array_equal(img, S.background_image(rig.image_size))

    def test_box_pixels_match_hull_oracle(self):
        from rbev.heads import Box3D
        cfg = desk_config(seed=0)
        box = Box3D(0.0, 0.0, 0.8, 4.5, 1.9, 1.6, 0.4, class_id=0)
        scene = S.Scene(config=cfg, agents=[S.Agent("car", box, (0, 0))], rigs=[])
        rig = self.rig_looking_at_center()
        img = S.render_view(scene, rig).data
        bg = S.background_image(rig.image_size)
        corners = S._box_corners_3d(box)
        R, t = rig.extrinsics[:3, :3], rig.extrinsics[:3, 3]
        cam = corners @ R.T + t
        uv = (cam @ rig.intrinsics.T)[:, :2] / cam[:, 2:3]
        hull = Polygon(S._convex_hull(uv))
        painted = img != bg
        ys, xs = np.nonzero(painted)
        assert len(xs) > 50
        for x, y in zip(xs[::37], ys[::37]):
            assert hull.buffer(1.5).contains(Point(x, y))
        # interior points must be painted with the class intensity
        inner = hull.buffer(-2.0)
        if not inner.is_empty:
            cx, cy = inner.representative_point().coords[0]
            assert img[int(round(cy)), int(round(cx))] == S.CLASS_INTENSITY["car"]

    def test_agent_behind_camera_invisible(self):
        from rbev.heads import Box3D
        cfg = desk_config(seed=0)
        box = Box3D(-40.0, 0.0, 0.8, 4.5, 1.9, 1.6, 0.0, class_id=0)
        scene = S.Scene(config=cfg, agents=[S.Agent("car", box, (0, 0))], rigs=[])
        rig = self.rig_looking_at_center()
        img = S.render_view(scene, rig).data
        np.testing.assert_array_equal(img, S.background_image(rig.image_size))

    def test_nearer_agent_paints_over(self):
        from rbev.heads import Box3D
        cfg = desk_config(seed=0)
        far = S.Agent("truck", Box3D(10.0, 0.0, 1.5, 8.0, 2.5, 3.0, 0.0, class_id=1), (0, 0))
        near = S.Agent("car", Box3D(-5.0, 0.0, 0.8, 4.5, 1.9, 1.6, 0.0, class_id=0), (0, 0))
        scene = S.Scene(config=cfg, agents=[far, near], rigs=[])
        img = S.render_view(scene, self.rig_looking_at_center()).data
        assert (img == S.CLASS_INTENSITY["car"]).any()


class TestToyBackbone:
    def test_zero_params_zero_map(self):
        ps = T.ParameterSet()
        S.init_backbone_params(ps, 4, np.random.default_rng(0))
        for p in ps:
            p.tensor.data[:] = 0.0
        out = S.toy_backbone(T.Tensor(np.random.default_rng(1).uniform(0, 1, (16, 24))), ps)
        assert out.shape == (4, 2, 3)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_constant_image_constant_map(self):
        ps = T.ParameterSet()
        S.init_backbone_params(ps, 4, np.random.default_rng(2))
        out = S.toy_backbone(T.Tensor(np.full((16, 16), 0.37)), ps).data
        for c in range(4):
            assert np.ptp(out[c]) < 1e-12

    def test_single_patch_matrix_oracle(self):
        rng = np.random.default_rng(3)
        ps = T.ParameterSet()
        S.init_backbone_params(ps, 4, rng)
        # conv = center-tap identity so the patch embedding passes through relu
        wconv = np.zeros((4, 4, 3, 3))
        for c in range(4):
            wconv[c, c, 1, 1] = 1.0
        ps["backbone.conv.w"].data[:] = wconv
        ps["backbone.conv.b"].data[:] = 0.0
        img = rng.uniform(0, 1, (8, 8))
        out = S.toy_backbone(T.Tensor(img), ps).data
        patch = img.reshape(-1)
        expect = np.maximum(patch @ ps["backbone.patch.w"].data + ps["backbone.patch.b"].data, 0.0)
        np.testing.assert_allclose(out[:, 0, 0], expect, atol=1e-12)

    def test_grad_check(self):
        rng = np.random.default_rng(4)
        ps = T.ParameterSet()
        S.init_backbone_params(ps, 4, rng)
        img = T.Tensor(rng.uniform(0, 1, (16, 16)))

        def f():
            out = S.toy_backbone(img, ps)
            return (out * out).sum()

        report = T.grad_check(f, ps, eps=1e-5, tol=1e-4, max_elements=8)
        assert report.passed, report.worst()


class TestRasterizeGt:
    def test_empty_scene_all_background(self):
        cfg = desk_config()
        gm, go = S.rasterize_gt([], "four-way", cfg.grid)
        assert go.shape == (5, 50, 50)
        np.testing.assert_array_equal(go[-1], 1.0)
        np.testing.assert_array_equal(go[:-1], 0.0)

    def test_map_channels_count_and_exclusive(self):
        cfg = desk_config()
        gm, go = S.rasterize_gt([], "four-way", cfg.grid)
        assert gm.shape[0] == 7
        np.testing.assert_array_equal(gm.sum(axis=0), 1.0)
        assert gm[S.MAP_CLASSES.index("road")].sum() > 0
        assert gm[S.MAP_CLASSES.index("intersection")].sum() > 0
        assert gm[S.MAP_CLASSES.index("crosswalk")].sum() > 0

    def test_box_footprint_matches_cell_oracle(self):
        from rbev.heads import Box3D
        grid = G.BevGridSpec((-25.6, 25.6), (-25.6, 25.6), (100, 100), S.DESK_ANCHORS, 12.0)
        box = Box3D(0.0, 0.0, 0.8, 4.0, 2.0, 1.6, 0.0, class_id=0)
        agent = S.Agent("car", box, (0, 0))
        _, go = S.rasterize_gt([agent], "straight", grid)
        car_channel = go[0]
        centers = grid.cell_centers().reshape(100, 100, 2)
        for r in range(100):
            for c in range(100):
                x, y = centers[r, c]
                inside = abs(x) <= 2.0 and abs(y) <= 1.0
                assert car_channel[r, c] == (1.0 if inside else 0.0)

    def test_rotated_footprint_oracle(self):
        from rbev.heads import Box3D
        grid = G.BevGridSpec((-10, 10), (-10, 10), (40, 40), (0.5,), 12.0)
        yaw = 0.7
        box = Box3D(1.0, -2.0, 0.8, 4.0, 2.0, 1.6, yaw, class_id=3)
        _, go = S.rasterize_gt([S.Agent("cyclist", box, (0, 0))], "straight", grid)
        chan = go[3]
        centers = grid.cell_centers().reshape(40, 40, 2)
        c, s = math.cos(yaw), math.sin(yaw)
        for r in range(40):
            for q in range(40):
                px, py = centers[r, q] - np.array([1.0, -2.0])
                u = c * px + s * py
                v = -s * px + c * py
                inside = abs(u) <= 2.0 and abs(v) <= 1.0
                assert chan[r, q] == (1.0 if inside else 0.0)


class TestScenarioFile:
    def test_round_trip(self, tmp_path):
        cfg = desk_config(seed=99, layout="t-junction", traffic="high")
        path = tmp_path / "scenario.json"
        S.save_scenario(path, cfg)
        back = S.load_scenario(path)
        assert back.layout == "t-junction" and back.seed == 99
        assert back.grid.cells == cfg.grid.cells
        assert back.grid.anchor_heights == cfg.grid.anchor_heights

    def test_grid_presets(self):
        desk = S.grid_preset("desk")
        m2i = S.grid_preset("m2i")
        assert desk.cells == (100, 100) and m2i.cells == (200, 200)
        assert abs(desk.cell_size[0] - 0.512) < 1e-12
        with pytest.raises(ConfigError):
            S.grid_preset("nope")
