import math

import numpy as np
import pytest

from rbev import encoder as E
from rbev import geometry as G
from rbev import graph as RG
from rbev import tensor as T
from rbev.errors import ConfigError

K_STD = np.array([[800.0, 0.0, 400.0], [0.0, 800.0, 300.0], [0.0, 0.0, 1.0]])


def tiny_configs(channels=8, n_ref=2, layers=1):
    enc = E.EncoderConfig(layers=layers, channels=channels, n_ref=n_ref, temporal_frames=2,
                          attn_heads=2, ffn_width=16, sample_points=2)
    gat = E.GatConfig(layers=2, heads=2, hidden=8, dropout=0.1)
    return enc, gat


def tiny_grid(cells=(3, 3), half=12.0, heights=(0.5, 1.5)):
    return G.BevGridSpec((-half, half), (-half, half), cells, heights, 12.0)


def looking_down_rig(pos, yaw):
    return G.CameraRig.from_pose(pos, yaw, math.radians(-30), K_STD, (800, 600))


def scene(rng, n_cams=2, cells=(3, 3), channels=8, dummies=0):
    """Cameras around the grid aimed at its center so cells are covered."""
    grid = tiny_grid(cells=cells)
    rigs = []
    for _ in range(n_cams):
        pos = (rng.uniform(-14, 14), rng.uniform(-14, 14), rng.uniform(5, 9))
        aim = math.atan2(-pos[1], -pos[0]) + rng.uniform(-0.3, 0.3)
        rigs.append(looking_down_rig(pos, aim))
    fmaps = [T.Tensor(rng.uniform(-1, 1, (channels, 6, 8))) for _ in rigs]
    rigs += [G.CameraRig.dummy((800, 600)) for _ in range(dummies)]
    fmaps += [T.Tensor(np.zeros((channels, 6, 8))) for _ in range(dummies)]
    return grid, rigs, fmaps


class TestGatScore:
    def test_zero_params_logits_equal_bias(self):
        rng = np.random.default_rng(0)
        gat = E.GatConfig(layers=2, heads=2, hidden=8, dropout=0.0)
        ps = T.ParameterSet()
        E.init_gat_params(ps, "gat", 4, gat, rng)
        for p in ps:
            p.tensor.data[:] = 0.0
        ps["gat.out.b"].data[:] = 1.75
        vis = G.VisibilityMask(np.array([[True, False], [True, True]]))
        graph = RG.RelationGraph(
            bev_nodes=T.Tensor(rng.uniform(-1, 1, (2, 4))),
            cam_nodes=T.Tensor(rng.uniform(-1, 1, (2, 4))),
            edges=[(0, 0), (0, 1), (1, 1)],
            edge_attrs=T.Tensor(rng.uniform(-1, 1, (3, 8))),
            visibility=vis,
            attr_table=rng.uniform(-1, 1, (2, 2, 8)),
        )
        logits = E.gat_score(graph, ps, gat).data
        assert logits[0, 0] == 1.75 and logits[1, 0] == 1.75 and logits[1, 1] == 1.75
        assert logits[0, 1] == -np.inf

    def test_single_edge_one_finite_entry(self):
        rng = np.random.default_rng(1)
        gat = E.GatConfig(layers=1, heads=1, hidden=4, dropout=0.0)
        ps = T.ParameterSet()
        E.init_gat_params(ps, "gat", 3, gat, rng)
        vis = G.VisibilityMask(np.array([[False, True], [False, False]]))
        graph = RG.RelationGraph(
            bev_nodes=T.Tensor(rng.uniform(-1, 1, (2, 3))),
            cam_nodes=T.Tensor(rng.uniform(-1, 1, (2, 3))),
            edges=[(1, 0)],
            edge_attrs=T.Tensor(rng.uniform(-1, 1, (1, 8))),
            visibility=vis,
            attr_table=rng.uniform(-1, 1, (2, 2, 8)),
        )
        logits = E.gat_score(graph, ps, gat).data
        assert np.isfinite(logits).sum() == 1
        assert np.isfinite(logits[0, 1])

    def test_matches_hand_rolled_single_layer(self):
        rng = np.random.default_rng(7)
        c = 3
        gat = E.GatConfig(layers=1, heads=2, hidden=4, dropout=0.0)
        ps = T.ParameterSet()
        E.init_gat_params(ps, "gat", c, gat, rng)
        for name in ("gat.out.w_cell", "gat.out.w_cam", "gat.out.w_edge", "gat.out.b"):
            ps[name].data[:] = rng.uniform(-1, 1, ps[name].shape)
        bev = rng.uniform(-1, 1, (1, c))
        cams = rng.uniform(-1, 1, (2, c))
        table = rng.uniform(-1, 1, (1, 2, 8))
        vis = G.VisibilityMask(np.ones((1, 2), dtype=bool))
        graph = RG.RelationGraph(
            bev_nodes=T.Tensor(bev), cam_nodes=T.Tensor(cams),
            edges=[(0, 0), (1, 0)], edge_attrs=T.Tensor(table.reshape(2, 8)),
            visibility=vis, attr_table=table,
        )
        got = E.gat_score(graph, ps, gat).data

        # independent step-by-step message-passing oracle
        def lin(x, name):
            return x @ ps[f"{name}.w"].data + ps[f"{name}.b"].data

        def lrelu(x):
            return np.where(x > 0, x, 0.2 * x)

        def elu(x):
            return np.where(x > 0, x, np.exp(np.minimum(x, 0)) - 1.0)

        cell = lin(bev, "gat.proj")[0]          # [4]
        cam_h = lin(cams, "gat.proj")           # [2, 4]
        a_dst = cell @ ps["gat.k0.w_dst"].data
        a_src = cam_h @ ps["gat.k0.w_src"].data
        a_edge = table[0] @ ps["gat.k0.w_edge"].data
        att = ps["gat.k0.att"].data             # [2 heads, 2 dim]
        e = np.zeros((2, 2))                    # [cam, head]
        for n in range(2):
            z = a_dst + a_src[n] + a_edge[n] + ps["gat.k0.bias"].data
            zh = lrelu(z).reshape(2, 2)
            for h in range(2):
                e[n, h] = zh[h] @ att[h]
        alpha = np.exp(e - e.max(axis=0)) / np.exp(e - e.max(axis=0)).sum(axis=0)
        agg = np.zeros(4)
        for h in range(2):
            for n in range(2):
                msg = (a_src[n] + a_edge[n]).reshape(2, 2)[h]
                agg[2 * h : 2 * h + 2] += alpha[n, h] * msg
        cell_out = elu(agg + cell)
        expect = np.zeros(2)
        for n in range(2):
            expect[n] = (cell_out @ ps["gat.out.w_cell"].data
                         + cam_h[n] @ ps["gat.out.w_cam"].data
                         + table[0, n] @ ps["gat.out.w_edge"].data
                         + ps["gat.out.b"].data)[0]
        np.testing.assert_allclose(got[0], expect, atol=1e-12)

    def test_param_shape_mismatch_raises(self):
        rng = np.random.default_rng(3)
        gat = E.GatConfig(layers=1, heads=1, hidden=4, dropout=0.0)
        ps = T.ParameterSet()
        E.init_gat_params(ps, "gat", 5, gat, rng)  # built for width 5
        vis = G.VisibilityMask(np.ones((1, 1), dtype=bool))
        graph = RG.RelationGraph(
            bev_nodes=T.Tensor(np.zeros((1, 3))), cam_nodes=T.Tensor(np.zeros((1, 3))),
            edges=[(0, 0)], edge_attrs=T.Tensor(np.zeros((1, 8))),
            visibility=vis, attr_table=np.zeros((1, 1, 8)),
        )
        with pytest.raises(ConfigError):
            E.gat_score(graph, ps, gat)

    def test_grad_check(self):
        rng = np.random.default_rng(11)
        gat = E.GatConfig(layers=2, heads=2, hidden=4, dropout=0.0)
        ps = T.ParameterSet()
        E.init_gat_params(ps, "gat", 3, gat, rng)
        for p in ps:
            p.tensor.data[:] = rng.uniform(-0.5, 0.5, p.tensor.shape)
        vis = G.VisibilityMask(np.array([[True, True], [True, False], [False, True]]))
        table = rng.uniform(-1, 1, (3, 2, 8))
        bev = T.Tensor(rng.uniform(-1, 1, (3, 3)), requires_grad=True)
        cams = T.Tensor(rng.uniform(-1, 1, (2, 3)), requires_grad=True)
        probe = T.Tensor(rng.uniform(-1, 1, (3, 2)))

        def f():
            graph = RG.RelationGraph(bev_nodes=bev, cam_nodes=cams, edges=[],
                                     edge_attrs=T.Tensor(np.zeros((0, 8))),
                                     visibility=vis, attr_table=table)
            logits = E.gat_score(graph, ps, gat)
            safe = T.masked_fill(logits, vis.m, 0.0)
            return (safe * probe).sum()

        report = T.grad_check(f, ps, eps=1e-5, tol=1e-4, max_elements=6)
        assert report.passed, report.worst()


class TestFusionWeights:
    def test_single_visible_exactly_one(self):
        logits = T.Tensor([[4.2, -1.0]])
        vis = G.VisibilityMask(np.array([[False, True]]))
        field = E.fusion_weights(logits, vis)
        assert field.weights.data[0, 1] == 1.0
        assert field.weights.data[0, 0] == 0.0

    def test_two_equal_logits(self):
        field = E.fusion_weights(T.Tensor([[3.0, 3.0]]), G.VisibilityMask(np.ones((1, 2), bool)))
        np.testing.assert_array_equal(field.weights.data, [[0.5, 0.5]])

    def test_closed_form(self):
        field = E.fusion_weights(T.Tensor([[1.0, 2.0]]), G.VisibilityMask(np.ones((1, 2), bool)))
        e = math.e
        np.testing.assert_allclose(field.weights.data, [[1 / (1 + e), e / (1 + e)]], atol=1e-12)
        np.testing.assert_allclose(field.weights.data, [[0.2689, 0.7311]], atol=1e-4)

    def test_uncovered_cell_flagged(self):
        field = E.fusion_weights(T.Tensor([[1.0, 2.0], [0.5, 0.5]]),
                                 G.VisibilityMask(np.array([[False, False], [True, True]])))
        np.testing.assert_array_equal(field.weights.data[0], [0.0, 0.0])
        np.testing.assert_array_equal(field.uncovered, [True, False])


class TestDeformSample:
    def make_params(self, rng, channels, n_ref, n_pts):
        ps = T.ParameterSet()
        _ = ps.create("deform.off.w", (channels, n_ref * n_pts * 2), rng, init="zeros")
        ps.create("deform.off.b", (n_ref * n_pts * 2,), rng, init="zeros")
        ps.create("deform.att.w", (channels, n_ref * n_pts), rng, init="zeros")
        ps.create("deform.att.b", (n_ref * n_pts,), rng, init="zeros")
        return ps

    def test_constant_field_preserved(self):
        rng = np.random.default_rng(0)
        c, n_ref, n_pts = 3, 4, 4
        ps = self.make_params(rng, c, n_ref, n_pts)
        fmap = T.Tensor(np.full((c, 8, 10), 2.25))
        query = T.Tensor(rng.uniform(-1, 1, c))
        uvs = [(0.5, 0.5), (0.4, 0.6), (0.3, 0.3), (0.7, 0.2)]
        out = E.deform_sample(query, uvs, fmap, ps, n_pts=n_pts)
        np.testing.assert_allclose(out.data, 2.25, atol=1e-12)

    def test_single_ref_exact_pixel(self):
        rng = np.random.default_rng(1)
        c = 2
        ps = self.make_params(rng, c, 1, 1)
        fmap_data = rng.uniform(-1, 1, (c, 4, 6))
        fmap = T.Tensor(fmap_data)
        # normalized coords of the pixel center (col 3, row 2): u=(3+0.5)/6, v=(2+0.5)/4
        out = E.deform_sample(T.Tensor(np.zeros(c)), [(3.5 / 6, 2.5 / 4)], fmap, ps, n_pts=1)
        np.testing.assert_allclose(out.data, fmap_data[:, 2, 3], atol=1e-12)

    def test_midpoint_bilinear(self):
        rng = np.random.default_rng(2)
        ps = self.make_params(rng, 1, 1, 1)
        fmap = T.Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))
        out = E.deform_sample(T.Tensor(np.zeros(1)), [(0.5, 0.5)], fmap, ps, n_pts=1)
        assert out.data[0] == 1.5

    def test_invalid_refs_masked(self):
        rng = np.random.default_rng(3)
        c, n_ref = 2, 2
        ps = self.make_params(rng, c, n_ref, 1)
        fmap = T.Tensor(np.full((c, 4, 4), 3.0))
        out = E.deform_sample(T.Tensor(np.zeros(c)), [(0.5, 0.5), (0.5, 0.5)], fmap, ps,
                              n_pts=1, valid=[True, False])
        np.testing.assert_allclose(out.data, 3.0 / 2.0, atol=1e-12)


class TestFuseViews:
    def test_hand_convex_combination(self):
        a, b = 1.5, -2.0
        stack = T.Tensor(np.stack([np.full((4, 3), a), np.full((4, 3), b)], axis=1))
        field = E.fusion_weights(T.Tensor(np.tile([math.log(1.0), math.log(3.0)], (4, 1))),
                                 G.VisibilityMask(np.ones((4, 2), bool)))
        w = T.broadcast_to(field.weights.reshape(4, 2, 1), (4, 2, 3))
        fused = (stack * w).sum(axis=1, canonical=True)
        np.testing.assert_allclose(fused.data, 0.25 * a + 0.75 * b, atol=1e-12)

    def test_identical_maps_independent_of_weights(self):
        rng = np.random.default_rng(4)
        feat = rng.uniform(-1, 1, (5, 3))
        stack = T.Tensor(np.stack([feat, feat], axis=1))
        for logit in ([0.0, 0.0], [2.0, -1.0]):
            field = E.fusion_weights(T.Tensor(np.tile(logit, (5, 1))),
                                     G.VisibilityMask(np.ones((5, 2), bool)))
            w = T.broadcast_to(field.weights.reshape(5, 2, 1), (5, 2, 3))
            fused = (stack * w).sum(axis=1, canonical=True)
            np.testing.assert_allclose(fused.data, feat, atol=1e-12)


class TestResca:
    def build(self, rng, n_cams=2, dummies=0, cells=(3, 3)):
        enc, gat = tiny_configs()
        grid, rigs, fmaps = scene(rng, n_cams=n_cams, cells=cells, dummies=dummies)
        ps = T.ParameterSet()
        E.init_encoder_params(ps, grid, enc, gat, rng)
        for p in ps:
            if p.name.endswith(".w") or "att" in p.name or "w_" in p.name:
                p.tensor.data[:] = rng.uniform(-0.3, 0.3, p.tensor.shape)
        pillars = G.reference_pillars(grid)
        uv, valid = G.point_sampling(pillars, rigs)
        vis = G.visibility(valid)
        p_cells = grid.num_cells
        uv_norm = np.zeros((len(rigs), p_cells, enc.n_ref, 2))
        val = np.zeros((len(rigs), p_cells, enc.n_ref), dtype=bool)
        for i, rig in enumerate(rigs):
            iw, ih = rig.image_size
            uv_norm[i, :, :, 0] = uv[i, ..., 0].reshape(enc.n_ref, p_cells).T / iw
            uv_norm[i, :, :, 1] = uv[i, ..., 1].reshape(enc.n_ref, p_cells).T / ih
            val[i] = valid[i].reshape(enc.n_ref, p_cells).T
        queries = T.Tensor(rng.uniform(-1, 1, (p_cells, enc.channels)))
        graph = RG.build_graph(rigs, fmaps, queries, vis, grid)
        return enc, gat, grid, rigs, fmaps, ps, queries, graph, uv_norm, val, vis

    def test_single_view_identity_bitwise(self):
        rng = np.random.default_rng(5)
        enc, gat, grid, rigs, fmaps, ps, queries, graph, uv_norm, val, vis = self.build(rng)
        step = E.resca(queries, fmaps, uv_norm, val, graph, ps, enc, gat, rigs=rigs)
        singles = np.where(vis.m.sum(axis=1) == 1)[0]
        assert len(singles) > 0, "scene produced no single-camera cells; reseed"
        for p in singles:
            n = int(np.argmax(vis.m[p]))
            assert step.field.weights.data[p, n] == 1.0
            assert np.array_equal(step.fused.data[p], step.per_camera[n].data[p])

    def test_uncovered_cells_keep_query(self):
        rng = np.random.default_rng(6)
        enc, gat, grid, rigs, fmaps, ps, queries, graph, uv_norm, val, vis = self.build(rng, n_cams=1)
        step = E.resca(queries, fmaps, uv_norm, val, graph, ps, enc, gat, rigs=rigs)
        uncovered = np.where(~vis.m.any(axis=1))[0]
        for p in uncovered:
            np.testing.assert_array_equal(step.fused.data[p], 0.0)

    def test_weights_sum_to_one_on_covered_cells(self):
        rng = np.random.default_rng(8)
        enc, gat, grid, rigs, fmaps, ps, queries, graph, uv_norm, val, vis = self.build(rng, n_cams=3)
        step = E.resca(queries, fmaps, uv_norm, val, graph, ps, enc, gat, rigs=rigs)
        covered = vis.m.any(axis=1)
        sums = step.field.weights.data.sum(axis=1)
        np.testing.assert_allclose(sums[covered], 1.0, atol=1e-6)
        np.testing.assert_array_equal(sums[~covered], 0.0)
        assert (step.field.weights.data[~vis.m] == 0.0).all()

    def test_convexity_bound(self):
        rng = np.random.default_rng(9)
        enc, gat, grid, rigs, fmaps, ps, queries, graph, uv_norm, val, vis = self.build(rng, n_cams=3)
        step = E.resca(queries, fmaps, uv_norm, val, graph, ps, enc, gat, rigs=rigs)
        feats = np.stack([f.data for f in step.per_camera], axis=1)  # [P, N, C]
        for p in range(grid.num_cells):
            visible = vis.m[p]
            if not visible.any():
                continue
            lo = feats[p, visible].min(axis=0) - 1e-12
            hi = feats[p, visible].max(axis=0) + 1e-12
            assert (step.fused.data[p] >= lo).all() and (step.fused.data[p] <= hi).all()


class TestTemporalSelfAttention:
    def make_params(self, rng, c=8):
        ps = T.ParameterSet()
        for nm in ("q", "k", "v"):
            ps.create(f"tsa.{nm}.w", (c, c), rng, init="xavier")
            ps.create(f"tsa.{nm}.b", (c,), rng, init="zeros")
        ps.create("tsa.o.w", (c, c), rng, init="zeros")
        ps.create("tsa.o.b", (c,), rng, init="zeros")
        return ps

    def test_empty_history_deterministic(self):
        rng = np.random.default_rng(0)
        ps = self.make_params(rng)
        q = T.Tensor(rng.uniform(-1, 1, (9, 8)))
        a = E.temporal_self_attention(q, [], (3, 3), ps, "tsa", heads=2, max_frames=2)
        b = E.temporal_self_attention(q, [], (3, 3), ps, "tsa", heads=2, max_frames=2)
        np.testing.assert_array_equal(a.data, b.data)

    def test_zero_out_projection_residual_dominates(self):
        rng = np.random.default_rng(1)
        ps = self.make_params(rng)  # o.w is zero-init
        q = T.Tensor(rng.uniform(-1, 1, (9, 8)))
        hist = [T.Tensor(rng.uniform(-1, 1, (9, 8)))]
        out = E.temporal_self_attention(q, hist, (3, 3), ps, "tsa", heads=2, max_frames=2)
        np.testing.assert_array_equal(out.data, q.data)

    def test_two_frame_oracle(self):
        # 1x1 grid: only the center token of each frame is valid -> S = 2
        rng = np.random.default_rng(2)
        c = 4
        ps = T.ParameterSet()
        for nm in ("q", "k", "v", "o"):
            ps.create(f"tsa.{nm}.w", (c, c), rng, init="xavier")
            ps.create(f"tsa.{nm}.b", (c,), rng, init="zeros")
        q_in = rng.uniform(-1, 1, (1, c))
        h1 = rng.uniform(-1, 1, (1, c))
        h2 = rng.uniform(-1, 1, (1, c))
        out = E.temporal_self_attention(T.Tensor(q_in), [T.Tensor(h1), T.Tensor(h2)], (1, 1),
                                        ps, "tsa", heads=1, max_frames=2).data

        def lin(x, nm):
            return x @ ps[f"tsa.{nm}.w"].data + ps[f"tsa.{nm}.b"].data

        toks = np.concatenate([h1, h2], axis=0)
        qv = lin(q_in, "q")[0]
        kv = lin(toks, "k")
        vv = lin(toks, "v")
        scores = kv @ qv / math.sqrt(c)
        w = np.exp(scores - scores.max())
        w = w / w.sum()
        ctx = w @ vv
        expect = q_in[0] + lin(ctx[None, :], "o")[0]
        np.testing.assert_allclose(out[0], expect, atol=1e-12)


class TestEncode:
    def run_encode(self, rng, n_cams=2, dummies=0, perm=None, channels=8):
        enc, gat = tiny_configs(channels=channels)
        grid, rigs, fmaps = scene(rng, n_cams=n_cams, cells=(3, 3), channels=channels,
                                  dummies=dummies)
        ps = T.ParameterSet()
        E.init_encoder_params(ps, grid, enc, gat, rng)
        jiggle = np.random.default_rng(123)
        for p in ps:
            p.tensor.data += jiggle.normal(0, 0.05, p.tensor.shape)
        if perm is not None:
            rigs = [rigs[i] for i in perm]
            fmaps = [fmaps[i] for i in perm]
        res = E.encode(rigs, fmaps, [], grid, enc, gat, ps)
        return res, ps

    def test_smoke_zero_params_finite(self):
        rng = np.random.default_rng(20)
        enc, gat = tiny_configs()
        grid, rigs, fmaps = scene(rng, n_cams=2, cells=(3, 3))
        ps = T.ParameterSet()
        E.init_encoder_params(ps, grid, enc, gat, rng)
        for p in ps:
            if not p.name.endswith("gamma"):
                p.tensor.data[:] = 0.0
        res = E.encode(rigs, fmaps, [], grid, enc, gat, ps)
        assert np.isfinite(res.bev.data).all()

    def test_dummy_padding_bit_identical(self):
        base, _ = self.run_encode(np.random.default_rng(21))
        padded, _ = self.run_encode(np.random.default_rng(21), dummies=3)
        assert np.abs(padded.bev.data - base.bev.data).max() <= 1e-12
        np.testing.assert_array_equal(padded.fusion.weights.data[:, :2],
                                      base.fusion.weights.data)
        np.testing.assert_array_equal(padded.fusion.weights.data[:, 2:], 0.0)

    def test_camera_permutation_equivariance(self):
        perm = [2, 0, 1]
        base, _ = self.run_encode(np.random.default_rng(22), n_cams=3)
        permuted, _ = self.run_encode(np.random.default_rng(22), n_cams=3, perm=perm)
        assert np.abs(permuted.bev.data - base.bev.data).max() <= 1e-9
        np.testing.assert_array_equal(permuted.fusion.weights.data,
                                      base.fusion.weights.data[:, perm])

    def test_history_changes_output(self):
        rng = np.random.default_rng(23)
        enc, gat = tiny_configs()
        grid, rigs, fmaps = scene(rng, n_cams=2, cells=(3, 3))
        ps = T.ParameterSet()
        E.init_encoder_params(ps, grid, enc, gat, rng)
        jig = np.random.default_rng(5)
        for p in ps:
            p.tensor.data += jig.normal(0, 0.05, p.tensor.shape)
        empty = E.encode(rigs, fmaps, [], grid, enc, gat, ps)
        hist = [T.Tensor(jig.uniform(-1, 1, (grid.num_cells, enc.channels)))]
        with_hist = E.encode(rigs, fmaps, hist, grid, enc, gat, ps)
        assert np.abs(with_hist.bev.data - empty.bev.data).max() > 1e-9

    def test_mismatched_channels_raise(self):
        rng = np.random.default_rng(24)
        enc, gat = tiny_configs()
        grid, rigs, _ = scene(rng, n_cams=1, cells=(2, 2))
        ps = T.ParameterSet()
        E.init_encoder_params(ps, grid, enc, gat, rng)
        bad = [T.Tensor(np.zeros((enc.channels + 4, 4, 4)))]
        with pytest.raises(ConfigError):
            E.encode(rigs, bad, [], grid, enc, gat, ps)
