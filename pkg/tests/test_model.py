import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trajgraph import tensor as tc
from trajgraph.data import Scene
from trajgraph.graph import build_vlg
from trajgraph.model import (
    RHO_LIMIT,
    ModelConfig,
    adaptive_interaction_mask,
    feature_enhance,
    fixed_interaction_mask,
    gaussian_links,
    gcn_fuse,
    init_params,
    model_forward,
    param_count,
    param_shapes,
    self_attention,
    sparsify_adjacency,
    tcn_decode,
    vlg_embed,
)
from trajgraph.synthetic import random_walk_scene
from trajgraph.tensor import Tensor, finite_diff_check

CFG = ModelConfig(d=8, tcn_depth=3)


def _params(cfg=CFG, seed=0):
    return init_params(cfg, seed)


class TestEmbedding:
    def test_zero_velocity_gives_label_row(self):
        scene = Scene(np.zeros((20, 2, 2)), np.array([2, 4]), np.arange(2))
        p = _params()
        e_s, _ = vlg_embed(build_vlg(scene), p, CFG)
        np.testing.assert_array_equal(e_s.data[:, 0], np.tile(p["emb.lab"].data[2], (8, 1)))
        np.testing.assert_array_equal(e_s.data[:, 1], np.tile(p["emb.lab"].data[4], (8, 1)))

    def test_zero_label_weights_reduce_to_velocity_map(self):
        batch = build_vlg(random_walk_scene(3, seed=1))
        p = _params()
        p["emb.lab"].data[:] = 0.0
        e_s, _ = vlg_embed(batch, p, CFG)
        np.testing.assert_allclose(e_s.data, batch.velocity @ p["emb.vel"].data, rtol=0, atol=1e-15)

    def test_label_difference_is_row_difference(self):
        vel = np.cumsum(np.tile([[0.3, -0.1]], (20, 1)), axis=0)
        scene = Scene(np.stack([vel, vel], axis=1), np.array([1, 5]), np.arange(2))
        p = _params()
        e_s, _ = vlg_embed(build_vlg(scene), p, CFG)
        diff = e_s.data[:, 0] - e_s.data[:, 1]
        expected = p["emb.lab"].data[1] - p["emb.lab"].data[5]
        np.testing.assert_allclose(diff, np.tile(expected, (8, 1)), rtol=0, atol=1e-14)

    def test_separate_decomposition_bitwise(self):
        batch = build_vlg(random_walk_scene(4, seed=2))
        p = _params()
        full, _ = vlg_embed(batch, p, CFG)
        vel_only = batch.velocity @ p["emb.vel"].data
        lab_only = batch.labels_onehot @ p["emb.lab"].data
        assert full.data.tobytes() == (vel_only + lab_only).tobytes()

    def test_temporal_view_is_transpose(self):
        e_s, e_t = vlg_embed(build_vlg(random_walk_scene(3)), _params(), CFG)
        np.testing.assert_array_equal(e_t.data, e_s.data.transpose(1, 0, 2))

    @pytest.mark.parametrize("mode,present,absent", [
        ("joint", ["emb.joint"], ["emb.vel", "emb.lab"]),
        ("velocity", ["emb.vel"], ["emb.lab", "emb.joint"]),
    ])
    def test_ablation_parameter_sets(self, mode, present, absent):
        shapes = param_shapes(ModelConfig(embedding=mode))
        assert all(k in shapes for k in present) and not any(k in shapes for k in absent)

    def test_velocity_only_ignores_labels(self):
        cfg = ModelConfig(d=8, tcn_depth=2, embedding="velocity")
        scene = random_walk_scene(3, seed=5)
        p = init_params(cfg)
        a = model_forward(build_vlg(scene), p, cfg).mu.data
        scene.class_ids = (scene.class_ids + 1) % 6
        b = model_forward(build_vlg(scene), p, cfg).mu.data
        assert a.tobytes() == b.tobytes()


class TestAttention:
    def test_single_node(self):
        e = Tensor(np.random.default_rng(0).normal(size=(8, 1, 8)))
        w = Tensor(np.eye(8))
        a = self_attention(e, w, w, np.ones((1, 1)))
        np.testing.assert_array_equal(a.data, np.ones((8, 1, 1)))

    def test_causal_first_query_sees_only_itself(self):
        batch = build_vlg(random_walk_scene(3, seed=1))
        p = _params()
        _, e_t = vlg_embed(batch, p, CFG)
        a = self_attention(e_t, p["attn.temporal.q"], p["attn.temporal.k"], batch.temporal_query_mask)
        assert a.shape == (3, 8, 8)
        np.testing.assert_array_equal(a.data[:, 0], np.tile(np.eye(8)[0], (3, 1)))
        # Zero mass on steps after the query.
        assert np.all(np.triu(a.data, k=1) == 0)

    def test_equal_embeddings_uniform_rows(self):
        e = Tensor(np.tile(np.random.default_rng(2).normal(size=8), (2, 5, 1)))
        w = Tensor(np.random.default_rng(3).normal(size=(8, 8)))
        mask = np.tril(np.ones((5, 5)))
        a = self_attention(e, w, w, mask).data
        expected = mask / mask.sum(-1, keepdims=True)
        np.testing.assert_allclose(a, np.broadcast_to(expected, a.shape), rtol=0, atol=1e-15)

    def test_spatial_shape(self):
        batch = build_vlg(random_walk_scene(4))
        p = _params()
        e_s, _ = vlg_embed(batch, p, CFG)
        a = self_attention(e_s, p["attn.spatial.q"], p["attn.spatial.k"], batch.spatial_adj_init)
        assert a.shape == (8, 4, 4)


class TestEnhancement:
    def test_zero_kernels(self):
        p = _params()
        for k in ("k11", "k13", "k31"):
            p[f"enh.spatial.{k}"].data[:] = 0.0
        a = Tensor(np.random.default_rng(0).uniform(size=(8, 3, 3)))
        np.testing.assert_array_equal(feature_enhance(a, p, "spatial").data, 0.0)

    def test_identity_path(self):
        p = _params()
        p["enh.spatial.k11"].data[:] = np.eye(8)[:, :, None, None]
        p["enh.spatial.k13"].data[:] = 0.0
        p["enh.spatial.k31"].data[:] = 0.0
        a = np.random.default_rng(1).normal(size=(8, 3, 3))
        out = feature_enhance(Tensor(a), p, "spatial").data
        np.testing.assert_allclose(out, np.where(a > 0, a, 0.25 * a), rtol=0, atol=1e-15)

    @pytest.mark.parametrize("stream,shape", [("spatial", (8, 3, 3)), ("temporal", (2, 8, 8))])
    def test_gradient_through_enhancement(self, stream, shape):
        p = _params()
        rng = np.random.default_rng(2)
        w = rng.normal(size=shape)
        err = finite_diff_check(
            lambda t: tc.sum(tc.mul(feature_enhance(t, p, stream), Tensor(w))), rng.uniform(size=shape)
        )
        assert err < 1e-5

    def test_gradient_small_stack(self):
        cfg = ModelConfig(d=8, t_obs=2, tcn_depth=2)
        p = init_params(cfg)
        rng = np.random.default_rng(3)
        w = rng.normal(size=(2, 3, 3))
        err = finite_diff_check(
            lambda t: tc.sum(tc.mul(feature_enhance(t, p, "spatial"), Tensor(w))), rng.uniform(size=(2, 3, 3))
        )
        assert err < 1e-5

    def test_kernel_gradients(self):
        p = _params()
        a = Tensor(np.random.default_rng(4).uniform(size=(8, 3, 3)))
        w = np.random.default_rng(5).normal(size=(8, 3, 3))
        for name in ("enh.spatial.k13", "enh.spatial.k31"):
            def f(k, name=name):
                q = dict(p)
                q[name] = k
                return tc.sum(tc.mul(feature_enhance(a, q, "spatial"), Tensor(w)))
            assert finite_diff_check(f, p[name].data) < 1e-5


class TestMask:
    def test_worked_row(self):
        f = np.array([[0.0, 0.0, 2.1972, ]])
        # 1x3 row is not square; evaluate pre-self-loop on the raw rule.
        assert adaptive_interaction_mask(f, self_loops=False).tolist() == [[0, 0, 1]]

    def test_constant_row(self):
        f = np.full((3, 3), 0.7)
        np.testing.assert_array_equal(adaptive_interaction_mask(f, self_loops=False), 0.0)
        np.testing.assert_array_equal(adaptive_interaction_mask(f), np.eye(3))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (2, 4, 4), elements=st.floats(-20, 20)))
    def test_binary_unit_diagonal(self, f):
        for m in (adaptive_interaction_mask(f), fixed_interaction_mask(f)):
            assert set(np.unique(m)) <= {0.0, 1.0}
            np.testing.assert_array_equal(np.diagonal(m, axis1=-2, axis2=-1), 1.0)

    def test_fixed_threshold(self):
        f = np.array([[-1.0, 0.0, 1.0], [0.1, -0.1, 0.0], [5.0, 5.0, 5.0]])
        assert fixed_interaction_mask(f, 0.5, self_loops=False).tolist() == [[0, 0, 1], [1, 0, 0], [1, 1, 1]]


class TestSparsify:
    def test_identity_mask(self):
        a = Tensor(np.random.default_rng(0).dirichlet(np.ones(4), size=(2, 4)))
        out = sparsify_adjacency(a, np.broadcast_to(np.eye(4), (2, 4, 4)), np.ones((4, 4)))
        np.testing.assert_allclose(out.data, np.broadcast_to(np.eye(4), (2, 4, 4)), rtol=0, atol=1e-15)

    def test_dense_limit(self):
        a = np.random.default_rng(1).dirichlet(np.ones(4), size=(2, 4))
        out = sparsify_adjacency(Tensor(a), np.ones((2, 4, 4)), np.ones((4, 4))).data
        dense = a + np.eye(4)
        np.testing.assert_allclose(out, dense / dense.sum(-1, keepdims=True), rtol=0, atol=1e-15)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        mask = (rng.random((2, 4, 4)) > 0.5).astype(float)
        w = rng.normal(size=(2, 4, 4))
        err = finite_diff_check(
            lambda t: tc.sum(tc.mul(sparsify_adjacency(t, mask, np.tril(np.ones((4, 4)))), Tensor(w))),
            rng.uniform(size=(2, 4, 4)),
        )
        assert err < 1e-6


class TestGcn:
    def test_identity_aggregation(self):
        cfg = ModelConfig(d=4)
        p = init_params(cfg)
        for b in ("b1", "b2"):
            for s in ("spatial", "temporal"):
                p[f"gcn.{b}.{s}.w"].data[:] = np.eye(4)
        e = np.random.default_rng(0).uniform(0.1, 1.0, size=(5, 3, 4))
        h = gcn_fuse(
            Tensor(e), Tensor(np.broadcast_to(np.eye(3), (5, 3, 3)).copy()),
            Tensor(e.transpose(1, 0, 2)), Tensor(np.broadcast_to(np.eye(5), (3, 5, 5)).copy()), p,
        )
        np.testing.assert_allclose(h.data, 2 * e, rtol=0, atol=1e-15)

    def test_degenerate_single_node(self):
        cfg = ModelConfig(d=4)
        p = init_params(cfg)
        e = np.random.default_rng(1).normal(size=(1, 1, 4))
        one = Tensor(np.ones((1, 1, 1)))
        h = gcn_fuse(Tensor(e), one, Tensor(e), one, p)
        assert h.shape == (1, 1, 4)

    def test_permutation_equivariance(self):
        cfg = ModelConfig(d=6)
        p = init_params(cfg, seed=3)
        rng = np.random.default_rng(4)
        e = rng.normal(size=(5, 4, 6))
        adj_s = rng.dirichlet(np.ones(4), size=(5, 4))
        adj_t = rng.dirichlet(np.ones(5), size=(4, 5))
        perm = np.array([3, 1, 0, 2])
        h = gcn_fuse(Tensor(e), Tensor(adj_s), Tensor(e.transpose(1, 0, 2)), Tensor(adj_t), p).data
        e_p = e[:, perm]
        adj_s_p = adj_s[:, perm][:, :, perm]
        h_p = gcn_fuse(Tensor(e_p), Tensor(adj_s_p), Tensor(e_p.transpose(1, 0, 2)), Tensor(adj_t[perm]), p).data
        np.testing.assert_allclose(h_p, h[:, perm], rtol=0, atol=1e-12)


class TestDecode:
    def test_links_at_zero(self):
        field = gaussian_links(Tensor(np.zeros((12, 2, 5))))
        np.testing.assert_array_equal(field.mu.data, 0.0)
        np.testing.assert_array_equal(field.sigma.data, 1.0)
        np.testing.assert_array_equal(field.rho.data, 0.0)

    def test_output_shape(self):
        cfg = ModelConfig(d=8)
        field = tcn_decode(Tensor(np.random.default_rng(0).normal(size=(8, 5, 8))), init_params(cfg), cfg)
        assert field.mu.shape == (12, 5, 2) and field.sigma.shape == (12, 5, 2) and field.rho.shape == (12, 5)

    def test_gradient(self):
        p = _params()
        rng = np.random.default_rng(1)
        w = rng.normal(size=(12, 2, 5))

        def f(h):
            fld = tcn_decode(h, p, CFG)
            out = tc.concat([fld.mu, fld.sigma, tc.reshape(fld.rho, (12, 2, 1))], axis=-1)
            return tc.sum(tc.mul(out, Tensor(w)))

        assert finite_diff_check(f, rng.normal(size=(8, 2, 8))) < 1e-4

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (3, 2, 5), elements=st.sampled_from([-50.0, -10.0, 0.0, 10.0, 50.0])))
    def test_link_ranges_extreme(self, raw):
        field = gaussian_links(Tensor(raw))
        assert np.all(field.sigma.data > 0)
        assert np.all(np.abs(field.rho.data) <= RHO_LIMIT) and np.all(np.abs(field.rho.data) < 1)


class TestForward:
    def test_deterministic(self):
        batch = build_vlg(random_walk_scene(4, seed=9))
        p = _params()
        a, b = model_forward(batch, p, CFG), model_forward(batch, p, CFG)
        for x, y in zip(a.arrays(), b.arrays()):
            assert x.tobytes() == y.tobytes()

    def test_invariants_default_config(self):
        cfg = ModelConfig()
        field = model_forward(build_vlg(random_walk_scene(5, seed=1)), init_params(cfg), cfg)
        mu, sigma, rho = field.arrays()
        assert mu.shape == (12, 5, 2)
        assert np.all(sigma > 0) and np.all(np.abs(rho) < 1)

    def test_trace_properties(self):
        trace = {}
        model_forward(build_vlg(random_walk_scene(4, seed=2)), _params(), CFG, trace=trace)
        for key in ("adj_s", "adj_t"):
            np.testing.assert_allclose(trace[key].data.sum(-1), 1.0, atol=1e-9)
        assert np.all(np.triu(trace["adj_t"].data, k=1) == 0)
        assert np.all(np.triu(trace["a_t"].data, k=1) == 0)

    def test_agent_permutation_equivariance_without_asymmetric_paths(self):
        # The 1x3 / 3x1 enhancement paths slide over the agent map, so they see
        # agent order; with only the 1x1 path the whole network is equivariant.
        scene = random_walk_scene(4, seed=6)
        perm = np.array([1, 3, 0, 2])
        shuffled = Scene(scene.positions[:, perm], scene.class_ids[perm], scene.agent_ids[perm])
        p = _params()
        p["enh.spatial.k13"].data[:] = 0.0
        p["enh.spatial.k31"].data[:] = 0.0
        a = model_forward(build_vlg(scene), p, CFG).mu.data
        b = model_forward(build_vlg(shuffled), p, CFG).mu.data
        np.testing.assert_allclose(b, a[:, perm], rtol=0, atol=1e-12)

    def test_param_count_pure(self):
        assert param_count(ModelConfig()) == param_count(ModelConfig())
        assert param_count(ModelConfig(d=32)) < param_count(ModelConfig(d=64))
        assert param_count(ModelConfig()) == sum(t.data.size for t in init_params(ModelConfig()).values())
