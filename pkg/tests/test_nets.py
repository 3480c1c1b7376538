import math

import numpy as np
import pytest

from sgswarm import kernels, nets
from sgswarm.nets import (
    Grads,
    NetSpec,
    NetWeights,
    backward,
    finite_difference_gradient,
    forward,
    forward_batch,
    forward_cached,
    backward_cached,
    init_weights,
    load_net,
    make_optimizer,
    optimizer_step,
    orthogonal_matrix,
    save_net,
)


def small_spec(out_act="none"):
    return NetSpec(3, 5, 2, 2, output_activation=out_act)


def zero_weights(spec):
    shapes = spec.layer_shapes()
    return NetWeights([np.zeros(s) for s in shapes], [np.zeros(s[0]) for s in shapes])


class TestForward:
    def test_zero_weights_give_zero_output(self):
        spec = small_spec("tanh")
        w = zero_weights(spec)
        y = forward(spec, w, np.array([1.0, -2.0, 3.0]))
        assert np.array_equal(y, np.zeros(2))

    def test_leaky_relu_definition(self):
        # 1->1->1 pass-through: hidden pre-activation -1 -> leaky slope 0.01.
        spec = NetSpec(1, 1, 1, 1, output_activation="none")
        w = NetWeights([np.array([[1.0]]), np.array([[1.0]])],
                       [np.zeros(1), np.zeros(1)])
        y = forward(spec, w, np.array([-1.0]))
        assert y[0] == pytest.approx(-0.01, abs=1e-15)

    def test_golden_seeded_forward(self):
        # Frozen from the reference backend's first seeded run.
        spec = NetSpec(4, 8, 2, 2, output_activation="tanh")
        w = init_weights(spec, "uniform-scaled", seed=20240817)
        y = forward(spec, w, np.array([0.25, -0.5, 1.5, -2.0]))
        golden = np.array([0.6965557259885162, -0.03030683181171318])
        np.testing.assert_allclose(y, golden, rtol=1e-12)

    def test_hand_computed_two_layer(self):
        # 2->1->1 with explicit arithmetic: z1 = 0.5*2 + (-1)*1 + 0.1 = 0.1,
        # a1 = 0.1 (positive), z2 = -3*0.1 + 0.2 = -0.1, y = tanh(-0.1).
        spec = NetSpec(2, 1, 1, 1, output_activation="tanh")
        w = NetWeights([np.array([[0.5, -1.0]]), np.array([[-3.0]])],
                       [np.array([0.1]), np.array([0.2])])
        y = forward(spec, w, np.array([2.0, 1.0]))
        assert y[0] == pytest.approx(math.tanh(-0.1), abs=1e-15)

    def test_dimension_mismatch_rejected(self):
        spec = small_spec()
        w = zero_weights(spec)
        with pytest.raises(ValueError):
            forward(spec, w, np.zeros(4))

    def test_tanh_output_range(self):
        spec = small_spec("tanh")
        rng = np.random.default_rng(3)
        w = init_weights(spec, "uniform-scaled", seed=11)
        for _ in range(50):
            y = forward(spec, w, rng.standard_normal(3) * 3)
            assert np.all(y > -1.0) and np.all(y < 1.0)

    def test_forward_deterministic(self):
        spec = small_spec("tanh")
        w = init_weights(spec, "uniform-scaled", seed=5)
        x = np.array([0.1, 0.2, 0.3])
        y1, y2 = forward(spec, w, x), forward(spec, w, x)
        assert np.array_equal(y1, y2)


class TestBackward:
    def test_zero_output_gradient(self):
        spec = small_spec()
        w = init_weights(spec, "uniform-scaled", seed=0)
        g = backward(spec, w, np.array([1.0, 2.0, 3.0]), np.zeros(2))
        assert all(np.all(x == 0) for x in g.params())
        assert np.all(g.dX == 0)

    def test_linear_chain_rule_by_hand(self):
        # Pass-through hidden (weight 1, positive input), output weight w:
        # y = w*x, so dW_out = g*x, dx = g*w.
        spec = NetSpec(1, 1, 1, 1, output_activation="none")
        wv, xv, gv = 1.7, 2.0, -0.3
        w = NetWeights([np.array([[1.0]]), np.array([[wv]])],
                       [np.zeros(1), np.zeros(1)])
        g = backward(spec, w, np.array([xv]), np.array([gv]))
        assert g.dW[1][0, 0] == pytest.approx(gv * xv, rel=1e-12)
        assert g.dX[0] == pytest.approx(gv * wv, rel=1e-12)

    def test_shapes_mirror_weights(self):
        spec = small_spec("tanh")
        w = init_weights(spec, "uniform-scaled", seed=1)
        g = backward(spec, w, np.zeros(3), np.ones(2))
        for gw, ww in zip(g.dW, w.W):
            assert gw.shape == ww.shape
        for gb, wb in zip(g.db, w.b):
            assert gb.shape == wb.shape
        assert g.dX.shape == (3,)

    def test_output_gradient_dimension_checked(self):
        spec = small_spec()
        w = init_weights(spec, "uniform-scaled", seed=1)
        with pytest.raises(ValueError):
            backward(spec, w, np.zeros(3), np.zeros(5))

    @pytest.mark.parametrize("out_act", ["none", "tanh"])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_finite_differences(self, out_act, seed):
        rng = np.random.default_rng(seed)
        spec = NetSpec(3, 4, 2, 2, output_activation=out_act)
        w = init_weights(spec, "uniform-scaled", seed=seed)
        x = rng.standard_normal(3)
        target = rng.standard_normal(2)

        def loss(weights):
            d = forward(spec, weights, x) - target
            return 0.5 * float(d @ d)

        y = forward(spec, w, x)
        analytic = backward(spec, w, x, y - target)
        numeric = finite_difference_gradient(loss, w)
        a, n = analytic.to_flat(), numeric.to_flat()
        denom = max(float(np.max(np.abs(n))), 1e-12)
        assert np.max(np.abs(a - n)) / denom < 1e-6


class TestFiniteDifference:
    def test_quadratic(self):
        spec = NetSpec(1, 1, 1, 1)
        w = NetWeights([np.array([[1.0]]), np.array([[2.0]])],
                       [np.zeros(1), np.zeros(1)])

        def loss(weights):
            f = weights.to_flat()
            return 0.5 * float(f @ f)

        g = finite_difference_gradient(loss, w).to_flat()
        np.testing.assert_allclose(g, w.to_flat(), atol=1e-6)

    def test_constant_loss(self):
        spec = small_spec()
        w = init_weights(spec, "uniform-scaled", seed=2)
        g = finite_difference_gradient(lambda _: 4.2, w).to_flat()
        assert np.max(np.abs(g)) < 1e-9

    def test_epsilon_validated(self):
        w = zero_weights(small_spec())
        with pytest.raises(ValueError):
            finite_difference_gradient(lambda _: 0.0, w, epsilon=0.0)


class TestInit:
    def test_orthogonal_square(self):
        q = orthogonal_matrix(4, 4, np.random.default_rng(0))
        np.testing.assert_allclose(q.T @ q, np.eye(4), atol=1e-6)

    def test_same_seed_bitwise_identical(self):
        spec = small_spec()
        a = init_weights(spec, "uniform-scaled", seed=99)
        b = init_weights(spec, "uniform-scaled", seed=99)
        assert np.array_equal(a.to_flat(), b.to_flat())

    def test_skill_embedding_columns_unit_norm(self):
        # 96x32: thin side is the 32 columns, which come out orthonormal.
        q = orthogonal_matrix(96, 32, np.random.default_rng(7))
        norms = np.linalg.norm(q, axis=0)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)
        np.testing.assert_allclose(q.T @ q, np.eye(32), atol=1e-6)

    def test_orthogonal_scheme_on_net(self):
        spec = NetSpec(4, 4, 1, 4)
        w = init_weights(spec, "orthogonal", seed=3)
        for mat in w.W:
            np.testing.assert_allclose(mat.T @ mat, np.eye(4), atol=1e-6)

    def test_unknown_scheme_rejected(self):
        with pytest.raises(ValueError):
            init_weights(small_spec(), "xavier", seed=0)


class TestOptimizer:
    def test_sgd_basic(self):
        spec = NetSpec(1, 1, 1, 1)
        w = NetWeights([np.array([[1.0]]), np.array([[1.0]])],
                       [np.zeros(1), np.zeros(1)])
        g = Grads([np.array([[2.0]]), np.array([[0.0]])],
                  [np.zeros(1), np.zeros(1)], None)
        opt = make_optimizer("sgd", 0.1, w)
        optimizer_step(opt, w, g)
        assert w.W[0][0, 0] == pytest.approx(0.8, rel=1e-12)
        assert opt.step == 1

    def test_zero_gradient_leaves_weights(self):
        spec = small_spec()
        w = init_weights(spec, "uniform-scaled", seed=4)
        before = w.to_flat()
        g = Grads([np.zeros_like(x) for x in w.W],
                  [np.zeros_like(x) for x in w.b], None)
        for kind in ("sgd", "adam"):
            wc = w.copy()
            optimizer_step(make_optimizer(kind, 0.1, wc), wc, g)
            assert np.array_equal(wc.to_flat(), before)

    def test_adam_converges_on_quadratic(self):
        # f(w) = w^2 from w=5 at lr 0.1: |w| < 0.1 after 200 steps.
        spec = NetSpec(1, 1, 1, 1)
        w = NetWeights([np.array([[5.0]]), np.array([[0.0]])],
                       [np.zeros(1), np.zeros(1)])
        opt = make_optimizer("adam", 0.1, w)
        for _ in range(200):
            g = Grads([np.array([[2.0 * w.W[0][0, 0]]]), np.zeros((1, 1))],
                      [np.zeros(1), np.zeros(1)], None)
            optimizer_step(opt, w, g)
        assert abs(w.W[0][0, 0]) < 0.1

    def test_shape_mismatch_rejected(self):
        spec = small_spec()
        w = init_weights(spec, "uniform-scaled", seed=4)
        bad = Grads([np.zeros((1, 1)) for _ in w.W],
                    [np.zeros(1) for _ in w.b], None)
        with pytest.raises(ValueError):
            optimizer_step(make_optimizer("sgd", 0.1, w), w, bad)

    def test_invalid_config_rejected(self):
        w = zero_weights(small_spec())
        with pytest.raises(ValueError):
            make_optimizer("adagrad", 0.1, w)
        with pytest.raises(ValueError):
            make_optimizer("sgd", -0.1, w)


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        spec = small_spec("tanh")
        w = init_weights(spec, "uniform-scaled", seed=8)
        save_net(tmp_path, "actor", spec, w, seed=8)
        spec2, w2 = load_net(tmp_path, "actor")
        assert spec2 == spec
        assert np.array_equal(w.to_flat(), w2.to_flat())

    def test_unknown_version_rejected(self, tmp_path):
        spec = small_spec()
        w = init_weights(spec, "uniform-scaled", seed=8)
        save_net(tmp_path, "n", spec, w)
        manifest = (tmp_path / "n.netjson").read_text()
        (tmp_path / "n.netjson").write_text(manifest.replace('"format_version": 1',
                                                             '"format_version": 99'))
        with pytest.raises(ValueError, match="version"):
            load_net(tmp_path, "n")

    def test_truncated_payload_rejected(self, tmp_path):
        spec = small_spec()
        w = init_weights(spec, "uniform-scaled", seed=8)
        save_net(tmp_path, "n", spec, w)
        data = (tmp_path / "n.netbin").read_bytes()
        (tmp_path / "n.netbin").write_bytes(data[:-16])
        with pytest.raises(ValueError):
            load_net(tmp_path, "n")


class TestBackendEquivalence:
    """The compiled extension must match the NumPy reference closely."""

    def test_all_ops_agree(self):
        backends = kernels.get_backends()
        if len(backends) < 2:
            pytest.skip("compiled backend not built")
        rng = np.random.default_rng(12)
        spec = NetSpec(6, 16, 3, 4, output_activation="tanh")
        w = init_weights(spec, "uniform-scaled", seed=12)
        X = rng.standard_normal((32, 6))
        dY = rng.standard_normal((32, 4))
        results = {}
        for name, mod in backends.items():
            Y, As, Zs = mod.mlp_forward_cached(w.W, w.b, X, kernels.OUT_TANH)
            dWs, dbs, dX = mod.mlp_backward(w.W, As, Zs, Y, dY, kernels.OUT_TANH)
            p = [x.copy() for x in w.params()]
            g = [rng.standard_normal(x.shape) for x in p]
            rng2 = np.random.default_rng(5)
            g = [rng2.standard_normal(x.shape) for x in p]
            m = [np.zeros_like(x) for x in p]
            v = [np.zeros_like(x) for x in p]
            mod.adam_step(p, g, m, v, 1, 1e-3, 0.9, 0.999, 1e-8)
            results[name] = (Y, np.concatenate([d.ravel() for d in dWs + dbs]), dX,
                             np.concatenate([x.ravel() for x in p]))
        a, b = results["pure"], results["compiled"]
        for xa, xb in zip(a, b):
            np.testing.assert_allclose(xa, xb, rtol=1e-12, atol=1e-12)

    def test_sgd_agrees(self):
        backends = kernels.get_backends()
        if len(backends) < 2:
            pytest.skip("compiled backend not built")
        outs = {}
        for name, mod in backends.items():
            p = [np.arange(6, dtype=np.float64).reshape(2, 3)]
            g = [np.full((2, 3), 0.5)]
            mod.sgd_step(p, g, 0.2)
            outs[name] = p[0]
        np.testing.assert_array_equal(outs["pure"], outs["compiled"])
