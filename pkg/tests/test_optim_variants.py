import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adapterforge.adapters import AdapterSpec, NotMaterializable, build_adapter
from adapterforge.adapters.optim_variants import (
    FloraOptimizer,
    column_norms,
    delora_delta,
    dora_effective_weight,
    lora_plus_lrs,
    lora_pro_gradients,
    moslora_delta,
    riemannian_precondition,
    rs_scale,
    stability_probe,
)
from adapterforge.autodiff import LEAKY_SLOPE, Tape, grad_check
from adapterforge.linalg import LinalgError, RngStream, numerical_rank, spectral_norm
from adapterforge.trainer import SGD, AdamW


def adapter(nprng, variant, m=8, n=6, r=2, alpha=None, **params):
    spec = AdapterSpec(m, n, rank=r, alpha=alpha or 2.0 * r, variant=variant, params=params)
    return build_adapter(spec, nprng.normal(size=(m, n)))


def randomize(ad, nprng, keys=("A", "B")):
    for k in keys:
        ad.params[k] = nprng.normal(size=ad.params[k].shape)
    return ad


def graph_grads(ad, x, y):
    t = Tape()
    nodes = ad.register(t)
    return t.backward(t.mse(ad.graph(t, t.input(x), nodes), t.input(y))), t


class TestRsLoRA:
    def test_values(self):
        assert rs_scale(16, 16) == 4.0
        assert rs_scale(7.0, 1) == 7.0

    @given(alpha=st.floats(0.1, 100), r=st.integers(1, 256))
    def test_ratio(self, alpha, r):
        assert rs_scale(alpha, r) / (alpha / r) == pytest.approx(math.sqrt(r), rel=1e-12)

    def test_adapter_uses_rs_scaling(self, nprng):
        assert adapter(nprng, "rslora", r=4, alpha=8.0).scaling == 4.0

    def test_stability_probe(self):
        rs = stability_probe(64, [4, 64], "rank_stabilized", RngStream(5), draws=2000)
        std = stability_probe(64, [4, 64], "standard", RngStream(5), draws=2000)
        assert 0.5 <= rs[64] / rs[4] <= 2.0
        assert 1 / 32 <= std[64] / std[4] <= 1 / 8

    def test_alpha_doubling_quadruples_moment(self):
        a = stability_probe(16, [4], "standard", RngStream(1), draws=200, alpha=8.0)
        b = stability_probe(16, [4], "standard", RngStream(1), draws=200, alpha=16.0)
        assert b[4] == pytest.approx(4 * a[4], rel=1e-12)


class TestLoRAPlus:
    def test_rates(self):
        assert lora_plus_lrs(1e-3) == (1e-3, 16e-3)
        assert lora_plus_lrs(1e-3, 1.0) == (1e-3, 1e-3)

    def test_b_moves_sixteen_times_a(self, nprng):
        ad = adapter(nprng, "lora_plus")
        assert ad.lr_multipliers() == {"B": 16.0}
        params = {"A": np.zeros((2, 2)), "B": np.zeros((2, 2))}
        grads = {"A": np.ones((2, 2)), "B": np.ones((2, 2))}
        new = SGD().step(params, grads, 0.01, ad.lr_multipliers())
        assert np.allclose(-new["B"], 16 * -new["A"])


class TestRiemannian:
    def test_orthonormal_factors_are_identity_up_to_scale(self, nprng):
        q = np.linalg.qr(nprng.normal(size=(6, 2)))[0]
        A, B = 3 * q, 2 * np.linalg.qr(nprng.normal(size=(5, 2)))[0].T
        ga, gb = nprng.normal(size=(6, 2)), nprng.normal(size=(2, 5))
        pa, pb, damped = riemannian_precondition(ga, gb, A, B)
        assert not damped
        assert np.allclose(pa, ga / 4) and np.allclose(pb, gb / 9)

    def test_matches_dense_inverse(self, nprng):
        A, B = nprng.normal(size=(6, 3)), nprng.normal(size=(3, 5))
        ga, gb = nprng.normal(size=(6, 3)), nprng.normal(size=(3, 5))
        pa, pb, _ = riemannian_precondition(ga, gb, A, B)
        assert np.max(np.abs(pa - ga @ np.linalg.inv(B @ B.T))) <= 1e-9
        assert np.max(np.abs(pb - np.linalg.inv(A.T @ A) @ gb)) <= 1e-9

    def test_zero_b_damps(self, nprng):
        _, _, damped = riemannian_precondition(np.ones((4, 2)), np.ones((2, 3)), nprng.normal(size=(4, 2)),
                                               np.zeros((2, 3)))
        assert damped

    def test_update_scale_is_width_independent(self):
        """One preconditioned step on f(x) = x A b with lr ~ 1/m moves f by O(1) at any width."""
        def delta_f(m, seed):
            g = np.random.default_rng(seed)
            x = g.normal(size=(1, m))
            A, B = g.normal(size=(m, 1)) / math.sqrt(m), g.normal(size=(1, 1))
            resid = (x @ A @ B).item() - 1.0
            ga, gb = resid * x.T @ B.T, resid * A.T @ x.T
            pa, pb, _ = riemannian_precondition(ga, gb, A, B)
            lr = 0.5 / m
            return abs((x @ (A - lr * pa) @ (B - lr * pb)).item() - (x @ A @ B).item())

        small = np.mean([delta_f(64, s) for s in range(20)])
        large = np.mean([delta_f(1024, s) for s in range(20)])
        assert 0.25 <= small / large <= 4


class TestDoRA:
    def test_identity_at_init(self, nprng):
        ad = adapter(nprng, "dora")
        assert np.max(np.abs(ad.effective_weight() - ad.base)) <= 1e-12

    def test_direction_homogeneity(self, nprng):
        W, A, B = nprng.normal(size=(6, 4)), nprng.normal(size=(6, 2)), nprng.normal(size=(2, 4))
        mag = nprng.uniform(0.5, 2.0, (1, 4))
        one = dora_effective_weight(W, A, B, mag, 1.5)
        scaled = dora_effective_weight(3.0 * W, 3.0 * A, B, mag, 1.5)
        assert np.allclose(one, scaled, atol=1e-12)
        assert np.allclose(column_norms(one), mag)

    def test_doubled_magnitude(self, nprng):
        W = nprng.normal(size=(5, 3))
        m = column_norms(W)
        A, B = np.zeros((5, 1)), np.zeros((1, 3))
        assert np.allclose(dora_effective_weight(W, A, B, 2 * m, 1.0), 2 * W)

    def test_graph_matches_weight_and_gradients(self, nprng):
        ad = randomize(adapter(nprng, "dora"), nprng)
        x, y = nprng.normal(size=(4, 8)), nprng.normal(size=(4, 6))
        assert np.allclose(ad.fused_forward(x), x @ ad.effective_weight(), atol=1e-12)
        _, t = graph_grads(ad, x, y)
        assert grad_check(t).passed

    def test_zero_column_rejected(self, nprng):
        W = nprng.normal(size=(4, 3))
        W[:, 1] = 0.0
        with pytest.raises(LinalgError):
            dora_effective_weight(W, np.zeros((4, 1)), np.zeros((1, 3)), np.ones(3), 1.0)


class TestDeLoRA:
    def test_rank_one_unit(self):
        a, b = np.array([[1.0], [0.0]]), np.array([[0.0, 1.0]])
        assert np.allclose(delora_delta(a, b, 2.0, 3.0), 6.0 * a @ b)

    def test_zero_lambda(self, nprng):
        assert not delora_delta(nprng.normal(size=(4, 2)), nprng.normal(size=(2, 3)), 0.0, 1.0).any()

    def test_norm_bound(self, nprng):
        for _ in range(1000):
            m, n, r = nprng.integers(2, 7, 3)
            r = min(r, m, n)
            A, B = nprng.normal(size=(m, r)), nprng.normal(size=(r, n))
            lam, w = nprng.uniform(0.1, 10), nprng.uniform(0.1, 5)
            assert spectral_norm(delora_delta(A, B, lam, w)) <= lam * w * (1 + 1e-12)

    def test_preset_and_identity(self, nprng):
        W = nprng.normal(size=(8, 6))
        ad = build_adapter(AdapterSpec(8, 6, rank=2, variant="delora"), W)
        assert ad.params["lam"][0, 0] == 8.0
        assert ad.base_adjusted and ad.delta_weight().any()
        assert np.max(np.abs(ad.effective_weight() - W)) <= 1e-10

    def test_graph(self, nprng):
        ad = adapter(nprng, "delora")
        x, y = nprng.normal(size=(3, 8)), nprng.normal(size=(3, 6))
        assert np.allclose(ad.fused_forward(x), x @ ad.effective_weight(), atol=1e-12)
        _, t = graph_grads(ad, x, y)
        assert grad_check(t).passed


def _lstsq_oracle(A, B, ga, gb, G, s):
    """Vectorized least squares of (X, Y) -> s (A Y + X B), nearest to (ga, gb)."""
    m, r = A.shape
    n = B.shape[1]
    cols = []
    for idx in range(m * r):
        X = np.zeros(m * r)
        X[idx] = 1
        cols.append((s * X.reshape(m, r) @ B).ravel())
    for idx in range(r * n):
        Y = np.zeros(r * n)
        Y[idx] = 1
        cols.append((s * A @ Y.reshape(r, n)).ravel())
    L = np.array(cols).T
    z0 = np.linalg.pinv(L) @ G.ravel()
    null = np.eye(L.shape[1]) - np.linalg.pinv(L) @ L
    z = z0 + null @ (np.concatenate([ga.ravel(), gb.ravel()]) - z0)
    return z[: m * r].reshape(m, r), z[m * r:].reshape(r, n)


class TestLoRAPro:
    def setup_instance(self, nprng, m=4, n=4, r=2, alpha=4.0):
        A, B, G = nprng.normal(size=(m, r)), nprng.normal(size=(r, n)), nprng.normal(size=(m, n))
        s = alpha / math.sqrt(r)
        return A, B, G, s, s * G @ B.T, s * A.T @ G

    def test_optimality_residuals(self, nprng):
        for _ in range(10):
            A, B, G, s, ga, gb = self.setup_instance(nprng, 7, 5, 3)
            xa, xb = lora_pro_gradients(A, B, ga, gb, 4.0)
            R = s * A @ xb + s * xa @ B - G
            assert np.linalg.norm(A.T @ R) <= 1e-8 * np.linalg.norm(G)
            assert np.linalg.norm(R @ B.T) <= 1e-8 * np.linalg.norm(G)

    def test_matches_least_squares_oracle(self, nprng):
        A, B, G, s, ga, gb = self.setup_instance(nprng)
        xa, xb = lora_pro_gradients(A, B, ga, gb, 4.0)
        oa, ob = _lstsq_oracle(A, B, ga, gb, G, s)
        assert np.max(np.abs(xa - oa)) <= 1e-9 and np.max(np.abs(xb - ob)) <= 1e-9

    def test_zero_gradient(self, nprng):
        A, B = nprng.normal(size=(4, 2)), nprng.normal(size=(2, 4))
        xa, xb, M = lora_pro_gradients(A, B, np.zeros((4, 2)), np.zeros((2, 4)), 4.0, return_m=True)
        assert not M.any() and not xa.any() and not xb.any()

    def test_update_is_tangent_projection(self, nprng):
        A, B, G, s, ga, gb = self.setup_instance(nprng, 6, 5, 2)
        xa, xb = lora_pro_gradients(A, B, ga, gb, 4.0)
        upd = s * (A @ xb + xa @ B)
        # P G with P the projection onto {A Y + X B}
        pa = A @ np.linalg.pinv(A)
        pb = np.linalg.pinv(B) @ B
        proj = pa @ G + G @ pb - pa @ G @ pb
        assert np.allclose(upd, proj, atol=1e-10)

    def test_adapter_falls_back_at_init(self, nprng):
        ad = adapter(nprng, "lora_pro")
        grads = {"A": np.ones((8, 2)), "B": np.ones((2, 6))}
        assert ad.rewrite_grads(grads) is grads
        assert ad.scaling == rs_scale(ad.spec.alpha, 2)


class TestFlora:
    def test_sgd_closed_form(self, nprng):
        opt = FloraOptimizer(SGD(), 3, RngStream(0))
        W, G = nprng.normal(size=(8, 5)), nprng.normal(size=(8, 5))
        new = opt.step({"W": W}, {"W": G}, 0.1)
        P = opt.proj["W"]
        assert np.allclose(new["W"], W - 0.1 * P @ P.T @ G, atol=1e-12)

    def test_null_space_gradient(self, nprng):
        opt = FloraOptimizer(SGD(), 2, RngStream(0))
        P = opt.projection("W", 6)
        null = np.linalg.svd(P.T)[2][2:].T
        G = null @ nprng.normal(size=(4, 3))
        W = nprng.normal(size=(6, 3))
        assert np.allclose(opt.step({"W": W}, {"W": G}, 0.5)["W"], W, atol=1e-12)

    def test_moment_memory(self, nprng):
        opt = FloraOptimizer(AdamW(), 4, RngStream(0))
        opt.step({"W": np.zeros((64, 10))}, {"W": nprng.normal(size=(64, 10))}, 1e-3)
        # first and second moments at r x n instead of m x n
        assert opt.state_sizes() == {"W": 2 * 4 * 10}


class TestMoSLoRA:
    def test_identity_mixer(self, nprng):
        A, B = nprng.normal(size=(5, 3)), nprng.normal(size=(3, 4))
        assert np.allclose(moslora_delta(A, np.eye(3), B, 2.0), 2.0 * A @ B)

    def test_zero_mixer(self, nprng):
        assert not moslora_delta(nprng.normal(size=(5, 3)), np.zeros((3, 3)), nprng.normal(size=(3, 4)), 1.0).any()

    def test_rank_bound(self, nprng):
        d = moslora_delta(nprng.normal(size=(8, 3)), nprng.normal(size=(3, 3)), nprng.normal(size=(3, 8)), 1.0)
        assert numerical_rank(d) <= 3

    def test_graph(self, nprng):
        ad = randomize(adapter(nprng, "moslora"), nprng, ("A", "B", "C"))
        x = nprng.normal(size=(3, 8))
        assert np.allclose(ad.fused_forward(x), x @ ad.effective_weight(), atol=1e-12)


class TestNonlinear:
    def test_aurora_zero_v_is_tanh_path(self, nprng):
        ad = randomize(adapter(nprng, "aurora"), nprng)
        x = nprng.normal(size=(3, 8))
        expect = x @ ad.base + ad.scaling * np.tanh(np.tanh(x @ ad.A)) @ ad.B
        assert np.max(np.abs(ad.fused_forward(x) - expect)) <= 1e-12

    def test_aurora_explicit_composition(self, nprng):
        ad = randomize(adapter(nprng, "aurora"), nprng)
        ad.params["v"] = nprng.normal(size=(1, 2))
        x = nprng.uniform(-0.2, 0.2, (3, 8))
        h = x @ ad.A
        # coefficients at the Greville points make the spline the identity on [-1, 1]
        inside = np.abs(h) < 1
        assert inside.any()
        f = np.tanh(np.tanh(h)) + ad.params["v"] * h
        expect = x @ ad.base + ad.scaling * f @ ad.B
        rows = inside.all(axis=1)
        assert np.allclose(ad.fused_forward(x)[rows], expect[rows], atol=1e-12)

    def test_aurora_zero_input(self, nprng):
        ad = randomize(adapter(nprng, "aurora"), nprng)
        ad.params["v"] = nprng.normal(size=(1, 2))
        assert np.max(np.abs(ad.fused_forward(np.zeros((1, 8))))) <= 1e-15

    def test_aurora_gradcheck(self, nprng):
        ad = randomize(adapter(nprng, "aurora"), nprng)
        ad.params["v"] = nprng.normal(size=(1, 2))
        _, t = graph_grads(ad, nprng.uniform(-0.3, 0.3, (3, 8)), nprng.normal(size=(3, 6)))
        assert grad_check(t).passed

    def test_loda_zero_f1_is_vanilla(self, nprng):
        ad = randomize(adapter(nprng, "loda"), nprng)
        ad.params["W1"] = np.zeros((2, 2))
        x = nprng.normal(size=(3, 8))
        expect = x @ ad.base + ad.scaling * x @ ad.A @ ad.B
        assert np.allclose(ad.fused_forward(x), expect, atol=1e-12)

    def test_loda_identity_f1_positive_h(self, nprng):
        ad = randomize(adapter(nprng, "loda"), nprng)
        ad.params["A"] = np.abs(ad.params["A"])
        ad.params["W1"] = ad.params["W2"] = np.eye(2)
        x = np.abs(nprng.normal(size=(3, 8)))
        h = x @ ad.A
        expect = x @ ad.base + ad.scaling * (h + h) @ ad.B
        assert np.allclose(ad.fused_forward(x), expect, atol=1e-12)

    def test_loda_negative_branch_uses_leak(self, nprng):
        ad = randomize(adapter(nprng, "loda"), nprng)
        ad.params["W1"] = ad.params["W2"] = np.eye(2)
        x = nprng.normal(size=(3, 8))
        h = x @ ad.A
        leak = np.where(h > 0, h, LEAKY_SLOPE**4 * h)
        assert np.allclose(ad.fused_forward(x), x @ ad.base + ad.scaling * (h + leak) @ ad.B, atol=1e-12)

    def test_loda_gradcheck(self, nprng):
        ad = randomize(adapter(nprng, "loda"), nprng)
        _, t = graph_grads(ad, nprng.normal(size=(3, 8)), nprng.normal(size=(3, 6)))
        assert grad_check(t).passed

    @pytest.mark.parametrize("variant", ["aurora", "loda"])
    def test_not_materializable(self, nprng, variant):
        with pytest.raises(NotMaterializable):
            adapter(nprng, variant).delta_weight()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000))
def test_dora_output_invariant_under_direction_rescale(seed):
    g = np.random.default_rng(seed)
    W, A, B = g.normal(size=(5, 4)), g.normal(size=(5, 2)), g.normal(size=(2, 4))
    mag = g.uniform(0.5, 2, (1, 4))
    c = g.uniform(0.1, 10)
    a = dora_effective_weight(W, A, B, mag, 1.0)
    b = dora_effective_weight(c * W, c * A, B, mag, 1.0)
    assert np.allclose(a, b, atol=1e-10)
