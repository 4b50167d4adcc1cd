import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from masf import autodiff as ad


def scalarize(gm, rng):
    """Random linear functional of all gradient entries (for 2nd-order checks)."""
    total = None
    for _, g in gm:
        term = ad.reduce_sum(ad.mul(g, ad.const(rng.normal(size=g.shape))))
        total = term if total is None else ad.add(total, term)
    return total


class TestEvaluate:
    def test_square_leaf(self):
        assert ad.evaluate(ad.square(ad.leaf(3.0))) == 9.0

    def test_relu_negative(self):
        assert ad.evaluate(ad.relu(ad.leaf(-2.0))) == 0.0

    def test_log_sum_exp(self):
        got = float(ad.log_sum_exp(ad.leaf([0.0, 0.0])).value)
        assert got == pytest.approx(np.log(2.0), abs=1e-9)

    def test_deterministic_bitwise(self):
        x = np.arange(12.0).reshape(3, 4)
        a = ad.softmax(ad.leaf(x)).value
        b = ad.softmax(ad.leaf(x)).value
        assert a.tobytes() == b.tobytes()

    def test_shape_mismatch_fails_at_construction(self):
        with pytest.raises(ValueError):
            ad.matmul(ad.leaf(np.ones((2, 3))), ad.leaf(np.ones((2, 3))))
        with pytest.raises(ValueError):
            ad.add(ad.leaf(np.ones(3)), ad.leaf(np.ones(4)))

    def test_log_domain_error(self):
        with pytest.raises(ad.DomainError):
            ad.log(ad.leaf(-1.0))

    def test_values_immutable(self):
        x = ad.leaf([1.0, 2.0])
        with pytest.raises(ValueError):
            x.value[0] = 5.0


class TestGrad:
    def test_square(self):
        x = ad.leaf(3.0)
        assert float(ad.grad(ad.square(x), [x])[x].value) == 6.0

    def test_second_order_cubic(self):
        x = ad.leaf(2.0)
        f = ad.mul(ad.square(x), x)
        g = ad.grad(f, [x])[x]
        assert float(g.value) == pytest.approx(12.0)
        g2 = ad.grad(g, [x])[x]
        assert float(g2.value) == pytest.approx(12.0)

    def test_meta_style_through_sgd_step(self):
        # f(w) = (w - 0.1 * d(w^2)/dw)^2 at w=1 => df/dw = 2 * 0.8^2 = 1.28
        w = ad.leaf(1.0)
        gw = ad.grad(ad.square(w), [w])[w]
        w2 = ad.sub(w, ad.mul(ad.const(0.1), gw))
        f = ad.square(w2)
        df = ad.grad(f, [w])[w]
        assert float(df.value) == pytest.approx(1.28, abs=1e-9)
        assert ad.finite_diff_check(f, [w]) < 1e-7

    def test_unreachable_param_zero_grad(self):
        x, y = ad.leaf(2.0), ad.leaf([1.0, 2.0])
        gm = ad.grad(ad.square(x), [x, y])
        assert np.all(gm[y].value == 0.0)
        assert gm[y].shape == (2,)

    def test_non_scalar_root_rejected(self):
        x = ad.leaf([1.0, 2.0])
        with pytest.raises(ValueError):
            ad.grad(x, [x])

    def test_gradient_shapes_match_params(self):
        w = ad.leaf(np.random.default_rng(0).normal(size=(4, 3)))
        f = ad.reduce_sum(ad.square(w))
        assert ad.grad(f, [w])[w].shape == (4, 3)

    @pytest.mark.parametrize("seed", range(4))
    def test_linearity(self, seed):
        rng = np.random.default_rng(seed)
        x = ad.leaf(rng.normal(size=5))
        f = ad.reduce_sum(ad.square(x))
        g = ad.reduce_sum(ad.exp(x))
        a, b = rng.normal(size=2)
        combo = ad.add(ad.mul(ad.const(a), f), ad.mul(ad.const(b), g))
        lhs = ad.grad(combo, [x])[x].value
        rhs = a * ad.grad(f, [x])[x].value + b * ad.grad(g, [x])[x].value
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


OPS = {
    "exp": lambda x: ad.reduce_sum(ad.exp(x)),
    "log": lambda x: ad.reduce_sum(ad.log(ad.add(ad.square(x), ad.const(0.5)))),
    "sqrt": lambda x: ad.reduce_sum(ad.sqrt(ad.add(ad.square(x), ad.const(0.5)))),
    "div": lambda x: ad.reduce_sum(ad.div(ad.const(np.arange(1.0, 6.0)),
                                          ad.add(ad.square(x), ad.const(1.0)))),
    "relu": lambda x: ad.reduce_sum(ad.square(ad.relu(x))),
    "matmul": lambda x: ad.reduce_sum(
        ad.square(ad.matmul(ad.reshape(x, (1, 5)), ad.const(np.ones((5, 2)))))),
    "softmax": lambda x: ad.reduce_sum(
        ad.square(ad.softmax(ad.reshape(x, (1, 5))))),
    "lse": lambda x: ad.log_sum_exp(x),
    "mean": lambda x: ad.square(ad.mean(x)),
    "gather": lambda x: ad.reduce_sum(ad.gather_rows(
        ad.reshape(ad.square(x), (1, 5)), np.array([3]))),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", [0, 1])
def test_first_order_matches_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    x = ad.leaf(rng.normal(size=5))
    assert ad.finite_diff_check(OPS[name](x), [x]) < 1e-5


@pytest.mark.parametrize("name", sorted(OPS))
def test_second_order_matches_finite_differences(name):
    rng = np.random.default_rng(7)
    x = ad.leaf(rng.normal(size=5))
    g = ad.grad(OPS[name](x), [x])
    s = scalarize(g, rng)
    assert ad.finite_diff_check(s, [x]) < 1e-4


class TestClipByNorm:
    def _gm(self, values):
        params = [ad.leaf(np.zeros_like(np.asarray(v, dtype=float)))
                  for v in values]
        grads = [ad.const(v) for v in values]
        return ad.GradMap(params, grads)

    def test_scales_above_threshold(self):
        gm = ad.clip_by_norm(self._gm([[3.0, 4.0]]), 2.0)
        np.testing.assert_allclose(gm.grads[0].value, [1.2, 1.6], atol=1e-9)

    def test_untouched_below_threshold(self):
        gm = self._gm([[0.1, 0.1]])
        assert ad.clip_by_norm(gm, 2.0) is gm

    def test_zero_grads_pass_through(self):
        gm = ad.clip_by_norm(self._gm([[0.0, 0.0]]), 2.0)
        np.testing.assert_array_equal(gm.grads[0].value, [0.0, 0.0])

    def test_global_norm_over_entries(self):
        gm = self._gm([[3.0], [4.0]])
        clipped = ad.clip_by_norm(gm, 2.0)
        total = sum(float((g.value ** 2).sum()) for g in clipped.grads)
        assert np.sqrt(total) <= 2.0 + 1e-12

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=6),
           st.floats(0.1, 10))
    @settings(max_examples=50, deadline=None)
    def test_norm_bound_and_idempotence(self, vals, threshold):
        gm = self._gm([vals])
        once = ad.clip_by_norm(gm, threshold)
        norm = float(np.linalg.norm(once.grads[0].value))
        assert norm <= threshold + 1e-12
        twice = ad.clip_by_norm(once, threshold)
        np.testing.assert_allclose(twice.grads[0].value, once.grads[0].value,
                                   atol=1e-12)

    def test_clip_is_differentiable_when_active(self):
        x = ad.leaf([3.0, 4.0])
        f = ad.reduce_sum(ad.square(x))
        clipped = ad.clip_by_norm(ad.grad(f, [x]), 2.0)
        s = ad.reduce_sum(ad.square(clipped[x]))
        assert ad.finite_diff_check(s, [x]) < 1e-6


class TestFiniteDiffCheck:
    def test_smooth_polynomial_tight(self):
        x = ad.leaf(3.0)
        assert ad.finite_diff_check(ad.square(x), [x]) < 1e-7

    def test_rejects_bad_step(self):
        x = ad.leaf(1.0)
        with pytest.raises(ValueError):
            ad.finite_diff_check(ad.square(x), [x], h=0.0)

    def test_mlp_cross_entropy(self):
        rng = np.random.default_rng(3)
        w1, b1 = ad.leaf(rng.normal(size=(4, 6))), ad.leaf(rng.normal(size=6) * 0.1)
        w2, b2 = ad.leaf(rng.normal(size=(6, 3))), ad.leaf(rng.normal(size=3) * 0.1)
        x = ad.const(rng.normal(size=(1, 4)))
        h = ad.relu(ad.add(ad.matmul(x, w1), b1))
        logits = ad.add(ad.matmul(h, w2), b2)
        loss = ad.neg(ad.gather_rows(ad.log_softmax(logits), np.array([1])))
        loss = ad.reshape(loss, ())
        assert ad.finite_diff_check(loss, [w1, b1, w2, b2]) < 1e-5
