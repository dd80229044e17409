import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densepoint import tensor as T
from densepoint.gradcheck import check


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(T.Tensor(np.eye(2)), T.Tensor(b)).data, b)

    def test_zero(self):
        out = T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.arange(6.0).reshape(3, 2)))
        assert not out.data.any()

    def test_against_loops(self):
        rng = T.make_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        got = T.matmul(T.Tensor(a), T.Tensor(b)).data
        ref = naive_matmul(a, b)
        assert np.max(np.abs(got - ref)) <= 1e-12 * np.max(np.abs(ref))

    def test_shape_error_names_both(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))

    def test_backward(self):
        rng = T.make_rng(1)
        a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        g = rng.normal(size=(3, 2))
        T.backward(T.reduce_sum(T.mul(T.matmul(a, b), T.Tensor(g))))
        np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-12)


class TestGroupedLinear:
    def test_weight_count_example(self):
        from densepoint.layers import Linear

        assert Linear(96, 96, groups=2, rng=T.make_rng(0)).weight_count() == 4608

    def test_single_group_is_matmul_plus_bias(self):
        rng = T.make_rng(2)
        x, w, b = rng.normal(size=(2, 5, 7)), rng.normal(size=(3, 5)), rng.normal(size=3)
        got = T.grouped_linear(T.Tensor(x), T.Tensor(w), T.Tensor(b), groups=1).data
        ref = np.einsum("oc,bcn->bon", w, x) + b[None, :, None]
        assert np.max(np.abs(got - ref)) <= 1e-12

    def test_block_diagonal_oracle(self):
        rng = T.make_rng(3)
        x = rng.normal(size=(1, 4, 5))
        w = rng.normal(size=(4, 2))  # two groups of 2 -> 2
        dense = np.zeros((4, 4))
        dense[:2, :2] = w[:2]
        dense[2:, 2:] = w[2:]
        got = T.grouped_linear(T.Tensor(x), T.Tensor(w), None, groups=2).data
        ref = np.einsum("oc,bcn->bon", dense, x)
        assert np.max(np.abs(got - ref)) <= 1e-12

    def test_indivisible_channels(self):
        with pytest.raises(T.ConfigError):
            T.grouped_linear(T.Tensor(np.zeros((1, 5, 2))), T.Tensor(np.zeros((4, 2))), None, groups=2)


class TestReductions:
    def test_max_singleton_axis_is_identity(self):
        x = T.make_rng(0).normal(size=(2, 3, 4, 1))
        np.testing.assert_array_equal(T.reduce_max(T.Tensor(x), axis=3).data, x[..., 0])

    def test_max_tie_gradient_goes_to_lowest_index(self):
        x = T.Tensor(np.array([[1.0, 3.0, 3.0, 0.0]]), requires_grad=True)
        T.backward(T.reduce_sum(T.reduce_max(x, axis=1)))
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0, 0.0]])

    def test_concat_channels(self):
        out = T.concat_channels([T.Tensor(np.zeros((1, 96, 512))), T.Tensor(np.zeros((1, 24, 512)))])
        assert out.shape == (1, 120, 512)

    def test_concat_extent_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.concat_channels([T.Tensor(np.zeros((1, 2, 5))), T.Tensor(np.zeros((1, 2, 6)))])

    def test_axis_out_of_range(self):
        with pytest.raises(T.ShapeError):
            T.reduce_sum(T.Tensor(np.zeros((2, 3))), axis=4)

    def test_sum_gradient_is_ones(self):
        x = T.Tensor(np.ones((2, 3)), requires_grad=True)
        T.backward(T.reduce_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_max_permutation_invariant(self, seed):
        rng = T.make_rng(seed)
        x = rng.normal(size=(2, 3, 6))
        perm = rng.permutation(6)
        a = T.reduce_max(T.Tensor(x), axis=2).data
        b = T.reduce_max(T.Tensor(x[:, :, perm]), axis=2).data
        np.testing.assert_array_equal(a, b)


class TestBatchNorm:
    def _state(self, c):
        return T.BNState(c)

    def test_constant_input_gives_zero(self):
        x = T.Tensor(np.full((4, 2, 3), 7.0))
        out = T.batch_norm(x, T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), self._state(2), True)
        assert np.all(np.isfinite(out.data))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_zero_scale_gives_shift(self):
        x = T.Tensor(T.make_rng(0).normal(size=(4, 2, 3)))
        out = T.batch_norm(x, T.Tensor(np.zeros(2)), T.Tensor(np.array([0.5, -2.0])), self._state(2), True)
        np.testing.assert_array_equal(out.data, np.broadcast_to(np.array([0.5, -2.0])[None, :, None], (4, 2, 3)))

    def test_two_point_batch(self):
        x = T.Tensor(np.array([[[-1.0], [-1.0]], [[1.0], [1.0]]]))
        out = T.batch_norm(x, T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), self._state(2), True)
        expect = 1.0 / np.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(out.data[:, :, 0], [[-expect, -expect], [expect, expect]], rtol=1e-15)

    def test_running_stats_and_eval(self):
        state = self._state(1)
        x = np.array([1.0, 2.0, 3.0, 6.0]).reshape(4, 1)
        T.batch_norm(T.Tensor(x), T.Tensor(np.ones(1)), T.Tensor(np.zeros(1)), state, True)
        np.testing.assert_allclose(state.running_mean, [0.1 * 3.0])
        np.testing.assert_allclose(state.running_var, [0.9 + 0.1 * np.var(x, ddof=1)])
        out = T.batch_norm(T.Tensor(x), T.Tensor(np.ones(1)), T.Tensor(np.zeros(1)), state, False)
        np.testing.assert_allclose(out.data, (x - state.running_mean) / np.sqrt(state.running_var + 1e-5))

    def test_channel_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.batch_norm(T.Tensor(np.zeros((2, 3))), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), self._state(2), True)


class TestDropout:
    def test_zero_ratio_identity(self):
        x = T.Tensor(np.ones((3, 3)))
        assert T.dropout(x, 0.0, True, T.make_rng(0)) is x

    def test_eval_identity(self):
        x = T.Tensor(np.ones((3, 3)))
        assert T.dropout(x, 0.7, False, None) is x

    def test_ratio_one_rejected(self):
        with pytest.raises(T.ConfigError):
            T.dropout(T.Tensor(np.ones(3)), 1.0, True, T.make_rng(0))

    def test_statistics(self):
        out = T.dropout(T.Tensor(np.ones(10**6)), 0.2, True, T.make_rng(0)).data
        assert abs(np.mean(out > 0) - 0.8) <= 0.002
        assert abs(out.mean() - 1.0) <= 0.005


class TestBackward:
    def test_linear_case(self):
        x = np.array([1.0, -2.0, 3.0])
        w = T.Tensor(np.zeros((2, 3)), requires_grad=True)
        T.backward(T.reduce_sum(T.mul(w, T.Tensor(x[None]))))
        np.testing.assert_array_equal(w.grad, np.broadcast_to(x, (2, 3)))

    def test_accumulates(self):
        rng = T.make_rng(0)
        w = T.Tensor(rng.normal(size=(3,)), requires_grad=True)
        loss = lambda: T.reduce_sum(T.mul(w, w))  # noqa: E731
        T.backward(loss())
        first = w.grad.copy()
        T.backward(loss())
        np.testing.assert_array_equal(w.grad, 2 * first)

    def test_non_scalar_rejected(self):
        with pytest.raises(T.ShapeError):
            T.backward(T.Tensor(np.ones(3), requires_grad=True))

    def test_unreachable_parameter_untouched(self):
        a = T.Parameter(np.ones(2))
        b = T.Parameter(np.ones(2))
        T.backward(T.reduce_sum(a))
        assert b.grad is not None and not b.grad.any()

    def test_detached_gets_no_gradient(self):
        a = T.Parameter(np.ones(2))
        d = a.detach()
        assert not d.requires_grad
        T.backward(T.reduce_sum(T.mul(T.mul(a, d), d)))
        np.testing.assert_array_equal(a.grad, np.ones(2))

    def test_no_grad_builds_no_tape(self):
        a = T.Parameter(np.ones(2))
        with T.no_grad():
            out = T.mul(a, a)
        assert out._node is None and not out.requires_grad

    def test_deterministic_replay(self):
        def run():
            rng = T.make_rng(5)
            x = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
            loss = T.reduce_sum(T.dropout(T.relu(x), 0.5, True, rng))
            T.backward(loss)
            return loss.item(), x.grad.copy()

        (l1, g1), (l2, g2) = run(), run()
        assert l1 == l2
        np.testing.assert_array_equal(g1, g2)


@pytest.mark.parametrize(
    "build",
    [
        lambda r: (lambda x: T.sqrt(x), r.uniform(0.5, 2, (3, 4))),
        lambda r: (lambda x: T.exp(x), r.normal(size=(3, 4))),
        lambda r: (lambda x: T.log(x), r.uniform(0.5, 2, (3, 4))),
        lambda r: (lambda x: T.relu(x), r.normal(size=(3, 4))),
        lambda r: (lambda x: T.log_softmax(x, axis=1), r.normal(size=(3, 4))),
        lambda r: (lambda x: T.reduce_mean(x, axis=0), r.normal(size=(3, 4))),
    ],
)
def test_finite_differences(build):
    rng = T.make_rng(7)
    fn, data = build(rng)
    x = T.Tensor(data)
    err, _ = check(lambda: fn(x), [x], rng)
    assert err <= 1e-6


def test_fused_neighborhood_matches_literal_composition():
    rng = T.make_rng(11)
    b, c, n, no, m = 2, 4, 12, 5, 6
    y = rng.normal(size=(b, c, n))
    centre = rng.normal(size=(b, c, no))
    nbrs = rng.integers(0, n, (b, no, m))
    gamma, beta = np.array([1.3, -0.6, 0.8, 1.0]), rng.normal(size=c)

    def literal(yt, ct, gt, bt, state):
        block = T.sub(T.gather_points(yt, nbrs), T.reshape(ct, (b, c, no, 1)))
        return T.reduce_max(T.relu(T.batch_norm(block, gt, bt, state, True)), axis=3)

    outs, grads, stats = [], [], []
    for fused in (True, False):
        ts = [T.Tensor(v.copy(), requires_grad=True) for v in (y, centre, gamma, beta)]
        state = T.BNState(c)
        if fused:
            out = T.neighborhood_bn_relu_max(ts[0], nbrs, ts[1], ts[2], ts[3], state, True)
        else:
            out = literal(*ts, state)
        w = T.make_rng(1).normal(size=out.shape)
        T.backward(T.reduce_sum(T.mul(out, T.Tensor(w))))
        outs.append(out.data)
        grads.append([t.grad for t in ts])
        stats.append((state.running_mean, state.running_var))
    np.testing.assert_allclose(outs[0], outs[1], atol=1e-12)
    for ga, gb in zip(*grads):
        np.testing.assert_allclose(ga, gb, atol=1e-11)
    np.testing.assert_allclose(stats[0][0], stats[1][0], atol=1e-14)
    np.testing.assert_allclose(stats[0][1], stats[1][1], atol=1e-14)


def test_make_rng_is_reproducible():
    assert T.make_rng(3).random() == T.make_rng(3).random()
    assert T.make_rng(3).random() != T.make_rng(4).random()
