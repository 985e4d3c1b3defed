import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xtransct.autodiff import Tensor, backward, no_grad, ops
from xtransct.autodiff.gradcheck import numeric_grad, relative_error
from xtransct.autodiff.tensor import GradientTape
from xtransct.errors import ConfigurationError, ContractError, DimensionError


def _t(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def _triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def _naive_conv(x, w, stride, pad):
    C, H, W = x.shape
    K, _, kh, kw = w.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((K, Ho, Wo))
    for k in range(K):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for c in range(C):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[c, i * stride + u, j * stride + v] * w[k, c, u, v]
                out[k, i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = np.random.default_rng(0).normal(size=(3, 3))
        np.testing.assert_array_equal(ops.matmul(_t(np.eye(3)), _t(a)).values, a)

    def test_hand_expansion(self):
        out = ops.matmul(_t([[1, 2], [3, 4]]), _t([[0], [1]]))
        np.testing.assert_array_equal(out.values, [[2], [4]])

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
        np.testing.assert_allclose(ops.matmul(_t(a), _t(b)).values, _triple_loop(a, b), atol=1e-12, rtol=0)

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ops.matmul(_t(np.ones((2, 3))), _t(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ops.softmax(_t([2.0] * 4)).values, [0.25] * 4)

    def test_closed_form(self):
        np.testing.assert_allclose(ops.softmax(_t([0.0, np.log(3.0)])).values, [0.25, 0.75], atol=1e-15)

    def test_shift_invariance(self):
        x = np.random.default_rng(2).normal(size=(3, 5))
        a = ops.softmax(_t(x), axis=1).values
        b = ops.softmax(_t(x + 123.0), axis=1).values
        np.testing.assert_allclose(a, b, atol=1e-15)
        np.testing.assert_allclose(a.sum(axis=1), 1.0)
        assert (a > 0).all()

    def test_bad_axis(self):
        with pytest.raises(ContractError):
            ops.softmax(_t([1.0, 2.0]), axis=3)


class TestLayerNorm:
    def _ln(self, x):
        d = x.shape[-1]
        return ops.layer_norm(_t(x), _t(np.ones(d)), _t(np.zeros(d))).values

    def test_constant_vector(self):
        np.testing.assert_array_equal(self._ln(np.full(6, 3.5)), np.zeros(6))

    def test_already_normalized(self):
        np.testing.assert_allclose(self._ln(np.array([1.0, -1.0])), [1.0, -1.0], atol=1e-5)

    def test_statistics(self):
        y = self._ln(np.random.default_rng(3).normal(size=64) * 5 + 2)
        assert abs(y.mean()) < 1e-9
        assert abs(y.var() - 1.0) < 1e-6


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(4).normal(size=(1, 5, 5))
        out = ops.conv2d(_t(x), _t(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.values, x)

    def test_counting(self):
        out = ops.conv2d(_t(np.ones((1, 4, 4))), _t(np.ones((1, 1, 2, 2))), stride=2)
        np.testing.assert_array_equal(out.values, np.full((1, 2, 2), 4.0))

    @pytest.mark.parametrize("stride,pad,size", [(1, 0, 6), (1, 1, 6), (2, 1, 7), (2, 0, 7)])
    def test_naive_oracle(self, stride, pad, size):
        rng = np.random.default_rng(5)
        x, w = rng.normal(size=(3, size, size)), rng.normal(size=(4, 3, 3, 3))
        out = ops.conv2d(_t(x), _t(w), stride=stride, padding=pad).values
        np.testing.assert_allclose(out, _naive_conv(x, w, stride, pad), atol=1e-12, rtol=0)

    def test_non_integral_extent(self):
        with pytest.raises(ConfigurationError):
            ops.conv2d(_t(np.ones((1, 6, 6))), _t(np.ones((1, 1, 3, 3))), stride=2)


class TestBackward:
    def test_sum_gives_ones(self):
        x = _t(np.random.default_rng(6).normal(size=(2, 3, 4)))
        backward(ops.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_square(self):
        x = _t(3.0)
        backward(ops.mul(x, x))
        assert x.grad == 6.0

    def test_non_scalar_loss(self):
        x = _t(np.ones(3))
        with pytest.raises(ContractError):
            backward(ops.scale(x, 2.0))

    def test_unreachable_parameter_gets_zero(self):
        x, y = _t(np.ones(3)), _t(np.ones((2, 2)))
        backward(ops.sum(x), params=[x, y])
        np.testing.assert_array_equal(y.grad, np.zeros((2, 2)))

    def test_accumulates_across_calls(self):
        x = _t(np.ones(2))
        backward(ops.sum(x))
        backward(ops.sum(x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_tape_order_and_single_visit(self):
        x = _t(np.ones(3))
        y = ops.mul(x, x)
        z = ops.add(y, y)
        tape = GradientTape.from_output(ops.sum(z))
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        assert len(pos) == len(tape.nodes)
        for n in tape.nodes:
            for p in n._parents:
                assert pos[id(p)] < pos[id(n)]

    def test_no_grad_records_nothing(self):
        x = _t(np.ones(3))
        with no_grad():
            y = ops.scale(x, 2.0)
        assert not y.requires_grad and y.is_leaf

    def test_composite_conv_attention_mlp(self):
        rng = np.random.default_rng(7)
        img = _t(rng.normal(size=(1, 8, 8)), grad=False)
        kern = _t(rng.normal(size=(4, 1, 4, 4)) * 0.5)
        wq, wk, wv = (_t(rng.normal(size=(4, 4)) * 0.5) for _ in range(3))
        w1, b1 = _t(rng.normal(size=(4, 6)) * 0.5), _t(rng.normal(size=6) * 0.1)
        g, be = _t(1 + 0.1 * rng.normal(size=4)), _t(0.1 * rng.normal(size=4))
        params = [kern, wq, wk, wv, w1, b1, g, be]

        def f():
            feat = ops.conv2d(img, kern, stride=2, padding=1)          # 4x4x4
            tok = ops.transpose(ops.reshape(feat, (4, 16)), (1, 0))     # 16 tokens x 4
            tok = ops.layer_norm(tok, g, be)
            q, k, v = ops.matmul(tok, wq), ops.matmul(tok, wk), ops.matmul(tok, wv)
            att = ops.softmax(ops.scale(ops.matmul(q, ops.transpose(k, (1, 0))), 0.5), axis=-1)
            h = ops.relu(ops.linear(ops.matmul(att, v), w1, b1))
            return ops.mean(ops.mul(ops.sigmoid(h), ops.sigmoid(h)))

        backward(f())
        worst = 0.0
        for p in params:
            for flat in rng.choice(p.size, size=min(4, p.size), replace=False):
                idx = np.unravel_index(int(flat), p.shape)
                worst = max(worst, relative_error(p.grad[idx], numeric_grad(f, p, idx, 1e-5)))
        assert worst < 1e-4


_shapes = st.tuples(st.integers(1, 4), st.integers(1, 4))


def _gradcheck(fn, inputs, rng):
    for t in inputs:
        t.grad = None
    backward(fn())
    for t in inputs:
        for flat in range(min(t.size, 6)):
            idx = np.unravel_index(flat, t.shape)
            num = numeric_grad(fn, t, idx)
            assert relative_error(t.grad[idx], num) < 1e-4 or abs(t.grad[idx] - num) < 1e-9


@settings(max_examples=15, deadline=None)
@given(shape=_shapes, seed=st.integers(0, 2**16))
def test_elementwise_and_reduction_gradients(shape, seed):
    rng = np.random.default_rng(seed)
    a, b = _t(rng.normal(size=shape)), _t(rng.normal(size=shape))
    bias = _t(rng.normal(size=shape[-1]))
    w = _t(rng.normal(size=(shape[1], 3)))

    def f():
        x = ops.add_bias(ops.sub(ops.mul(a, b), ops.sigmoid(a)), bias)
        y = ops.softmax(ops.matmul(x, w), axis=-1)
        z = ops.concat([ops.relu(y), ops.scale(y, -0.5)], axis=0)
        return ops.sum(ops.mul(z, z))

    _gradcheck(f, [a, b, bias, w], rng)


@settings(max_examples=10, deadline=None)
@given(n=st.integers(1, 3), d=st.integers(2, 5), seed=st.integers(0, 2**16))
def test_layer_norm_and_mse_gradients(n, d, seed):
    rng = np.random.default_rng(seed)
    x, g, b = _t(rng.normal(size=(n, d))), _t(rng.normal(size=d)), _t(rng.normal(size=d))
    target = _t(rng.normal(size=(d, n)), grad=False)

    def f():
        y = ops.layer_norm(x, g, b)
        return ops.mse(ops.reshape(y, target.shape), target)

    _gradcheck(f, [x, g, b], rng)


@settings(max_examples=10, deadline=None)
@given(c=st.integers(1, 2), k=st.integers(1, 3), stride=st.sampled_from([1, 2]), seed=st.integers(0, 2**16))
def test_conv_gradients(c, k, stride, seed):
    rng = np.random.default_rng(seed)
    x, w, b = _t(rng.normal(size=(c, 5, 5))), _t(rng.normal(size=(k, c, 3, 3))), _t(rng.normal(size=k))

    def f():
        y = ops.conv2d(x, w, stride=stride, padding=1, bias=b)
        return ops.sum(ops.mul(y, y))

    _gradcheck(f, [x, w, b], rng)


def test_linearity_of_backward():
    rng = np.random.default_rng(8)
    p = _t(rng.normal(size=(3, 3)))
    alpha, beta = 0.7, -1.3

    def f():
        return ops.sum(ops.sigmoid(ops.matmul(p, p)))

    def g():
        return ops.mean(ops.mul(ops.relu(p), p))

    backward(f())
    gf = p.grad.copy()
    p.grad = None
    backward(g())
    gg = p.grad.copy()
    p.grad = None
    backward(ops.add(ops.scale(f(), alpha), ops.scale(g(), beta)))
    np.testing.assert_allclose(p.grad, alpha * gf + beta * gg, atol=1e-10, rtol=0)


def test_forward_determinism():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(7, 9)), rng.normal(size=(9, 4))
    r1 = ops.softmax(ops.matmul(_t(a), _t(b))).values
    r2 = ops.softmax(ops.matmul(_t(a), _t(b))).values
    assert r1.tobytes() == r2.tobytes()


def test_finite_outputs():
    x = _t(np.array([-800.0, 0.0, 800.0]))
    for y in (ops.sigmoid(x), ops.softmax(x), ops.relu(x)):
        assert np.isfinite(y.values).all()


def test_float32_preserved():
    x = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    w = Tensor(np.ones((3, 2), dtype=np.float32), requires_grad=True)
    y = ops.sigmoid(ops.scale(ops.matmul(x, w), 0.5))
    assert y.dtype == np.float32
    backward(ops.mean(y))
    assert x.grad.dtype == np.float32
