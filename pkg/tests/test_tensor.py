"""Autodiff op tests: spec examples, gradient checks, determinism."""

import numpy as np
import pytest

from shapegen import kernels
from shapegen import tensor as T
from shapegen.tensor import GradientTape, ShapeError, Tensor, backward

from helpers import conv2d_reference, gradcheck


def rng_for(seed):
    return np.random.default_rng(seed)


def rand(rng, *shape, lo=0.5, hi=1.5):
    return (rng.uniform(lo, hi, size=shape)).astype(np.float32)


class TestForwardExamples:
    def test_add_elementwise(self):
        out = T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_matmul_identity(self):
        rng = rng_for(0)
        a = rand(rng, 3, 5)
        out = T.matmul(Tensor(np.eye(3, dtype=np.float32)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_softmax_uniform(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-6)

    def test_shape_mismatch_names_kind_and_shapes(self):
        with pytest.raises(ShapeError, match=r"add.*\[2\].*\[3\]"):
            T.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_forward_op_dispatch(self):
        out = T.forward_op("mul", [Tensor([2.0, 3.0]), Tensor([4.0, 5.0])])
        np.testing.assert_array_equal(out.data, [8.0, 15.0])
        with pytest.raises(ShapeError, match="unknown op kind"):
            T.forward_op("fft", [Tensor([1.0])])

    def test_forward_deterministic_across_runs(self):
        rng1, rng2 = rng_for(7), rng_for(7)
        x1, x2 = rand(rng1, 4, 8), rand(rng2, 4, 8)
        w1, w2 = rand(rng1, 8, 3), rand(rng2, 8, 3)
        a = T.gelu(T.matmul(Tensor(x1), Tensor(w1))).data
        b = T.gelu(T.matmul(Tensor(x2), Tensor(w2))).data
        assert np.array_equal(a, b)


class TestBackwardExamples:
    def test_sum_gradient_is_ones(self):
        p = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with GradientTape() as tape:
            loss = T.sum_(p)
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grads[p.uid].data, [1.0, 1.0, 1.0])

    def test_quadratic_gradient_matches_finite_differences(self):
        # oracle ran first: d/dp sum(p*p) at p=[1,2] -> central FD gives [2, 4]
        p = Tensor([1.0, 2.0], requires_grad=True)
        with GradientTape() as tape:
            loss = T.sum_(T.mul(p, p))
        grads = backward(tape, loss)
        np.testing.assert_allclose(grads[p.uid].data, [2.0, 4.0], atol=1e-4)
        gradcheck(lambda ps: T.sum_(T.mul(ps[0], ps[0])), [np.array([1.0, 2.0], np.float32)])

    def test_unused_parameter_gets_zero_gradient(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        q = Tensor([3.0, 4.0], requires_grad=True)
        with GradientTape() as tape:
            _ = T.sum_(q)  # touch q so it is watched
            loss = T.sum_(T.mul(p, p))
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grads[q.uid].data, [0.0, 0.0])

    def test_non_scalar_loss_rejected(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        with GradientTape() as tape:
            y = T.mul(p, p)
        with pytest.raises(ShapeError, match="scalar"):
            backward(tape, y)

    def test_each_node_visited_once(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        with GradientTape() as tape:
            y = T.mul(p, p)
            loss = T.sum_(T.add(y, y))
        grads = backward(tape, loss)
        np.testing.assert_allclose(grads[p.uid].data, [4.0, 8.0], rtol=1e-6)


def weighted(rng, t):
    r = Tensor(rng.uniform(-0.5, 0.5, size=t.shape).astype(np.float32))
    return T.sum_(T.mul(t, r)), r


GRADCHECK_CASES = {
    "add": lambda ps: T.add(ps[0], ps[1]),
    "add_bias": lambda ps: T.add(ps[0], ps[1]),
    "mul": lambda ps: T.mul(ps[0], ps[1]),
    "pow_const": lambda ps: T.pow_const(ps[0], 1.7),
    "matmul": lambda ps: T.matmul(ps[0], ps[1]),
    "exp": lambda ps: T.exp(ps[0]),
    "log": lambda ps: T.log(ps[0]),
    "sqrt": lambda ps: T.sqrt(ps[0]),
    "tanh": lambda ps: T.tanh(ps[0]),
    "gelu": lambda ps: T.gelu(ps[0]),
    "softmax": lambda ps: T.softmax(ps[0], axis=-1),
    "layer_norm": lambda ps: T.layer_norm(ps[0]),
    "mean": lambda ps: T.mean(ps[0], axis=0),
    "sum_axis": lambda ps: T.sum_(ps[0], axis=1, keepdims=True),
}


@pytest.mark.parametrize("kind", sorted(GRADCHECK_CASES))
@pytest.mark.parametrize("seed", [0, 1])
def test_gradcheck_elementwise_kinds(kind, seed):
    rng = rng_for(hash((kind, seed)) % 2**31)
    if kind in ("add", "mul"):
        arrays = [rand(rng, 3, 4), rand(rng, 3, 4)]
    elif kind == "add_bias":
        arrays = [rand(rng, 3, 4), rand(rng, 4)]
    elif kind == "matmul":
        arrays = [rand(rng, 3, 4, lo=-1, hi=1), rand(rng, 4, 2, lo=-1, hi=1)]
    else:
        arrays = [rand(rng, 3, 4)]
    build = GRADCHECK_CASES[kind]

    def with_loss(ps, _r=rng.uniform(-0.5, 0.5, size=(3,)).astype(np.float32)):
        out = build(ps)
        r = Tensor(np.linspace(-0.7, 0.9, out.size, dtype=np.float32).reshape(out.shape))
        return T.sum_(T.mul(out, r))

    gradcheck(with_loss, arrays)


@pytest.mark.parametrize("batched", [False, True])
def test_gradcheck_matmul_batched(batched):
    rng = rng_for(11 + batched)
    if batched:
        arrays = [rand(rng, 2, 3, 4, lo=-1, hi=1), rand(rng, 2, 4, 2, lo=-1, hi=1)]
    else:
        arrays = [rand(rng, 2, 3, 4, lo=-1, hi=1), rand(rng, 4, 2, lo=-1, hi=1)]

    def build(ps):
        out = T.matmul(ps[0], ps[1])
        r = Tensor(np.linspace(-1, 1, out.size, dtype=np.float32).reshape(out.shape))
        return T.sum_(T.mul(out, r))

    gradcheck(build, arrays)


def test_gradcheck_structural_ops():
    rng = rng_for(21)
    x = rand(rng, 2, 3, 4)

    def build(ps):
        a = T.transpose(ps[0], (1, 0, 2))
        b = T.reshape(a, (3, 8))
        c = T.slice_(b, (slice(0, 2), slice(1, 7)))
        d = T.concat([c, c], axis=0)
        r = Tensor(np.linspace(-1, 1, d.size, dtype=np.float32).reshape(d.shape))
        return T.sum_(T.mul(d, r))

    gradcheck(build, [x])


def test_gradcheck_gather_and_embedding():
    rng = rng_for(31)
    table = rand(rng, 6, 4, lo=-1, hi=1)
    ids = np.array([[0, 2], [5, 2]])

    def build_embed(ps):
        out = T.embedding(ps[0], ids)
        r = Tensor(np.linspace(-1, 1, out.size, dtype=np.float32).reshape(out.shape))
        return T.sum_(T.mul(out, r))

    gradcheck(build_embed, [table])

    x = rand(rng, 3, 5)
    idx = np.array([[1], [4], [2]])

    def build_gather(ps):
        out = T.gather(ps[0], idx, axis=1)
        r = Tensor(np.linspace(-1, 1, out.size, dtype=np.float32).reshape(out.shape))
        return T.sum_(T.mul(out, r))

    gradcheck(build_gather, [x])


class TestConv:
    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_matches_nested_loop_reference_on_integers(self, stride, pad):
        rng = rng_for(5)
        x = rng.integers(-4, 5, size=(2, 3, 6, 6)).astype(np.float32)
        w = rng.integers(-3, 4, size=(4, 3, 3, 3)).astype(np.float32)
        got = T.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).data
        ref = conv2d_reference(x, w, stride, pad)
        np.testing.assert_array_equal(got, ref.astype(np.float32))

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1)])
    def test_gradcheck(self, stride, pad):
        rng = rng_for(6)
        x = rand(rng, 2, 2, 5, 5, lo=-1, hi=1)
        w = rand(rng, 3, 2, 3, 3, lo=-0.5, hi=0.5)

        def build(ps):
            out = T.conv2d(ps[0], ps[1], stride=stride, pad=pad)
            r = Tensor(np.linspace(-1, 1, out.size, dtype=np.float32).reshape(out.shape))
            return T.sum_(T.mul(out, r))

        gradcheck(build, [x, w])

    def test_backends_agree_bitwise(self):
        if kernels.get_backend() != "numba":
            pytest.skip("numba backend unavailable")
        rng = rng_for(9)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((5, 3, 3, 3)).astype(np.float32)
        g = rng.standard_normal((2, 5, 8, 8)).astype(np.float32)
        try:
            ya = kernels.conv2d_forward(x, w, 1, 1)
            ga = kernels.conv2d_backward(g, x, w, 1, 1)
            kernels.set_backend("numpy")
            yb = kernels.conv2d_forward(x, w, 1, 1)
            gb = kernels.conv2d_backward(g, x, w, 1, 1)
        finally:
            kernels.set_backend("numba")
        assert np.array_equal(ya, yb)
        assert np.array_equal(ga[0], gb[0])
        assert np.array_equal(ga[1], gb[1])


class TestComposites:
    def test_l2_normalize_unit_norm(self):
        rng = rng_for(13)
        x = rand(rng, 5, 8, lo=-2, hi=2)
        y = T.l2_normalize(Tensor(x)).data
        np.testing.assert_allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-5)

    def test_log_softmax_stable_at_large_logits(self):
        x = Tensor(np.array([[1000.0, 0.0, -1000.0]], np.float32))
        out = T.log_softmax(x).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out[0, 0], 0.0, atol=1e-5)

    def test_cross_entropy_uniform_logits(self):
        logits = Tensor(np.zeros((4, 7), np.float32))
        loss = T.cross_entropy(logits, np.array([0, 1, 2, 3]))
        np.testing.assert_allclose(loss.item(), np.log(7), rtol=1e-5)

    def test_cross_entropy_gradcheck(self):
        rng = rng_for(17)
        x = rand(rng, 3, 5, lo=-1, hi=1)
        targets = np.array([0, 3, 2])
        gradcheck(lambda ps: T.cross_entropy(ps[0], targets), [x])

    def test_division_chain_gradcheck(self):
        rng = rng_for(19)
        a, b = rand(rng, 4), rand(rng, 4)
        gradcheck(lambda ps: T.sum_(T.div(ps[0], ps[1])), [a, b])


def test_disjoint_tapes_are_independent():
    p = Tensor([2.0], requires_grad=True)
    with GradientTape() as t1:
        l1 = T.sum_(T.mul(p, p))
    with GradientTape() as t2:
        l2 = T.sum_(T.mul(T.mul(p, p), p))
    g1 = backward(t1, l1)[p.uid].data
    g2 = backward(t2, l2)[p.uid].data
    np.testing.assert_allclose(g1, [4.0], rtol=1e-6)
    np.testing.assert_allclose(g2, [12.0], rtol=1e-6)
