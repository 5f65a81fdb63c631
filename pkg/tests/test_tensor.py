"""Autodiff engine: forward definitions, gradient checks, tape behaviour."""

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.special import erf

from conftest import finite_difference_check
from mssit import tensor as T
from mssit.tensor import Tape, Tensor

OP_TOL = 1e-6


def leaf(shape, seed, scale=1.0, offset=0.0):
    rng = np.random.default_rng(seed)
    return Tensor(offset + scale * rng.standard_normal(shape), requires_grad=True)


def projected(out, seed=99):
    """Random linear functional of ``out`` so every output entry matters."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return T.sum(T.mul(out, Tensor(r)))


def check(op, *inputs, n_probe=None):
    return finite_difference_check(lambda xs: projected(op(*xs)), list(inputs), n_probe=n_probe)


class TestForward:
    def test_softmax_symmetric(self):
        assert np.allclose(T.softmax_last(Tensor(np.zeros((1, 2)))).data, [[0.5, 0.5]])

    def test_softmax_rows_sum_to_one(self):
        s = T.softmax_last(Tensor(np.random.default_rng(0).standard_normal((5, 7)) * 30)).data
        assert np.allclose(s.sum(-1), 1.0) and np.all(s >= 0)

    def test_layer_norm_constant_row(self):
        out = T.layer_norm(Tensor(np.full((3, 8), 4.2))).data
        assert np.array_equal(out, np.zeros((3, 8)))

    def test_layer_norm_reference(self):
        x = np.random.default_rng(1).standard_normal((4, 6))
        w, b = np.arange(1.0, 7.0), np.linspace(-1, 1, 6)
        ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * w + b
        assert np.allclose(T.layer_norm(Tensor(x), Tensor(w), Tensor(b)).data, ref, atol=1e-12)

    def test_matmul_triple_loop(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 4))
        ref = np.zeros((2, 4))
        for i in range(2):
            for j in range(4):
                for k in range(3):
                    ref[i, j] += a[i, k] * b[k, j]
        out = T.matmul(Tensor(a), Tensor(b)).data
        assert out.shape == (2, 4) and np.allclose(out, ref, atol=1e-14)

    def test_gelu_exact(self):
        x = np.linspace(-5, 5, 101)
        ref = 0.5 * x * (1 + erf(x / np.sqrt(2)))
        assert np.allclose(T.gelu(Tensor(x)).data, ref, atol=1e-15)

    def test_gelu_float32_stays_float32(self):
        assert T.gelu(Tensor(np.ones(4, dtype=np.float32))).dtype == np.float32

    def test_log_softmax_matches_log_of_softmax(self):
        x = Tensor(np.random.default_rng(3).standard_normal((3, 5)))
        assert np.allclose(T.log_softmax_last(x).data, np.log(T.softmax_last(x).data))

    def test_sparse_matmul_dense_equivalent(self):
        rng = np.random.default_rng(4)
        m = sp.random(7, 5, density=0.4, random_state=5, format="csr")
        x = rng.standard_normal((2, 5, 3))
        assert np.allclose(T.sparse_matmul(m, Tensor(x)).data, np.einsum("pn,bnd->bpd", m.toarray(), x))


class TestErrors:
    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        with pytest.raises(ValueError):
            T.concat_last([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))])
        with pytest.raises(ValueError):
            T.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)))

    def test_softmax_empty_axis(self):
        with pytest.raises(ValueError):
            T.softmax_last(Tensor(np.zeros((3, 0))))

    def test_non_scalar_loss(self):
        x = leaf((3,), 0)
        with pytest.raises(ValueError):
            T.backward(T.scale(x, 2.0))

    def test_dropout_keep_probability(self):
        with pytest.raises(ValueError):
            T.dropout(Tensor(np.ones(3)), 0.0, np.random.default_rng(0))
        with pytest.raises(ValueError):
            T.dropout(Tensor(np.ones(3)), 0.5, None)


class TestBackwardRules:
    def test_sum_grad_ones(self):
        x = leaf((4, 5), 0)
        T.backward(T.sum(x))
        assert np.array_equal(x.grad, np.ones((4, 5)))

    def test_mse_closed_form(self):
        w = Tensor(np.array(1.7), requires_grad=True)
        x, y = 0.8, 2.5
        d = T.sub(T.scale(w, x), Tensor(np.array(y)))
        T.backward(T.mul(d, d))
        assert np.isclose(w.grad, 2 * (1.7 * x - y) * x, rtol=1e-14)

    def test_accumulates_over_uses(self):
        x = leaf((3,), 1)
        T.backward(T.sum(T.add(T.mul(x, x), x)))
        assert np.allclose(x.grad, 2 * x.data + 1)

    def test_linearity_of_backward(self):
        x = leaf((4, 3), 2)

        def f1():
            return T.sum(T.gelu(x))

        def f2():
            return projected(T.softmax_last(x))

        T.backward(f1())
        g1 = x.grad.copy()
        x.grad = None
        T.backward(f2())
        g2 = x.grad.copy()
        x.grad = None
        T.backward(T.add(f1(), f2()))
        assert np.allclose(x.grad, g1 + g2, atol=1e-14)

    def test_dropout_keep_one_identity(self):
        x = leaf((5, 4), 3)
        out = T.dropout(x, 1.0, np.random.default_rng(0))
        assert out is x
        T.backward(T.sum(out))
        assert np.array_equal(x.grad, np.ones((5, 4)))

    def test_no_grad_records_nothing(self):
        x = leaf((3,), 4)
        with T.no_grad():
            y = T.mul(x, x)
        assert not y.requires_grad and y._parents == ()

    def test_tape_topological_and_unique(self):
        x = leaf((3,), 5)
        a = T.mul(x, x)
        b = T.add(a, x)
        c = T.add(T.mul(a, b), a)
        loss = T.sum(c)
        tape = Tape(loss)
        ids = [id(n) for n in tape.nodes]
        assert len(ids) == len(set(ids))
        pos = {i: k for k, i in enumerate(ids)}
        for node in tape.nodes:
            for p in node._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]

    def test_deterministic(self):
        def run():
            x = leaf((64, 16), 6)
            w = leaf((16, 8), 7)
            out = T.dropout(T.gelu(T.matmul(x, w)), 0.7, np.random.default_rng(3))
            loss = projected(T.layer_norm(out))
            T.backward(loss)
            return loss.data.tobytes() + x.grad.tobytes() + w.grad.tobytes()

        assert run() == run()


def _gelu_case():
    # Inputs avoid the far tail and the stationary point near -0.752, where GELU' is below FD resolution.
    x = Tensor(np.random.default_rng(0).uniform(-3, 3, (5, 6)), requires_grad=True)
    x.data[np.abs(x.data + 0.7518) < 0.25] += 0.5
    return check(T.gelu, x)


def _split_case():
    def op(x):
        a, b, c = T.split_last(x, [2, 3, 1])
        return T.concat_last([T.mul(a, a), T.gelu(b), c])

    return check(op, leaf((4, 6), 0))


_SPARSE = sp.random(6, 5, density=0.5, random_state=3, format="csr")

# Every differentiable op, each returning the worst elementwise relative error.
OP_CASES = {
    "add": lambda: check(T.add, leaf((3, 4), 0), leaf((3, 4), 1)),
    "add_bias": lambda: check(T.add, leaf((2, 3, 4), 0), leaf((4,), 1)),
    "add_scalar": lambda: check(lambda x: T.add(x, 1.5), leaf((3, 4), 0)),
    "sub": lambda: check(T.sub, leaf((3, 4), 0), leaf((3, 4), 1)),
    "mul": lambda: check(T.mul, leaf((3, 4), 0), leaf((3, 4), 1)),
    "div": lambda: check(T.div, leaf((3, 4), 0), leaf((3, 4), 1, scale=0.3, offset=2.0)),
    "scale": lambda: check(lambda x: T.scale(x, -0.7), leaf((3, 4), 0)),
    "gelu": _gelu_case,
    "dropout": lambda: check(lambda x: T.dropout(x, 0.6, np.random.default_rng(11)), leaf((6, 5), 0)),
    "matmul_2d": lambda: check(T.matmul, leaf((4, 3), 0), leaf((3, 5), 1)),
    "matmul_shared_weight": lambda: check(T.matmul, leaf((2, 4, 3), 0), leaf((3, 5), 1)),
    "matmul_batched": lambda: check(T.matmul, leaf((2, 3, 4, 3), 0), leaf((2, 3, 3, 2), 1)),
    "transpose": lambda: check(lambda x: T.transpose(x, (2, 0, 1)), leaf((2, 3, 4), 0)),
    "transpose_last2": lambda: check(T.transpose_last2, leaf((2, 3, 4), 0)),
    "reshape": lambda: check(lambda x: T.reshape(x, (4, 6)), leaf((2, 3, 4), 0)),
    "gather_rows": lambda: check(
        lambda x: T.gather_rows(x, np.random.default_rng(5).permutation(7)), leaf((2, 7, 3), 0)
    ),
    "gather_rows_repeated": lambda: check(
        lambda x: T.gather_rows(x, np.array([0, 3, 3, 1, 0, 6])), leaf((7, 3), 0)
    ),
    "concat_last": lambda: check(lambda a, b: T.concat_last([a, b]), leaf((3, 2), 0), leaf((3, 5), 1)),
    "slice_last": lambda: check(lambda x: T.slice_last(x, 1, 4), leaf((3, 6), 0)),
    "split_last": _split_case,
    "embedding_add": lambda: check(T.embedding_add, leaf((2, 5, 3), 0), leaf((5, 3), 1)),
    "sparse_matmul": lambda: check(lambda x: T.sparse_matmul(_SPARSE, x), leaf((2, 5, 3), 0)),
    "sum_all": lambda: check(lambda x: T.mul(T.sum(x), T.sum(x)), leaf((3, 4), 0)),
    "sum_axis": lambda: check(lambda x: T.sum(x, axis=1), leaf((3, 4, 2), 0)),
    "mean": lambda: check(lambda x: T.mean(x, axis=0), leaf((3, 4), 0)),
    "mean_rows": lambda: check(T.mean_rows, leaf((2, 5, 3), 0)),
    "softmax_last": lambda: check(T.softmax_last, leaf((3, 4, 6), 0)),
    "log_softmax_last": lambda: check(T.log_softmax_last, leaf((3, 6), 0)),
    "layer_norm_affine": lambda: check(
        lambda x, w, b: T.layer_norm(x, w, b), leaf((2, 4, 6), 0), leaf((6,), 1, offset=1.0), leaf((6,), 2)
    ),
    "layer_norm_plain": lambda: check(T.layer_norm, leaf((5, 8), 0, scale=3.0)),
    "linear": lambda: check(T.linear, leaf((2, 4, 3), 0), leaf((3, 5), 1), leaf((5,), 2)),
    "linear_no_bias": lambda: check(lambda x, w: T.linear(x, w), leaf((4, 3), 0), leaf((3, 5), 1)),
}


class TestGradientChecks:
    """Central differences (h = 1e-5, float64) against backward, relative error < 1e-6."""

    @pytest.mark.parametrize("name", sorted(OP_CASES))
    def test_op(self, name):
        assert OP_CASES[name]() < OP_TOL

    def test_three_layer_mlp(self):
        """Random 3-layer GELU MLP with a squared-error loss."""
        x = Tensor(np.random.default_rng(0).standard_normal((8, 5)))
        y = Tensor(np.random.default_rng(1).standard_normal((8, 2)))
        params = [leaf((5, 7), 2), leaf((7,), 3), leaf((7, 6), 4), leaf((6,), 5), leaf((6, 2), 6), leaf((2,), 7)]

        def loss(ps):
            h = T.gelu(T.linear(x, ps[0], ps[1]))
            h = T.gelu(T.linear(h, ps[2], ps[3]))
            d = T.sub(T.linear(h, ps[4], ps[5]), y)
            return T.mean(T.mul(d, d))

        assert finite_difference_check(loss, params) < OP_TOL
