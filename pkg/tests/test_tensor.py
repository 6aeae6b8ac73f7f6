import math
import zlib
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vrnmt import tensor as T
from vrnmt.tensor import GraphError, NonFiniteError


def grad_of(fn, *arrays):
    leaves = [T.parameter(np.array(a, dtype=float)) for a in arrays]
    with T.Tape() as tape:
        loss = fn(*leaves)
    tape.backward(loss)
    return [leaf.grad for leaf in leaves]


class TestSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_allclose(T.softmax(T.constant([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)

    def test_large_equal_inputs_do_not_overflow(self):
        y = T.softmax(T.constant([1000.0, 1000.0, 1000.0])).data
        np.testing.assert_allclose(y, [1 / 3] * 3, atol=1e-15)

    def test_matches_high_precision_evaluation(self):
        getcontext().prec = 50
        ex = [Decimal(v).exp() for v in (1, 2, 3)]
        want = [float(e / sum(ex)) for e in ex]
        np.testing.assert_allclose(T.softmax(T.constant([1.0, 2.0, 3.0])).data, want,
                                   rtol=0, atol=1e-12)

    def test_masked_positions_get_exact_zero(self):
        y = T.softmax(T.constant([[3.0, 1.0, 50.0]]), mask=np.array([[1.0, 1.0, 0.0]])).data
        assert y[0, 2] == 0.0
        np.testing.assert_allclose(y[0, :2].sum(), 1.0, atol=1e-15)

    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)),
                  elements=st.floats(-300, 300)),
           st.floats(-100, 100))
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        y = T.softmax(T.constant(x)).data
        assert np.all((y >= 0) & (y <= 1))
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(T.softmax(T.constant(x + c)).data, y, atol=1e-12)

    def test_log_softmax_consistent_with_softmax(self):
        x = np.random.default_rng(0).normal(size=(3, 7)) * 5
        np.testing.assert_allclose(np.exp(T.log_softmax(T.constant(x)).data),
                                   T.softmax(T.constant(x)).data, atol=1e-14)


class TestBackward:
    def test_quadratic(self):
        (g,) = grad_of(lambda w: T.sum(T.mul(w, w)), [1.0, 2.0])
        np.testing.assert_array_equal(g, [2.0, 4.0])

    def test_tanh_at_zero(self):
        (g,) = grad_of(lambda w: T.sum(T.tanh(w)), [0.0])
        np.testing.assert_array_equal(g, [1.0])

    def test_reuse_accumulates(self):
        # w used three times: d/dw (w*w + w) = 2w + 1
        (g,) = grad_of(lambda w: T.sum(T.add(T.mul(w, w), w)), [1.5, -2.0])
        np.testing.assert_allclose(g, [4.0, -3.0], atol=1e-15)

    def test_non_scalar_loss_is_rejected(self):
        w = T.parameter(np.ones(3))
        with T.Tape() as tape:
            out = T.tanh(w)
        with pytest.raises(GraphError):
            tape.backward(out)

    def test_loss_from_other_tape_is_rejected(self):
        w = T.parameter(np.ones(3))
        with T.Tape():
            loss = T.sum(w)
        with T.Tape() as other:
            T.sum(T.tanh(w))
        with pytest.raises(GraphError):
            other.backward(loss)

    def test_nothing_recorded_without_tape_or_grad(self):
        with T.Tape() as tape:
            T.tanh(T.constant(np.ones(2)))
        assert len(tape) == 0
        y = T.tanh(T.parameter(np.ones(2)))
        assert y.node is None

    def test_topological_order(self):
        w = T.parameter(np.ones(2))
        with T.Tape() as tape:
            T.sum(T.mul(T.tanh(w), T.exp(w)))
        seen = {id(w)}
        for node in tape.nodes:
            assert all(id(i) in seen or not i.requires_grad for i in node.inputs)
            seen.add(id(node.out))

    def test_branch_order_does_not_change_gradients(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=4), rng.normal(size=4)

        def f1(x, y):
            return T.sum(T.add(T.mul(T.tanh(x), y), T.exp(x)))

        def f2(x, y):
            e = T.exp(x)
            t = T.tanh(x)
            return T.sum(T.add(T.mul(t, y), e))

        g1, g2 = grad_of(f1, a, b), grad_of(f2, a, b)
        for u, v in zip(g1, g2):
            np.testing.assert_array_equal(u, v)

    def test_replay_is_bit_identical(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 5))

        def f(a, b):
            h = T.dropout(T.tanh(T.matmul(a, b)), 0.5, np.random.default_rng(7))
            return T.sum(T.log_softmax(h))

        g1, g2 = grad_of(f, x, w), grad_of(f, x, w)
        for u, v in zip(g1, g2):
            np.testing.assert_array_equal(u, v)


class TestCheckGradient:
    def test_square(self):
        assert T.check_gradient(lambda x: T.sum(T.mul(x, x)), [np.array([3.0])]) <= 1e-8

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(0)
        target = np.eye(4)[2]
        err = T.check_gradient(lambda x: T.scale(T.sum(T.apply_mask(T.log_softmax(x), target)), -1.0),
                               [rng.normal(size=4)])
        assert err <= 1e-6

    def test_detects_wrong_gradient(self):
        def bad(x):
            # forward is x^2 but the recorded backward claims 3x
            y = x.data * x.data
            return T.sum(T._make("bad", y, (x,), lambda g: (3 * g * x.data,)))

        assert T.check_gradient(bad, [np.array([1.0, 2.0])]) > 0.1

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_non_finite_value_raises(self):
        with pytest.raises(NonFiniteError):
            T.check_gradient(lambda x: T.sum(T.exp(x)), [np.array([1e4])])


def _weighted(out, rng):
    return T.sum(T.apply_mask(out, rng.normal(size=out.shape)))


PRIMITIVES = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: T.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: T.mul(a, b), [(3, 4), (3, 4)]),
    "scale": (lambda a: T.scale(a, -1.7), [(2, 5)]),
    "add_bias": (lambda a, b: T.add_bias(a, b), [(2, 3, 4), (4,)]),
    "matmul_2d": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 5)]),
    "matmul_3d_lhs": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (4, 5)]),
    "matmul_vec": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (4,)]),
    "matmul_batched": (lambda a, b: T.matmul(a, b), [(2, 1, 3), (2, 3, 4)]),
    "tanh": (lambda a: T.tanh(a), [(3, 4)]),
    "sigmoid": (lambda a: T.sigmoid(a), [(3, 4)]),
    "exp": (lambda a: T.exp(a), [(3, 4)]),
    "expm1": (lambda a: T.expm1(a), [(3, 4)]),
    "log": (lambda a: T.log(T.add_bias(T.mul(a, a), T.constant(np.full(4, 0.5)))), [(3, 4)]),
    "clip": (lambda a: T.clip(a, -0.5, 0.5), [(3, 4)]),
    "softmax": (lambda a: T.softmax(a), [(3, 5)]),
    "masked_softmax": (lambda a: T.softmax(a, mask=np.array([[1, 1, 0, 1, 0]] * 3)), [(3, 5)]),
    "log_softmax": (lambda a: T.log_softmax(a), [(3, 5)]),
    "concat": (lambda a, b: T.concat([a, b, a]), [(2, 3), (2, 4)]),
    "stack": (lambda a, b: T.stack([a, b, a], axis=1), [(2, 3), (2, 3)]),
    "slice_last": (lambda a: T.slice_last(a, 1, 3), [(3, 5)]),
    "getitem": (lambda a: T.getitem(a, (slice(None), 1)), [(3, 4, 2)]),
    "reshape": (lambda a: T.reshape(a, (4, 3)), [(2, 6)]),
    "expand": (lambda a: T.expand(a, 1, 3), [(2, 4)]),
    "sum_axis": (lambda a: T.sum(a, axis=1), [(3, 4)]),
    "mean": (lambda a: T.mean(a, axis=0), [(3, 4)]),
    "embedding": (lambda a: T.embedding(a, np.array([[0, 2], [2, 1]])), [(3, 4)]),
    "apply_mask": (lambda a: T.apply_mask(a, np.array([[1.0, 0.0, 2.0]])), [(2, 3)]),
    "dropout": (lambda a: T.dropout(a, 0.4, np.random.default_rng(3)), [(3, 4)]),
}


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name", sorted(PRIMITIVES))
    def test_matches_finite_differences(self, name):
        fn, shapes = PRIMITIVES[name]
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        inputs = [rng.normal(size=s) for s in shapes]

        def loss(*ts):
            return _weighted(fn(*ts), np.random.default_rng(99))

        assert T.check_gradient(loss, inputs) <= 1e-6


class TestMisc:
    def test_embedding_out_of_range(self):
        with pytest.raises(IndexError):
            T.embedding(T.constant(np.zeros((3, 2))), [3])

    def test_log_floor(self):
        assert math.isfinite(T.log(T.constant([0.0])).data[0])

    def test_dropout_is_inverted_and_identity_at_rate_zero(self):
        x = T.constant(np.ones((200, 50)))
        assert T.dropout(x, 0.0, np.random.default_rng(0)) is x
        assert T.dropout(x, 0.5, None) is x
        y = T.dropout(x, 0.5, np.random.default_rng(0)).data
        assert set(np.unique(y)) <= {0.0, 2.0}
        assert abs(y.mean() - 1.0) < 0.05

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.add(T.constant(np.ones(2)), T.constant(np.ones(3)))
        with pytest.raises(ValueError):
            T.add_bias(T.constant(np.ones((2, 3))), T.constant(np.ones(2)))
