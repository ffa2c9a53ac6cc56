import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sattack import autodiff as ad
from gradcheck import numeric_grad, rel_error


def _grad(fn, *arrays):
    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in arrays]
    loss = fn(*leaves)
    grads = tape.backward(loss)
    return [grads[x] for x in leaves]


def _check(fn, *arrays, tol=1e-4):
    analytic = _grad(fn, *arrays)
    for k, a in enumerate(arrays):
        def f(x, k=k):
            args = list(arrays)
            args[k] = x
            return float(fn(*[ad.Tensor(v) for v in args]).data)
        assert rel_error(analytic[k], numeric_grad(f, a)) < tol


def test_forward_examples():
    assert float(ad.tanh(ad.Tensor(0.0)).data) == 0.0
    np.testing.assert_array_equal(ad.norm_rows(ad.Tensor([[3.0, 4.0], [0.0, 0.0]])).data, [5.0, 0.0])
    a = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal((ad.Tensor(np.eye(2)) @ a).data, a)


def test_sum_gradient_is_ones():
    (g,) = _grad(lambda x: ad.sum(x), np.random.default_rng(0).normal(size=(3, 4, 2)))
    np.testing.assert_array_equal(g, np.ones((3, 4, 2)))


def test_tanh_gradient_at_zero():
    (g,) = _grad(lambda x: ad.sum(ad.tanh(x)), np.zeros(1))
    assert g[0] == 1.0


def test_non_scalar_loss_rejected():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ad.NonScalarLossError):
        tape.backward(x * 2.0)


def test_shape_errors():
    with pytest.raises(ad.ShapeError):
        ad.Tensor(np.ones((2, 3))) @ np.ones((2, 3))
    with pytest.raises(ad.ShapeError):
        ad.add(np.ones(3), np.ones(4))
    with pytest.raises(ad.ShapeError):
        ad.concatenate([np.ones((2, 2)), np.ones((3, 3))], axis=0)


def test_unused_leaf_gets_exact_zero():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3))
    y = tape.leaf(np.ones(2))
    grads = tape.backward(ad.sum(x * x))
    assert np.all(grads[y] == 0.0)


def test_conventions_at_kinks():
    (g,) = _grad(lambda x: ad.sum(ad.relu(x)), np.zeros(3))
    np.testing.assert_array_equal(g, 0.0)
    (g,) = _grad(lambda x: ad.sum(ad.max(x, axis=0)), np.array([1.0, 3.0, 3.0]))
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])
    (g,) = _grad(lambda x: ad.sum(ad.norm_rows(x)), np.zeros((2, 2)))
    np.testing.assert_array_equal(g, 0.0)


def _away_from_kinks(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 1e-3, 0.5, x)


PRIMITIVES = {
    "add": (lambda a, b: ad.sum(ad.tanh(a + b)), [(3, 4), (4,)]),
    "subtract": (lambda a, b: ad.sum(ad.tanh(a - b)), [(3, 4), (3, 1)]),
    "multiply": (lambda a, b: ad.sum(a * b * a), [(2, 3), (2, 3)]),
    "matmul": (lambda a, b: ad.sum(ad.tanh(a @ b)), [(2, 3, 4), (4, 5)]),
    "tanh": (lambda a: ad.sum(ad.tanh(a) * a), [(5,)]),
    "sigmoid": (lambda a: ad.sum(ad.sigmoid(a) * a), [(5,)]),
    "relu": (lambda a: ad.sum(ad.relu(a) * a), [(6,)]),
    "norm_rows": (lambda a: ad.sum(ad.norm_rows(a) * 1.7), [(4, 3)]),
    "sum_axis": (lambda a: ad.sum(ad.tanh(ad.sum(a, axis=1))), [(3, 4, 2)]),
    "mean": (lambda a: ad.sum(ad.tanh(ad.mean(a, axis=(0, 2)))), [(3, 4, 2)]),
    "max": (lambda a: ad.sum(ad.max(a, axis=1) * 2.0), [(3, 5)]),
    "concatenate": (lambda a, b: ad.sum(ad.tanh(ad.concatenate([a, b], axis=1))), [(2, 3), (2, 2)]),
    "slice": (lambda a: ad.sum(ad.tanh(a[:, 1:3]) * a[:, :2]), [(3, 4)]),
    "reshape": (lambda a: ad.sum(ad.tanh(ad.reshape(a, (6, 2))) @ np.ones((2, 1))), [(3, 4)]),
    "exp": (lambda a: ad.sum(ad.exp(a)), [(4,)]),
    "broadcast_to": (lambda a: ad.sum(ad.tanh(ad.broadcast_to(a, (3, 4)))), [(1, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", range(5))
def test_primitive_matches_finite_differences(name, seed):
    fn, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(seed)
    _check(fn, *[_away_from_kinks(rng, s) for s in shapes])


def test_three_layer_composition():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 4))
    w1, w2, w3 = rng.normal(size=(4, 6)), rng.normal(size=(6, 6)), rng.normal(size=(6, 2))

    def f(x, w1, w2, w3):
        h = ad.tanh(x @ w1)
        h = ad.sigmoid(h @ w2)
        return ad.sum(ad.norm_rows(h @ w3))

    _check(f, x, w1, w2, w3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_backward_is_deterministic(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    fn = lambda a, b: ad.sum(ad.norm_rows(ad.tanh(a @ b)))  # noqa: E731
    g1, g2 = _grad(fn, a, b), _grad(fn, a, b)
    for x, y in zip(g1, g2):
        assert x.tobytes() == y.tobytes()


def test_tape_is_topologically_ordered():
    tape = ad.Tape()
    x = tape.leaf(np.ones((2, 2)))
    y = ad.tanh(x @ x) + x
    ad.sum(y)
    seen = {id(x)}
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad:
                assert id(inp) in seen
        seen.add(id(node.out))


def test_constants_do_not_record():
    tape = ad.Tape()
    c = ad.Tensor(np.ones(3))
    ad.tanh(c) + c
    assert len(tape) == 0
