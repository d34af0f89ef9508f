import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from altkoop import activations as A
from altkoop.dictionary import (BlockDictionary, DictionaryParams, init_params, lift,
                                lift_gradient_W, lift_jacobian_x)
from altkoop.errors import ShapeError, UsageError

from conftest import ACTIVATIONS


def fd_jacobian(f, x, h=1e-5):
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def test_lift_examples():
    zero = DictionaryParams((np.zeros((2, 2)),), "tanh", False)
    assert np.array_equal(lift(zero, [1.0, -1.0]), [0.0, 0.0])
    logi = DictionaryParams((np.zeros((2, 2)),), "logistic", True)
    assert np.array_equal(lift(logi, [1.0, -1.0]), [1.0, -1.0, 0.5, 0.5])
    eye = DictionaryParams((np.eye(2),), "tanh", False)
    assert lift(eye, [0.5, 0.0]) == pytest.approx([0.46211715726000974, 0.0], abs=1e-15)


def test_shapes_and_errors():
    p = init_params(3, [4, 2], "tanh", True, np.random.default_rng(0))
    assert (p.state_dim, p.width, p.lift_dim, p.n_layers, p.trainable_dim) == (3, 2, 5, 2, 2)
    assert list(p.state_index) == [0, 1, 2]
    with pytest.raises(ShapeError):
        lift(p, [1.0, 2.0])
    with pytest.raises(ShapeError):
        DictionaryParams((np.zeros((2, 3)), np.zeros((2, 3))))
    with pytest.raises(UsageError):
        DictionaryParams(())
    assert init_params(3, [4], "tanh", False, np.random.default_rng(0)).state_index is None


def test_init_is_seeded_and_scaled():
    a = init_params(4, [6, 3], "tanh", True, np.random.default_rng(5))
    b = init_params(4, [6, 3], "tanh", True, np.random.default_rng(5))
    assert all(np.array_equal(x, y) for x, y in zip(a.layers, b.layers))
    assert np.max(np.abs(a.layers[0])) <= 1 / math.sqrt(4)
    assert np.max(np.abs(a.layers[1])) <= 1 / math.sqrt(6)


def test_parameters_are_immutable():
    p = init_params(2, [2], "tanh", True, np.random.default_rng(0))
    with pytest.raises(ValueError):
        p.layers[0][0, 0] = 1.0


def test_jacobian_examples():
    zero = DictionaryParams((np.zeros((2, 3)),), "tanh", False)
    assert np.array_equal(lift_jacobian_x(zero, [1.0, 2.0, 3.0]), np.zeros((2, 3)))
    p = init_params(3, [4], "arctan", True, np.random.default_rng(1))
    J = lift_jacobian_x(p, [0.3, -0.2, 0.9])
    assert np.array_equal(J[:3], np.eye(3))


def test_gradient_examples():
    p = DictionaryParams((np.zeros((1, 1)),), "tanh", False)
    assert lift_gradient_W(p, [2.0], [1.0])[0][0, 0] == pytest.approx(2.0)
    q = init_params(2, [3, 2], "tanh", True, np.random.default_rng(2))
    assert all(np.all(g == 0) for g in lift_gradient_W(q, [0.4, 0.1], np.zeros(4)))
    with pytest.raises(ShapeError):
        lift_gradient_W(q, [0.4, 0.1], np.zeros(3))


def test_jacobian_and_gradient_against_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(200):
        d = int(rng.integers(1, 4))
        widths = [int(rng.integers(1, 5)) for _ in range(int(rng.integers(1, 4)))]
        p = init_params(d, widths, str(rng.choice(ACTIVATIONS)), bool(rng.integers(0, 2)), rng)
        p = p.with_layers([rng.uniform(-2, 2, w.shape) for w in p.layers])
        x = rng.uniform(-2, 2, d)
        assert rel(lift_jacobian_x(p, x), fd_jacobian(lambda v: lift(p, v), x)) <= 1e-6
        u = rng.normal(size=p.lift_dim)
        flat = p.flat()
        g = p.flat_grads(lift_gradient_W(p, x, u))
        fd = fd_jacobian(lambda w: np.array([u @ lift(p.from_flat(w), x)]), flat)[0]
        assert rel(g, fd) <= 1e-6


def test_single_layer_gradient_closed_form():
    rng = np.random.default_rng(4)
    p = init_params(3, [4], "logistic", True, rng)
    x = rng.normal(size=3)
    u = rng.normal(size=7)
    W = p.layers[0]
    expected = np.outer(u[3:] * A.first("logistic", W @ x), x)
    assert np.allclose(lift_gradient_W(p, x, u)[0], expected, rtol=0, atol=1e-15)


@given(st.integers(0, 10**6), st.sampled_from(ACTIVATIONS))
def test_lift_is_bounded(seed, act):
    rng = np.random.default_rng(seed)
    p = init_params(2, [3, 3], act, True, rng)
    p = p.with_layers([w * 50 for w in p.layers])
    X = rng.normal(0, 100, (20, 2))
    Z = p.lift_batch(X)
    assert np.array_equal(Z[:, :2], X)
    assert np.all(np.abs(Z[:, 2:]) <= A.bounds(act).h + 1e-12)


def test_flat_round_trip_and_step():
    rng = np.random.default_rng(6)
    p = init_params(3, [4, 2], "tanh", True, rng)
    assert np.array_equal(p.from_flat(p.flat()).flat(), p.flat())
    grads = [np.ones_like(w) for w in p.layers]
    q = p.apply_step(grads, 0.5)
    assert np.allclose(q.flat(), p.flat() - 0.5)
    assert p.project(0.1).frobenius_norm() == pytest.approx(0.1)


def test_block_dictionary_layout():
    rng = np.random.default_rng(7)
    parts = [init_params(2, [3], "tanh", True, rng), init_params(1, [2], "tanh", True, rng)]
    bd = BlockDictionary(parts, [[0, 1], [2]])
    assert bd.lift_dim == 5 + 3 and bd.state_dim == 3
    x = rng.normal(size=(4, 3))
    Z = bd.lift_batch(x)
    assert np.array_equal(Z[:, :5], parts[0].lift_batch(x[:, :2]))
    assert np.array_equal(Z[:, 5:], parts[1].lift_batch(x[:, 2:]))
    assert list(bd.state_index) == [0, 1, 5]
    assert np.array_equal(Z[:, bd.state_index], x)
    assert np.array_equal(bd.from_flat(bd.flat()).flat(), bd.flat())


def test_block_dictionary_backprop_matches_finite_differences():
    rng = np.random.default_rng(8)
    parts = [init_params(1, [2, 3], "arctan", True, rng) for _ in range(3)]
    bd = BlockDictionary(parts, [[0], [1], [2]])
    x = rng.normal(size=3)
    u = rng.normal(size=bd.lift_dim)
    g = bd.flat_grads(lift_gradient_W(bd, x, u))
    fd = fd_jacobian(lambda w: np.array([u @ lift(bd.from_flat(w), x)]), bd.flat())[0]
    assert rel(g, fd) <= 1e-6
    J = lift_jacobian_x(bd, x)
    assert rel(J, fd_jacobian(lambda v: lift(bd, v), x)) <= 1e-6
