import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from altkoop import activations as A
from altkoop.activations import ActivationKind
from altkoop.errors import DomainError, UsageError

KINDS = list(ActivationKind)


def sup_abs_oracle(f, lo=-20.0, hi=20.0):
    """Maximize |f| on [lo, hi]: coarse grid, then golden-section refinement."""
    xs = np.linspace(lo, hi, 400001)
    vals = np.abs(f(xs))
    i = int(np.argmax(vals))
    a, b = xs[max(i - 1, 0)], xs[min(i + 1, len(xs) - 1)]
    g = (math.sqrt(5) - 1) / 2
    for _ in range(200):
        c, d = b - g * (b - a), a + g * (b - a)
        if abs(f(np.array([c]))[0]) > abs(f(np.array([d]))[0]):
            b = d
        else:
            a = c
    return float(abs(f(np.array([(a + b) / 2]))[0]))


# second derivatives written out independently of the library
SECOND = {
    ActivationKind.TANH: lambda x: -2 * np.tanh(x) * (1 - np.tanh(x) ** 2),
    ActivationKind.LOGISTIC: lambda x: (lambda s: s * (1 - s) * (1 - 2 * s))(1 / (1 + np.exp(-x))),
    ActivationKind.ARCTAN: lambda x: -2 * x / (1 + x * x) ** 2,
}


def test_values_at_zero():
    assert A.eval(ActivationKind.TANH, 0.0) == 0.0
    assert A.eval(ActivationKind.LOGISTIC, 0.0) == 0.5
    assert A.eval(ActivationKind.ARCTAN, 0.0) == 0.0
    assert A.deriv1(ActivationKind.TANH, 0.0) == 1.0
    assert A.deriv1(ActivationKind.LOGISTIC, 0.0) == 0.25
    assert A.deriv2(ActivationKind.TANH, 0.0) == 0.0


@pytest.mark.parametrize("kind,h,g1", [
    (ActivationKind.TANH, 1.0, 1.0),
    (ActivationKind.LOGISTIC, 1.0, 0.25),
    (ActivationKind.ARCTAN, math.pi / 2, 1.0),
])
def test_bounds_match_oracle(kind, h, g1):
    b = A.bounds(kind)
    assert b.h == pytest.approx(h, abs=1e-15)
    assert b.g1 == pytest.approx(g1, abs=1e-15)
    assert b.g2 == pytest.approx(sup_abs_oracle(SECOND[kind]), rel=1e-9)
    assert b.l_psi == pytest.approx(math.sqrt(b.g1 ** 4 + b.h ** 2 * b.g2 ** 2), rel=1e-15)


def test_frozen_g2_values():
    assert A.bounds("tanh").g2 == pytest.approx(0.76980, abs=1e-5)
    assert A.bounds("logistic").g2 == pytest.approx(0.09623, abs=1e-5)
    assert A.bounds("arctan").g2 == pytest.approx(0.64952, abs=1e-5)


@pytest.mark.parametrize("kind", KINDS)
def test_bounded_on_million_samples(kind):
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.normal(0, 3, 500000), rng.uniform(-1e3, 1e3, 500000)])
    b = A.bounds(kind)
    assert np.max(np.abs(A.value(kind, x))) <= b.h + 1e-12
    assert np.max(np.abs(A.first(kind, x))) <= b.g1 + 1e-12
    assert np.max(np.abs(A.second(kind, x))) <= b.g2 + 1e-12


@pytest.mark.parametrize("kind", KINDS)
def test_derivatives_match_finite_differences(kind):
    x = np.linspace(-10, 10, 2001)
    h = 1e-5
    fd1 = (A.value(kind, x + h) - A.value(kind, x - h)) / (2 * h)
    fd2 = (A.first(kind, x + h) - A.first(kind, x - h)) / (2 * h)
    d1, d2 = A.first(kind, x), A.second(kind, x)
    assert np.max(np.abs(d1 - fd1) / np.maximum(np.abs(d1), 1e-3)) <= 1e-6
    assert np.max(np.abs(d2 - fd2) / np.maximum(np.abs(d2), 1e-3)) <= 1e-6


@pytest.mark.parametrize("kind", KINDS)
def test_psi_product_is_lipschitz(kind):
    rng = np.random.default_rng(2)
    p1 = rng.uniform(-10, 10, (100000, 2))
    p2 = rng.uniform(-10, 10, (100000, 2))
    # include close pairs where the local gradient dominates
    p2[:50000] = p1[:50000] + rng.normal(0, 1e-3, (50000, 2))
    psi = lambda p: A.value(kind, p[:, 0]) * A.first(kind, p[:, 1])
    lhs = np.abs(psi(p1) - psi(p2))
    rhs = A.bounds(kind).l_psi * np.linalg.norm(p1 - p2, axis=1)
    assert np.all(lhs <= rhs + 1e-15)


@pytest.mark.parametrize("fn", [A.eval, A.deriv1, A.deriv2])
@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_non_finite_rejected(fn, bad):
    with pytest.raises(DomainError):
        fn(ActivationKind.TANH, bad)


def test_parse_names():
    assert ActivationKind.parse("Tanh") is ActivationKind.TANH
    assert ActivationKind.parse(ActivationKind.ARCTAN) is ActivationKind.ARCTAN
    with pytest.raises(UsageError):
        ActivationKind.parse("relu")


@given(st.floats(-50, 50), st.sampled_from(KINDS))
def test_scalar_and_vector_paths_agree(x, kind):
    assert A.eval(kind, x) == A.value(kind, np.array([x]))[0]
    assert isinstance(A.eval(kind, x), float)


@given(st.floats(-30, 30))
def test_odd_and_symmetric(x):
    assert A.eval("tanh", -x) == -A.eval("tanh", x)
    assert A.eval("arctan", -x) == -A.eval("arctan", x)
    assert A.eval("logistic", x) + A.eval("logistic", -x) == pytest.approx(1.0, abs=1e-15)
