"""Bounded scalar activations and the analytic constants derived from them.

Every activation here is bounded with bounded first and second derivatives,
which is what makes the gradient Lipschitz constants in
:mod:`altkoop.objective` finite.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, UsageError


class ActivationKind(enum.Enum):
    TANH = "tanh"
    LOGISTIC = "logistic"
    ARCTAN = "arctan"

    @classmethod
    def parse(cls, name):
        """Look up a kind by its lowercase config name (or pass a kind through)."""
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise UsageError(f"unknown activation {name!r}; expected one of {choices}") from None


@dataclass(frozen=True)
class ActivationBounds:
    """Suprema of ``|psi|``, ``|psi'|``, ``|psi''|`` and the Lipschitz constant
    of ``Psi(a, b) = psi(a) * psi'(b)``."""

    h: float
    g1: float
    g2: float
    l_psi: float


# Maxima of |psi''|, attained at the stationary points of psi'':
#   tanh''     at tanh(x)^2 = 1/3        -> 4 / (3 sqrt 3)
#   logistic'' at s(1-s) = 1/6           -> 1 / (6 sqrt 3)
#   arctan''   at x = 1/sqrt 3           -> 9 / (8 sqrt 3)
# tests/test_activations.py recomputes these with a grid-and-refine search.
TANH_G2 = 4.0 / (3.0 * math.sqrt(3.0))
LOGISTIC_G2 = 1.0 / (6.0 * math.sqrt(3.0))
ARCTAN_G2 = 9.0 / (8.0 * math.sqrt(3.0))

_SUP = {
    ActivationKind.TANH: (1.0, 1.0, TANH_G2),
    ActivationKind.LOGISTIC: (1.0, 0.25, LOGISTIC_G2),
    ActivationKind.ARCTAN: (math.pi / 2.0, 1.0, ARCTAN_G2),
}


def _logistic(x):
    # scipy.special.expit without the dependency; stable for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def value(kind, x):
    """Input-unchecked vectorized ``psi(x)``."""
    kind = ActivationKind.parse(kind)
    if kind is ActivationKind.TANH:
        return np.tanh(x)
    if kind is ActivationKind.LOGISTIC:
        return _logistic(x)
    return np.arctan(x)


def first(kind, x):
    """Input-unchecked vectorized ``psi'(x)``."""
    kind = ActivationKind.parse(kind)
    if kind is ActivationKind.TANH:
        t = np.tanh(x)
        return 1.0 - t * t
    if kind is ActivationKind.LOGISTIC:
        s = _logistic(x)
        return s * (1.0 - s)
    return 1.0 / (1.0 + x * x)


def second(kind, x):
    """Input-unchecked vectorized ``psi''(x)``."""
    kind = ActivationKind.parse(kind)
    if kind is ActivationKind.TANH:
        t = np.tanh(x)
        return -2.0 * t * (1.0 - t * t)
    if kind is ActivationKind.LOGISTIC:
        s = _logistic(x)
        return s * (1.0 - s) * (1.0 - 2.0 * s)
    u = 1.0 + x * x
    return -2.0 * x / (u * u)


def _checked(x):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError("activation input must be finite")
    return arr


def _out(arr, like):
    return float(arr) if np.ndim(like) == 0 else arr


def eval(kind, x):
    """Evaluate the activation at ``x`` (scalar or array)."""
    kind = ActivationKind.parse(kind)
    arr = _checked(x)
    return _out(value(kind, arr), x)


def deriv1(kind, x):
    kind = ActivationKind.parse(kind)
    arr = _checked(x)
    return _out(first(kind, arr), x)


def deriv2(kind, x):
    kind = ActivationKind.parse(kind)
    arr = _checked(x)
    return _out(second(kind, arr), x)


def bounds(kind):
    """Analytic sup-bounds for ``kind``.

    ``l_psi = sqrt(g1**4 + h**2 * g2**2)`` bounds the Euclidean norm of
    ``grad Psi = (psi'(a) psi'(b), psi(a) psi''(b))`` everywhere.
    """
    kind = ActivationKind.parse(kind)
    h, g1, g2 = _SUP[kind]
    return ActivationBounds(h=h, g1=g1, g2=g2, l_psi=math.sqrt(g1**4 + h * h * g2 * g2))
