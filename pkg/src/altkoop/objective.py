"""Empirical Koopman loss, its analytic gradients and Lipschitz constants.

The loss over a trajectory dataset of pairs ``(x_i, x_{i+1})`` is::

    F(W, K) = 1/(2N) * sum_i || psi(W x_{i+1}) - K psi(W x_i) ||^2

``W`` enters through *both* lifts, so the full W-gradient has two paths.
``gradient="lemma1"`` keeps only the path through ``psi(W x_i)``, which is
the form the classical Lipschitz analysis is written for.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ShapeError, UsageError

GRADIENT_MODES = ("full", "lemma1")


@dataclass(frozen=True)
class BoundConfig:
    """Frobenius-ball radii assumed for ``K`` and ``W``."""

    u_k: float = 4.0
    u_w: float = 4.0
    project: bool = False

    def __post_init__(self):
        if not (self.u_k > 0 and self.u_w > 0):
            raise UsageError("u_k and u_w must be positive")


@dataclass(frozen=True)
class Normalization:
    """Affine per-coordinate map ``x_norm = (x - offset) * scale``."""

    offset: np.ndarray
    scale: np.ndarray

    def apply(self, X):
        return (np.asarray(X, dtype=float) - self.offset) * self.scale

    def invert(self, X):
        return np.asarray(X, dtype=float) / self.scale + self.offset

    @classmethod
    def minmax(cls, states):
        """Map each coordinate's range over ``states`` onto ``[-1, 1]``."""
        states = np.asarray(states, dtype=float)
        lo = states.min(axis=0)
        hi = states.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        return cls(offset=(hi + lo) / 2.0, scale=2.0 / span)


@dataclass(frozen=True, eq=False)
class TrajectoryDataset:
    """Consecutive state pairs; row ``i`` of ``X0`` maps to row ``i`` of ``X1``."""

    X0: np.ndarray
    X1: np.ndarray
    normalization: Optional[Normalization] = field(default=None)

    def __post_init__(self):
        X0 = np.array(self.X0, dtype=float)
        X1 = np.array(self.X1, dtype=float)
        if X0.ndim != 2 or X0.shape != X1.shape:
            raise ShapeError(f"pair arrays must be 2-D and equal in shape, got {X0.shape}, {X1.shape}")
        if X0.shape[0] < 1:
            raise UsageError("dataset must contain at least one pair")
        if not (np.all(np.isfinite(X0)) and np.all(np.isfinite(X1))):
            raise UsageError("dataset entries must be finite")
        X0.setflags(write=False)
        X1.setflags(write=False)
        object.__setattr__(self, "X0", X0)
        object.__setattr__(self, "X1", X1)

    @classmethod
    def from_pairs(cls, pairs):
        pairs = list(pairs)
        if not pairs:
            raise UsageError("dataset must contain at least one pair")
        return cls(np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]))

    @classmethod
    def from_states(cls, states, normalization=None):
        states = np.asarray(states, dtype=float)
        return cls(states[:-1], states[1:], normalization)

    @property
    def n(self):
        return self.X0.shape[0]

    @property
    def d(self):
        return self.X0.shape[1]

    @property
    def pairs(self):
        return list(zip(self.X0, self.X1))

    def permuted(self, order):
        return TrajectoryDataset(self.X0[order], self.X1[order], self.normalization)


class LiftCache:
    """Lifts of ``X0`` and ``X1`` under one dictionary snapshot.

    Both batches are pushed through the network together so the stored
    activations can be reused by every gradient evaluated at the same ``W``.
    """

    def __init__(self, params, data):
        if params.state_dim != data.d:
            raise ShapeError(f"dictionary expects dimension {params.state_dim}, data has {data.d}")
        self.params = params
        self.data = data
        self.stacked = np.vstack([data.X0, data.X1])
        Z, self.cache = params.forward(self.stacked)
        n = data.n
        self.Z0 = Z[:n]
        self.Z1 = Z[n:]

    def residuals(self, K):
        K = _check_K(K, self.params.lift_dim)
        return self.Z1 - self.Z0 @ K.T

    def loss(self, K):
        E = self.residuals(K)
        return 0.5 * math.fsum(np.einsum("ij,ij->i", E, E)) / self.data.n

    def grad_K(self, K, E=None):
        if E is None:
            E = self.residuals(K)
        return -(E.T @ self.Z0) / self.data.n

    def grad_W(self, K, E=None, gradient="full"):
        if gradient not in GRADIENT_MODES:
            raise UsageError(f"gradient must be one of {GRADIENT_MODES}, got {gradient!r}")
        K = _check_K(K, self.params.lift_dim)
        if E is None:
            E = self.residuals(K)
        n = self.data.n
        through_x1 = E / n if gradient == "full" else np.zeros_like(E)
        upstream = np.vstack([-(E @ K) / n, through_x1])
        return self.params.backprop(self.stacked, upstream, self.cache)


def _check_K(K, lift_dim):
    K = np.asarray(K, dtype=float)
    if K.shape != (lift_dim, lift_dim):
        raise ShapeError(f"K must be {lift_dim}x{lift_dim}, got shape {K.shape}")
    return K


def residual(params, K, pair):
    """``psi(W x_{i+1}) - K psi(W x_i)`` for one pair."""
    x0, x1 = (np.asarray(v, dtype=float) for v in pair)
    K = _check_K(K, params.lift_dim)
    Z = params.lift_batch(np.vstack([x0, x1]))
    return Z[1] - K @ Z[0]


def loss(params, K, data):
    return LiftCache(params, data).loss(K)


def grad_K(params, K, data):
    return LiftCache(params, data).grad_K(K)


def grad_W(params, K, data, gradient="full"):
    return LiftCache(params, data).grad_W(K, gradient=gradient)


def gradient_norm_sum(params, K, data, gradient="full"):
    """``||grad_K F||_F + ||grad_W F||_F`` (the latter summed over layers)."""
    from .dictionary import grads_norm

    cache = LiftCache(params, data)
    E = cache.residuals(K)
    gk = cache.grad_K(K, E)
    gw = cache.grad_W(K, E, gradient)
    return grads_norm(gk) + grads_norm(gw)


# -- constants -------------------------------------------------------------------


def lift_sq_bound(params, bounds, data):
    """Upper bound on ``||psi(x)||^2`` over the states in ``data``.

    Activation outputs contribute ``h^2`` each; augmented state coordinates
    contribute the largest squared state norm in the data.
    """
    bound = params.trainable_dim * bounds.h**2
    if params.augment_state:
        states = np.vstack([data.X0, data.X1])
        bound += float(np.max(np.einsum("ij,ij->i", states, states)))
    return bound


def lipschitz_K(lift_dim, bounds, lift_sq=None):
    """Lipschitz constant of ``grad_K F`` in ``K``.

    With every lifted coordinate bounded by ``h`` this is ``lift_dim * h^2``.
    Pass ``lift_sq`` (see :func:`lift_sq_bound`) for lifts that also carry the
    raw state.
    """
    if lift_dim < 1:
        raise UsageError("lift_dim must be positive")
    if lift_sq is not None:
        return float(lift_sq)
    return lift_dim * bounds.h**2


def lipschitz_W(data, bounds, u_k, dim=None):
    """Closed-form Lipschitz constant of ``grad_W F`` in ``W``::

        L_W = sqrt(2 d) * u_k * L_Psi * (1/N) sum_i ||x_i|| * Delta_i
        Delta_i = sqrt((1 + d u_k^2) ||x_i||^2 + ||x_{i+1}||^2)

    ``dim`` defaults to the state dimension of ``data``.
    """
    if data.n < 1:
        raise UsageError("dataset is empty")
    if not u_k > 0:
        raise UsageError("u_k must be positive")
    d = data.d if dim is None else dim
    n0 = np.sqrt(np.einsum("ij,ij->i", data.X0, data.X0))
    n1 = np.sqrt(np.einsum("ij,ij->i", data.X1, data.X1))
    delta = np.sqrt((1.0 + d * u_k**2) * n0**2 + n1**2)
    mean = math.fsum(n0 * delta) / data.n
    return math.sqrt(2.0 * d) * u_k * bounds.l_psi * mean


def lipschitz_W_full(data, bounds, u_k, lift_sq, dim=None):
    """Lipschitz constant of the *full* single-layer ``grad_W F``.

    :func:`lipschitz_W` only covers the path through ``psi(W x_i)``. The path
    through ``psi(W x_{i+1})`` adds::

        (1/N) sum_i ||x_{i+1}|| * ((g1^2 + h g2 + u_k B g2) ||x_{i+1}|| + u_k g1^2 ||x_i||)

    with ``B = sqrt(lift_sq)`` bounding ``||psi||``.
    """
    base = lipschitz_W(data, bounds, u_k, dim)
    n0 = np.sqrt(np.einsum("ij,ij->i", data.X0, data.X0))
    n1 = np.sqrt(np.einsum("ij,ij->i", data.X1, data.X1))
    b = math.sqrt(lift_sq)
    g1, g2, h = bounds.g1, bounds.g2, bounds.h
    terms = n1 * ((g1 * g1 + h * g2 + u_k * b * g2) * n1 + u_k * g1 * g1 * n0)
    return base + math.fsum(terms) / data.n


def loss_upper_bound(lift_dim, bounds, u_k, lift_sq=None):
    """A constant ``R`` with ``F <= R`` whenever ``||K||_F <= u_k``.

    ``||z1 - K z0|| <= (1 + u_k) * sup||z||``, so ``R = (1/2) sup||z||^2 (1 + u_k)^2``.
    """
    sq = lipschitz_K(lift_dim, bounds, lift_sq)
    return 0.5 * sq * (1.0 + u_k) ** 2


def finite_difference_check(params, K, data, step=1e-5, gradient="full"):
    """Largest relative deviation between analytic and central-difference gradients.

    Returns ``(rel_K, rel_W)``, each ``||g_analytic - g_fd|| / max(||g_fd||, 1e-12)``.
    Only the full gradient is the derivative of the loss, so ``gradient``
    other than ``"full"`` is rejected.
    """
    if gradient != "full":
        raise UsageError("finite differences only validate the full gradient")
    K = _check_K(K, params.lift_dim)
    cache = LiftCache(params, data)
    gk = cache.grad_K(K)
    gw = params.flat_grads(cache.grad_W(K))

    fd_k = np.zeros_like(K)
    for idx in np.ndindex(*K.shape):
        Kp, Km = K.copy(), K.copy()
        Kp[idx] += step
        Km[idx] -= step
        fd_k[idx] = (cache.loss(Kp) - cache.loss(Km)) / (2.0 * step)

    w = params.flat()
    fd_w = np.zeros_like(w)
    for i in range(w.size):
        wp, wm = w.copy(), w.copy()
        wp[i] += step
        wm[i] -= step
        fd_w[i] = (loss(params.from_flat(wp), K, data) - loss(params.from_flat(wm), K, data)) / (2.0 * step)

    def rel(a, b):
        return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))

    return rel(gk, fd_k), rel(gw, fd_w)
