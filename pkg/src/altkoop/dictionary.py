"""Parametric dictionaries ``psi(W x)`` used as Koopman observables.

A dictionary is a stack of weight matrices without biases followed by a
bounded activation after every layer. With ``augment_state`` the raw state is
prepended to the activation output, so the lifted vector is ``[x; psi(...)]``
and predictions can be decoded by projection.

Two concrete dictionaries share one duck-typed interface (``lift_batch``,
``backprop``, ``state_index``, ``apply_step`` ...):

* :class:`DictionaryParams` -- a single network over the full state.
* :class:`BlockDictionary` -- independent networks over disjoint blocks of
  state coordinates, concatenated. This is the global view of a partitioned
  (distributed) model.
"""

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from . import activations
from .activations import ActivationKind
from .errors import ShapeError, UsageError


@dataclass(frozen=True, eq=False)
class DictionaryParams:
    layers: Tuple[np.ndarray, ...]
    activation: ActivationKind = ActivationKind.TANH
    augment_state: bool = True

    def __post_init__(self):
        if len(self.layers) == 0:
            raise UsageError("a dictionary needs at least one layer")
        layers = tuple(np.array(w, dtype=float, copy=True) for w in self.layers)
        for w in layers:
            if w.ndim != 2:
                raise ShapeError(f"layer weights must be 2-D, got shape {w.shape}")
            w.setflags(write=False)
        for prev, cur in zip(layers, layers[1:]):
            if cur.shape[1] != prev.shape[0]:
                raise ShapeError(
                    f"layer shapes do not chain: {prev.shape} followed by {cur.shape}"
                )
        if layers[-1].shape[0] < 1:
            raise ShapeError("lifted width must be at least 1")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "activation", ActivationKind.parse(self.activation))
        object.__setattr__(self, "augment_state", bool(self.augment_state))

    @property
    def state_dim(self):
        return self.layers[0].shape[1]

    @property
    def width(self):
        """Width ``m`` of the trainable block."""
        return self.layers[-1].shape[0]

    @property
    def lift_dim(self):
        return self.width + (self.state_dim if self.augment_state else 0)

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def state_index(self):
        """Positions of the raw state coordinates inside the lifted vector, or
        ``None`` when the state is not part of the lift."""
        if not self.augment_state:
            return None
        return np.arange(self.state_dim)

    @property
    def trainable_dim(self):
        """Number of lifted coordinates that depend on the weights."""
        return self.width

    # -- evaluation ---------------------------------------------------------

    def _check_batch(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.state_dim:
            raise ShapeError(
                f"expected states of dimension {self.state_dim}, got array of shape {X.shape}"
            )
        return X

    def forward(self, X):
        """Lift a batch ``X`` of shape ``(N, d)``.

        Returns the lifted batch ``(N, lift_dim)`` and the list of hidden
        activations ``[X, h_1, ..., h_L]`` together with the pre-activations,
        which :meth:`backprop` reuses.
        """
        X = self._check_batch(X)
        kind = self.activation
        hidden = [X]
        pre = []
        h = X
        for w in self.layers:
            a = h @ w.T
            h = activations.value(kind, a)
            pre.append(a)
            hidden.append(h)
        Z = np.hstack([X, h]) if self.augment_state else h
        return Z, (hidden, pre)

    def lift_batch(self, X):
        return self.forward(X)[0]

    def backprop(self, X, upstream, cache=None):
        """Per-layer gradients of ``sum_n upstream[n] . lift(X[n])``."""
        X = self._check_batch(X)
        upstream = np.asarray(upstream, dtype=float)
        if upstream.shape != (X.shape[0], self.lift_dim):
            raise ShapeError(
                f"upstream must have shape {(X.shape[0], self.lift_dim)}, got {upstream.shape}"
            )
        if cache is None:
            _, cache = self.forward(X)
        hidden, pre = cache
        kind = self.activation
        delta = upstream[:, self.state_dim:] if self.augment_state else upstream
        grads = [None] * len(self.layers)
        for ell in range(len(self.layers) - 1, -1, -1):
            delta = delta * activations.first(kind, pre[ell])
            grads[ell] = delta.T @ hidden[ell]
            if ell > 0:
                delta = delta @ self.layers[ell]
        return grads

    def jacobian_x(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.state_dim,):
            raise ShapeError(f"expected a state of length {self.state_dim}, got shape {x.shape}")
        kind = self.activation
        J = np.eye(self.state_dim)
        h = x
        for w in self.layers:
            a = w @ h
            J = activations.first(kind, a)[:, None] * (w @ J)
            h = activations.value(kind, a)
        if self.augment_state:
            J = np.vstack([np.eye(self.state_dim), J])
        return J

    # -- parameter algebra --------------------------------------------------

    def with_layers(self, layers):
        return DictionaryParams(tuple(layers), self.activation, self.augment_state)

    def apply_step(self, grads, eta):
        """Return ``W - eta * grads`` as a new dictionary."""
        return self.with_layers(w - eta * g for w, g in zip(self.layers, grads))

    def zero_grads(self):
        return [np.zeros_like(w) for w in self.layers]

    def frobenius_norm(self):
        return math.sqrt(sum(float(np.sum(w * w)) for w in self.layers))

    def flat(self):
        return np.concatenate([w.ravel() for w in self.layers])

    def from_flat(self, vec):
        out, pos = [], 0
        for w in self.layers:
            out.append(np.asarray(vec[pos:pos + w.size], dtype=float).reshape(w.shape))
            pos += w.size
        return self.with_layers(out)

    @staticmethod
    def flat_grads(grads):
        return np.concatenate([g.ravel() for g in grads])

    def project(self, radius):
        """Scale the weights onto the Frobenius ball of the given radius."""
        norm = self.frobenius_norm()
        if norm <= radius:
            return self
        return self.with_layers(w * (radius / norm) for w in self.layers)


def grads_norm(grads):
    """Frobenius norm of a (possibly nested) collection of gradient arrays."""
    if isinstance(grads, np.ndarray):
        return math.sqrt(float(np.sum(grads * grads)))
    return math.sqrt(sum(grads_norm(g) ** 2 for g in grads))


def init_params(state_dim, widths, activation="tanh", augment_state=True, rng=None):
    """Random dictionary with layer widths ``widths`` (last entry is ``m``).

    Each weight is uniform on ``[-s, s]`` with ``s = 1 / sqrt(fan_in)``.
    """
    rng = np.random.default_rng(rng)
    if isinstance(widths, int):
        widths = [widths]
    if state_dim < 1 or len(widths) == 0 or any(int(w) < 1 for w in widths):
        raise UsageError("state dimension and all layer widths must be positive")
    layers = []
    fan_in = state_dim
    for width in widths:
        s = 1.0 / math.sqrt(fan_in)
        layers.append(rng.uniform(-s, s, size=(int(width), fan_in)))
        fan_in = int(width)
    return DictionaryParams(tuple(layers), ActivationKind.parse(activation), augment_state)


# -- module-level operations ----------------------------------------------------


def lift(params, x):
    """Lifted vector of a single state ``x``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-D state, got shape {x.shape}")
    return params.lift_batch(x[None, :])[0]


def lift_jacobian_x(params, x):
    """Exact Jacobian ``d lift / d x`` with shape ``(lift_dim, d)``."""
    return params.jacobian_x(x)


def lift_gradient_W(params, x, upstream):
    """Gradient of ``upstream . lift(x)`` with respect to each layer."""
    x = np.asarray(x, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-D state, got shape {x.shape}")
    if upstream.shape != (params.lift_dim,):
        raise ShapeError(f"upstream must have length {params.lift_dim}, got shape {upstream.shape}")
    return params.backprop(x[None, :], upstream[None, :])


class BlockDictionary:
    """Concatenation of per-block dictionaries ``[psi_1(x^1); ...; psi_q(x^q)]``.

    ``blocks[i]`` lists the state coordinates seen by ``parts[i]``. Gradients
    and steps are nested lists: one list of layer arrays per part.
    """

    def __init__(self, parts: Sequence[DictionaryParams], blocks: Sequence[Sequence[int]]):
        parts, blocks = tuple(parts), tuple(blocks)
        if len(parts) != len(blocks) or len(parts) == 0:
            raise ShapeError("need one dictionary per block and at least one block")
        self.parts = tuple(parts)
        self.blocks = tuple(np.asarray(b, dtype=int) for b in blocks)
        for p, b in zip(self.parts, self.blocks):
            if p.state_dim != len(b):
                raise ShapeError(
                    f"block of {len(b)} coordinates given a dictionary over {p.state_dim}"
                )
        allidx = np.concatenate(self.blocks)
        if sorted(allidx.tolist()) != list(range(len(allidx))):
            raise ShapeError("blocks must be disjoint and cover 0..d-1")
        offsets = np.cumsum([0] + [p.lift_dim for p in self.parts])
        self.offsets = offsets

    @property
    def state_dim(self):
        return sum(len(b) for b in self.blocks)

    @property
    def lift_dim(self):
        return int(self.offsets[-1])

    @property
    def layers(self):
        return tuple(p.layers for p in self.parts)

    @property
    def activation(self):
        return self.parts[0].activation

    @property
    def augment_state(self):
        return all(p.augment_state for p in self.parts)

    @property
    def n_layers(self):
        return max(p.n_layers for p in self.parts)

    @property
    def trainable_dim(self):
        return sum(p.width for p in self.parts)

    @property
    def state_index(self):
        if not self.augment_state:
            return None
        idx = np.empty(self.state_dim, dtype=int)
        for off, b in zip(self.offsets, self.blocks):
            idx[b] = off + np.arange(len(b))
        return idx

    def block_slice(self, i):
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def _check_batch(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.state_dim:
            raise ShapeError(
                f"expected states of dimension {self.state_dim}, got array of shape {X.shape}"
            )
        return X

    def forward(self, X):
        X = self._check_batch(X)
        outs, caches = [], []
        for p, b in zip(self.parts, self.blocks):
            Z, c = p.forward(X[:, b])
            outs.append(Z)
            caches.append(c)
        return np.hstack(outs), caches

    def lift_batch(self, X):
        return self.forward(X)[0]

    def backprop(self, X, upstream, cache=None):
        X = self._check_batch(X)
        upstream = np.asarray(upstream, dtype=float)
        if upstream.shape != (X.shape[0], self.lift_dim):
            raise ShapeError(
                f"upstream must have shape {(X.shape[0], self.lift_dim)}, got {upstream.shape}"
            )
        grads = []
        for i, (p, b) in enumerate(zip(self.parts, self.blocks)):
            c = None if cache is None else cache[i]
            grads.append(p.backprop(X[:, b], upstream[:, self.block_slice(i)], c))
        return grads

    def jacobian_x(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.state_dim,):
            raise ShapeError(f"expected a state of length {self.state_dim}, got shape {x.shape}")
        J = np.zeros((self.lift_dim, self.state_dim))
        for i, (p, b) in enumerate(zip(self.parts, self.blocks)):
            J[self.block_slice(i)][:, b] = p.jacobian_x(x[b])
        return J

    def with_parts(self, parts):
        return BlockDictionary(parts, self.blocks)

    def apply_step(self, grads, eta):
        return self.with_parts(p.apply_step(g, eta) for p, g in zip(self.parts, grads))

    def zero_grads(self):
        return [p.zero_grads() for p in self.parts]

    def frobenius_norm(self):
        return math.sqrt(sum(p.frobenius_norm() ** 2 for p in self.parts))

    def flat(self):
        return np.concatenate([p.flat() for p in self.parts])

    def from_flat(self, vec):
        parts, pos = [], 0
        for p in self.parts:
            n = sum(w.size for w in p.layers)
            parts.append(p.from_flat(vec[pos:pos + n]))
            pos += n
        return self.with_parts(parts)

    @staticmethod
    def flat_grads(grads):
        return np.concatenate([DictionaryParams.flat_grads(g) for g in grads])

    def project(self, radius):
        norm = self.frobenius_norm()
        if norm <= radius:
            return self
        scale = radius / norm
        return self.with_parts(p.with_layers(w * scale for w in p.layers) for p in self.parts)
