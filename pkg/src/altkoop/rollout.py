"""Multi-step prediction by propagating lifted vectors with ``K``."""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, ShapeError, UsageError

EPS = 1e-12


def decode(z, d, normalization=None, state_index=None):
    """Recover the state from a lifted vector (or a batch of them).

    The state occupies positions ``state_index`` (default: the first ``d``
    entries). ``normalization`` maps the result back to original units.
    """
    z = np.asarray(z, dtype=float)
    if z.shape[-1] < d:
        raise ShapeError(f"lifted width {z.shape[-1]} is smaller than state dimension {d}")
    idx = np.arange(d) if state_index is None else np.asarray(state_index)
    x = z[..., idx]
    return normalization.invert(x) if normalization is not None else x


def _prepare(params, normalization):
    idx = params.state_index
    if idx is None:
        raise UsageError("prediction needs a state-augmented dictionary to decode observables")
    return idx


def multi_step_predict(params, K, x0, n, normalization=None, relift=False):
    """Predict ``n`` steps from ``x0``; returns ``n + 1`` states including ``x0``.

    Lifted vectors evolve as ``z_{k+1} = K z_k`` and are only decoded for
    output. ``relift`` re-lifts every decoded state instead.
    ``x0`` and the outputs are in original units.
    """
    idx = _prepare(params, normalization)
    if n < 0:
        raise UsageError("n must be non-negative")
    K = np.asarray(K, dtype=float)
    d = params.state_dim
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (d,):
        raise ShapeError(f"initial state must have length {d}, got shape {x0.shape}")
    xs = normalization.apply(x0) if normalization is not None else x0
    z = params.lift_batch(xs[None, :])[0]
    out = np.empty((n + 1, d))
    out[0] = x0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, n + 1):
            z = K @ z
            if not np.all(np.isfinite(z)):
                raise DivergenceError(f"prediction diverged at step {k}", k)
            if relift:
                z = params.lift_batch(z[idx][None, :])[0]
            out[k] = decode(z, d, normalization, idx)
    return out


def one_step_predict(params, K, states, normalization=None):
    """Predict ``states[k+1]`` from the true ``states[k]`` for every ``k``."""
    idx = _prepare(params, normalization)
    states = np.asarray(states, dtype=float)
    xs = normalization.apply(states) if normalization is not None else states
    Z = params.lift_batch(xs[:-1])
    return decode(Z @ np.asarray(K, dtype=float).T, params.state_dim, normalization, idx)


@dataclass
class ErrorSummary:
    per_step: np.ndarray
    mean: float
    final: float
    max: float

    def as_percent(self):
        return {"mean": 100.0 * self.mean, "final": 100.0 * self.final, "max": 100.0 * self.max}


def relative_error(pred, truth):
    """Per-step ``||pred_k - truth_k|| / max(||truth_k||, 1e-12)`` and aggregates.

    Aggregates are fractions; :meth:`ErrorSummary.as_percent` scales them.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    if pred.shape != truth.shape or len(pred) < 1:
        raise UsageError(f"prediction {pred.shape} and truth {truth.shape} must match and be non-empty")
    num = np.linalg.norm(pred - truth, axis=1)
    den = np.maximum(np.linalg.norm(truth, axis=1), EPS)
    e = num / den
    return ErrorSummary(e, float(np.mean(e)), float(e[-1]), float(np.max(e)))


@dataclass
class PredictionRun:
    predicted: np.ndarray
    truth: np.ndarray
    per_step_rel_err: np.ndarray


def evaluate_segment(params, K, segment, normalization=None, relift=False):
    """Roll out over a prediction segment and report one-step and multi-step errors.

    Returns ``(run, multi_step_summary, one_step_summary)``. Errors exclude the
    initial state, which is given.
    """
    n = len(segment)
    pred = multi_step_predict(params, K, segment.x0, n, normalization, relift)
    truth = np.vstack([segment.x0[None, :], segment.states])
    run = PredictionRun(pred, truth, np.zeros(n + 1))
    if n == 0:
        return run, None, None
    multi = relative_error(pred[1:], truth[1:])
    run.per_step_rel_err[1:] = multi.per_step
    one = relative_error(one_step_predict(params, K, truth, normalization), truth[1:])
    return run, multi, one


def write_prediction_csv(run, path):
    d = run.truth.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + [f"true_{i + 1}" for i in range(d)] + [f"pred_{i + 1}" for i in range(d)]
                   + ["rel_err"])
        for k, (t, p, e) in enumerate(zip(run.truth, run.predicted, run.per_step_rel_err)):
            w.writerow([k] + [repr(float(v)) for v in t] + [repr(float(v)) for v in p] + [repr(float(e))])
