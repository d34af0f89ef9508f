"""Alternating gradient descent on ``(K, W)`` with an optimal-iterate tracker.

Each iteration is one Gauss-Seidel sweep::

    K <- K - eta_K * grad_K F(W, K)
    W <- W - eta_W * grad_W F(W, K_new)

and the tracker keeps the iterate with the smallest gradient-norm sum
``E = ||grad_K F||_F + ||grad_W F||_F`` seen so far.
"""

import csv
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import activations, objective
from .dictionary import grads_norm, init_params
from .errors import DivergenceError, UsageError
from .objective import BoundConfig, LiftCache

SCHEDULES = ("constant", "diminishing", "auto")
TRACKERS = ("best", "consecutive")
HISTORY_COLUMNS = ("t", "loss", "grad_k_fro", "grad_w_fro", "E", "eta", "grad_w_step_fro")


@dataclass(frozen=True)
class Schedule:
    """Learning-rate schedule.

    ``constant`` uses ``eta`` (or ``eta_w``/``eta_k`` when given separately),
    ``diminishing`` uses ``1/(t+1)`` and ``auto`` uses ``scale / max(L_W, L_K)``.
    """

    kind: str = "constant"
    eta: Optional[float] = None
    eta_w: Optional[float] = None
    eta_k: Optional[float] = None
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise UsageError(f"schedule must be one of {SCHEDULES}, got {self.kind!r}")
        if self.kind == "constant":
            rates = (self.eta_w if self.eta_w is not None else self.eta,
                     self.eta_k if self.eta_k is not None else self.eta)
            if any(r is None or not r > 0 for r in rates):
                raise UsageError("constant schedule needs a positive eta")
        if not self.scale > 0:
            raise UsageError("schedule scale must be positive")

    @classmethod
    def constant(cls, eta):
        return cls("constant", eta=eta)

    @classmethod
    def diminishing(cls):
        return cls("diminishing")

    @classmethod
    def auto(cls, scale=1.0):
        return cls("auto", scale=scale)


def learning_rate(schedule, t, l_w=None, l_k=None):
    """Return ``(eta_W, eta_K)`` for iteration ``t``."""
    if t < 0:
        raise UsageError("iteration index must be non-negative")
    if schedule.kind == "constant":
        eta_w = schedule.eta_w if schedule.eta_w is not None else schedule.eta
        eta_k = schedule.eta_k if schedule.eta_k is not None else schedule.eta
        return float(eta_w), float(eta_k)
    if schedule.kind == "diminishing":
        eta = 1.0 / (t + 1)
        return eta, eta
    if l_w is None or l_k is None or not (math.isfinite(l_w) and math.isfinite(l_k)):
        raise UsageError("auto schedule needs finite Lipschitz constants")
    if not (l_w > 0 or l_k > 0):
        raise UsageError("auto schedule needs a positive Lipschitz constant")
    eta = schedule.scale / max(l_w, l_k)
    return eta, eta


@dataclass
class HistoryRecord:
    t: int
    loss: float
    grad_k_fro: float
    grad_w_fro: float
    E: float
    eta: float
    # ||grad_W F(W^t, K^{t+1})||_F, the gradient actually used by step t
    grad_w_step_fro: float = math.nan

    def row(self):
        return [self.t, self.loss, self.grad_k_fro, self.grad_w_fro, self.E, self.eta,
                self.grad_w_step_fro]


@dataclass
class TrainConfig:
    iterations: int = 500
    tol: float = 1e-8
    schedule: Schedule = field(default_factory=lambda: Schedule.constant(0.23))
    gradient: str = "full"
    tracker: str = "best"
    bounds: BoundConfig = field(default_factory=BoundConfig)

    def __post_init__(self):
        if self.iterations < 0:
            raise UsageError("iterations must be non-negative")
        if self.gradient not in objective.GRADIENT_MODES:
            raise UsageError(f"gradient must be one of {objective.GRADIENT_MODES}")
        if self.tracker not in TRACKERS:
            raise UsageError(f"tracker must be one of {TRACKERS}")


@dataclass
class TrainerState:
    """Current and tracked iterates plus the per-iteration history.

    ``history[t]`` describes ``(W^t, K^t)``; ``len(history) == t + 1``.
    """

    params: object
    k: np.ndarray
    best_params: object
    best_k: np.ndarray
    e_best: float
    t: int = 0
    history: List[HistoryRecord] = field(default_factory=list)
    e_prev: float = math.inf
    l_w: Optional[float] = None
    l_k: Optional[float] = None
    # gradient of the current iterate, reused by the next step
    _grad_k: Optional[np.ndarray] = field(default=None, repr=False)
    _cache: Optional[LiftCache] = field(default=None, repr=False)


def _evaluate(params, K, data, gradient):
    cache = LiftCache(params, data)
    E = cache.residuals(K)
    loss = 0.5 * math.fsum(np.einsum("ij,ij->i", E, E)) / data.n
    gk = cache.grad_K(K, E)
    gw = cache.grad_W(K, E, gradient)
    return cache, loss, gk, gw


def lipschitz_constants(params, data, bounds, gradient="full"):
    """``(L_W, L_K)`` for a single-layer dictionary on ``data``."""
    if params.n_layers != 1:
        raise UsageError("Lipschitz step sizes are only defined for single-layer dictionaries")
    b = activations.bounds(params.activation)
    lift_sq = objective.lift_sq_bound(params, b, data)
    l_k = objective.lipschitz_K(params.lift_dim, b, lift_sq)
    if gradient == "lemma1":
        l_w = objective.lipschitz_W(data, b, bounds.u_k)
    else:
        l_w = objective.lipschitz_W_full(data, b, bounds.u_k, lift_sq)
    return l_w, l_k


def init_state(params, K, data, config):
    """Evaluate the initial iterate and seed the tracker with it."""
    K = np.array(K, dtype=float)
    l_w = l_k = None
    if params.n_layers == 1:
        l_w, l_k = lipschitz_constants(params, data, config.bounds, config.gradient)
    elif config.schedule.kind == "auto":
        raise UsageError("auto schedule requires a single-layer dictionary")
    cache, loss, gk, gw = _evaluate(params, K, data, config.gradient)
    nk, nw = grads_norm(gk), grads_norm(gw)
    e0 = nk + nw
    eta_w, _ = learning_rate(config.schedule, 0, l_w, l_k)
    rec = HistoryRecord(0, loss, nk, nw, e0, eta_w)
    if not all(math.isfinite(v) for v in (loss, e0)):
        raise DivergenceError("non-finite loss or gradient at iteration 0", 0, [rec])
    return TrainerState(params, K, params, K.copy(), e0, 0, [rec], e0, l_w, l_k, gk, cache)


def tracker_update(state, e_new, mode="best"):
    """Replace the tracked iterate with the current one when ``e_new`` qualifies.

    ``best`` compares against the best value so far (ties go to the newer
    iterate); ``consecutive`` compares against the previous iterate's value.
    """
    if e_new < 0:
        raise UsageError("gradient-norm sum must be non-negative")
    ref = state.e_best if mode == "best" else state.e_prev
    if e_new <= ref:
        state.best_params = state.params
        state.best_k = state.k.copy()
    if mode == "best":
        state.e_best = min(state.e_best, e_new)
    else:
        if e_new <= ref:
            state.e_best = e_new
    state.e_prev = e_new
    return state


def step(state, data, config):
    """Advance ``state`` by one alternating sweep (in place) and return it."""
    t = state.t
    sched = config.schedule
    eta_w, eta_k = learning_rate(sched, t, state.l_w, state.l_k)
    cache = state._cache if state._cache is not None else LiftCache(state.params, data)
    gk = state._grad_k if state._grad_k is not None else cache.grad_K(state.k)

    k_new = state.k - eta_k * gk
    if config.bounds.project:
        k_new = _project_matrix(k_new, config.bounds.u_k)
    gw_step = cache.grad_W(k_new, gradient=config.gradient)
    params_new = state.params.apply_step(gw_step, eta_w)
    if config.bounds.project:
        params_new = params_new.project(config.bounds.u_w)
    state.history[t].grad_w_step_fro = grads_norm(gw_step)

    cache, loss, gk, gw = _evaluate(params_new, k_new, data, config.gradient)
    nk, nw = grads_norm(gk), grads_norm(gw)
    e_new = nk + nw
    next_eta, _ = learning_rate(sched, t + 1, state.l_w, state.l_k)
    rec = HistoryRecord(t + 1, loss, nk, nw, e_new, next_eta)
    if not all(math.isfinite(v) for v in (loss, e_new, state.history[t].grad_w_step_fro)):
        raise DivergenceError(
            f"non-finite loss or gradient at iteration {t + 1}", t + 1, state.history + [rec]
        )
    state.params, state.k, state.t = params_new, k_new, t + 1
    state._cache, state._grad_k = cache, gk
    state.history.append(rec)
    return tracker_update(state, e_new, config.tracker)


def _project_matrix(K, radius):
    norm = float(np.linalg.norm(K))
    return K if norm <= radius else K * (radius / norm)


def init_koopman(lift_dim, rng=None, noise=None):
    """Identity plus uniform noise on ``[-noise, noise]``.

    Sampled dynamics with small time steps are close to the identity map, so
    starting near it keeps the early iterates in a sensible region.
    """
    rng = np.random.default_rng(rng)
    s = 1e-3 if noise is None else noise
    return np.eye(lift_dim) + rng.uniform(-s, s, size=(lift_dim, lift_dim))


@dataclass
class TrainResult:
    params: object
    k: np.ndarray
    best_params: object
    best_k: np.ndarray
    history: List[HistoryRecord]
    wall_time: float
    converged: bool
    l_w: Optional[float] = None
    l_k: Optional[float] = None

    @property
    def iterations(self):
        return len(self.history) - 1

    @property
    def e_best(self):
        return min(r.E for r in self.history)


def train(config, data, params=None, k=None, rng=None, widths=(3,), activation="tanh",
          augment_state=True):
    """Run alternating descent for ``config.iterations`` sweeps or until
    ``E < config.tol``.

    If ``params``/``k`` are omitted they are drawn from ``rng`` with
    :func:`altkoop.dictionary.init_params` and :func:`init_koopman`.
    """
    rng = np.random.default_rng(rng)
    if params is None:
        params = init_params(data.d, list(widths), activation, augment_state, rng)
    if k is None:
        k = init_koopman(params.lift_dim, rng)
    start = time.perf_counter()
    # overflow on the way to a divergence is reported as DivergenceError instead
    with np.errstate(over="ignore", invalid="ignore"):
        state = init_state(params, k, data, config)
        converged = state.history[0].E < config.tol
        while not converged and state.t < config.iterations:
            step(state, data, config)
            converged = state.history[-1].E < config.tol
    return TrainResult(
        state.params, state.k, state.best_params, state.best_k, state.history,
        time.perf_counter() - start, converged, state.l_w, state.l_k,
    )


# -- rate diagnostics -------------------------------------------------------------


@dataclass
class RateBoundReport:
    holds: bool
    tightest_ratio: float
    worst_prefix: int
    prefixes_checked: int
    denominator: str

    def __str__(self):
        verdict = "holds" if self.holds else "VIOLATED"
        return (f"rate bound {verdict} over {self.prefixes_checked} prefixes "
                f"(denominator {self.denominator}); tightest ratio "
                f"{self.tightest_ratio:.6g} at T={self.worst_prefix}")


def _step_gradients(history):
    g = [r.grad_k_fro ** 2 + r.grad_w_step_fro ** 2 for r in history[:-1]]
    return np.asarray(g, dtype=float)


def _prefix_report(g, bounds, label):
    running_min = np.minimum.accumulate(g)
    ratios = running_min / bounds
    worst = int(np.argmax(ratios))
    return RateBoundReport(bool(np.all(ratios <= 1.0)), float(ratios[worst]), worst + 1,
                           len(g), label)


def verify_rate_bound(history, R, S):
    """Check ``min_{t<T} ||grad_K F_t||^2 + ||grad_W F(W^t, K^{t+1})||^2 <= 2R/(S T)``
    for every prefix of ``T`` completed steps of a constant-rate run."""
    if not S > 0:
        raise UsageError(f"descent margin S must be positive, got {S}")
    g = _step_gradients(history)
    if len(g) == 0:
        raise UsageError("history contains no completed steps")
    T = np.arange(1, len(g) + 1)
    return _prefix_report(g, 2.0 * R / (S * T), "S*T")


def descent_margin(eta, lipschitz):
    """``S = eta - L eta^2 / 2``."""
    return eta - lipschitz * eta * eta / 2.0


def diminishing_denominator(T, lipschitz):
    """Lower bound ``ln(T+2) - L + L/(2(T+1))`` on ``sum_{t=0}^{T} s_t`` with
    ``s_t = 1/(t+1) - L/(2 (t+1)^2)``."""
    return math.log(T + 2) - lipschitz + lipschitz / (2.0 * (T + 1))


def verify_diminishing_rate_bound(history, R, lipschitz):
    """Diminishing-rate analogue of :func:`verify_rate_bound`.

    For the prefix of steps ``0..T`` checks ``min g_t <= 2R / sum_t s_t`` and
    that the logarithmic lower bound on ``sum_t s_t`` is respected. Requires
    every ``s_t`` to be positive, i.e. ``L < 2``.
    """
    g = _step_gradients(history)
    if len(g) == 0:
        raise UsageError("history contains no completed steps")
    eta = 1.0 / np.arange(1, len(g) + 1)
    s = eta - lipschitz * eta**2 / 2.0
    if not np.all(s > 0):
        raise UsageError("diminishing-rate bound needs L < 2 so every step is a descent step")
    denom = np.cumsum(s)
    lower = np.array([diminishing_denominator(T, lipschitz) for T in range(len(g))])
    report = _prefix_report(g, 2.0 * R / denom, "sum(eta_t - L eta_t^2 / 2)")
    report.holds = report.holds and bool(np.all(denom >= lower - 1e-12))
    return report


def write_history_csv(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in history:
            w.writerow([r.t] + [repr(float(v)) for v in r.row()[1:]])


def read_history_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [HistoryRecord(int(r["t"]), *(float(r[c]) for c in HISTORY_COLUMNS[1:])) for r in rows]
