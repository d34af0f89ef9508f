"""Ground-truth systems, a fixed-step RK4 integrator and dataset construction."""

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import IntegrationError, ShapeError, UsageError
from .objective import Normalization, TrajectoryDataset


@dataclass(frozen=True)
class VanDerPol:
    """``x1' = mu (x1 - x1^3/3 - x2)``, ``x2' = x1 / mu``."""

    mu: float = 0.5
    d = 2

    def __call__(self, x):
        x1, x2 = x
        return np.array([self.mu * (x1 - x1**3 / 3.0 - x2), x1 / self.mu])


@dataclass(frozen=True)
class Glycolysis:
    """Seven-species glycolytic oscillator.

    ``k1_cap`` is the inhibition constant in the Hill term
    ``1 + (x6 / k1_cap)^q_exp``; ``k1`` is the rate constant multiplying
    ``x1 x6``.
    """

    J_flux: float = 2.5
    a: float = 4.0
    n: float = 1.0
    k1_cap: float = 0.52
    kappa: float = 13.0
    phi: float = 0.1
    q_exp: float = 4.0
    k: float = 1.8
    k1: float = 100.0
    k2: float = 6.0
    k3: float = 16.0
    k4: float = 100.0
    k5: float = 1.28
    k6: float = 12.0
    d = 7

    def __call__(self, x):
        x1, x2, x3, x4, x5, x6, x7 = x
        v1 = self.k1 * x1 * x6 / (1.0 + (x6 / self.k1_cap) ** self.q_exp)
        v2 = self.k2 * x2 * (self.n - x5)
        v3 = self.k3 * x3 * (self.a - x6)
        v4 = self.k4 * x4 * x5
        v6 = self.k6 * x2 * x5
        leak = self.kappa * (x4 - x7)
        return np.array([
            self.J_flux - v1,
            2.0 * v1 - v2 - v6,
            v2 - v3,
            v3 - v4 - leak,
            v2 - v4 - v6,
            -2.0 * v1 + 2.0 * v3 - self.k5 * x6,
            self.phi * leak - self.k * x7,
        ])


@dataclass(frozen=True)
class Custom:
    """User-supplied autonomous vector field of dimension ``d``."""

    f: Callable[[np.ndarray], np.ndarray]
    d: int

    def __call__(self, x):
        return np.asarray(self.f(x), dtype=float)


def vector_field(system, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (system.d,):
        raise ShapeError(f"state must have length {system.d}, got shape {x.shape}")
    out = np.asarray(system(x), dtype=float)
    if out.shape != (system.d,):
        raise ShapeError(f"vector field returned shape {out.shape}, expected ({system.d},)")
    return out


def rk4_step(system, x, dt):
    """One classical fourth-order Runge-Kutta step."""
    if not dt > 0:
        raise UsageError("dt must be positive")
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = vector_field(system, x)
        k2 = vector_field(system, x + 0.5 * dt * k1)
        k3 = vector_field(system, x + 0.5 * dt * k2)
        k4 = vector_field(system, x + dt * k3)
        out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise IntegrationError("RK4 step produced a non-finite state")
    return out


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    dt: float
    t0: float = 0.0

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(len(self.states))

    def __len__(self):
        return len(self.states)


def simulate(system, x0, dt, steps):
    """Integrate ``steps`` RK4 steps from ``x0``; returns ``steps + 1`` states."""
    if steps < 0:
        raise UsageError("steps must be non-negative")
    x = np.asarray(x0, dtype=float)
    if x.shape != (system.d,):
        raise ShapeError(f"initial state must have length {system.d}, got shape {x.shape}")
    states = np.empty((steps + 1, system.d))
    states[0] = x
    for i in range(steps):
        try:
            x = rk4_step(system, x, dt)
        except IntegrationError as exc:
            raise IntegrationError(f"integration failed at step {i + 1}", i + 1) from exc
        states[i + 1] = x
    return Trajectory(states, float(dt))


@dataclass(frozen=True, eq=False)
class PredictionSegment:
    """Ground truth following the training window.

    ``x0`` is the last training state (the rollout's initial condition) and
    ``states`` the ``n_predict`` states after it, in original units.
    """

    x0: np.ndarray
    states: np.ndarray
    start: int

    def __len__(self):
        return len(self.states)


def make_dataset(traj, n_train, n_predict, normalize=False):
    """Split a trajectory into ``n_train`` training pairs and a prediction segment.

    With ``normalize`` the pairs are min-max scaled to ``[-1, 1]`` using the
    training states only; the map is stored on the dataset.
    """
    states = traj.states if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    if n_train < 1 or n_predict < 0:
        raise UsageError("need n_train >= 1 and n_predict >= 0")
    if n_train + n_predict > len(states) - 1:
        raise UsageError(
            f"trajectory of {len(states)} samples cannot supply {n_train} training pairs "
            f"and {n_predict} prediction steps"
        )
    train_states = states[: n_train + 1]
    norm: Optional[Normalization] = Normalization.minmax(train_states) if normalize else None
    scaled = norm.apply(train_states) if norm is not None else train_states
    data = TrajectoryDataset(scaled[:-1], scaled[1:], norm)
    seg = PredictionSegment(states[n_train].copy(), states[n_train + 1: n_train + 1 + n_predict].copy(),
                            n_train)
    return data, seg


def write_trajectory_csv(traj, path):
    d = traj.states.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"x{i + 1}" for i in range(d)])
        for t, x in zip(traj.times, traj.states):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in x])


def read_trajectory_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[0].strip() != "t":
        raise UsageError(f"{path}: first column must be 't'")
    if not body:
        raise UsageError(f"{path}: trajectory has no samples")
    arr = np.array([[float(v) for v in r] for r in body])
    times, states = arr[:, 0], arr[:, 1:]
    dt = float(times[1] - times[0]) if len(times) > 1 else 1.0
    return Trajectory(states, dt, float(times[0]))


SYSTEMS = {"vdp": VanDerPol, "glycolysis": Glycolysis}

DEFAULT_X0 = {
    "vdp": (1.0, 0.0),
    "glycolysis": (1.2, 1.5, 0.2, 0.4, 0.3, 2.7, 0.1),
}
DEFAULT_DT = {"vdp": 0.05, "glycolysis": 0.01}
