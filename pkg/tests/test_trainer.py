import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from altkoop import activations as A
from altkoop import objective as O
from altkoop import trainer as T
from altkoop.dictionary import init_params
from altkoop.errors import DivergenceError, UsageError
from altkoop.objective import BoundConfig, TrajectoryDataset
from altkoop.trainer import Schedule, TrainConfig


class FixedLift:
    """Lift with frozen outputs: row 0 of the data maps to ``a``, row 1 to ``b``."""

    n_layers = 0
    lift_dim = 1
    state_dim = 1
    augment_state = False

    def __init__(self, table):
        self.table = table

    def forward(self, X):
        return np.array([[self.table[float(x[0])]] for x in X]), None

    def backprop(self, X, upstream, cache=None):
        return [np.zeros((1, 1))]

    def apply_step(self, grads, eta):
        return self


def test_learning_rate_examples():
    assert T.learning_rate(Schedule.constant(0.23), 0) == (0.23, 0.23)
    assert T.learning_rate(Schedule.constant(0.23), 999) == (0.23, 0.23)
    assert T.learning_rate(Schedule.diminishing(), 0) == (1.0, 1.0)
    assert T.learning_rate(Schedule.diminishing(), 9) == (0.1, 0.1)
    assert T.learning_rate(Schedule.auto(), 3, 2.0, 4.0) == (0.25, 0.25)
    assert T.learning_rate(Schedule("constant", eta_w=0.1, eta_k=0.2), 0) == (0.1, 0.2)
    with pytest.raises(UsageError):
        T.learning_rate(Schedule.auto(), 0, math.inf, 1.0)
    with pytest.raises(UsageError):
        Schedule.constant(0.0)
    with pytest.raises(UsageError):
        Schedule("sometimes")


def test_scalar_k_step_by_hand():
    params = FixedLift({0.0: 1.0, 1.0: 0.5})
    data = TrajectoryDataset(np.array([[0.0]]), np.array([[1.0]]))
    cfg = TrainConfig(iterations=1, schedule=Schedule.constant(0.5))
    state = T.init_state(params, np.zeros((1, 1)), data, cfg)
    T.step(state, data, cfg)
    assert state.k[0, 0] == pytest.approx(0.25, abs=1e-15)


def test_fixed_point_is_unchanged():
    p = init_params(2, [3], "tanh", True, np.random.default_rng(0))
    X = np.random.default_rng(1).normal(size=(5, 2))
    data = TrajectoryDataset(X, X)
    res = T.train(TrainConfig(iterations=5, tol=0.0), data, params=p, k=np.eye(5))
    assert np.array_equal(res.k, np.eye(5))
    assert np.array_equal(res.params.flat(), p.flat())


def test_zero_iterations_returns_initial_state():
    rng = np.random.default_rng(2)
    p = init_params(2, [3], "tanh", True, rng)
    data = TrajectoryDataset.from_states(rng.normal(size=(6, 2)))
    K = T.init_koopman(5, rng)
    res = T.train(TrainConfig(iterations=0), data, params=p, k=K)
    assert res.iterations == 0 and len(res.history) == 1
    assert np.array_equal(res.k, K) and res.params is p


def test_gauss_seidel_order():
    rng = np.random.default_rng(3)
    p = init_params(2, [3], "tanh", True, rng)
    data = TrajectoryDataset.from_states(0.5 * rng.normal(size=(8, 2)))
    K = T.init_koopman(5, rng, 0.3)
    eta = 0.7
    res = T.train(TrainConfig(iterations=1, tol=0.0, schedule=Schedule.constant(eta)), data, p, K)
    k1 = K - eta * O.grad_K(p, K, data)
    w1 = p.apply_step(O.grad_W(p, k1, data), eta)
    assert np.allclose(res.k, k1, rtol=0, atol=1e-15)
    assert np.allclose(res.params.flat(), w1.flat(), rtol=0, atol=1e-15)
    jacobi = p.apply_step(O.grad_W(p, K, data), eta)
    assert not np.allclose(res.params.flat(), jacobi.flat())


def _tracker_run(es):
    state = T.TrainerState("p0", np.zeros(1), "p0", np.zeros(1), es[0], history=[], e_prev=es[0])
    for i, e in enumerate(es[1:], start=1):
        state.params, state.k = f"p{i}", np.full(1, float(i))
        T.tracker_update(state, e)
    return state


def test_tracker_examples():
    assert _tracker_run([4, 3, 2, 1]).best_params == "p3"
    s = _tracker_run([9, 1, 2, 0.5])
    assert s.best_params == "p3" and s.e_best == 0.5
    assert _tracker_run([9, 1, 2]).best_params == "p1"
    assert _tracker_run([9, 1, 1]).best_params == "p2"  # ties favour the newer iterate
    with pytest.raises(UsageError):
        T.tracker_update(_tracker_run([1]), -1.0)


def test_consecutive_tracker_follows_literal_rule():
    state = T.TrainerState("p0", np.zeros(1), "p0", np.zeros(1), 5.0, history=[], e_prev=5.0)
    for i, e in enumerate([1.0, 3.0, 2.0], start=1):
        state.params, state.k = f"p{i}", np.zeros(1)
        T.tracker_update(state, e, "consecutive")
    # 2 <= 3 (previous) so it replaces, even though 1 was better
    assert state.best_params == "p3"


@given(st.integers(0, 10**6))
def test_tracker_holds_history_minimum(seed):
    rng = np.random.default_rng(seed)
    p = init_params(2, [2], "tanh", True, rng)
    data = TrajectoryDataset.from_states(rng.normal(size=(6, 2)))
    cfg = TrainConfig(iterations=15, tol=0.0, schedule=Schedule.constant(0.5))
    state = T.init_state(p, T.init_koopman(4, rng), data, cfg)
    for _ in range(15):
        T.step(state, data, cfg)
        assert len(state.history) == state.t + 1
        assert state.e_best == min(r.E for r in state.history)
    assert O.gradient_norm_sum(state.best_params, state.best_k, data) == pytest.approx(state.e_best, rel=1e-12)


def auto_instance(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    m = int(rng.integers(1, 4))
    act = ("tanh", "logistic", "arctan")[seed % 3]
    p = init_params(d, [m], act, bool(seed % 2), rng)
    data = TrajectoryDataset.from_states(rng.uniform(-1, 1, (int(rng.integers(5, 20)), d)))
    return p, T.init_koopman(p.lift_dim, rng, 0.1), data


def test_monotone_descent_and_rate_bound_small():
    p, K, data = auto_instance(4)
    cfg = TrainConfig(iterations=200, tol=0.0, schedule=Schedule.auto())
    res = T.train(cfg, data, p, K)
    losses = [r.loss for r in res.history]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    L = max(res.l_w, res.l_k)
    eta = 1.0 / L
    b = A.bounds(p.activation)
    R = O.loss_upper_bound(p.lift_dim, b, 4.0, O.lift_sq_bound(p, b, data))
    report = T.verify_rate_bound(res.history, R, T.descent_margin(eta, L))
    assert report.holds and report.prefixes_checked == 200 and 0 < report.tightest_ratio < 1


def test_rate_bound_requires_positive_margin():
    with pytest.raises(UsageError):
        T.verify_rate_bound([], 1.0, 0.0)
    assert T.descent_margin(0.5, 4.0) == 0.0


def test_diminishing_denominator_is_lower_bound():
    for L in (0.1, 0.5, 1.0, 1.9):
        for n in (1, 2, 10, 100, 1000):
            eta = 1.0 / np.arange(1, n + 2)
            assert np.sum(eta - L * eta ** 2 / 2) >= T.diminishing_denominator(n, L) - 1e-12


def test_divergence_carries_history():
    rng = np.random.default_rng(5)
    p = init_params(2, [3], "tanh", True, rng)
    data = TrajectoryDataset.from_states(10 * rng.normal(size=(10, 2)))
    with pytest.raises(DivergenceError) as err:
        T.train(TrainConfig(iterations=200, schedule=Schedule.constant(50.0)), data, p,
                T.init_koopman(5, rng))
    assert err.value.iteration >= 1
    assert len(err.value.history) == err.value.iteration + 1


def test_training_is_deterministic(tmp_path):
    rng_data = np.random.default_rng(6)
    data = TrajectoryDataset.from_states(rng_data.normal(size=(12, 2)))
    runs = [T.train(TrainConfig(iterations=30), data, rng=np.random.default_rng(9)) for _ in range(2)]
    for i, r in enumerate(runs):
        T.write_history_csv(r.history, tmp_path / f"h{i}.csv")
    assert (tmp_path / "h0.csv").read_bytes() == (tmp_path / "h1.csv").read_bytes()
    back = T.read_history_csv(tmp_path / "h0.csv")
    assert np.array_equal([r.row() for r in back], [r.row() for r in runs[0].history], equal_nan=True)
    header = (tmp_path / "h0.csv").read_text().splitlines()[0]
    assert header == "t,loss,grad_k_fro,grad_w_fro,E,eta,grad_w_step_fro"


def test_auto_rejects_multi_layer():
    rng = np.random.default_rng(7)
    p = init_params(2, [3, 3], "tanh", True, rng)
    data = TrajectoryDataset.from_states(rng.normal(size=(5, 2)))
    with pytest.raises(UsageError):
        T.train(TrainConfig(schedule=Schedule.auto()), data, p, T.init_koopman(5, rng))


def test_projection_keeps_parameters_in_balls():
    rng = np.random.default_rng(8)
    p = init_params(2, [3], "tanh", False, rng)
    data = TrajectoryDataset.from_states(rng.normal(size=(10, 2)))
    cfg = TrainConfig(iterations=50, schedule=Schedule.constant(0.5),
                      bounds=BoundConfig(u_k=1.0, u_w=0.5, project=True))
    res = T.train(cfg, data, p, T.init_koopman(3, rng))
    assert np.linalg.norm(res.k) <= 1.0 + 1e-12
    assert res.params.frobenius_norm() <= 0.5 + 1e-12
