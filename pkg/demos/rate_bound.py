"""Watch the descent guarantee hold on a single-layer dictionary.

With the step set from the Lipschitz constants of the two gradients, the
loss never goes up and the smallest squared gradient seen so far stays under
``2R / (S T)``. The printout shows how much slack the bound leaves.

    python3 demos/rate_bound.py
"""

import numpy as np

from altkoop import activations, objective, trainer
from altkoop.dictionary import init_params
from altkoop.objective import TrajectoryDataset
from altkoop.trainer import Schedule, TrainConfig


def main():
    rng = np.random.default_rng(0)
    params = init_params(2, [3], "logistic", True, rng)
    data = TrajectoryDataset.from_states(rng.uniform(-1, 1, (30, 2)))
    K = trainer.init_koopman(params.lift_dim, rng, 0.1)

    res = trainer.train(TrainConfig(iterations=2000, tol=0.0, schedule=Schedule.auto()), data, params, K)
    L = max(res.l_w, res.l_k)
    b = activations.bounds(params.activation)
    R = objective.loss_upper_bound(params.lift_dim, b, 4.0, objective.lift_sq_bound(params, b, data))
    S = trainer.descent_margin(1.0 / L, L)
    print(f"L_W = {res.l_w:.4g}, L_K = {res.l_k:.4g}, step 1/L = {1 / L:.4g}, R = {R:.4g}")

    losses = np.array([r.loss for r in res.history])
    print(f"loss {losses[0]:.4e} -> {losses[-1]:.4e}, increases: {int(np.sum(np.diff(losses) > 0))}")
    print(trainer.verify_rate_bound(res.history, R, S))


if __name__ == "__main__":
    main()
