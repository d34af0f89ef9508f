"""End-to-end experiment steps shared by the command line and the demos."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import activations, distributed, dynamics, modelio, objective, rollout, trainer
from .errors import UsageError


def simulate(cfg):
    s = cfg.system
    return dynamics.simulate(s.build(), s.x0, s.dt, s.samples)


def dataset(cfg, traj=None):
    """``(trajectory, training dataset, prediction segment)`` for a config."""
    traj = simulate(cfg) if traj is None else traj
    data, seg = dynamics.make_dataset(traj, cfg.dataset.n_train, cfg.dataset.n_predict,
                                      cfg.dictionary.normalize)
    return traj, data, seg


def _bounds_record(params, data, cfg):
    tr = cfg.training
    if params.n_layers != 1 or any(getattr(p, "n_layers", 1) != 1 for p in getattr(params, "parts", ())):
        return {"l_w": None, "l_k": None, "loss_bound": None}
    b = activations.bounds(params.activation)
    lift_sq = objective.lift_sq_bound(params, b, data)
    l_w, l_k = trainer.lipschitz_constants(params, data, objective.BoundConfig(tr.u_k, tr.u_w),
                                           tr.gradient)
    return {"l_w": l_w, "l_k": l_k,
            "loss_bound": objective.loss_upper_bound(params.lift_dim, b, tr.u_k, lift_sq)}


def _training_record(cfg, mode, iterations, converged, primary_e, final_e, best_e):
    tr = cfg.training
    return {
        "mode": mode,
        "config_hash": cfg.digest(),
        "seed": tr.seed,
        "iterations": iterations,
        "converged": converged,
        "terminal_E": primary_e,
        "final_E": final_e,
        "best_E": best_e,
        "schedule": tr.schedule,
        "eta": tr.eta if tr.schedule == "constant" else None,
        "gradient": tr.gradient,
        "tracker": tr.tracker,
        "n_train": cfg.dataset.n_train,
        "n_predict": cfg.dataset.n_predict,
        "normalize": cfg.dictionary.normalize,
    }


@dataclass
class CentralRun:
    result: trainer.TrainResult
    model: modelio.ModelFile
    data: objective.TrajectoryDataset
    segment: dynamics.PredictionSegment


def train_central(cfg, traj=None):
    """Alternating descent from the config. The model's primary iterate is
    the tracked one; the final iterate is kept as the alternate."""
    if cfg.training.mode != "central":
        raise UsageError(f"training.mode is {cfg.training.mode!r}; use the distributed trainer")
    _, data, seg = dataset(cfg, traj)
    d = cfg.dictionary
    result = trainer.train(cfg.training.train_config(), data, rng=np.random.default_rng(cfg.training.seed),
                           widths=d.widths, activation=d.activation, augment_state=d.augment_state)
    hist = result.history
    final_e = hist[-1].E
    best_e = min(r.E for r in hist)
    tracked_e = objective.gradient_norm_sum(result.best_params, result.best_k, data, cfg.training.gradient)
    record = _training_record(cfg, "central", result.iterations, result.converged, tracked_e,
                              final_e, best_e)
    record.update(_bounds_record(result.params, data, cfg))
    model = modelio.ModelFile(result.best_params, result.best_k, data.normalization, None, record,
                              {"label": "final", "params": result.params, "k": result.k})
    return CentralRun(result, model, data, seg)


def dist_config(cfg):
    tr, di, d = cfg.training, cfg.distributed, cfg.dictionary
    mode = "async" if tr.mode == "dist-async" else "sync"
    return distributed.DistConfig(
        q=di.q, layer_widths=tuple(d.widths), activation=d.activation,
        augment_state=d.augment_state, mode=mode,
        max_delay=di.max_delay if mode == "async" else 0, delay_dist=di.delay_dist,
        seed=tr.seed, rounds=tr.iterations, tol=tr.tol, schedule=tr.schedule_obj(),
        gradient=tr.gradient, batch_size=di.batch_size, u_k=tr.u_k,
    )


def partition_for(cfg):
    di = cfg.distributed
    widths = di.block_widths if di.block_widths is not None else (cfg.dictionary.widths[-1],)
    if len(widths) == 1:
        widths = widths * di.q
    return distributed.partition_state(cfg.system.build().d, di.q, list(widths))


@dataclass
class DistRun:
    result: distributed.DistResult
    model: modelio.ModelFile
    data: objective.TrajectoryDataset
    segment: dynamics.PredictionSegment


def train_distributed(cfg, traj=None):
    """Distributed rounds from the config. The model's primary iterate is the
    final one; the tracked iterate is kept as the alternate."""
    if cfg.training.mode == "central":
        cfg = cfg.replace("training", mode="dist-sync")
    _, data, seg = dataset(cfg, traj)
    dc = dist_config(cfg)
    result = distributed.run_distributed(dc, data, partition=partition_for(cfg))
    hist = result.history
    best_e = min(r.grad_norm_sum for r in hist)
    record = _training_record(cfg, cfg.training.mode, result.rounds, result.converged,
                              hist[-1].grad_norm_sum, hist[-1].grad_norm_sum, best_e)
    record.update(_bounds_record(result.params, data, cfg))
    record["max_staleness"] = max((r.max_staleness_observed for r in hist), default=0)
    part = {"blocks": [list(b) for b in result.partition.blocks],
            "widths": list(result.partition.widths)}
    model = modelio.ModelFile(result.params, result.k, data.normalization, part, record,
                              {"label": "best", "params": result.best_params, "k": result.best_k})
    return DistRun(result, model, data, seg)


def evaluate(model, segment, which="primary", relift=False):
    """Roll the model out over a prediction segment."""
    params, K = model.select(which)
    return rollout.evaluate_segment(params, K, segment, model.normalization, relift)


def segment_from(traj, start, n):
    """Prediction segment starting at ``traj.states[start]`` with ``n`` steps."""
    states = traj.states
    if not 0 <= start < len(states):
        raise UsageError(f"start index {start} outside trajectory of {len(states)} samples")
    if n is None:
        n = len(states) - 1 - start
    if n < 0 or start + n > len(states) - 1:
        raise UsageError(f"cannot predict {n} steps from index {start} of {len(states)} samples")
    return dynamics.PredictionSegment(states[start].copy(), states[start + 1:start + 1 + n].copy(), start)


def summary_lines(multi: Optional[rollout.ErrorSummary], one: Optional[rollout.ErrorSummary], n):
    if multi is None:
        return ["n=0: nothing to compare"]
    m, o = multi.as_percent(), one.as_percent()
    return [
        f"one-step relative error: mean {o['mean']:.4f}%  final {o['final']:.4f}%  max {o['max']:.4f}%",
        f"{n}-step relative error: mean {m['mean']:.4f}%  final {m['final']:.4f}%  max {m['max']:.4f}%",
    ]
