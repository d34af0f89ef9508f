"""Command-line interface: ``altkoop [--config PATH] [--seed N] [--out DIR] COMMAND``.

Exit codes: 0 success, 1 a ``verify`` check failed, 2 configuration or
usage error, 3 numerical divergence, 4 protocol error.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import distributed, dynamics, modelio, objective, pipeline, rollout, trainer
from .dictionary import init_params
from .errors import DivergenceError, DomainError, ProtocolError, ShapeError, UsageError

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED, EXIT_PROTOCOL = 0, 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _global_flags(default):
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=default,
                   help="experiment config file or bundled recipe name (vdp, glyco)")
    p.add_argument("--seed", type=int, default=default, metavar="N", help="override training.seed")
    p.add_argument("--out", metavar="DIR", default=default, help="override output.dir")
    return p


def build_parser():
    top = _global_flags(None)
    sub_flags = _global_flags(argparse.SUPPRESS)
    parser = _Parser(prog="altkoop", parents=[top],
                     description="Koopman operator learning by alternating gradient descent.")
    cmds = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = cmds.add_parser("simulate", parents=[sub_flags], help="sample a trajectory to CSV")
    sim.add_argument("--system", choices=sorted(dynamics.SYSTEMS))
    sim.add_argument("--dt", type=float)
    sim.add_argument("--samples", type=int, help="number of integration steps")
    sim.add_argument("--x0", help="comma-separated initial state")

    tr = cmds.add_parser("train", parents=[sub_flags], help="centralized alternating descent")
    _training_flags(tr)
    tr.add_argument("--activation")
    tr.add_argument("--tracker")

    dt = cmds.add_parser("dist-train", parents=[sub_flags], help="distributed training over simulated nodes")
    _training_flags(dt)
    dt.add_argument("--mode", choices=["dist-sync", "dist-async"])
    dt.add_argument("--q", type=int)
    dt.add_argument("--max-delay", type=int)
    dt.add_argument("--block-widths", help="comma-separated trainable width per node")

    pr = cmds.add_parser("predict", parents=[sub_flags], help="multi-step prediction from a model")
    pr.add_argument("--model", required=True, metavar="PATH")
    pr.add_argument("--trajectory", metavar="PATH",
                    help="ground-truth CSV (default: simulate the config's system)")
    pr.add_argument("--n", type=int, help="prediction steps")
    pr.add_argument("--start", type=int, help="index of the initial state in the trajectory")
    pr.add_argument("--iterate", choices=["primary", "alternate"], default="primary")
    pr.add_argument("--relift", action="store_true", help="re-lift every decoded state")

    ve = cmds.add_parser("verify", parents=[sub_flags], help="diagnostics")
    checks = ve.add_subparsers(dest="check", required=True, parser_class=_Parser)
    rate = checks.add_parser("rate", parents=[sub_flags], help="convergence-rate bound on a history")
    rate.add_argument("--history", required=True, metavar="PATH")
    rate.add_argument("--model", required=True, metavar="PATH")
    eq = checks.add_parser("equivalence", parents=[sub_flags],
                           help="sync distributed rounds against centralized Jacobi steps")
    eq.add_argument("--rounds", type=int, default=100)
    eq.add_argument("--q", type=int)
    eq.add_argument("--tol", type=float, default=1e-10)
    gc = checks.add_parser("gradcheck", parents=[sub_flags], help="finite-difference gradient check")
    gc.add_argument("--instances", type=int, default=20)
    gc.add_argument("--tol", type=float, default=1e-6)
    return parser


def _training_flags(p):
    p.add_argument("--schedule", choices=list(trainer.SCHEDULES))
    p.add_argument("--eta", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--gradient", choices=list(objective.GRADIENT_MODES))


def _ints(text, where):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"{where}: cannot parse {text!r}") from None


def _load_config(args, default_kind="vdp"):
    cfg = cfgmod.load(args.config) if args.config else cfgmod.default_config(default_kind)
    if args.seed is not None:
        cfg = cfg.replace("training", seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace("output", dir=args.out)
    return cfg


def _apply_training_flags(cfg, args):
    changes = {k: getattr(args, k) for k in ("schedule", "eta", "iterations", "gradient", "tracker")
               if getattr(args, k, None) is not None}
    if changes:
        cfg = cfg.replace("training", **changes)
    if getattr(args, "activation", None) is not None:
        cfg = cfg.replace("dictionary", activation=args.activation)
    return cfg


def _outdir(cfg):
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args):
    if args.config is None and args.system is not None:
        cfg = _load_config(argparse.Namespace(config=None, seed=args.seed, out=args.out), args.system)
    else:
        cfg = _load_config(args)
        if args.system is not None and args.system != cfg.system.kind:
            raise UsageError(f"--system {args.system} conflicts with config system {cfg.system.kind}")
    changes = {}
    if args.dt is not None:
        changes["dt"] = args.dt
    if args.samples is not None:
        changes["samples"] = args.samples
    if args.x0 is not None:
        try:
            changes["x0"] = tuple(float(v) for v in args.x0.split(","))
        except ValueError:
            raise UsageError(f"--x0: cannot parse {args.x0!r}") from None
    if "samples" in changes:
        # a shorter trajectory cannot satisfy the training split; simulate alone does not need it
        n = changes["samples"]
        cfg = cfg.replace("dataset", n_train=min(cfg.dataset.n_train, max(n, 1)), n_predict=0)
    if changes:
        cfg = cfg.replace("system", **changes)
    traj = pipeline.simulate(cfg)
    path = _outdir(cfg) / cfg.output.trajectory
    dynamics.write_trajectory_csv(traj, path)
    print(f"wrote {len(traj)} samples of {cfg.system.kind} (dt={cfg.system.dt}) to {path}")
    return EXIT_OK


def _report_prediction(model, seg):
    for which in ("primary", "alternate"):
        if which == "alternate" and model.alternate is None:
            continue
        label = "primary" if which == "primary" else model.alternate["label"]
        try:
            _, multi, one = pipeline.evaluate(model, seg, which)
        except DivergenceError as exc:
            print(f"[{label}] prediction diverged: {exc}")
            continue
        for line in pipeline.summary_lines(multi, one, len(seg)):
            print(f"[{label}] {line}")


def cmd_train(args):
    cfg = _apply_training_flags(_load_config(args), args)
    if cfg.training.mode != "central":
        cfg = cfg.replace("training", mode="central")
    run = pipeline.train_central(cfg)
    out = _outdir(cfg)
    model_path = out / cfg.output.model
    modelio.save(run.model, model_path)
    modelio.write_runtime(model_path, {"wall_time_s": run.result.wall_time,
                                       "iterations": run.result.iterations})
    trainer.write_history_csv(run.result.history, out / cfg.output.history)
    t = run.model.training
    print(f"trained {t['iterations']} iterations in {run.result.wall_time:.2f}s; "
          f"final E {t['final_E']:.4e}, tracked E {t['terminal_E']:.4e}")
    _report_prediction(run.model, run.segment)
    print(f"wrote {model_path} and {out / cfg.output.history}")
    return EXIT_OK


def cmd_dist_train(args):
    cfg = _load_config(args, "glycolysis")
    cfg = _apply_training_flags(cfg, args)
    tr_changes = {}
    if args.mode is not None:
        tr_changes["mode"] = args.mode
    elif cfg.training.mode == "central":
        tr_changes["mode"] = "dist-sync"
    if args.max_delay is not None and args.max_delay > 0 and args.mode is None:
        tr_changes["mode"] = "dist-async"
    if tr_changes:
        cfg = cfg.replace("training", **tr_changes)
    di_changes = {}
    if args.q is not None:
        di_changes["q"] = args.q
    if args.max_delay is not None:
        di_changes["max_delay"] = args.max_delay
    if args.block_widths is not None:
        di_changes["block_widths"] = _ints(args.block_widths, "--block-widths")
    if di_changes:
        cfg = cfg.replace("distributed", **di_changes)
    if cfg.training.mode == "dist-sync" and cfg.distributed.max_delay:
        raise UsageError("distributed.max_delay requires --mode dist-async")
    run = pipeline.train_distributed(cfg)
    out = _outdir(cfg)
    model_path = out / cfg.output.model
    modelio.save(run.model, model_path)
    res = run.result
    modelio.write_runtime(model_path, {"wall_time_s": res.wall_time, "rounds": res.rounds})
    distributed.write_round_history_csv(res.history, out / cfg.output.rounds)
    t = run.model.training
    print(f"{cfg.training.mode}: {res.rounds} rounds over q={res.partition.q} nodes in "
          f"{res.wall_time:.2f}s; final grad-norm sum {t['final_E']:.4e}, "
          f"max staleness {t['max_staleness']}")
    _report_prediction(run.model, run.segment)
    print(f"wrote {model_path} and {out / cfg.output.rounds}")
    return EXIT_OK


def cmd_predict(args):
    cfg = _load_config(args)
    model = modelio.load(args.model)
    if args.trajectory is not None:
        traj = dynamics.read_trajectory_csv(args.trajectory)
    else:
        traj = pipeline.simulate(cfg)
    if traj.states.shape[1] != model.state_dim:
        raise ShapeError(f"model predicts {model.state_dim}-dimensional states, trajectory has "
                         f"{traj.states.shape[1]} columns")
    start = args.start if args.start is not None else int(model.training.get("n_train", 0))
    if start >= len(traj):
        start = 0
    n = args.n
    if n is None:
        n = min(int(model.training.get("n_predict", len(traj) - 1 - start)), len(traj) - 1 - start)
    seg = pipeline.segment_from(traj, start, n)
    params, K = model.select(args.iterate)
    run, multi, one = rollout.evaluate_segment(params, K, seg, model.normalization, args.relift)
    out = _outdir(cfg)
    path = out / cfg.output.prediction
    rollout.write_prediction_csv(run, path)
    for line in pipeline.summary_lines(multi, one, n):
        print(line)
    print(f"wrote {n + 1} rows to {path}")
    return EXIT_OK


def cmd_verify(args):
    return {"rate": _verify_rate, "equivalence": _verify_equivalence,
            "gradcheck": _verify_gradcheck}[args.check](args)


def _verify_rate(args):
    model = modelio.load(args.model)
    history = trainer.read_history_csv(args.history)
    t = model.training
    if t.get("l_w") is None or t.get("loss_bound") is None:
        raise UsageError("model has no Lipschitz constants (multi-layer dictionary)")
    L = max(t["l_w"], t["l_k"])
    R = t["loss_bound"]
    if t.get("schedule") == "diminishing":
        report = trainer.verify_diminishing_rate_bound(history, R, L)
    else:
        etas = {r.eta for r in history}
        if len(etas) != 1:
            raise UsageError("rate check needs a constant-rate or diminishing-rate history")
        eta = etas.pop()
        S = trainer.descent_margin(eta, L)
        if not S > 0:
            print(f"step size {eta} exceeds 2/L = {2.0 / L:.4g}; the bound does not apply")
            return EXIT_CHECK
        report = trainer.verify_rate_bound(history, R, S)
    print(f"L = {L:.6g}, R = {R:.6g}")
    print(report)
    return EXIT_OK if report.holds else EXIT_CHECK


def _verify_equivalence(args):
    cfg = _load_config(args, "glycolysis")
    if args.q is not None:
        cfg = cfg.replace("distributed", q=args.q)
    _, data, _ = pipeline.dataset(cfg)
    part = pipeline.partition_for(cfg)
    d = cfg.dictionary
    nodes = distributed.init_nodes(part, data.d, list(d.widths), d.activation, d.augment_state,
                                   np.random.default_rng(cfg.training.seed))
    rates = trainer.learning_rate(cfg.training.schedule_obj(), 0, *_rates_for(cfg, nodes, data))
    devs, stats = distributed.equivalence_check(nodes, data, rates, args.rounds,
                                                cfg.distributed.batch_size, cfg.training.gradient)
    n, q = data.n, part.q
    counts_ok = all(s.lift_messages == n * q and s.backprop_messages == n * q * (q - 1) for s in stats)
    worst = max(devs) if devs else 0.0
    print(f"q={q}, N={n}, {args.rounds} rounds: max relative deviation from centralized Jacobi "
          f"{worst:.3e} (tolerance {args.tol:g})")
    print(f"message counts per round {'match' if counts_ok else 'DO NOT match'} "
          f"N*q = {n * q} Lift and N*q*(q-1) = {n * q * (q - 1)} BackProp")
    return EXIT_OK if worst <= args.tol and counts_ok else EXIT_CHECK


def _rates_for(cfg, nodes, data):
    if cfg.training.schedule != "auto":
        return None, None
    return distributed.distributed_rates(pipeline.dist_config(cfg), nodes, data)


def _verify_gradcheck(args):
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(args.instances):
        d = int(rng.integers(1, 5))
        n = int(rng.integers(2, 21))
        depth = int(rng.integers(1, 4))
        widths = [int(rng.integers(1, 5)) for _ in range(depth)]
        act = str(rng.choice(["tanh", "logistic", "arctan"]))
        params = init_params(d, widths, act, bool(rng.integers(0, 2)), rng)
        X = rng.uniform(-1.0, 1.0, size=(n + 1, d))
        data = objective.TrajectoryDataset.from_states(X)
        K = rng.uniform(-1.0, 1.0, size=(params.lift_dim, params.lift_dim))
        worst = max(worst, *objective.finite_difference_check(params, K, data))
    print(f"{args.instances} random instances: max relative deviation {worst:.3e} "
          f"(tolerance {args.tol:g})")
    return EXIT_OK if worst <= args.tol else EXIT_CHECK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "dist-train": cmd_dist_train,
            "predict": cmd_predict, "verify": cmd_verify}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ShapeError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
