"""Command-line harness: ``implicit-layers <subcommand> [flags]``.

Exit status 0 on success, 1 on usage errors, 2 on numerical failure.
``IMPLICIT_GRAD_THREADS`` caps the worker threads used for multi-seed runs.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .core import MlpSpec
from .io import ExperimentConfig, RunLog, read_csv, write_csv, write_json

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_usage()}")


def max_workers(n_jobs):
    try:
        cap = int(os.environ.get("IMPLICIT_GRAD_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, n_jobs))


def fan_out(fn, items):
    """Map ``fn`` over ``items`` on up to ``IMPLICIT_GRAD_THREADS`` threads; results keep input order."""
    items = list(items)
    workers = max_workers(len(items))
    if workers == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _save_config(args, out_path):
    knobs = {k: v for k, v in vars(args).items() if k not in ("cmd", "seed", "out", "func") and v is not None}
    cfg = ExperimentConfig(args.cmd, getattr(args, "seed", 0) or 0, str(out_path), {k: str(v) for k, v in knobs.items()})
    target = Path(out_path)
    cfg_path = (target / "config.txt") if target.is_dir() else target.with_name(target.name + ".config")
    cfg.save(cfg_path)
    return cfg


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args):
    from .ode import gen_synthetic

    traj = gen_synthetic(args.kind, args.n, args.dt, args.seed, noise=args.noise)
    D = traj.states.shape[1]
    write_csv(args.out, ["t"] + [f"x{i}" for i in range(D)], [(t, *s) for t, s in zip(traj.times, traj.states)])
    _save_config(args, args.out)
    print(f"wrote {len(traj)} rows to {args.out}")


def _load_traj(path):
    from .ode import Trajectory

    _, rows = read_csv(path)
    arr = np.array(rows, dtype=np.float64)
    return Trajectory(arr[:, 0], arr[:, 1:])


NODE_DEFAULTS = {
    "vdp": dict(n=320, split=(107, 106, 106), hidden=500, lr=1e-3),
    "spiral": dict(n=300, split=(100, 50, 150), hidden=50, lr=1e-2),
}


def cmd_train_node(args):
    from .ode import NodeTrainConfig, gen_synthetic, split_dataset, train_node

    d = NODE_DEFAULTS[args.kind]
    if args.lr is None:
        args.lr = d["lr"]
    traj = _load_traj(args.data) if args.data else gen_synthetic(args.kind, d["n"], 0.1)
    splits = split_dataset(traj, *d["split"])
    spec = MlpSpec(traj.states.shape[1], traj.states.shape[1], (args.hidden or d["hidden"],))
    out = _out_dir(args.out)
    seeds = list(range(args.seed, args.seed + args.seeds))

    def run(seed):
        cfg = NodeTrainConfig(
            epochs=args.epochs, seed=seed, lr=args.lr, window=args.window, solver=args.solver,
            backward=args.backward, inner=args.inner, batch_size=args.batch,
        )
        return seed, cfg, train_node(spec, splits, cfg)

    results = fan_out(run, seeds)
    cfgd = _save_config(args, out)
    report = {"kind": args.kind, "runs": []}
    for seed, cfg, res in results:
        write_csv(out / f"metrics_seed{seed}.csv", ["epoch", "train_mse", "val_mse"], res.history)
        report["runs"].append({"seed": seed, "config": vars(cfg) if hasattr(cfg, "__dict__") else str(cfg), "test_mse": res.test_mse, "best_epoch": res.best_epoch})
        print(f"seed {seed}: test MSE {res.test_mse:.4g} in {res.seconds:.1f}s", file=sys.stderr)
        log = RunLog(f"train-node-{args.kind}-{seed}", seed, cfgd.digest())
        log.add("test_mse", res.test_mse)
        log.write(out / f"record_seed{seed}.csv")
    tests = np.array([r["test_mse"] for r in report["runs"]])
    report["mean_test_mse"] = float(tests.mean())
    report["se_test_mse"] = float(tests.std(ddof=1) / np.sqrt(len(tests))) if len(tests) > 1 else 0.0
    write_json(out / "report.json", report)
    print(f"{args.kind} {args.solver}/{args.backward}: test MSE {report['mean_test_mse']:.4g} +- {report['se_test_mse']:.2g}")


def cmd_bench_times(args):
    from .bench import bench_node_times

    rows = bench_node_times(hidden=args.hidden, layers=args.layers, inits=args.inits, reps=args.reps, seed=args.seed)
    write_csv(args.out, ["phase", "method", "mean_ms", "sd_ms"], rows)
    _save_config(args, args.out)
    for r in rows:
        print(f"{r[0]:8s} {r[1]:22s} {r[2]:9.3f} +- {r[3]:.3f} ms")


def cmd_train_mpc(args):
    from .control import CartpoleParams, MpcTrainConfig, run_mpc_experiment

    out = _out_dir(args.out)
    seeds = list(range(args.seed, args.seed + args.seeds))

    def run(seed):
        cfg = MpcTrainConfig(particles=args.particles, horizon=args.horizon, cost_steps=args.cost_steps, seed=seed)
        return seed, run_mpc_experiment(CartpoleParams(), cfg, n_traj=args.n_traj, length=args.length, n_eval=args.n_eval, eval_variance=args.variance)

    results = fan_out(run, seeds)
    _save_config(args, out)
    report = {"variance": args.variance, "runs": []}
    for seed, r in results:
        report["runs"].append({"seed": seed, "expert": r.expert, "mpc_ift": r.mpc_ift, "bc": r.bc, "theta_c": r.theta_c, "skipped_plans": r.skipped})
    for key in ("expert", "mpc_ift", "bc"):
        vals = np.array([run[key][0] for run in report["runs"]])
        report[f"{key}_mean"] = float(vals.mean())
        report[f"{key}_se"] = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
        print(f"{key:8s} {report[f'{key}_mean']:.3f} +- {report[f'{key}_se']:.3f}")
    write_json(out / "report.json", report)


def cmd_train_lqr(args):
    from .lqr import MsdConfig, msd_imitation_train

    out = _out_dir(args.out)
    cfg = MsdConfig(c=args.c, iters=args.iters, lr=args.lr, backward_mode=args.mode)
    seeds = list(range(args.seed, args.seed + args.seeds))
    results = fan_out(lambda s: (s, msd_imitation_train(s, cfg)), seeds)
    _save_config(args, out)
    summary = []
    for seed, r in results:
        write_csv(out / f"loss_seed{seed}.csv", ["iter", "imitation_loss", "model_loss"], [(i, a, b) for i, (a, b) in enumerate(zip(r.imitation_loss, r.model_loss))])
        summary.append({"seed": seed, "model_loss_init": r.model_loss[0], "model_loss_final": r.model_loss[-1], "imitation_init": r.full_loss_init, "imitation_final": r.full_loss_final})
        print(f"seed {seed}: model loss {r.model_loss[0]:.4f} -> {r.model_loss[-1]:.4f}, imitation {r.full_loss_init:.3e} -> {r.full_loss_final:.3e}")
    write_json(out / "report.json", {"c": args.c, "runs": summary})


def cmd_train_ensde(args):
    from .stein import EnsdeConfig, EnsdeModel, ensde_train, ou_score

    out = _out_dir(args.out)
    model = EnsdeModel(eps=args.eps)
    cfg = EnsdeConfig(outer_iters=args.iters, particles=args.particles, seed=args.seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = ensde_train(model, ou_score(args.mu, args.eps), cfg)
    _save_config(args, out)
    write_csv(out / "particles.csv", ["step", "particle_id", "x0"], [(cfg.outer_iters, i, float(v)) for i, v in enumerate(res.particles[:, 0])])
    write_csv(out / "outer_loss.csv", ["iter", "ksd"], list(enumerate(res.outer_loss)))
    write_json(out / "report.json", {"seed": args.seed, "particle_mean": float(res.particles.mean()), "particle_std": float(res.particles.std()), "final_ksd": res.outer_loss[-1]})
    print(f"particle mean {res.particles.mean():.4f} (target {args.mu}), std {res.particles.std():.4f}")


def cmd_gradcheck(args):
    from .gradcheck import gradcheck_report

    targets = [t.strip() for t in args.targets.split(",") if t.strip()]
    report = gradcheck_report(targets, args.seeds, inner_tol=args.inner_tol, base_seed=args.seed)
    write_json(args.out, report)
    _save_config(args, args.out)
    for name, row in report["targets"].items():
        print(f"{name:6s} " + " ".join(f"{k}={v:.2e}" for k, v in row["max_rel_err"].items()) + ("" if row["passed"] else "  FAILED"))
    if not report["passed"]:
        raise ArithmeticError("gradient check exceeded tolerance")


def cmd_kepler(args):
    from .kepler import bisect_kepler, fit_eccentricity

    r = fit_eccentricity(args.e_init, args.e_true, args.M, args.steps, args.lr)
    target = bisect_kepler(args.e_true, args.M)
    write_csv(args.out, ["step", "e", "E", "loss"], [(i, e, E, l) for i, (e, E, l) in enumerate(zip(r.e, r.E, r.loss))])
    _save_config(args, args.out)
    print(f"e={r.e[-1]:.8f} after {len(r.e)} steps, |E-E*|={abs(r.E[-1] - target):.2e}")


# ---------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="implicit-layers", description="Differentiable implicit layer experiments.")
    sub = p.add_subparsers(dest="cmd", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="synthetic Van der Pol / spiral trajectories")
    g.add_argument("--kind", choices=["vdp", "spiral"], required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--dt", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-node", help="train a neural ODE")
    t.add_argument("--kind", choices=["vdp", "spiral"], default="vdp")
    t.add_argument("--data", default=None, help="CSV from gen-data (default: regenerate)")
    t.add_argument("--hidden", type=int, default=None)
    t.add_argument("--solver", choices=["euler", "backward_euler", "dopri5"], default="backward_euler")
    t.add_argument("--backward", choices=["adjoint", "ift_cg", "ift_naive"], default="ift_cg")
    t.add_argument("--inner", choices=["newton", "fixed_point"], default="newton")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--window", type=int, default=20)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--seeds", type=int, default=1)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_node)

    b = sub.add_parser("bench-times", help="forward/backward timing of NODE solvers")
    b.add_argument("--hidden", type=int, default=30)
    b.add_argument("--layers", type=int, default=2)
    b.add_argument("--inits", type=int, default=100)
    b.add_argument("--reps", type=int, default=20)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench_times)

    m = sub.add_parser("train-mpc", help="cartpole imitation with differentiable MPC")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--seeds", type=int, default=1)
    m.add_argument("--n-traj", type=int, default=20)
    m.add_argument("--length", type=int, default=40)
    m.add_argument("--particles", type=int, default=300)
    m.add_argument("--horizon", type=int, default=10)
    m.add_argument("--cost-steps", type=int, default=200)
    m.add_argument("--n-eval", type=int, default=50)
    m.add_argument("--variance", type=float, default=0.08)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_train_mpc)

    q = sub.add_parser("train-lqr", help="mass-spring-damper imitation through the DARE")
    q.add_argument("--c", type=float, default=1.0)
    q.add_argument("--iters", type=int, default=3000)
    q.add_argument("--lr", type=float, default=1e-2)
    q.add_argument("--mode", choices=["cg", "naive"], default="cg")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--seeds", type=int, default=5)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_train_lqr)

    e = sub.add_parser("train-ensde", help="equilibrium neural SDE against an OU reference")
    e.add_argument("--iters", type=int, default=200)
    e.add_argument("--particles", type=int, default=32)
    e.add_argument("--mu", type=float, default=2.0)
    e.add_argument("--eps", type=float, default=0.05)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_train_ensde)

    c = sub.add_parser("gradcheck", help="CG-IFT vs naive-IFT vs adjoint vs finite differences")
    c.add_argument("--targets", default="dil,node,lqr")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--inner-tol", type=float, default=1e-12)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_gradcheck)

    k = sub.add_parser("kepler", help="fit an orbit's eccentricity through Kepler's equation")
    k.add_argument("--e-init", type=float, default=0.1)
    k.add_argument("--e-true", type=float, default=0.5)
    k.add_argument("--M", type=float, default=1.0)
    k.add_argument("--steps", type=int, default=500)
    k.add_argument("--lr", type=float, default=0.3)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_kepler)
    return p


def dispatch(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.cmd:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    t0 = time.perf_counter()
    try:
        args.func(args)
    except (ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"done in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return EXIT_OK


def main(argv=None):
    sys.exit(dispatch(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
