"""Acceptance criteria 1-10.  Each test prints one ``criterion N: PASS|FAIL`` line.

The long experiment reproductions (6 and 8) take roughly 25 minutes each on
one core; everything else finishes in a few minutes.
"""

import math
import os
import subprocess
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from implicit_layers.bench import bench_node_times
from implicit_layers.cli import NODE_DEFAULTS
from implicit_layers.control import CartpoleParams, MpcTrainConfig, run_mpc_experiment
from implicit_layers.core import MlpSpec, dense_solve
from implicit_layers.gradcheck import gradcheck_report, rel_err
from implicit_layers.kepler import bisect_kepler, fit_eccentricity
from implicit_layers.krylov import KrylovConfig, LinearOperator, cg_solve
from implicit_layers.lqr import LqrSystem, MsdConfig, dare_ift_backward, msd_imitation_train, solve_dare
from implicit_layers.ode import NodeTrainConfig, gen_synthetic, integrate, split_dataset, train_node
from implicit_layers.stein import EnsdeConfig, EnsdeModel, RbfKernel, ensde_train, ksd, median_bandwidth, ou_score, svgd_solve

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail, started):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  ({time.perf_counter() - started:.0f}s)"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        assert ok, line

    return emit


def test_criterion_01_gradient_oracles(report):
    t0 = time.perf_counter()
    rep = gradcheck_report(["dil"], seeds=20)
    row = rep["targets"]["dil"]["max_rel_err"]
    ok = row["cg_vs_naive"] <= 1e-6 and row["cg_vs_fd"] <= 1e-4 and row["naive_vs_fd"] <= 1e-4
    report(1, ok, f"20 DILs: cg/naive {row['cg_vs_naive']:.1e}, cg/fd {row['cg_vs_fd']:.1e}, naive/fd {row['naive_vs_fd']:.1e}", t0)


def test_criterion_02_cg_exactness(report):
    t0 = time.perf_counter()
    worst_iter, worst_err, bad = 0.0, 0.0, 0
    for seed, n in enumerate([1, 2, 3, 5, 8, 11, 16, 24, 32, 48, 64] * 3):
        rng = np.random.default_rng(seed)
        M = rng.standard_normal((n, n))
        A = M.T @ M + np.eye(n)
        b = rng.standard_normal(n)
        res = cg_solve(LinearOperator.from_matrix(A), b, KrylovConfig(tol=1e-10, eps=0.0))
        xs = dense_solve(A, b)
        err = np.max(np.abs(res.x - xs)) / max(1.0, np.max(np.abs(xs)))
        worst_iter = max(worst_iter, res.iters / n)
        worst_err = max(worst_err, err)
        bad += not (res.converged and res.iters <= n and err <= 1e-8)
    report(2, bad == 0, f"33 SPD systems n<=64: max iters/n {worst_iter:.2f}, max err {worst_err:.1e}", t0)


def test_criterion_03_kepler(report):
    t0 = time.perf_counter()
    fit = fit_eccentricity(0.1, 0.5, 1.0, steps=500)
    gap = abs(fit.E[-1] - bisect_kepler(0.5, 1.0))
    report(3, gap <= 1e-6 and len(fit.e) <= 500, f"|E-E*| {gap:.1e} after {len(fit.e)} steps, e={fit.e[-1]:.6f}", t0)


def test_criterion_04_l_stability(report):
    t0 = time.perf_counter()
    times = np.arange(11) * 0.1
    lam = lambda x, th: x * -1000.0  # noqa: E731
    be = integrate("backward_euler", lam, None, np.array([1.0]), times).states[:, 0]
    fe = integrate("euler", lam, None, np.array([1.0]), times).states[:, 0]
    be_ratio = be[1:] / be[:-1]
    fe_ratio = fe[1:] / fe[:-1]
    ok = np.all(np.diff(np.abs(be)) < 0) and np.allclose(be_ratio, 1 / 101, rtol=1e-8) and np.allclose(fe_ratio, -99.0, rtol=1e-12)
    report(4, bool(ok), f"bwd ratio {be_ratio.mean():.9f} (1/101={1 / 101:.9f}), fwd ratio {fe_ratio.mean():.6f}", t0)


def test_criterion_05_timing_order(report):
    t0 = time.perf_counter()
    rows = {(p, m): mean for p, m, mean, _ in bench_node_times(hidden=30, layers=2, inits=20, reps=20)}
    ift, adj = rows[("backward", "ift_cg")], rows[("backward", "adjoint_dopri5")]
    fp, dop = rows[("forward", "bwd_euler_fixed_point")], rows[("forward", "dopri5")]
    report(5, ift < adj and fp < dop, f"backward ift_cg {ift:.1f}ms < adjoint {adj:.1f}ms; forward fixed-point {fp:.2f}ms < dopri5 {dop:.2f}ms", t0)


NODE_EPOCHS = 20


def _node_runs(kind, backward):
    d = NODE_DEFAULTS[kind]
    splits = split_dataset(gen_synthetic(kind, d["n"], 0.1), *d["split"])
    spec = MlpSpec(2, 2, (d["hidden"],))
    out = []
    for seed in range(5):
        cfg = NodeTrainConfig(epochs=NODE_EPOCHS, seed=seed, backward=backward, batch_size=8, lr=d["lr"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out.append(train_node(spec, splits, cfg).test_mse)
    return np.array(out)


def _se(x):
    return x.std(ddof=1) / math.sqrt(len(x))


@pytest.mark.slow
def test_criterion_06_node_table(report):
    t0 = time.perf_counter()
    parts, ok = [], True
    for kind, band in (("spiral", 0.5), ("vdp", 1.5)):
        r = {b: _node_runs(kind, b) for b in ("ift_cg", "ift_naive", "adjoint")}
        a = r["ift_cg"].mean() <= r["adjoint"].mean()
        b = abs(r["ift_cg"].mean() - r["ift_naive"].mean()) <= math.hypot(_se(r["ift_cg"]), _se(r["ift_naive"]))
        c = r["ift_cg"].mean() < band
        ok &= a and b and c
        parts.append(f"{kind}: cg {r['ift_cg'].mean():.3f}+-{_se(r['ift_cg']):.3f} naive {r['ift_naive'].mean():.3f} adjoint {r['adjoint'].mean():.3f}+-{_se(r['adjoint']):.3f} [a={a} b={b} c={c}]")
    report(6, ok, "; ".join(parts), t0)


def _random_stabilizable(seed):
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(2, 5)), int(rng.integers(1, 3))
    A = rng.standard_normal((n, n))
    A *= 0.9 / max(1.0, np.max(np.abs(np.linalg.eigvals(A))))
    L = rng.standard_normal((n, n))
    return LqrSystem(A, rng.standard_normal((n, m)), np.eye(n) + 0.3 * L @ L.T, np.eye(m))


def _fd_dare(sys, W, h=1e-6):
    grads = []
    for name in "ABQR":
        M = getattr(sys, name)
        g = np.zeros_like(M)
        for idx in np.ndindex(M.shape):
            E = np.zeros_like(M)
            E[idx] = 1.0
            if name in "QR":
                E = 0.5 * (E + E.T)
            vals = []
            for s in (h, -h):
                kw = {k: getattr(sys, k) for k in "ABQR"}
                kw[name] = M + s * E
                vals.append(float(np.sum(W * solve_dare(LqrSystem(**kw), tol=1e-13).S)))
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        grads.append(g.ravel())
    return np.concatenate(grads)


def test_criterion_07_lqr(report):
    t0 = time.perf_counter()
    errs = []
    for seed in range(10):
        sys_ = _random_stabilizable(seed)
        W = np.random.default_rng(100 + seed).standard_normal((sys_.n, sys_.n))
        got = np.concatenate([g.ravel() for g in dare_ift_backward(sys_, solve_dare(sys_, tol=1e-13).S, W)])
        errs.append(rel_err(got, _fd_dare(sys_, W)))
    a = max(errs) <= 1e-4
    S = solve_dare(LqrSystem([[1.0]], [[1.0]], [[1.0]], [[1.0]]), tol=1e-12).S[0, 0]
    b = abs(S - (1 + math.sqrt(5)) / 2) <= 1e-10
    runs = [msd_imitation_train(seed, MsdConfig(c=1.0, iters=3000)) for seed in range(5)]
    decreased = sum(r.model_loss[-1] < r.model_loss[0] for r in runs)
    ratios = [r.full_loss_final / r.full_loss_init for r in runs]
    c = decreased >= 4 and max(ratios) < 0.1
    detail = f"(a) max FD err {max(errs):.1e} (b) |S-phi| {abs(S - (1 + math.sqrt(5)) / 2):.1e} (c) model loss down {decreased}/5, imitation final/init max {max(ratios):.2e}"
    report(7, a and b and c, detail, t0)


@pytest.mark.slow
def test_criterion_08_mpc_ordering(report):
    t0 = time.perf_counter()
    res = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for seed in range(5):
            r = run_mpc_experiment(CartpoleParams(), MpcTrainConfig(seed=seed), n_traj=20, length=40, n_eval=50, eval_variance=0.08)
            res.append((r.expert[0], r.mpc_ift[0], r.bc[0]))
    ex, mp, bc = np.mean(res, axis=0)
    report(8, ex <= mp <= bc, f"5 runs mean cost expert {ex:.2f} <= mpc_ift {mp:.2f} <= bc {bc:.2f}", t0)


def test_criterion_09_stein(report):
    t0 = time.perf_counter()
    from test_stein import ksd_brute

    rng = np.random.default_rng(0)
    brute = 0.0
    for _ in range(5):
        q = rng.normal(1.0, 1.0, size=(int(rng.integers(2, 7)), int(rng.integers(1, 3))))
        k = RbfKernel(rng.uniform(0.3, 2.0))
        brute = max(brute, abs(float(ksd(ou_score(2.0, 0.7), q, k)) - ksd_brute(ou_score(2.0, 0.7), q, k)))
    neg = min(float(ksd(ou_score(rng.uniform(-3, 3), rng.uniform(0.05, 2)), rng.uniform(-5, 5, size=(int(rng.integers(1, 9)), int(rng.integers(1, 4)))), RbfKernel(rng.uniform(0.1, 5)))) for _ in range(100))
    s = ou_score(2.0, 0.05)
    q0 = np.random.default_rng(1).standard_normal((32, 1))
    q = svgd_solve(s, q0, steps=500, stepsize=5e-3)
    reduction = 1 - float(ksd(s, q, RbfKernel(median_bandwidth(q)))) / float(ksd(s, q0, RbfKernel(median_bandwidth(q0))))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ens = ensde_train(EnsdeModel(), ou_score(2.0, 0.05), EnsdeConfig(seed=0))
    ok = brute <= 1e-8 and neg >= -1e-12 and abs(q.mean() - 2) <= 0.1 and reduction >= 0.9 and abs(ens.particles.mean() - 2) <= 0.2
    detail = f"brute {brute:.1e}, min KSD {neg:.2e}, SVGD mean {q.mean():.3f} KSD -{100 * reduction:.1f}%, ENSDE mean {ens.particles.mean():.3f}"
    report(9, ok, detail, t0)


def test_criterion_10_invariants(report):
    t0 = time.perf_counter()
    env = dict(os.environ, PYTHONPATH=str(ROOT / "src") + os.pathsep + os.environ.get("PYTHONPATH", ""))
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-m", "invariant", "-p", "no:cacheprovider", "--ignore", str(ROOT / "tests" / "test_acceptance.py"), str(ROOT / "tests")],
        capture_output=True, text=True, cwd=ROOT, env=env,
    )
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    failed = [l.split(" ")[1] for l in proc.stdout.splitlines() if l.startswith("FAILED")]
    report(10, proc.returncode == 0, f"{summary}" + (f"; failing: {', '.join(failed)}" if failed else ""), t0)
