import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicit_layers.gradcheck import rel_err
from implicit_layers.lqr import (
    DareNonConvergence,
    LqrSystem,
    MsdConfig,
    dare_ift_backward,
    dare_residual,
    discretize,
    lqr_gain,
    msd_continuous,
    msd_imitation_train,
    MSD_Q,
    MSD_R,
    pack_sym,
    solve_dare,
    unpack_sym,
)

PHI = (1 + math.sqrt(5)) / 2


def scalar(A=1.0, B=1.0, Q=1.0, R=1.0):
    return LqrSystem([[A]], [[B]], [[Q]], [[R]])


def msd_system():
    A, B = discretize(*msd_continuous(1.0), 0.1)
    return LqrSystem(A, B, MSD_Q, MSD_R)


def random_system(seed, n=None, m=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(1, 5))
    m = m or int(rng.integers(1, 3))
    A = rng.standard_normal((n, n))
    A *= 0.9 / max(1.0, np.max(np.abs(np.linalg.eigvals(A))))
    L = rng.standard_normal((n, n))
    P = rng.standard_normal((m, m))
    return LqrSystem(A, rng.standard_normal((n, m)), np.eye(n) + 0.3 * L @ L.T, np.eye(m) + 0.3 * P @ P.T)


def min_eig_charpoly(S):
    # roots of the characteristic polynomial; independent of the eigensolver
    return float(np.min(np.roots(np.poly(S)).real))


def fd_grads(sys, S_fn, W, h=1e-6):
    out = []
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
                vals.append(float(np.sum(W * S_fn(LqrSystem(**kw)))))
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        out.append(g)
    return out


def tight(sys):
    return solve_dare(sys, tol=1e-13).S


# ---------------------------------------------------------------- solve / gain


def test_scalar_golden():
    sol = solve_dare(scalar(), tol=1e-12)
    assert abs(sol.S[0, 0] - PHI) <= 1e-10
    assert lqr_gain(scalar(), sol.S)[0, 0] == pytest.approx(1 / PHI, abs=1e-10)


def test_zero_dynamics_gives_q():
    Q = np.array([[2.0, 0.5], [0.5, 1.0]])
    sys = LqrSystem(np.zeros((2, 2)), np.ones((2, 1)), Q, [[1.0]])
    sol = solve_dare(sys)
    assert np.array_equal(sol.S, Q) and sol.iters == 0


def test_msd_residual_and_stability():
    sys = msd_system()
    sol = solve_dare(sys, tol=1e-10)
    assert np.linalg.norm(dare_residual(sys, sol.S)) <= 1e-10
    K = lqr_gain(sys, sol.S)
    closed = np.poly(sys.A - sys.B @ K)
    assert np.max(np.abs(np.roots(closed))) < 1


def test_b_zero_gain():
    sys = LqrSystem(0.5 * np.eye(2), np.zeros((2, 1)), np.eye(2), [[1.0]])
    assert not np.any(lqr_gain(sys, solve_dare(sys).S))


def test_unstabilizable_raises():
    sys = LqrSystem([[2.0]], [[0.0]], [[1.0]], [[1.0]])
    with pytest.raises(DareNonConvergence):
        solve_dare(sys, max_iter=2000)


def test_system_validation():
    with pytest.raises(ValueError):
        LqrSystem(np.eye(2), np.ones((3, 1)), np.eye(2), [[1.0]])
    with pytest.raises(ValueError):
        LqrSystem(np.eye(2), np.ones((2, 1)), [[1.0, 2.0], [0.0, 1.0]], [[1.0]])


def test_pack_roundtrip():
    S = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 5.0], [3.0, 5.0, 6.0]])
    assert np.array_equal(unpack_sym(pack_sym(S), 3), S)


# ---------------------------------------------------------------- IFT


def test_scalar_ds_dq():
    # S^2 = Q (1 + S) at A = B = R = 1 gives dS/dQ = (1 + S) / (2S - 1)
    sys = scalar()
    S = tight(sys)
    _, _, dQ, _ = dare_ift_backward(sys, S, np.ones((1, 1)))
    assert dQ[0, 0] == pytest.approx((1 + PHI) / (2 * PHI - 1), rel=1e-6)


def test_zero_a_identity_in_q():
    sys = LqrSystem(np.zeros((2, 2)), np.ones((2, 1)), np.eye(2), [[1.0]])
    W = np.array([[1.0, 0.3], [-0.2, 2.0]])
    _, _, dQ, _ = dare_ift_backward(sys, sys.Q, W)
    # S = Q with Q symmetric: the cotangent flows back symmetrised
    assert np.allclose(dQ + dQ.T, W + W.T, atol=1e-8)


@pytest.mark.parametrize("mode", ["cg", "naive"])
def test_msd_all_grads_vs_fd(mode):
    sys = msd_system()
    W = np.array([[1.0, -0.5], [0.2, 0.7]])
    got = dare_ift_backward(sys, tight(sys), W, mode)
    want = fd_grads(sys, tight, W)
    for g, f in zip(got, want):
        assert rel_err(g, f) <= 1e-4


def test_gate_refuses_unsolved():
    sys = msd_system()
    from implicit_layers.implicit import StationarityError

    with pytest.raises(StationarityError):
        dare_ift_backward(sys, sys.Q, np.eye(2))


# ---------------------------------------------------------------- msd imitation


def test_zero_perturbation_stays_optimal():
    A_true, _ = msd_continuous(1.0)
    res = msd_imitation_train(0, MsdConfig(iters=20), A_init=A_true)
    assert max(res.imitation_loss) <= 1e-12


def test_imitation_reproducible():
    a = msd_imitation_train(3, MsdConfig(iters=15))
    b = msd_imitation_train(3, MsdConfig(iters=15))
    assert a.imitation_loss == b.imitation_loss
    assert all(np.array_equal(x, y) for x, y in zip(a.A_hat, b.A_hat))


def test_imitation_short_run_improves():
    res = msd_imitation_train(1, MsdConfig(iters=200))
    assert res.full_loss_final < res.full_loss_init
    assert len(res.model_loss) == 201


# ---------------------------------------------------------------- properties


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_solution_certificate_and_psd(seed):
    sys = random_system(seed)
    sol = solve_dare(sys, tol=1e-10)
    assert np.linalg.norm(dare_residual(sys, sol.S)) <= 1e-10
    assert np.array_equal(sol.S, sol.S.T)
    if sys.n <= 3:
        assert min_eig_charpoly(sol.S) >= -1e-10
    else:
        assert np.min(np.linalg.eigvalsh(sol.S)) >= -1e-10


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_ift_vs_fd(seed):
    sys = random_system(seed)
    W = np.random.default_rng(seed + 7).standard_normal((sys.n, sys.n))
    got = dare_ift_backward(sys, tight(sys), W)
    want = fd_grads(sys, tight, W)
    assert rel_err(np.concatenate([g.ravel() for g in got]), np.concatenate([f.ravel() for f in want])) <= 1e-4
