import os

import numpy as np
import pytest

from subbag.families import LinearOLS, LogisticMLE, Mean, MeanCov, MeanCovUnbiased
from subbag.solver import (
    NoClosedFormBiasError,
    NonConvergenceError,
    SingularJacobianError,
    SolveConfig,
    b_hat,
    newton_solve,
    solve_bc,
    solve_with_modes,
    v2_hat,
    v_hat,
)

RUN_SLOW = os.environ.get("SUBBAG_SLOW") == "1"


def logistic_rows(n, seed, theta=(0.3, 0.8)):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    p = 1.0 / (1.0 + np.exp(-(theta[0] + theta[1] * x)))
    y = (rng.random(n) < p).astype(float)
    return np.column_stack([y, x])


def test_mean_family_one_step():
    est = newton_solve(Mean(1), np.array([[0.0], [2.0], [4.0]]))
    assert est.theta.tolist() == [2.0]
    assert est.converged and est.iterations == 1


def test_logistic_intercept_only_closed_form():
    rows = np.array([[1.0], [1.0], [1.0], [0.0]])
    est = newton_solve(LogisticMLE(0), rows)
    assert abs(est.theta[0] - np.log(3.0)) < 1e-9


# Dense grid-search oracle over [-3, 3]^2 at step 1e-3, minimizing the
# score-sum 2-norm for the fixed 20-record block below (seed 20240601).
# Recomputed when SUBBAG_SLOW=1; the frozen argmin is asserted always.
GRID_ORACLE_SEED = 20240601
GRID_ORACLE_THETA = (1.074, 0.330)


def _grid_oracle(rows, lo=-3.0, hi=3.0, step=1e-3):
    y, x = rows[:, 0], rows[:, 1]
    grid = np.arange(lo, hi + 1e-9, step)
    best = (np.inf, None, None)
    for i0 in range(0, grid.size, 200):
        t0s = grid[i0 : i0 + 200]
        T0, T1 = np.meshgrid(t0s, grid, indexing="ij")
        lin = x[:, None, None] * T1[None] + T0[None]
        s = 0.5 * (1 + np.tanh(0.5 * lin))
        r = y[:, None, None] - s
        p1 = r.sum(axis=0)
        p2 = (x[:, None, None] * r).sum(axis=0)
        norm2 = p1**2 + p2**2
        idx = np.unravel_index(np.argmin(norm2), norm2.shape)
        if norm2[idx] < best[0]:
            best = (float(norm2[idx]), float(t0s[idx[0]]), float(grid[idx[1]]))
    return best[1], best[2]


def test_logistic_newton_matches_grid_oracle():
    rows = logistic_rows(20, GRID_ORACLE_SEED)
    est = newton_solve(LogisticMLE(1), rows)
    oracle = _grid_oracle(rows) if RUN_SLOW else GRID_ORACLE_THETA
    assert abs(est.theta[0] - oracle[0]) < 2e-3
    assert abs(est.theta[1] - oracle[1]) < 2e-3


def test_singular_jacobian_is_distinct_error():
    # duplicated covariate column makes the OLS Jacobian exactly singular
    rows = np.array([[1.0, 2.0, 2.0], [2.0, 3.0, 3.0], [0.5, 1.0, 1.0]])
    with pytest.raises(SingularJacobianError):
        newton_solve(LinearOLS(2, intercept=False), rows)


def test_non_convergence_is_distinct_error():
    rows = logistic_rows(50, 2)
    with pytest.raises(NonConvergenceError):
        newton_solve(LogisticMLE(1), rows, SolveConfig(max_iter=1))


def test_separated_block_fails_with_solver_error():
    # perfectly separated logistic data has no finite root; the diverging
    # iterates end in an ill-conditioned Jacobian or the iteration cap
    from subbag.solver import SolverError

    rows = np.column_stack([
        np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
        np.array([-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]),
    ])
    with pytest.raises(SolverError):
        newton_solve(LogisticMLE(1), rows, SolveConfig(max_iter=60))


def test_solve_config_validation():
    with pytest.raises(ValueError):
        SolveConfig(tol=0.0)
    with pytest.raises(ValueError):
        SolveConfig(max_iter=0)


def test_residual_satisfies_per_record_tolerance():
    for seed in range(5):
        rows = logistic_rows(60, seed)
        fam = LogisticMLE(1)
        est = newton_solve(fam, rows)
        resid = fam.psi(est.theta, rows).sum(axis=0)
        assert np.abs(resid).max() <= rows.shape[0] * 1e-8


def test_bc3_residual_uses_corrected_system():
    rows = logistic_rows(50, 11)
    fam = LogisticMLE(1)
    est = solve_bc(fam, rows, "bc3")
    corrected = fam.psi(est.theta, rows).sum(axis=0) + v_hat(
        fam, rows, est.theta
    ) @ b_hat(fam, rows, est.theta)
    assert np.abs(corrected).max() <= rows.shape[0] * 1e-8


def test_init_independence():
    rows = logistic_rows(80, 5)
    fam = LogisticMLE(1)
    a = newton_solve(fam, rows).theta
    b = newton_solve(fam, rows, init_override=np.array([1.5, -2.0])).theta
    assert np.abs(a - b).max() < 1e-8


def test_warm_start_from_solution_converges_immediately():
    rows = logistic_rows(80, 6)
    fam = LogisticMLE(1)
    a = newton_solve(fam, rows)
    b = newton_solve(fam, rows, init_override=a.theta)
    assert b.iterations == 0
    assert np.array_equal(a.theta, b.theta)


def test_v_hat_trivials():
    rows = np.random.default_rng(0).normal(size=(9, 2))
    assert np.array_equal(v_hat(Mean(2), rows, np.zeros(2)), -np.eye(2))
    assert np.array_equal(v2_hat(Mean(2), rows, np.zeros(2)), np.zeros((2, 4)))
    ols = LinearOLS(1, intercept=False)
    x = rows[:, 1]
    expected = -np.array([[np.mean(x * x)]])
    assert np.allclose(v_hat(ols, rows, np.zeros(1)), expected)


def test_v2_hat_matches_finite_differences_of_v_hat():
    rows = logistic_rows(25, 9)
    fam = LogisticMLE(1)
    theta = np.array([0.2, -0.4])
    v2 = v2_hat(fam, rows, theta)
    h = 2e-5
    d = 2
    fd = np.zeros_like(v2)
    for l in range(d):
        tp, tm = theta.copy(), theta.copy()
        tp[l] += h
        tm[l] -= h
        diff = (v_hat(fam, rows, tp) - v_hat(fam, rows, tm)) / (2 * h)
        for j in range(d):
            fd[:, j * d + l] = diff[:, j]
    assert np.abs(v2 - fd).max() < 1e-5


def test_b_hat_zero_for_mean_family():
    rows = np.random.default_rng(1).normal(size=(12, 3))
    assert np.array_equal(b_hat(Mean(3), rows, np.zeros(3)), np.zeros(3))


def test_b_hat_matches_straight_loop_for_ols():
    # independent transcription: explicit loops, no vectorization
    rng = np.random.default_rng(7)
    rows = np.column_stack([rng.normal(size=15), rng.normal(size=(15, 2))])
    fam = LinearOLS(2, intercept=False)
    theta = np.array([0.4, -0.2])
    k = rows.shape[0]
    d = 2
    psi = fam.psi(theta, rows)
    dpsi = fam.dpsi(theta, rows)
    V = np.zeros((d, d))
    for i in range(k):
        V += dpsi[i]
    V /= k
    Vinv = np.linalg.inv(V)
    term1 = np.zeros(d)
    for i in range(k):
        term1 += (dpsi[i] - V) @ (Vinv @ psi[i])
    term1 /= k
    V2 = np.zeros((d, d * d))
    for i in range(k):
        V2 += fam.d2psi(theta, rows)[i]
    V2 /= k
    kron_sum = np.zeros(d * d)
    for i in range(k):
        u = Vinv @ psi[i]
        kron_sum += np.kron(u, u)
    kron_sum /= k
    expected = -Vinv @ (-term1 + 0.5 * V2 @ kron_sum)
    assert np.abs(expected).max() > 0  # generally nonzero for OLS blocks
    assert np.allclose(b_hat(fam, rows, theta), expected, rtol=1e-12, atol=1e-14)


def test_b_hat_matches_symbolic_reference_logistic_d1():
    sympy = pytest.importorskip("sympy")
    rng = np.random.default_rng(13)
    x = rng.normal(size=5)
    y = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    theta_val = 0.37
    t = sympy.Symbol("t")
    psi_sym = [sympy.Rational(int(yi)) * xi - xi * (1 / (1 + sympy.exp(-xi * t)))
               for yi, xi in zip(y, [sympy.Float(v, 30) for v in x])]
    dpsi_sym = [sympy.diff(p, t) for p in psi_sym]
    d2psi_sym = [sympy.diff(p, t, 2) for p in psi_sym]
    k = 5
    V = sum(dpsi_sym) / k
    V2 = sum(d2psi_sym) / k
    term1 = sum((dp - V) * (1 / V) * p for dp, p in zip(dpsi_sym, psi_sym)) / k
    term2 = sympy.Rational(1, 2) * V2 * sum((p / V) ** 2 for p in psi_sym) / k
    B_sym = (-1 / V) * (-term1 + term2)
    expected = float(B_sym.subs(t, sympy.Float(theta_val, 30)))
    rows = np.column_stack([y, x])
    got = b_hat(LogisticMLE(1, intercept=False), rows, np.array([theta_val]))
    assert abs(got[0] - expected) < 1e-10


def test_solve_bc_mean_all_modes_identity():
    rows = np.array([[1.0], [5.0], [3.0]])
    plain = newton_solve(Mean(1), rows).theta
    for mode in ("bc1", "bc2", "bc3"):
        assert np.allclose(solve_bc(Mean(1), rows, mode).theta, plain, atol=1e-12)


def test_meancov_unbiased_family_reproduces_rescale():
    rows = np.array([[0.0], [2.0]])
    biased = newton_solve(MeanCov(1), rows).theta
    unbiased = newton_solve(MeanCovUnbiased(1), rows).theta
    assert np.allclose(biased, [1.0, 1.0], atol=1e-12)
    assert np.allclose(unbiased, [1.0, 2.0], atol=1e-12)


def test_meancov_bc1_bc2_frozen_values():
    # hand-derived on block {0, 2}: B-hat = (0, -1), bc = (1, 1.5)
    rows = np.array([[0.0], [2.0]])
    assert np.allclose(solve_bc(MeanCov(1), rows, "bc1").theta, [1.0, 1.5], atol=1e-12)
    assert np.allclose(solve_bc(MeanCov(1), rows, "bc2").theta, [1.0, 1.5], atol=1e-12)
    assert np.allclose(b_hat(MeanCov(1), rows, np.array([1.0, 1.0])), [0.0, -1.0],
                       atol=1e-12)


def test_bc1_requires_closed_form_bias():
    rows = logistic_rows(30, 3)
    with pytest.raises(NoClosedFormBiasError, match="no closed-form bias"):
        solve_bc(LogisticMLE(1), rows, "bc1")


def test_solve_with_modes_matches_individual_solves():
    rows = logistic_rows(60, 21)
    fam = LogisticMLE(1)
    combined = solve_with_modes(fam, rows, ["none", "bc2", "bc3"])
    assert np.allclose(combined["none"].theta, newton_solve(fam, rows).theta)
    assert np.allclose(combined["bc2"].theta, solve_bc(fam, rows, "bc2").theta)
    assert np.allclose(combined["bc3"].theta, solve_bc(fam, rows, "bc3").theta,
                       atol=1e-8)


def test_duplication_invariance():
    rows = logistic_rows(40, 8)
    fam = LogisticMLE(1)
    doubled = np.vstack([rows, rows])
    assert np.allclose(
        newton_solve(fam, rows).theta, newton_solve(fam, doubled).theta, atol=1e-9
    )
    assert np.allclose(
        b_hat(fam, rows, np.array([0.1, 0.9])),
        b_hat(fam, doubled, np.array([0.1, 0.9])),
        atol=1e-12,
    )


def test_bc2_correction_scales_as_one_over_k():
    # log-log slope of |bc2 - plain| against k should sit near -1
    fam = LogisticMLE(1)
    ks = np.array([40, 80, 160, 320, 640])
    gaps = []
    for k in ks:
        acc = 0.0
        for rep in range(30):
            rows = logistic_rows(int(k), 1000 + 17 * rep + int(k))
            sols = solve_with_modes(fam, rows, ["none", "bc2"])
            acc += np.linalg.norm(sols["bc2"].theta - sols["none"].theta)
        gaps.append(acc / 30)
    slope = np.polyfit(np.log(ks), np.log(gaps), 1)[0]
    assert -1.2 < slope < -0.8
