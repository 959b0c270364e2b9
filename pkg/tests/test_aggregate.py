import numpy as np
import pytest
from scipy import stats as sps

from subbag._normal import normal_quantile
from subbag.aggregate import (
    anticipate,
    confidence_intervals,
    sandwich_full,
    subbag,
    variance_estimate,
)
from subbag.data_source import ArraySource
from subbag.families import LogisticMLE, Mean
from subbag.sampling import HyperParams, build_plan, explicit_plan, select_hyperparams
from subbag.solver import SolveConfig


def logistic_source(n, seed, theta=(0.2, 0.9)):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    p = 1.0 / (1.0 + np.exp(-(theta[0] + theta[1] * x)))
    y = (rng.random(n) < p).astype(float)
    return ArraySource(np.column_stack([y, x]))


def test_normal_quantile_against_scipy():
    grid = np.concatenate([
        np.linspace(1e-9, 1e-3, 50),
        np.linspace(0.001, 0.999, 200),
        1.0 - np.linspace(1e-9, 1e-3, 50),
    ])
    ours = np.array([normal_quantile(float(p)) for p in grid])
    ref = sps.norm.ppf(grid)
    assert np.abs(ours - ref).max() < 1.2e-9


def test_normal_quantile_spec_value():
    assert abs(normal_quantile(0.975) - 1.959964) < 1e-6


def test_variance_estimate_divisor_m():
    est = np.array([[1.0], [3.0]])
    omega = variance_estimate(est, np.array([2.0]))
    assert omega.tolist() == [[1.0]]  # ((-1)^2 + 1^2) / 2
    with pytest.raises(ValueError):
        variance_estimate(np.array([[1.0]]), np.array([1.0]))


def test_constant_dataset_gives_zero_spread():
    data = np.full((200, 1), 3.25)
    src = ArraySource(data)
    hyper = HyperParams(k_n=10, m_n=12)
    res = subbag(src, Mean(1), hyper, master_seed=5)
    assert np.allclose(res.theta_bar, [3.25])
    assert np.allclose(res.omega, 0.0)
    assert np.allclose(res.sse, 0.0)
    assert res.ci.lower[0] == res.ci.upper[0] == 3.25


def test_sse_formula_arithmetic():
    # omega_jj = 0.04, k = 100, N = 10^4 -> sse = 0.02; alpha=1 adjusted = 0.028284
    hyper = HyperParams(k_n=100, m_n=5, alpha=1.0)
    sse = np.sqrt(hyper.k_n * 0.04 / 10_000)
    assert abs(sse - 0.02) < 1e-15
    assert abs(np.sqrt(1 + 1 / hyper.alpha) * sse - 0.028284) < 1e-6


def test_ci_standard_quantile_and_degenerate():
    src = ArraySource(np.full((60, 1), 1.5))
    res = subbag(src, Mean(1), HyperParams(k_n=5, m_n=8), master_seed=1)
    ci = confidence_intervals(res, 0.95)
    assert ci.lower[0] == ci.upper[0] == 1.5  # SE = 0 -> degenerate
    # non-degenerate width uses z_{0.975}
    src2 = logistic_source(500, 0)
    res2 = subbag(src2, LogisticMLE(1), HyperParams(k_n=60, m_n=10), master_seed=2)
    width = res2.ci.upper - res2.ci.lower
    assert np.allclose(width, 2 * 1.959963985 * res2.sse_adjusted, rtol=1e-9)


def test_ci_basis_follows_delta_m_regime():
    src = logistic_source(400, 3)
    res0 = subbag(src, LogisticMLE(1), HyperParams(k_n=50, m_n=8, delta_m=0.0),
                  master_seed=3)
    assert res0.ci.basis == "adjusted"
    res1 = subbag(src, LogisticMLE(1), HyperParams(k_n=50, m_n=8, delta_m=0.3),
                  master_seed=3)
    assert res1.ci.basis == "plain"
    assert np.all(res1.ci.upper - res1.ci.lower <= res0.ci.upper - res0.ci.lower)


def test_sandwich_mean_family_trivials():
    src = ArraySource(np.array([[0.0], [2.0]]))
    xi = sandwich_full(src, Mean(1), np.array([1.0])).xi
    assert np.allclose(xi, [[1.0]])
    rng = np.random.default_rng(4)
    data = rng.normal(size=(500, 2))
    mu = data.mean(axis=0)
    xi2 = sandwich_full(ArraySource(data), Mean(2), mu).xi
    centered = data - mu
    assert np.allclose(xi2, centered.T @ centered / 500, rtol=1e-10)


def test_sandwich_streaming_chunks_equal_single_pass():
    src = logistic_source(1000, 5)
    fam = LogisticMLE(1)
    theta = np.array([0.2, 0.9])
    a = sandwich_full(src, fam, theta, chunk_rows=64).xi
    b = sandwich_full(src, fam, theta, chunk_rows=10_000).xi
    assert np.allclose(a, b, rtol=1e-12)


def test_omega_psd_floor():
    src = logistic_source(2000, 6)
    res = subbag(src, LogisticMLE(1), HyperParams(k_n=80, m_n=25), master_seed=7)
    eig = np.linalg.eigvalsh(res.omega)
    assert eig.min() >= -1e-12 * np.trace(res.omega)


def test_bit_reproducibility_across_worker_counts():
    src = logistic_source(1500, 8)
    hyper = HyperParams(k_n=60, m_n=20)
    results = [
        subbag(src, LogisticMLE(1), hyper, master_seed=9, workers=w)
        for w in (1, 4, 8)
    ]
    for other in results[1:]:
        assert np.array_equal(results[0].theta_bar, other.theta_bar)
        assert np.array_equal(results[0].omega, other.omega)
        assert np.array_equal(results[0].sse_adjusted, other.sse_adjusted)


def test_aggregation_order_fixed_by_subsample_id():
    src = logistic_source(800, 10)
    hyper = HyperParams(k_n=50, m_n=12)
    res = subbag(src, LogisticMLE(1), hyper, master_seed=11, keep_estimates=True)
    # re-solve each subsample independently in plan order
    from subbag.solver import newton_solve

    plan = build_plan(800, hyper, 11)
    fam = LogisticMLE(1)
    expected = np.stack([
        newton_solve(fam, src.data[plan.subsamples[j]]).theta for j in range(12)
    ])
    assert np.array_equal(res.estimates, expected)
    assert np.array_equal(res.theta_bar, expected.mean(axis=0))


def test_explicit_plan_equivalence_with_manual_average():
    src = logistic_source(40, 12)
    s0 = [0, 3, 5, 9, 14, 21, 30, 33]
    s1 = [2, 7, 11, 16, 22, 28, 35, 39]
    plan = explicit_plan(40, [s0, s1])
    hyper = HyperParams(k_n=8, m_n=2)
    res = subbag(src, LogisticMLE(1), hyper, plan=plan)
    from subbag.solver import newton_solve

    fam = LogisticMLE(1)
    t0 = newton_solve(fam, src.data[s0]).theta
    t1 = newton_solve(fam, src.data[s1]).theta
    assert np.allclose(res.theta_bar, (t0 + t1) / 2, atol=1e-14)


def test_explicit_plan_must_match_hyper():
    src = logistic_source(40, 13)
    plan = explicit_plan(40, [[0, 1], [2, 3]])
    with pytest.raises(ValueError, match="explicit plan"):
        subbag(src, LogisticMLE(1), HyperParams(k_n=3, m_n=2), plan=plan)


def test_skip_failed_drops_subsample_with_count():
    # one separable subsample among healthy ones
    rng = np.random.default_rng(14)
    x = rng.normal(size=60)
    y = (rng.random(60) < 0.5).astype(float)
    # force separation on rows 0..4: y = 1 exactly when x > 0
    x[:5] = np.array([-2.0, -1.0, 1.0, 2.0, 3.0])
    y[:5] = np.array([0.0, 0.0, 1.0, 1.0, 1.0])
    src = ArraySource(np.column_stack([y, x]))
    plan = explicit_plan(60, [[0, 1, 2, 3, 4], [10, 20, 30, 40, 50]])
    hyper = HyperParams(k_n=5, m_n=2)
    from subbag.solver import SolverError

    with pytest.raises(SolverError, match="subsample 0"):
        subbag(src, LogisticMLE(1), hyper, plan=plan, config=SolveConfig(max_iter=40))
    res = subbag(src, LogisticMLE(1), hyper, plan=plan, skip_failed=True,
                 config=SolveConfig(max_iter=40))
    assert res.failed_subsamples == 1
    assert res.estimates.shape[0] == 1


def test_mean_fast_path_matches_generic_solver():
    rng = np.random.default_rng(15)
    data = rng.normal(size=(300, 2))
    src = ArraySource(data)
    hyper = HyperParams(k_n=25, m_n=14)
    fast = subbag(src, Mean(2), hyper, master_seed=16)
    plan = build_plan(300, hyper, 16)
    from subbag.solver import newton_solve

    slow = np.stack([
        newton_solve(Mean(2), data[plan.subsamples[j]]).theta for j in range(14)
    ])
    assert np.abs(fast.estimates - slow).max() < 1e-12


def test_theorem1_variance_law_quick():
    # Var(theta_bar) ~ 1/N + 1/(k m) for the mean of unit-variance normals
    N, k, m, runs = 1000, 25, 20, 1500
    hyper = HyperParams(k_n=k, m_n=m)
    rng = np.random.default_rng(17)
    vals = np.empty(runs)
    for r in range(runs):
        data = rng.standard_normal((N, 1))
        res = subbag(ArraySource(data), Mean(1), hyper,
                     master_seed=int(rng.integers(0, 2**63)))
        vals[r] = res.theta_bar[0]
    predicted = 1.0 / N + 1.0 / (k * m)
    assert abs(vals.var() / predicted - 1.0) < 0.12


def test_anticipate_rows_and_scaling():
    src = logistic_source(30_000, 18)
    k = 150
    pilot = select_hyperparams(30_000, alpha=0.01, k_n=150,
                               estimator_is_biased=False)
    assert pilot.m_n == 2
    rows, result = anticipate(src, LogisticMLE(1), pilot, 19,
                              alphas=(0.01, 0.2, 1.0, 1e9))
    measured = sum(result.wall_times.values())
    by_alpha = {}
    for row in rows:
        by_alpha.setdefault(row.alpha, []).append(row)
    # alpha = 0.01 row reproduces the pilot's own adjusted SE exactly
    got = np.array([r.sse_adjusted for r in by_alpha[0.01]])
    assert np.array_equal(got, result.sse_adjusted)
    # time scales linearly: the 0.2 row is 20x the measured pilot time
    assert np.isclose(by_alpha[0.2][0].anticipated_seconds, 20 * measured)
    # alpha -> infinity: adjusted SE approaches the full-sample SE
    big = by_alpha[1e9][0]
    assert abs(big.sse_adjusted / big.sse_full - 1.0) < 1e-9
    assert np.isclose(by_alpha[0.2][0].sse_full, result.sse[0])


def test_anticipate_requires_pilot_alpha():
    src = logistic_source(1000, 20)
    with pytest.raises(ValueError, match="alpha = 0.01"):
        anticipate(src, LogisticMLE(1), HyperParams(k_n=50, m_n=5, alpha=1.0),
                   0, alphas=(0.1,))


def test_anticipate_small_dataset_pilot_error():
    with pytest.raises(ValueError, match="m_n"):
        select_hyperparams(500, alpha=0.01, k_n=50, estimator_is_biased=False)


def test_result_records_failed_and_times():
    src = logistic_source(900, 21)
    res = subbag(src, LogisticMLE(1), HyperParams(k_n=45, m_n=11), master_seed=22)
    assert res.failed_subsamples == 0
    assert set(res.wall_times) == {"load", "estimate", "se"}
    assert all(v >= 0 for v in res.wall_times.values())
