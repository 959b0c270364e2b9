"""The subbagging engine.

``subbag`` runs a sampling plan end to end: extract blocks, solve every
subsample (optionally bias corrected), and aggregate into the averaged
estimate, its between-subsample covariance, standard errors, and
confidence intervals.  Results are bit-reproducible for any worker
count: subsample estimates land in a slot array indexed by subsample id
and the reduction runs sequentially over slots.

Standard errors come in two flavours.  The subbagging standard error is
``sse_j = sqrt(k_n * omega_jj / N)``; when the plan was sized with
``delta_m = 0`` (so ``k_n * m_n / N`` stays finite at ``alpha``), the
aggregation noise does not vanish and the adjusted version
``sqrt(1 + 1/alpha) * sse`` is the one with nominal coverage.  Both are
always reported; confidence intervals pick the regime-appropriate one.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._normal import normal_quantile
from .data_source import ExtractionStats
from .families import Mean, PsiFamily
from .sampling import HyperParams, SamplingPlan, build_plan
from .solver import (
    DEFAULT_CONFIG,
    SolveConfig,
    SolverError,
    newton_solve,
    solve_bc,
    solve_with_modes,
)


@dataclass(frozen=True)
class ConfidenceIntervals:
    level: float
    lower: np.ndarray
    upper: np.ndarray
    basis: str  # "adjusted" or "plain"


@dataclass
class SubbaggingResult:
    theta_bar: np.ndarray
    omega: np.ndarray
    hyper: HyperParams
    sse: np.ndarray
    sse_adjusted: np.ndarray
    ci: ConfidenceIntervals
    n_total: int
    bc_mode: str
    master_seed: int
    failed_subsamples: int = 0
    wall_times: dict = field(default_factory=dict)
    estimates: np.ndarray | None = None
    extraction: ExtractionStats | None = None

    @property
    def d(self) -> int:
        return self.theta_bar.shape[0]


@dataclass(frozen=True)
class SandwichEstimate:
    xi: np.ndarray  # d x d

    def asd(self, n_total: int) -> np.ndarray:
        """Per-coordinate asymptotic standard deviation sqrt((xi/N)_jj)."""
        return np.sqrt(np.diag(self.xi) / n_total)


def variance_estimate(estimates: np.ndarray, theta_bar: np.ndarray) -> np.ndarray:
    """Between-subsample covariance with divisor ``m`` (not ``m - 1``)."""
    estimates = np.atleast_2d(np.asarray(estimates, dtype=np.float64))
    if estimates.shape[0] < 2:
        raise ValueError("variance estimate needs at least 2 subsample estimates")
    dev = estimates - np.asarray(theta_bar)
    return dev.T @ dev / estimates.shape[0]


def _solve_block(family, rows, bc_mode, config, init_override=None):
    if bc_mode == "none":
        return newton_solve(family, rows, config, init_override)
    return solve_bc(family, rows, bc_mode, config, init_override)


def _mean_batch_estimates(source, plan, modes):
    """Closed-form batch solution for the exactly linear mean score.

    The root of the block score is the block mean, every bias
    correction vanishes identically, and in-memory sources expose the
    raw array, so the whole plan reduces to one gather.  Keeps desk
    scale Monte Carlo studies (thousands of plan redraws) affordable.
    """
    blocks = source.data[plan.subsamples]  # (m, k, p)
    theta = blocks.mean(axis=1)
    return {mode: theta.copy() for mode in modes}


def run_plan_estimates(
    source,
    family: PsiFamily,
    plan: SamplingPlan,
    bc_modes,
    config: SolveConfig = DEFAULT_CONFIG,
    workers: int = 1,
    skip_failed: bool = False,
    batch_size: int | None = None,
    mem_budget: int | None = None,
    stats: ExtractionStats | None = None,
) -> tuple[dict[str, np.ndarray], np.ndarray, dict[str, float]]:
    """Solve every subsample of a plan under one or more modes.

    Returns ``(estimates_by_mode, ok_mask, times)`` where each estimates
    array has one row per subsample (NaN rows for skipped failures).
    Warm initialization forces sequential processing so the estimate
    sequence stays independent of the worker count.
    """
    modes = list(bc_modes)
    if type(family) is Mean and hasattr(source, "data"):
        t0 = time.perf_counter()
        out = _mean_batch_estimates(source, plan, modes)
        return out, np.ones(plan.m_n, dtype=bool), {
            "load": 0.0, "estimate": time.perf_counter() - t0,
        }
    m_n = plan.m_n
    d = family.dim_theta
    out = {mode: np.full((m_n, d), np.nan) for mode in modes}
    ok = np.zeros(m_n, dtype=bool)
    times = {"load": 0.0, "estimate": 0.0}
    warm = isinstance(config.init, str) and config.init == "warm"
    use_workers = 1 if warm else max(1, workers)

    def solve_one(sid, rows, init_override):
        try:
            if len(modes) == 1:
                return {modes[0]: _solve_block(family, rows, modes[0], config, init_override)}
            return solve_with_modes(family, rows, modes, config, init_override)
        except SolverError as exc:
            if skip_failed:
                return exc
            raise SolverError(f"subsample {sid}: {exc}") from exc

    gen = source.extract_blocks(plan, batch_size=batch_size, mem_budget=mem_budget, stats=stats)
    pool = ThreadPoolExecutor(max_workers=use_workers) if use_workers > 1 else None
    try:
        pending: list[tuple[int, object]] = []
        last_theta = None
        while True:
            t0 = time.perf_counter()
            block = next(gen, None)
            times["load"] += time.perf_counter() - t0
            if block is None:
                break
            t0 = time.perf_counter()
            if pool is None:
                result = solve_one(block.subsample_id, block.rows, last_theta if warm else None)
                if not isinstance(result, Exception):
                    for mode, est in result.items():
                        out[mode][block.subsample_id] = est.theta
                    ok[block.subsample_id] = True
                    if warm:
                        last_theta = result[modes[0]].theta
            else:
                pending.append((block.subsample_id, pool.submit(solve_one, block.subsample_id, block.rows, None)))
            times["estimate"] += time.perf_counter() - t0
        if pool is not None:
            t0 = time.perf_counter()
            for sid, fut in pending:
                result = fut.result()
                if not isinstance(result, Exception):
                    for mode, est in result.items():
                        out[mode][sid] = est.theta
                    ok[sid] = True
            times["estimate"] += time.perf_counter() - t0
    finally:
        if pool is not None:
            pool.shutdown()
    return out, ok, times


def _aggregate(estimates: np.ndarray, hyper: HyperParams, n_total: int, ci_level: float):
    m_n = estimates.shape[0]
    theta_bar = estimates.mean(axis=0)
    if m_n >= 2:
        omega = variance_estimate(estimates, theta_bar)
    else:
        omega = np.full((estimates.shape[1],) * 2, np.nan)
    sse = np.sqrt(hyper.k_n * np.diag(omega) / n_total)
    adjust = np.sqrt(1.0 + 1.0 / hyper.alpha)
    sse_adjusted = adjust * sse
    basis = "adjusted" if hyper.delta_m == 0 else "plain"
    se = sse_adjusted if basis == "adjusted" else sse
    z = normal_quantile(0.5 * (1.0 + ci_level))
    ci = ConfidenceIntervals(
        level=ci_level, lower=theta_bar - z * se, upper=theta_bar + z * se, basis=basis
    )
    return theta_bar, omega, sse, sse_adjusted, ci


def subbag(
    source,
    family: PsiFamily,
    hyper: HyperParams,
    bc_mode: str = "none",
    master_seed: int = 0,
    workers: int = 1,
    plan: SamplingPlan | None = None,
    config: SolveConfig = DEFAULT_CONFIG,
    skip_failed: bool = False,
    batch_size: int | None = None,
    mem_budget: int | None = None,
    ci_level: float = 0.95,
    keep_estimates: bool = True,
    stats: ExtractionStats | None = None,
) -> SubbaggingResult:
    """Run the full subbagging estimator over an on-disk or in-memory source."""
    hyper.validate(source.n_rows)
    t_plan = time.perf_counter()
    if plan is None:
        plan = build_plan(source.n_rows, hyper, master_seed)
    elif (plan.k_n, plan.m_n) != (hyper.k_n, hyper.m_n):
        raise ValueError(
            f"explicit plan is {plan.m_n}x{plan.k_n}, hyperparameters say "
            f"{hyper.m_n}x{hyper.k_n}"
        )
    plan_time = time.perf_counter() - t_plan

    by_mode, ok, times = run_plan_estimates(
        source, family, plan, [bc_mode], config, workers,
        skip_failed, batch_size, mem_budget, stats,
    )
    estimates = by_mode[bc_mode]
    failed = int((~ok).sum())
    retained = estimates[ok]
    if retained.shape[0] == 0:
        raise SolverError("every subsample failed to solve")

    t0 = time.perf_counter()
    theta_bar, omega, sse, sse_adjusted, ci = _aggregate(
        retained, hyper, source.n_rows, ci_level
    )
    se_time = time.perf_counter() - t0

    return SubbaggingResult(
        theta_bar=theta_bar,
        omega=omega,
        hyper=hyper,
        sse=sse,
        sse_adjusted=sse_adjusted,
        ci=ci,
        n_total=source.n_rows,
        bc_mode=bc_mode,
        master_seed=master_seed,
        failed_subsamples=failed,
        wall_times={
            "load": times["load"] + plan_time,
            "estimate": times["estimate"],
            "se": se_time,
        },
        estimates=retained if keep_estimates else None,
        extraction=stats,
    )


def sandwich_full(source, family: PsiFamily, theta_hat, chunk_rows: int = 65536) -> SandwichEstimate:
    """Full-pass plug-in covariance of the score root.

    Streams the source once, accumulating the average Jacobian and the
    average score outer product; memory stays O(p^2) regardless of N.
    """
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    d = family.dim_theta
    jac_sum = np.zeros((d, d))
    outer_sum = np.zeros((d, d))
    n = 0
    for chunk in source.iter_row_chunks(chunk_rows):
        psi = family.psi(theta_hat, chunk)
        jac_sum += family.dpsi(theta_hat, chunk).sum(axis=0)
        outer_sum += psi.T @ psi
        n += chunk.shape[0]
    if n == 0:
        raise ValueError("empty source")
    v = jac_sum / n
    if np.linalg.cond(v) > 1e12:
        raise SolverError("average Jacobian is numerically singular")
    middle = outer_sum / n
    vinv_mid = np.linalg.solve(v, middle)
    xi = np.linalg.solve(v, vinv_mid.T).T
    return SandwichEstimate(xi=0.5 * (xi + xi.T))


def confidence_intervals(result: SubbaggingResult, level: float) -> ConfidenceIntervals:
    """Recompute intervals at another level from a finished result."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    basis = "adjusted" if result.hyper.delta_m == 0 else "plain"
    se = result.sse_adjusted if basis == "adjusted" else result.sse
    z = normal_quantile(0.5 * (1.0 + level))
    return ConfidenceIntervals(
        level=level,
        lower=result.theta_bar - z * se,
        upper=result.theta_bar + z * se,
        basis=basis,
    )


@dataclass(frozen=True)
class AnticipateRow:
    alpha: float
    coord: int
    sse_adjusted: float
    sse_full: float
    anticipated_seconds: float


PILOT_ALPHA = 0.01


def anticipate(
    source,
    family: PsiFamily,
    pilot_hyper: HyperParams,
    master_seed: int,
    alphas,
    bc_mode: str = "none",
    **subbag_kwargs,
) -> tuple[list[AnticipateRow], SubbaggingResult]:
    """Project standard errors and wall time for larger aggregation levels.

    Runs once at the pilot level ``alpha = 0.01``; the variance law then
    gives the adjusted standard error at any ``alpha`` as
    ``sqrt(1 + 1/alpha) * sqrt(k_n * omega_jj / N)`` and total time
    scales linearly in ``alpha`` (the subsample count does).
    """
    if abs(pilot_hyper.alpha - PILOT_ALPHA) > 1e-12:
        raise ValueError(f"pilot hyperparameters must use alpha = {PILOT_ALPHA}")
    if pilot_hyper.m_n < 2:
        raise ValueError(
            "pilot draw has fewer than 2 subsamples at alpha = 0.01; "
            "the dataset is too small for this pilot, use a larger pilot alpha"
        )
    for a in alphas:
        if a <= 0:
            raise ValueError(f"alpha values must be > 0, got {a}")
    result = subbag(source, family, pilot_hyper, bc_mode, master_seed, **subbag_kwargs)
    base_se = result.sse  # consistent for the full-sample estimator's SE
    measured = sum(result.wall_times.values())
    rows = []
    for a in alphas:
        factor = float(np.sqrt(1.0 + 1.0 / a))
        for j in range(result.d):
            rows.append(
                AnticipateRow(
                    alpha=float(a),
                    coord=j,
                    sse_adjusted=factor * float(base_se[j]),
                    sse_full=float(base_se[j]),
                    anticipated_seconds=(a / PILOT_ALPHA) * measured,
                )
            )
    return rows, result
