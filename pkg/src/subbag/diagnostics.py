"""Brute-force oracles and theory-facing diagnostics.

These routines exist to check the estimation pipeline against
independent computations: exhaustive enumeration of all subsamples,
Monte Carlo population moments, the per-block second-order expansion
term, and the two-term variance decomposition of the aggregated mean
kernel.  They are desk-scale tools, guarded against combinatorial
blow-up, and are exercised heavily by the test suite.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .aggregate import sandwich_full
from .data_source import ArraySource
from .families import Mean, PsiFamily
from .sampling import HyperParams, build_plan
from .simulation import DgpSpec, generate
from .solver import DEFAULT_CONFIG, SolveConfig, newton_solve

ENUMERATION_GUARD = 10**6


def enumerate_subsample_estimates(
    family: PsiFamily,
    data: np.ndarray,
    k_n: int,
    config: SolveConfig = DEFAULT_CONFIG,
    skip_failed: bool = False,
):
    """Solve every size-``k_n`` subset in lexicographic order.

    Returns ``(estimates, ok)`` with one row per subset; a failed solve
    either propagates (default) or leaves a NaN row with ``ok`` False.
    Rejects problems with more than 10^6 subsets.
    """
    from .solver import SolverError

    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    n = data.shape[0]
    total = math.comb(n, k_n)
    if total > ENUMERATION_GUARD:
        raise ValueError(
            f"C({n}, {k_n}) = {total} exceeds the enumeration guard {ENUMERATION_GUARD}"
        )
    mean_family = type(family) is Mean
    estimates = np.full((total, family.dim_theta), np.nan)
    ok = np.zeros(total, dtype=bool)
    for i, combo in enumerate(itertools.combinations(range(n), k_n)):
        rows = data[list(combo)]
        if mean_family:
            estimates[i] = rows.mean(axis=0)
            ok[i] = True
            continue
        try:
            estimates[i] = newton_solve(family, rows, config).theta
            ok[i] = True
        except SolverError:
            if not skip_failed:
                raise
    return estimates, ok


def complete_u_oracle(
    family: PsiFamily,
    data: np.ndarray,
    k_n: int,
    config: SolveConfig = DEFAULT_CONFIG,
    skip_failed: bool = False,
) -> np.ndarray:
    """Average the subsample estimator over every size-``k_n`` subset."""
    estimates, ok = enumerate_subsample_estimates(family, data, k_n, config, skip_failed)
    if not ok.any():
        raise ValueError("every enumerated subset failed to solve")
    return estimates[ok].mean(axis=0)


@dataclass(frozen=True)
class PopulationMoments:
    """Score moments at the true parameter, plus derived quantities."""

    sigma: np.ndarray      # Var(psi)
    v: np.ndarray          # E dpsi
    v2: np.ndarray         # E d2psi (d x d^2)
    h: np.ndarray          # E[psi^T (x) dpsi] (d x d^2)
    b: np.ndarray          # first-order bias coefficient
    xi: np.ndarray         # V^{-1} Sigma V^{-T}


def assemble_bias(sigma, v, v2, h) -> np.ndarray:
    """First-order bias coefficient from the population moments."""
    d = v.shape[0]
    vinv = np.linalg.inv(v)
    term_h = h @ vinv.flatten(order="F")
    term_v2 = 0.5 * v2 @ np.kron(vinv, vinv) @ sigma.flatten(order="F")
    return -vinv @ (-term_h + term_v2)


def population_moments(
    family: PsiFamily,
    dgp: DgpSpec,
    mc_size: int = 100_000,
    seed: int = 0,
    theta0=None,
) -> PopulationMoments:
    """Monte Carlo score moments at the true parameter under ``dgp``.

    ``theta0`` defaults to the process parameter; pass it explicitly
    when the family's parameter extends it (a meancov family over raw
    records needs the covariance coordinates appended).  The plain mean
    family under the normal-mean process has closed forms, used here.
    """
    theta0 = dgp.theta0_array() if theta0 is None else np.asarray(theta0, dtype=np.float64)
    if type(family) is Mean and dgp.kind == "normal_mean":
        p = family.dim_theta
        eye = np.eye(p)
        return PopulationMoments(
            sigma=eye.copy(), v=-eye, v2=np.zeros((p, p * p)),
            h=np.zeros((p, p * p)), b=np.zeros(p), xi=eye.copy(),
        )
    if mc_size < 10_000:
        raise ValueError("mc_size must be >= 10000 for stable moments")
    work = DgpSpec(kind=dgp.kind, n=mc_size, theta0=dgp.theta0, noise=dgp.noise)
    rows = generate(work, seed).data
    if family.dim_theta != theta0.shape[0]:
        raise ValueError(
            f"theta0 has {theta0.shape[0]} coordinates, family needs {family.dim_theta}"
        )
    psi = family.psi(theta0, rows)
    dpsi = family.dpsi(theta0, rows)
    d2 = family.d2psi(theta0, rows)
    sigma = np.cov(psi.T, ddof=0) if psi.shape[1] > 1 else np.array([[psi.var()]])
    sigma = np.atleast_2d(sigma)
    v = dpsi.mean(axis=0)
    v2 = d2.mean(axis=0)
    d = family.dim_theta
    h = np.einsum("kj,kal->kajl", psi, dpsi).reshape(mc_size, d, d * d).mean(axis=0)
    b = assemble_bias(sigma, v, v2, h)
    vinv_sigma = np.linalg.solve(v, sigma)
    xi = np.linalg.solve(v, vinv_sigma.T).T
    return PopulationMoments(sigma=sigma, v=v, v2=v2, h=h, b=b, xi=0.5 * (xi + xi.T))


def expansion_term(
    family: PsiFamily,
    rows: np.ndarray,
    moments: PopulationMoments,
    theta0: np.ndarray,
) -> np.ndarray:
    """Second-order expansion term of one block at the true parameter.

    With ``J = k^{-1/2} sum psi`` and ``J1 = k^{-1/2} sum (dpsi - V)``:
    ``-V^{-1} { -J1 V^{-1} J + 0.5 V2 (V^{-1} J (x) V^{-1} J) }``.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    k_n = rows.shape[0]
    theta0 = np.asarray(theta0, dtype=np.float64)
    scale = 1.0 / math.sqrt(k_n)
    J = scale * family.psi(theta0, rows).sum(axis=0)
    J1 = scale * (family.dpsi(theta0, rows) - moments.v).sum(axis=0)
    u = np.linalg.solve(moments.v, J)
    inner = -J1 @ u + 0.5 * (moments.v2 @ np.kron(u, u))
    return -np.linalg.solve(moments.v, inner)


@dataclass(frozen=True)
class UStatDiagnostics:
    """Variance decomposition of the aggregated scalar mean kernel."""

    zeta_1: float
    zeta_k: float
    zeta_1_mc: float
    zeta_k_mc: float
    a_n: float
    predicted_var: float
    empirical_var: float

    @property
    def ratio(self) -> float:
        return self.empirical_var / self.predicted_var


def ustat_variance_check(
    n: int,
    k_n: int,
    m_n: int,
    mc_size: int = 2000,
    seed: int = 0,
) -> UStatDiagnostics:
    """Check the two-term variance law of the aggregated mean kernel.

    The kernel is the subsample mean of unit-variance normals, so
    ``zeta_1 = 1/k^2`` and ``zeta_k = 1/k`` analytically.  The predicted
    variance is ``1/N + (1 - 1/C(N,k)) / (k m)`` (the leading terms);
    the empirical variance redraws data and plan ``mc_size`` times.
    """
    rng = np.random.default_rng(seed)
    zeta_1 = 1.0 / k_n**2
    zeta_k = 1.0 / k_n
    # Monte Carlo zeta estimates: pairs of kernels sharing c components
    shared = rng.standard_normal(mc_size)
    h1 = (shared + rng.standard_normal((mc_size, k_n - 1)).sum(axis=1)) / k_n if k_n > 1 else shared.copy()
    h2 = (shared + rng.standard_normal((mc_size, k_n - 1)).sum(axis=1)) / k_n if k_n > 1 else shared.copy()
    zeta_1_mc = float(np.cov(h1, h2, ddof=1)[0, 1])
    zeta_k_mc = float(np.var(rng.standard_normal((mc_size, k_n)).mean(axis=1), ddof=1))
    a_n = (k_n / n) * (zeta_k / (k_n * zeta_1))
    comb = math.comb(n, k_n)
    predicted = 1.0 / n + (1.0 - 1.0 / comb) / (k_n * m_n)
    hyper = HyperParams(k_n=k_n, m_n=m_n)
    theta = np.empty(mc_size)
    for i in range(mc_size):
        data = rng.standard_normal(n)
        plan = build_plan(n, hyper, int(rng.integers(0, 2**63)))
        theta[i] = data[plan.subsamples].mean()
    empirical = float(np.var(theta, ddof=1))
    return UStatDiagnostics(
        zeta_1=zeta_1, zeta_k=zeta_k, zeta_1_mc=zeta_1_mc, zeta_k_mc=zeta_k_mc,
        a_n=a_n, predicted_var=predicted, empirical_var=empirical,
    )


@dataclass(frozen=True)
class DerivativeReport:
    passed: bool
    trials: int
    max_rel_dpsi: float
    max_rel_d2psi: float
    failures: tuple[str, ...] = ()


def derivative_check(
    family: PsiFamily,
    trials: int = 100,
    seed: int = 0,
    tol_dpsi: float = 1e-6,
    tol_d2psi: float = 1e-5,
) -> DerivativeReport:
    """Central finite differences against the analytic derivatives."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    d = family.dim_theta
    h1, h2 = 2e-6, 2e-5
    worst1 = worst2 = 0.0
    failures = []
    for t in range(trials):
        theta = family.random_theta(rng)
        z = family.random_record(rng)
        dpsi = family.dpsi(theta, z)[0]
        fd = np.zeros_like(dpsi)
        for j in range(d):
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h1
            tm[j] -= h1
            fd[:, j] = (family.psi(tp, z)[0] - family.psi(tm, z)[0]) / (2 * h1)
        rel1 = float(np.abs(dpsi - fd).max() / max(1.0, np.abs(fd).max()))
        d2 = family.d2psi(theta, z)[0]
        fd2 = np.zeros_like(d2)
        for l in range(d):
            tp, tm = theta.copy(), theta.copy()
            tp[l] += h2
            tm[l] -= h2
            diff = (family.dpsi(tp, z)[0] - family.dpsi(tm, z)[0]) / (2 * h2)
            for j in range(d):
                fd2[:, j * d + l] = diff[:, j]
        rel2 = float(np.abs(d2 - fd2).max() / max(1.0, np.abs(fd2).max()))
        worst1 = max(worst1, rel1)
        worst2 = max(worst2, rel2)
        if rel1 > tol_dpsi:
            failures.append(f"trial {t}: dpsi deviates by {rel1:.3e}")
        if rel2 > tol_d2psi:
            failures.append(f"trial {t}: d2psi deviates by {rel2:.3e}")
    return DerivativeReport(
        passed=not failures,
        trials=trials,
        max_rel_dpsi=worst1,
        max_rel_d2psi=worst2,
        failures=tuple(failures),
    )


def sandwich_crosscheck(
    family: PsiFamily,
    dgp: DgpSpec,
    reps: int = 20,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Average full-pass sandwich over datasets vs Monte Carlo moments.

    Two independent estimators of the same matrix; returns
    ``(mc_moments_xi, mean_sandwich_xi)``.
    """
    moments = population_moments(family, dgp, mc_size=200_000, seed=seed)
    acc = np.zeros_like(moments.xi)
    for r in range(reps):
        source = generate(dgp, seed + 1000 + r)
        acc += sandwich_full(source, family, dgp.theta0_array()).xi
    return moments.xi, acc / reps
