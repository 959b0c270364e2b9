"""Subsample solvers: damped Newton and first-order bias corrections.

``newton_solve`` finds the root of the block score sum.  Three
bias-corrected variants are available:

* ``bc1`` subtracts the family's closed-form bias over ``k_n``;
* ``bc2`` subtracts the plug-in sample bias ``b_hat`` over ``k_n``;
* ``bc3`` re-solves the score system with the additive correction
  ``V_hat(theta) @ b_hat(theta)`` folded into the residual, using the
  uncorrected Jacobian as a quasi-Newton matrix (the correction term is
  O(1) against the O(k_n) score sum, so its derivative is negligible
  for the step; convergence is judged on the full corrected residual).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .families import PsiFamily

COND_LIMIT = 1e12
RESIDUAL_TOL_PER_RECORD = 1e-8

BC_MODES = ("none", "bc1", "bc2", "bc3")


class SolverError(RuntimeError):
    """Base class for numerical failures inside a subsample solve."""


class SingularJacobianError(SolverError):
    pass


class NonConvergenceError(SolverError):
    pass


class NoClosedFormBiasError(SolverError):
    pass


@dataclass(frozen=True)
class SolveConfig:
    max_iter: int = 100
    tol: float = 1e-10
    init: str | np.ndarray = "zeros"
    damping: int = 30

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


DEFAULT_CONFIG = SolveConfig()


@dataclass(frozen=True)
class SubsampleEstimate:
    theta: np.ndarray
    bc_mode: str = "none"
    iterations: int = 0
    converged: bool = False


def _initial_theta(family: PsiFamily, config: SolveConfig, init_override=None) -> np.ndarray:
    if init_override is not None:
        return np.asarray(init_override, dtype=np.float64).copy()
    if isinstance(config.init, str):
        if config.init in ("zeros", "warm"):
            # warm behaviour is supplied through init_override by the caller
            return np.zeros(family.dim_theta)
        raise ValueError(f"unknown init {config.init!r}")
    return np.asarray(config.init, dtype=np.float64).copy()


def _solve_residual(family, rows, config, residual_fn, init_override=None):
    """Damped Newton on ``residual_fn``; Jacobian is the plain score Jacobian."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    k_n = rows.shape[0]
    if k_n == 0:
        raise ValueError("empty block")
    theta = _initial_theta(family, config, init_override)
    r = residual_fn(theta)
    rnorm = float(np.linalg.norm(r))
    iterations = 0
    converged = False
    for _ in range(config.max_iter):
        jac = family.dpsi(theta, rows).sum(axis=0)
        if not np.isfinite(jac).all():
            raise SingularJacobianError("non-finite Jacobian entries")
        if np.linalg.cond(jac) > COND_LIMIT:
            raise SingularJacobianError(
                f"score Jacobian condition number exceeds {COND_LIMIT:g}"
            )
        step = np.linalg.solve(jac, r)
        if float(np.max(np.abs(step))) <= config.tol:
            converged = True
            break
        lam = 1.0
        theta_try = theta - step
        r_try = residual_fn(theta_try)
        rnorm_try = float(np.linalg.norm(r_try))
        halvings = 0
        while (not np.isfinite(rnorm_try) or rnorm_try >= rnorm) and halvings < config.damping:
            lam *= 0.5
            theta_try = theta - lam * step
            r_try = residual_fn(theta_try)
            rnorm_try = float(np.linalg.norm(r_try))
            halvings += 1
        theta, r, rnorm = theta_try, r_try, rnorm_try
        iterations += 1
        if rnorm == 0.0 or lam * float(np.max(np.abs(step))) <= config.tol:
            converged = True
            break
    if not converged:
        raise NonConvergenceError(
            f"no convergence in {config.max_iter} Newton iterations "
            f"(residual 2-norm {rnorm:.3e})"
        )
    if float(np.max(np.abs(r))) > k_n * RESIDUAL_TOL_PER_RECORD:
        raise NonConvergenceError(
            f"converged step but residual {float(np.max(np.abs(r))):.3e} "
            f"exceeds {k_n} * {RESIDUAL_TOL_PER_RECORD:g}"
        )
    return theta, iterations


def newton_solve(
    family: PsiFamily,
    rows: np.ndarray,
    config: SolveConfig = DEFAULT_CONFIG,
    init_override=None,
) -> SubsampleEstimate:
    """Solve the block score system; applies the family's post-solve hook."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))

    def residual(theta):
        return family.psi(theta, rows).sum(axis=0)

    theta, iterations = _solve_residual(family, rows, config, residual, init_override)
    theta = family.post_solve(theta, rows.shape[0])
    return SubsampleEstimate(theta=theta, bc_mode="none", iterations=iterations, converged=True)


def v_hat(family: PsiFamily, rows: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Per-record average of the score Jacobian."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    return family.dpsi(theta, rows).mean(axis=0)


def v2_hat(family: PsiFamily, rows: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Per-record average of the blocked second derivative (d x d^2)."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    return family.d2psi(theta, rows).mean(axis=0)


def b_hat(family: PsiFamily, rows: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Plug-in estimate of the first-order bias coefficient.

    ``-V^{-1} [ -mean_i {dpsi_i - V} V^{-1} psi_i
               + 0.5 V2 mean_i {V^{-1} psi_i (x) V^{-1} psi_i} ]``
    with V, V2 the per-record averages at ``theta``.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    k_n = rows.shape[0]
    theta = np.asarray(theta, dtype=np.float64)
    psi = family.psi(theta, rows)
    dpsi = family.dpsi(theta, rows)
    V = dpsi.mean(axis=0)
    if np.linalg.cond(V) > COND_LIMIT:
        raise SingularJacobianError("V_hat is numerically singular")
    V2 = family.d2psi(theta, rows).mean(axis=0)
    u = np.linalg.solve(V, psi.T).T          # (k, d): V^{-1} psi_i
    centered = dpsi - V
    term1 = np.einsum("kij,kj->ki", centered, u).sum(axis=0) / k_n
    kron = np.einsum("ki,kj->kij", u, u).reshape(k_n, -1).sum(axis=0) / k_n
    term2 = 0.5 * (V2 @ kron)
    return -np.linalg.solve(V, -term1 + term2)


def solve_bc(
    family: PsiFamily,
    rows: np.ndarray,
    mode: str,
    config: SolveConfig = DEFAULT_CONFIG,
    init_override=None,
) -> SubsampleEstimate:
    """Bias-corrected subsample estimate for ``mode`` in {bc1, bc2, bc3}."""
    if mode not in ("bc1", "bc2", "bc3"):
        raise ValueError(f"mode must be bc1, bc2 or bc3, got {mode!r}")
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    k_n = rows.shape[0]

    if mode == "bc1" and not family.has_analytic_bias:
        raise NoClosedFormBiasError(
            f"family {family.name!r} has no closed-form bias; use bc2 or bc3"
        )

    if mode in ("bc1", "bc2"):

        def residual(theta):
            return family.psi(theta, rows).sum(axis=0)

        theta, iterations = _solve_residual(family, rows, config, residual, init_override)
        bias = family.analytic_bias(theta) if mode == "bc1" else b_hat(family, rows, theta)
        theta = theta - bias / k_n
        theta = family.post_solve(theta, k_n)
        return SubsampleEstimate(theta=theta, bc_mode=mode, iterations=iterations, converged=True)

    def residual(theta):
        base = family.psi(theta, rows).sum(axis=0)
        V = family.dpsi(theta, rows).mean(axis=0)
        return base + V @ b_hat(family, rows, theta)

    theta, iterations = _solve_residual(family, rows, config, residual, init_override)
    theta = family.post_solve(theta, k_n)
    return SubsampleEstimate(theta=theta, bc_mode="bc3", iterations=iterations, converged=True)


def solve_with_modes(
    family: PsiFamily,
    rows: np.ndarray,
    modes,
    config: SolveConfig = DEFAULT_CONFIG,
    init_override=None,
) -> dict[str, SubsampleEstimate]:
    """Solve one block under several modes, sharing the plain solve.

    ``bc1``/``bc2`` are corrections of the plain root, and ``bc3`` is
    warm-started at it, so the marginal cost per extra mode is small.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    k_n = rows.shape[0]

    def residual(theta):
        return family.psi(theta, rows).sum(axis=0)

    theta0, iterations = _solve_residual(family, rows, config, residual, init_override)
    out: dict[str, SubsampleEstimate] = {}
    for mode in modes:
        if mode == "none":
            out[mode] = SubsampleEstimate(
                theta=family.post_solve(theta0, k_n),
                bc_mode="none", iterations=iterations, converged=True,
            )
        elif mode == "bc1":
            if not family.has_analytic_bias:
                raise NoClosedFormBiasError(
                    f"family {family.name!r} has no closed-form bias; use bc2 or bc3"
                )
            theta = family.post_solve(theta0 - family.analytic_bias(theta0) / k_n, k_n)
            out[mode] = SubsampleEstimate(theta, "bc1", iterations, True)
        elif mode == "bc2":
            theta = family.post_solve(theta0 - b_hat(family, rows, theta0) / k_n, k_n)
            out[mode] = SubsampleEstimate(theta, "bc2", iterations, True)
        elif mode == "bc3":
            out[mode] = solve_bc(family, rows, "bc3", config, init_override=theta0)
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return out
