"""Estimating-equation families with analytic first and second derivatives.

A family defines a d-dimensional score ``psi(theta, z)`` whose population
zero identifies the parameter of interest.  All evaluations are
vectorized over a block of records: ``rows`` has shape ``(k, dim_z)``.

Derivative conventions (column-major ``vec`` throughout):

* ``dpsi(theta, rows)[i]`` is the d x d matrix of first derivatives
  with entry ``(a, j) = d psi_a / d theta_j`` for record ``i``.
* ``d2psi(theta, rows)[i]`` is the d x d^2 matrix of second derivatives
  blocked so that entry ``(a, j*d + l) = d^2 psi_a / (d theta_j d theta_l)``,
  compatible with contraction against Kronecker squares ``u (x) u``.
"""

from __future__ import annotations

import numpy as np


def vech(matrix: np.ndarray) -> np.ndarray:
    """Stack the on-and-below-diagonal entries column by column."""
    a = np.asarray(matrix)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"vech needs a square matrix, got shape {a.shape}")
    p = a.shape[0]
    return np.concatenate([a[c:, c] for c in range(p)])


def vech_to_sym(v: np.ndarray, p: int) -> np.ndarray:
    """Inverse of :func:`vech` onto symmetric p x p matrices."""
    out = np.zeros((p, p))
    pos = 0
    for c in range(p):
        n = p - c
        out[c:, c] = v[pos : pos + n]
        out[c, c:] = v[pos : pos + n]
        pos += n
    return out


def elimination_matrix(p: int) -> np.ndarray:
    """The q x p^2 matrix L with ``L vec(A) = vech(A)`` for symmetric A."""
    q = p * (p + 1) // 2
    L = np.zeros((q, p * p))
    s = 0
    for c in range(p):
        for r in range(c, p):
            L[s, c * p + r] = 1.0
            s += 1
    return L


def _as_block(rows: np.ndarray, dim_z: int) -> np.ndarray:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.shape[1] != dim_z:
        raise ValueError(f"records have {rows.shape[1]} values, family expects {dim_z}")
    return rows


class PsiFamily:
    """Base class; subclasses fill in psi/dpsi/d2psi."""

    name: str = "base"
    dim_theta: int
    dim_z: int
    is_unbiased: bool = False
    has_analytic_bias: bool = False

    def psi(self, theta: np.ndarray, rows: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def dpsi(self, theta: np.ndarray, rows: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def d2psi(self, theta: np.ndarray, rows: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def analytic_bias(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{self.name} has no closed-form bias")

    def post_solve(self, theta: np.ndarray, k_n: int) -> np.ndarray:
        """Hook applied to the solved subsample estimate (default: identity)."""
        return theta

    # -- test-point generators used by the derivative diagnostics ---------

    def random_theta(self, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(scale=0.7, size=self.dim_theta)

    def random_record(self, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(size=self.dim_z)

    def __repr__(self):
        return f"{type(self).__name__}(d={self.dim_theta}, p={self.dim_z})"


class Mean(PsiFamily):
    """Multivariate mean: ``psi(mu, z) = z - mu``."""

    name = "mean"
    is_unbiased = True
    has_analytic_bias = True

    def __init__(self, p: int):
        self.dim_theta = p
        self.dim_z = p

    def psi(self, theta, rows):
        rows = _as_block(rows, self.dim_z)
        return rows - np.asarray(theta)

    def dpsi(self, theta, rows):
        rows = _as_block(rows, self.dim_z)
        k, p = rows.shape[0], self.dim_theta
        return np.broadcast_to(-np.eye(p), (k, p, p)).copy()

    def d2psi(self, theta, rows):
        rows = _as_block(rows, self.dim_z)
        d = self.dim_theta
        return np.zeros((rows.shape[0], d, d * d))

    def analytic_bias(self, theta):
        return np.zeros(self.dim_theta)


class MeanCov(PsiFamily):
    """Joint mean and half-vectorized covariance.

    ``theta = (mu, vech(Sigma))``; the covariance part of the subsample
    solution is the divisor-k estimator, so the family is biased.  The
    exact bias of the covariance coordinates is ``-vech(Sigma)/k``,
    giving a closed form for analytic corrections.
    """

    name = "meancov"
    is_unbiased = False
    has_analytic_bias = True

    def __init__(self, p: int):
        self.p = p
        self.q = p * (p + 1) // 2
        self.dim_theta = p + self.q
        self.dim_z = p
        self._L = elimination_matrix(p)
        # constant second-derivative block: d2 psi2 / (d mu_j d mu_l)
        d = self.dim_theta
        self._d2 = np.zeros((d, d * d))
        for j in range(p):
            for l in range(p):
                col = self._L[:, j * p + l] + self._L[:, l * p + j]
                self._d2[p:, j * d + l] = col

    def split(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        return theta[: self.p], theta[self.p :]

    def psi(self, theta, rows):
        rows = _as_block(rows, self.dim_z)
        mu, v = self.split(theta)
        e = rows - mu
        outer = np.einsum("ki,kj->kij", e, e)
        # vech of each outer product, column-major lower triangle
        vech_outer = np.concatenate(
            [outer[:, c:, c] for c in range(self.p)], axis=1
        )
        return np.concatenate([e, vech_outer - v], axis=1)

    def dpsi(self, theta, rows):
        rows = _as_block(rows, self.dim_z)
        mu, _ = self.split(theta)
        e = rows - mu
        k, p, q, d = rows.shape[0], self.p, self.q, self.dim_theta
        out = np.zeros((k, d, d))
        out[:, :p, :p] = -np.eye(p)
        out[:, p:, p:] = -np.eye(q)
        # d vech(e e^T) / d mu^T = -L ((e (x) I) + (I (x) e))
        eI = np.einsum("kc,ij->kcij", e, np.eye(p)).reshape(k, p * p, p)
        Ie = np.einsum("cj,ki->kcij", np.eye(p), e).reshape(k, p * p, p)
        out[:, p:, :p] = -np.einsum("qr,krj->kqj", self._L, eI + Ie)
        return out

    def d2psi(self, theta, rows):
        rows = _as_block(rows, self.dim_z)
        return np.broadcast_to(self._d2, (rows.shape[0], *self._d2.shape)).copy()

    def analytic_bias(self, theta):
        _, v = self.split(theta)
        return np.concatenate([np.zeros(self.p), -v])


class MeanCovUnbiased(MeanCov):
    """MeanCov with the divisor k-1 covariance, applied post-solve.

    The subsample estimate is the MeanCov solution with its covariance
    coordinates rescaled by ``k/(k-1)``, which removes the covariance
    bias exactly.
    """

    name = "meancov-unbiased"
    is_unbiased = True
    has_analytic_bias = True

    def post_solve(self, theta, k_n):
        if k_n < 2:
            raise ValueError("unbiased covariance needs k_n >= 2")
        out = np.array(theta, dtype=np.float64, copy=True)
        out[self.p :] *= k_n / (k_n - 1.0)
        return out

    def analytic_bias(self, theta):
        return np.zeros(self.dim_theta)


class _Regression(PsiFamily):
    """Shared design-matrix plumbing: records are ``(y, x_1, ..., x_q)``."""

    def __init__(self, n_features: int, intercept: bool = True):
        self.n_features = n_features
        self.intercept = intercept
        self.dim_z = 1 + n_features
        self.dim_theta = n_features + (1 if intercept else 0)

    def design(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rows = _as_block(rows, self.dim_z)
        y = rows[:, 0]
        x = rows[:, 1:]
        if self.intercept:
            x = np.column_stack([np.ones(rows.shape[0]), x])
        return y, x


class LinearOLS(_Regression):
    """Least squares: ``psi(beta, (y, x)) = x (y - x' beta)``."""

    name = "ols"
    is_unbiased = True

    def psi(self, theta, rows):
        y, x = self.design(rows)
        resid = y - x @ np.asarray(theta)
        return x * resid[:, None]

    def dpsi(self, theta, rows):
        _, x = self.design(rows)
        return -np.einsum("ki,kj->kij", x, x)

    def d2psi(self, theta, rows):
        rows = _as_block(rows, self.dim_z)
        d = self.dim_theta
        return np.zeros((rows.shape[0], d, d * d))


def _sigmoid(t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * t))


class LogisticMLE(_Regression):
    """Logistic maximum likelihood: score ``x (y - sigmoid(x' theta))``."""

    name = "logistic"
    is_unbiased = False

    def psi(self, theta, rows):
        y, x = self.design(rows)
        s = _sigmoid(x @ np.asarray(theta))
        return x * (y - s)[:, None]

    def dpsi(self, theta, rows):
        _, x = self.design(rows)
        s = _sigmoid(x @ np.asarray(theta))
        w = s * (1.0 - s)
        return -np.einsum("k,ki,kj->kij", w, x, x)

    def d2psi(self, theta, rows):
        _, x = self.design(rows)
        k, d = x.shape
        s = _sigmoid(x @ np.asarray(theta))
        w = s * (1.0 - s) * (1.0 - 2.0 * s)
        return -np.einsum("k,ka,kj,kl->kajl", w, x, x, x).reshape(k, d, d * d)

    def loglik(self, theta, rows):
        """Per-record log-likelihood (used by derivative diagnostics)."""
        y, x = self.design(rows)
        t = x @ np.asarray(theta)
        return y * t - np.logaddexp(0.0, t)

    def random_record(self, rng):
        z = rng.normal(size=self.dim_z)
        z[0] = float(rng.integers(0, 2))
        return z


def eval_psi_sum(family: PsiFamily, rows: np.ndarray, theta: np.ndarray):
    """Block sums of the score and its Jacobian at ``theta``.

    Returns ``(sum_i psi, sum_i dpsi)``.  Non-finite intermediates are
    reported with the offending in-block record index.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (family.dim_theta,):
        raise ValueError(
            f"theta has shape {theta.shape}, family needs ({family.dim_theta},)"
        )
    psi = family.psi(theta, rows)
    dpsi = family.dpsi(theta, rows)
    for arr in (psi, dpsi):
        bad = ~np.isfinite(arr)
        if bad.any():
            i = int(np.argwhere(bad)[0][0])
            raise FloatingPointError(
                f"non-finite score evaluation at block record {i}"
            )
    return psi.sum(axis=0), dpsi.sum(axis=0)


_FAMILY_NAMES = ("mean", "meancov", "meancov-unbiased", "ols", "logistic")


def family_by_name(name: str, n_cols: int, intercept: bool = True) -> PsiFamily:
    """Construct a family for records of width ``n_cols``."""
    if name == "mean":
        return Mean(n_cols)
    if name == "meancov":
        return MeanCov(n_cols)
    if name == "meancov-unbiased":
        return MeanCovUnbiased(n_cols)
    if name == "ols":
        return LinearOLS(n_cols - 1, intercept=intercept)
    if name == "logistic":
        return LogisticMLE(n_cols - 1, intercept=intercept)
    raise ValueError(f"unknown family {name!r}; expected one of {_FAMILY_NAMES}")
