"""Monte Carlo harness: data-generating processes and replication metrics.

Each replication draws a fresh dataset, runs the subbagging estimator,
and records the estimate, its subbagging standard errors, interval
coverage, and the full-pass sandwich standard deviation evaluated at
the true parameter.  Campaigns are reproducible and shardable: the
r-th replication's seeds derive from ``SplitMix64(campaign_seed XOR r)``.

Per-coordinate metrics over R replications:

* ``bias``  mean estimate minus truth,
* ``sd``    standard deviation about the replication mean (divisor R),
* ``rmse``  ``sqrt(bias^2 + sd^2)``,
* ``asd``   averaged sandwich standard deviation,
* ``sse``   averaged subbagging standard error,
* ``cp``    empirical coverage of the nominal-level intervals,

plus ``sqrt(1 + 1/alpha)``-adjusted versions of ASD, SSE and CP for the
finite-aggregation regime.
"""

from __future__ import annotations

import os
import tempfile
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._normal import normal_quantile
from .aggregate import run_plan_estimates, sandwich_full, variance_estimate
from .data_source import ArraySource, open_source, write_f64_matrix
from .families import LinearOLS, LogisticMLE, Mean, PsiFamily
from .sampling import HyperParams, build_plan, splitmix64_sequence, substream_seed
from .solver import DEFAULT_CONFIG, SolveConfig

DGP_KINDS = ("logistic", "linear", "normal_mean")

_DEFAULT_THETA0 = {
    "logistic": (0.0, 1.0),
    "linear": (0.0, 1.0),
    "normal_mean": (0.0,),
}


@dataclass(frozen=True)
class DgpSpec:
    """A synthetic data-generating process."""

    kind: str
    n: int
    theta0: tuple[float, ...] = ()
    noise: float = 1.0

    def __post_init__(self):
        if self.kind not in DGP_KINDS:
            raise ValueError(f"kind must be one of {DGP_KINDS}, got {self.kind!r}")
        if self.n < 2:
            raise ValueError(f"n must be >= 2, got {self.n}")
        if not self.theta0:
            object.__setattr__(self, "theta0", _DEFAULT_THETA0[self.kind])
        object.__setattr__(self, "theta0", tuple(float(t) for t in self.theta0))

    @property
    def d(self) -> int:
        return len(self.theta0)

    def theta0_array(self) -> np.ndarray:
        return np.asarray(self.theta0, dtype=np.float64)


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def generate(dgp: DgpSpec, seed: int, spill_to: str | None = None):
    """Draw one dataset; optionally spill it to a f64-matrix file.

    Regression kinds emit records ``(y, x_1, ..., x_{d-1})`` with the
    intercept handled by the family; ``normal_mean`` emits raw
    ``N(theta0, I)`` records.
    """
    rng = np.random.default_rng(seed)
    theta0 = dgp.theta0_array()
    if dgp.kind == "normal_mean":
        data = theta0 + rng.standard_normal((dgp.n, dgp.d))
    else:
        x = rng.standard_normal((dgp.n, dgp.d - 1))
        lin = theta0[0] + x @ theta0[1:]
        if dgp.kind == "logistic":
            y = (rng.random(dgp.n) < _sigmoid(lin)).astype(np.float64)
        else:
            y = lin + dgp.noise * rng.standard_normal(dgp.n)
        data = np.column_stack([y, x])
    if spill_to is None:
        return ArraySource(data)
    write_f64_matrix(spill_to, data)
    return open_source(spill_to, "f64-matrix")


def family_for(dgp: DgpSpec) -> PsiFamily:
    """The canonical estimating family for each process."""
    if dgp.kind == "logistic":
        return LogisticMLE(dgp.d - 1, intercept=True)
    if dgp.kind == "linear":
        return LinearOLS(dgp.d - 1, intercept=True)
    return Mean(dgp.d)


@dataclass
class McMetrics:
    """Per-coordinate summary of a replication campaign."""

    theta0: np.ndarray
    replications: int
    alpha: float
    bias: np.ndarray
    sd: np.ndarray
    rmse: np.ndarray
    asd: np.ndarray
    sse: np.ndarray
    cp: np.ndarray
    alpha_adjusted_asd: np.ndarray
    alpha_adjusted_sse: np.ndarray
    alpha_adjusted_cp: np.ndarray
    estimates: np.ndarray  # (R, d)
    sse_per_rep: np.ndarray  # (R, d)
    failed_subsamples: int = 0

    def as_rows(self) -> list[tuple[str, int, float]]:
        """(metric, coordinate, value) rows in table order."""
        rows = []
        names = [
            ("bias", self.bias), ("sd", self.sd), ("rmse", self.rmse),
            ("asd", self.asd), ("alpha_adjusted_asd", self.alpha_adjusted_asd),
            ("sse", self.sse), ("alpha_adjusted_sse", self.alpha_adjusted_sse),
            ("cp", self.cp), ("alpha_adjusted_cp", self.alpha_adjusted_cp),
        ]
        for name, arr in names:
            for j, v in enumerate(arr):
                rows.append((name, j, float(v)))
        return rows


def _replication_seeds(campaign_seed: int, r: int) -> tuple[int, int]:
    """(data_seed, plan_seed) for replication r."""
    rep_seed = substream_seed(campaign_seed, r)
    a, b = splitmix64_sequence(rep_seed, 2)
    return a, b


def _run_one(args):
    (dgp, family, hyper, modes, config, r, campaign_seed, ci_level,
     spill, skip_failed, compute_asd) = args
    data_seed, plan_seed = _replication_seeds(campaign_seed, r)
    tmp = None
    try:
        if spill:
            tmp = tempfile.NamedTemporaryFile(suffix=".sbm", delete=False)
            tmp.close()
            source = generate(dgp, data_seed, spill_to=tmp.name)
        else:
            source = generate(dgp, data_seed)
        plan = build_plan(source.n_rows, hyper, plan_seed)
        by_mode, ok, _ = run_plan_estimates(
            source, family, plan, modes, config, skip_failed=skip_failed
        )
        failed = int((~ok).sum())
        d = family.dim_theta
        theta = np.full((len(modes), d), np.nan)
        sse = np.full((len(modes), d), np.nan)
        for mi, mode in enumerate(modes):
            retained = by_mode[mode][ok]
            theta_bar = retained.mean(axis=0)
            theta[mi] = theta_bar
            if retained.shape[0] >= 2:
                omega = variance_estimate(retained, theta_bar)
                sse[mi] = np.sqrt(hyper.k_n * np.diag(omega) / source.n_rows)
        asd = np.full(d, np.nan)
        if compute_asd:
            xi = sandwich_full(source, family, dgp.theta0_array())
            asd = xi.asd(source.n_rows)
        return r, theta, sse, asd, failed
    finally:
        if tmp is not None:
            os.unlink(tmp.name)


def run_replications(
    dgp: DgpSpec,
    hyper: HyperParams,
    bc_mode="none",
    reps: int = 100,
    campaign_seed: int = 0,
    workers: int = 1,
    ci_level: float = 0.95,
    config: SolveConfig = DEFAULT_CONFIG,
    spill: bool = False,
    skip_failed: bool = False,
    compute_asd: bool = True,
    family: PsiFamily | None = None,
):
    """Run a replication campaign; returns McMetrics (or a dict per mode).

    ``bc_mode`` may be a single mode or a sequence of modes; a sequence
    shares each replication's dataset, plan and plain solve across
    modes, which both saves work and pairs the estimates seed-by-seed.
    """
    if reps < 2:
        raise ValueError("need at least 2 replications")
    single = isinstance(bc_mode, str)
    modes = [bc_mode] if single else list(bc_mode)
    if family is None:
        family = family_for(dgp)

    theta_all = np.full((reps, len(modes), family.dim_theta), np.nan)
    sse_all = np.full((reps, len(modes), family.dim_theta), np.nan)
    asd_all = np.full((reps, family.dim_theta), np.nan)
    failed_total = 0

    tasks = [
        (dgp, family, hyper, modes, config, r, campaign_seed, ci_level,
         spill, skip_failed, compute_asd)
        for r in range(reps)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_run_one, tasks, chunksize=max(1, reps // (8 * workers)))
            for r, theta, sse, asd, failed in results:
                theta_all[r], sse_all[r], asd_all[r] = theta, sse, asd
                failed_total += failed
    else:
        for task in tasks:
            r, theta, sse, asd, failed = _run_one(task)
            theta_all[r], sse_all[r], asd_all[r] = theta, sse, asd
            failed_total += failed

    theta0 = dgp.theta0_array()
    z = normal_quantile(0.5 * (1.0 + ci_level))
    adjust = float(np.sqrt(1.0 + 1.0 / hyper.alpha))
    out = {}
    for mi, mode in enumerate(modes):
        est = theta_all[:, mi, :]
        sse = sse_all[:, mi, :]
        bias = est.mean(axis=0) - theta0
        sd = est.std(axis=0)
        err = np.abs(est - theta0)
        with np.errstate(invalid="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            covered = np.where(np.isfinite(sse), (err <= z * sse).astype(float), np.nan)
            covered_adj = np.where(
                np.isfinite(sse), (err <= z * adjust * sse).astype(float), np.nan
            )
            cp = np.nanmean(covered, axis=0)
            cp_adj = np.nanmean(covered_adj, axis=0)
        out[mode] = McMetrics(
            theta0=theta0,
            replications=reps,
            alpha=hyper.alpha,
            bias=bias,
            sd=sd,
            rmse=np.sqrt(bias**2 + sd**2),
            asd=asd_all.mean(axis=0),
            sse=sse.mean(axis=0),
            cp=cp,
            alpha_adjusted_asd=adjust * asd_all.mean(axis=0),
            alpha_adjusted_sse=adjust * sse.mean(axis=0),
            alpha_adjusted_cp=cp_adj,
            estimates=est,
            sse_per_rep=sse,
            failed_subsamples=failed_total,
        )
    return out[modes[0]] if single else out
