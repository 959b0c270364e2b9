"""Command-line interface.

Subcommands: ``estimate``, ``simulate``, ``sample``, ``anticipate``,
``convert`` and the exploratory ``diag``.  Exit codes: 0 success,
1 usage error, 2 data error, 3 numerical error.  Every document
written carries the fully resolved run configuration, so outputs are
reproducible byte for byte given the same arguments and input bytes
(wall-clock timings live in a separate ``timing`` field).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import __version__
from .aggregate import anticipate, sandwich_full, subbag
from .data_source import (
    DEFAULT_MEM_BUDGET,
    ColumnMap,
    DataError,
    convert_csv_to_f64,
    open_source,
)
from .diagnostics import derivative_check, population_moments, ustat_variance_check
from .families import family_by_name
from .sampling import build_plan, select_hyperparams
from .simulation import DgpSpec, run_replications
from .solver import SolveConfig, SolverError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split(",") if tok != "")


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.split(",") if tok != "")


def _add_input_args(p):
    p.add_argument("--input", required=True, help="path to the dataset")
    p.add_argument("--format", default="csv", choices=["csv", "f64-matrix"])
    p.add_argument("--response", type=int, default=None, help="response column index")
    p.add_argument("--features", type=_int_list, default=None, help="feature column indices")
    p.add_argument("--raw", type=_int_list, default=None, help="raw column indices")
    p.add_argument("--no-intercept", action="store_true")


def _add_hyper_args(p):
    p.add_argument("--algorithm", default="1", choices=["1", "2"])
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--delta-k", type=float, default=0.0)
    p.add_argument("--delta-m", type=float, default=0.0)
    p.add_argument("--k-n", type=int, default=None, help="explicit subsample size")
    p.add_argument("--m-n", type=int, default=None, help="explicit subsample count")


def _add_solver_args(p):
    p.add_argument("--bc", default="none", choices=["none", "bc1", "bc2", "bc3"])
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--skip-failed", action="store_true")


def build_parser() -> _Parser:
    parser = _Parser(prog="subbag", description="Subsample-aggregating estimation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="run the subbagging estimator on a dataset")
    _add_input_args(p)
    p.add_argument("--family", required=True,
                   choices=["mean", "meancov", "meancov-unbiased", "ols", "logistic"])
    _add_hyper_args(p)
    _add_solver_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--mem-budget", type=int, default=DEFAULT_MEM_BUDGET,
                   help="extraction buffer budget in bytes")
    p.add_argument("--ci-level", type=float, default=0.95)
    p.add_argument("--out", default=None, help="output path (default stdout)")

    p = sub.add_parser("sample", help="emit a sampling plan as csv")
    p.add_argument("--n-total", type=int, default=None)
    p.add_argument("--input", default=None, help="dataset whose row count to use")
    p.add_argument("--format", default="csv", choices=["csv", "f64-matrix"])
    _add_hyper_args(p)
    p.add_argument("--biased", action="store_true",
                   help="size k_n by the exponent rule for biased estimators")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("simulate", help="Monte Carlo replication campaign")
    p.add_argument("--dgp", required=True, choices=["logistic", "linear", "normal-mean"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--theta0", type=_float_list, default=None)
    p.add_argument("--noise", type=float, default=1.0)
    _add_hyper_args(p)
    _add_solver_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--spill", action="store_true",
                   help="route each replication through a temporary f64-matrix file")
    p.add_argument("--ci-level", type=float, default=0.95)
    p.add_argument("--out", default=None, help="metrics csv path (default stdout)")
    p.add_argument("--json-out", default=None, help="also write metrics as json")

    p = sub.add_parser("anticipate", help="project SEs and time from an alpha=0.01 pilot")
    _add_input_args(p)
    p.add_argument("--family", required=True,
                   choices=["mean", "meancov", "meancov-unbiased", "ols", "logistic"])
    p.add_argument("--k-n", type=int, required=True)
    p.add_argument("--alphas", type=_float_list,
                   default=(0.01, 0.02, 0.04, 0.1, 0.2, 0.3, 0.4, 0.6, 0.8, 1.0))
    _add_solver_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--mem-budget", type=int, default=DEFAULT_MEM_BUDGET)
    p.add_argument("--out", default=None)

    p = sub.add_parser("convert", help="convert csv to the f64-matrix format")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--columns", type=_int_list, default=None)

    p = sub.add_parser("diag", help=argparse.SUPPRESS)
    p.add_argument("--what", required=True, choices=["moments", "ustat", "derivatives"])
    p.add_argument("--family", default="logistic",
                   choices=["mean", "meancov", "meancov-unbiased", "ols", "logistic"])
    p.add_argument("--dgp", default="logistic", choices=["logistic", "linear", "normal-mean"])
    p.add_argument("--n-total", type=int, default=2000)
    p.add_argument("--k-n", type=int, default=40)
    p.add_argument("--m-n", type=int, default=50)
    p.add_argument("--mc-size", type=int, default=100_000)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    return parser


def _resolve_workers(args) -> int:
    if getattr(args, "workers", None) is not None:
        return max(1, args.workers)
    env = os.environ.get("SUBBAG_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise _UsageError(f"SUBBAG_WORKERS={env!r} is not an integer") from None
    return max(1, os.cpu_count() or 1)


def _column_map(args) -> ColumnMap | None:
    if args.response is not None:
        return ColumnMap(response=args.response, features=args.features or ())
    if args.raw is not None:
        return ColumnMap(raw=args.raw)
    return None


def _emit(text: str, out_path: str | None) -> None:
    if out_path is None:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
    else:
        with open(out_path, "w", encoding="utf-8") as f:
            f.write(text)


def _json_document(config: dict, result: dict, timing: dict | None = None) -> str:
    doc = {"config": config, "result": result}
    if timing is not None:
        doc["timing"] = timing
    return json.dumps(doc, indent=2, sort_keys=True)


def _resolved_hyper(args, n_total: int, family=None, bc: str = "none"):
    biased = True
    if family is not None:
        biased = not family.is_unbiased
    algorithm = "alg1" if args.algorithm == "1" else "alg2"
    return select_hyperparams(
        n_total,
        algorithm=algorithm,
        alpha=args.alpha,
        delta_k=args.delta_k,
        delta_m=args.delta_m,
        estimator_is_biased=biased,
        k_n=args.k_n,
        m_n=args.m_n,
    )


def _hyper_dict(hyper) -> dict:
    return {
        "k_n": hyper.k_n, "m_n": hyper.m_n, "alpha": hyper.alpha,
        "delta_k": hyper.delta_k, "delta_m": hyper.delta_m,
        "algorithm": hyper.algorithm, "clamped": hyper.clamped,
    }


def _cmd_estimate(args) -> int:
    cmap = _column_map(args)
    source = open_source(args.input, args.format, cmap)
    family = family_by_name(args.family, source.n_cols, intercept=not args.no_intercept)
    hyper = _resolved_hyper(args, source.n_rows, family, args.bc)
    config = SolveConfig(max_iter=args.max_iter, tol=args.tol)
    workers = _resolve_workers(args)
    result = subbag(
        source, family, hyper,
        bc_mode=args.bc, master_seed=args.seed, workers=workers,
        config=config, skip_failed=args.skip_failed,
        mem_budget=args.mem_budget, ci_level=args.ci_level,
        keep_estimates=False,
    )
    config_doc = {
        "command": "estimate", "input": args.input, "format": args.format,
        "family": args.family, "intercept": not args.no_intercept,
        "column_map": {
            "response": source.column_map.response,
            "features": list(source.column_map.features),
            "raw": list(source.column_map.raw),
        },
        "hyper": _hyper_dict(hyper), "bc_mode": args.bc, "seed": args.seed,
        "workers": workers, "mem_budget": args.mem_budget,
        "tol": args.tol, "max_iter": args.max_iter,
        "skip_failed": args.skip_failed, "ci_level": args.ci_level,
        "n_total": source.n_rows,
    }
    result_doc = {
        "theta": result.theta_bar.tolist(),
        "omega": result.omega.ravel().tolist(),
        "sse": result.sse.tolist(),
        "sse_adjusted": result.sse_adjusted.tolist(),
        "ci": {
            "level": result.ci.level,
            "basis": result.ci.basis,
            "lower": result.ci.lower.tolist(),
            "upper": result.ci.upper.tolist(),
        },
        "failed_subsamples": result.failed_subsamples,
    }
    _emit(_json_document(config_doc, result_doc, result.wall_times), args.out)
    return EXIT_OK


def _cmd_sample(args) -> int:
    if (args.n_total is None) == (args.input is None):
        raise _UsageError("give exactly one of --n-total or --input")
    n_total = args.n_total
    if args.input is not None:
        n_total = open_source(args.input, args.format).n_rows
    hyper = select_hyperparams(
        n_total,
        algorithm="alg1" if args.algorithm == "1" else "alg2",
        alpha=args.alpha, delta_k=args.delta_k, delta_m=args.delta_m,
        estimator_is_biased=args.biased, k_n=args.k_n, m_n=args.m_n,
    )
    plan = build_plan(n_total, hyper, args.seed)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["subsample_id", "position", "row_index"])
    for sid in range(plan.m_n):
        for pos, idx in enumerate(plan.subsamples[sid]):
            writer.writerow([sid, pos, int(idx)])
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def _cmd_simulate(args) -> int:
    kind = args.dgp.replace("-", "_")
    dgp = DgpSpec(kind=kind, n=args.n, theta0=args.theta0 or (), noise=args.noise)
    from .simulation import family_for

    family = family_for(dgp)
    hyper = _resolved_hyper(args, args.n, family, args.bc)
    config = SolveConfig(max_iter=args.max_iter, tol=args.tol)
    metrics = run_replications(
        dgp, hyper, bc_mode=args.bc, reps=args.reps,
        campaign_seed=args.seed, workers=_resolve_workers(args),
        ci_level=args.ci_level, config=config, spill=args.spill,
        skip_failed=args.skip_failed,
    )
    config_doc = {
        "command": "simulate", "dgp": kind, "n": args.n, "reps": args.reps,
        "theta0": list(dgp.theta0), "noise": args.noise,
        "hyper": _hyper_dict(hyper), "bc_mode": args.bc, "seed": args.seed,
        "ci_level": args.ci_level, "spill": args.spill,
        "skip_failed": args.skip_failed,
    }
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "coordinate", "value"])
    for metric, coord, value in metrics.as_rows():
        writer.writerow([metric, coord, repr(value)])
    _emit(buf.getvalue(), args.out)
    if args.json_out is not None:
        doc = {
            "config": config_doc,
            "metrics": {
                name: getattr(metrics, name).tolist()
                for name in (
                    "bias", "sd", "rmse", "asd", "sse", "cp",
                    "alpha_adjusted_asd", "alpha_adjusted_sse", "alpha_adjusted_cp",
                )
            },
            "replications": metrics.replications,
            "failed_subsamples": metrics.failed_subsamples,
        }
        with open(args.json_out, "w", encoding="utf-8") as f:
            f.write(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_anticipate(args) -> int:
    cmap = _column_map(args)
    source = open_source(args.input, args.format, cmap)
    family = family_by_name(args.family, source.n_cols, intercept=not args.no_intercept)
    pilot_m = int(0.01 * source.n_rows / args.k_n)
    if pilot_m < 2:
        raise DataError(
            f"alpha=0.01 pilot draws only {pilot_m} subsample(s) at k_n={args.k_n}; "
            "the dataset is too small for this pilot, use a larger pilot alpha"
        )
    pilot = select_hyperparams(
        source.n_rows, algorithm="alg1", alpha=0.01, delta_k=0.0, delta_m=0.0,
        estimator_is_biased=not family.is_unbiased, k_n=args.k_n,
    )
    config = SolveConfig(max_iter=args.max_iter, tol=args.tol)
    rows, _ = anticipate(
        source, family, pilot, args.seed, args.alphas, bc_mode=args.bc,
        workers=_resolve_workers(args), config=config,
        skip_failed=args.skip_failed, mem_budget=args.mem_budget,
        keep_estimates=False,
    )
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["alpha", "coord", "sse_adjusted", "sse_full", "anticipated_seconds"])
    for row in rows:
        writer.writerow([
            repr(row.alpha), row.coord, repr(row.sse_adjusted),
            repr(row.sse_full), repr(row.anticipated_seconds),
        ])
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def _cmd_convert(args) -> int:
    n_rows, n_cols = convert_csv_to_f64(args.input, args.out, args.columns)
    sys.stdout.write(f"wrote {n_rows} rows x {n_cols} cols to {args.out}\n")
    return EXIT_OK


def _cmd_diag(args) -> int:
    if args.what == "derivatives":
        family = family_by_name(args.family, 2 if args.family in ("ols", "logistic") else 2)
        report = derivative_check(family, trials=args.trials, seed=args.seed)
        doc = {
            "what": "derivatives", "family": args.family,
            "passed": report.passed, "trials": report.trials,
            "max_rel_dpsi": report.max_rel_dpsi,
            "max_rel_d2psi": report.max_rel_d2psi,
            "failures": list(report.failures),
        }
    elif args.what == "ustat":
        diag = ustat_variance_check(
            args.n_total, args.k_n, args.m_n, mc_size=min(args.mc_size, 5000),
            seed=args.seed,
        )
        doc = {
            "what": "ustat", "n": args.n_total, "k_n": args.k_n, "m_n": args.m_n,
            "zeta_1": diag.zeta_1, "zeta_k": diag.zeta_k,
            "zeta_1_mc": diag.zeta_1_mc, "zeta_k_mc": diag.zeta_k_mc,
            "a_n": diag.a_n, "predicted_var": diag.predicted_var,
            "empirical_var": diag.empirical_var, "ratio": diag.ratio,
        }
    else:
        kind = args.dgp.replace("-", "_")
        dgp = DgpSpec(kind=kind, n=max(args.mc_size, 10_000))
        from .simulation import family_for

        family = family_for(dgp)
        moments = population_moments(family, dgp, mc_size=max(args.mc_size, 10_000),
                                     seed=args.seed)
        doc = {
            "what": "moments", "dgp": kind,
            "sigma": moments.sigma.tolist(), "v": moments.v.tolist(),
            "v2": moments.v2.tolist(), "h": moments.h.tolist(),
            "b": moments.b.tolist(), "xi": moments.xi.tolist(),
        }
    _emit(json.dumps(doc, indent=2, sort_keys=True), args.out)
    return EXIT_OK


_COMMANDS = {
    "estimate": _cmd_estimate,
    "sample": _cmd_sample,
    "simulate": _cmd_simulate,
    "anticipate": _cmd_anticipate,
    "convert": _cmd_convert,
    "diag": _cmd_diag,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except (ValueError,) as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except DataError as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    except (SolverError, np.linalg.LinAlgError, FloatingPointError) as exc:
        sys.stderr.write(f"numerical error: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
