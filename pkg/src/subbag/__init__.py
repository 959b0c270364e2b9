"""Subbagging: memory-bounded subsample-aggregating estimation.

Draws many small uniform subsamples from a dataset too large to load,
solves an estimating-equation system on each, and aggregates the
subsample roots into an estimator with full-sample-rate accuracy,
together with variance estimates and confidence intervals computed
from the between-subsample spread.
"""

__version__ = "0.1.0"

from .aggregate import (
    AnticipateRow,
    ConfidenceIntervals,
    SandwichEstimate,
    SubbaggingResult,
    anticipate,
    confidence_intervals,
    sandwich_full,
    subbag,
    variance_estimate,
)
from .data_source import (
    ArraySource,
    ColumnMap,
    DataError,
    ExtractionStats,
    RecordBlock,
    RecordSource,
    convert_csv_to_f64,
    extract_blocks,
    open_source,
    write_f64_matrix,
)
from .families import (
    LinearOLS,
    LogisticMLE,
    Mean,
    MeanCov,
    MeanCovUnbiased,
    PsiFamily,
    elimination_matrix,
    eval_psi_sum,
    family_by_name,
    vech,
    vech_to_sym,
)
from .sampling import (
    HyperParams,
    SamplingPlan,
    build_plan,
    draw_sorted_srs,
    explicit_plan,
    select_hyperparams,
)
from .simulation import DgpSpec, McMetrics, family_for, generate, run_replications
from .solver import (
    NoClosedFormBiasError,
    NonConvergenceError,
    SingularJacobianError,
    SolveConfig,
    SolverError,
    SubsampleEstimate,
    b_hat,
    newton_solve,
    solve_bc,
    solve_with_modes,
    v2_hat,
    v_hat,
)

__all__ = [name for name in dir() if not name.startswith("_")]
