"""Random-lot stability shelf-life inference and simulation laboratory.

Bounded-REML linear mixed models for stability data, EBLUP conditional-mean
lower confidence limits under containment / Satterthwaite denominator degrees
of freedom, comparator analysis workflows, known-parameter benchmarks, and a
Monte Carlo operating-characteristics engine.
"""

from stablab.data import DataError, StabilityDataset, parse_dataset, read_table, write_table
from stablab.lmm import (
    ConvergenceError,
    DesignMatrices,
    FitResult,
    ModelSpec,
    PredictionRow,
    Theta,
    asycov,
    build_design,
    fit_at_theta,
    fit_reml,
    mme_solve,
    predict,
    reml_criterion,
)
from stablab.numcore import RngStream, matrix_rank, mvn_all_above, normal_quantile, rng_normal, t_quantile
from stablab.workflows import METHOD_LABELS, WorkflowResult, analyze

__all__ = [
    "DataError",
    "StabilityDataset",
    "parse_dataset",
    "read_table",
    "write_table",
    "ConvergenceError",
    "DesignMatrices",
    "FitResult",
    "ModelSpec",
    "PredictionRow",
    "Theta",
    "asycov",
    "build_design",
    "fit_at_theta",
    "fit_reml",
    "mme_solve",
    "predict",
    "reml_criterion",
    "RngStream",
    "matrix_rank",
    "mvn_all_above",
    "normal_quantile",
    "rng_normal",
    "t_quantile",
    "METHOD_LABELS",
    "WorkflowResult",
    "analyze",
]

__version__ = "0.1.0"
