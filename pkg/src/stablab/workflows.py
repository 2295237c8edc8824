"""The six analysis approaches compared in the study.

OLS (pooled regression), FIXED (fixed-lot ANCOVA with p >= 0.25 step-down
pooling), CONTAIN and SAT (mixed model under the two DDF methods), and the
two SAT-only mitigation workflows: SAT_reduced (10% variance-contribution
reduction) and SAT_AICc (AICc step-down among the three candidate models).
Each maps a dataset to prediction rows plus a decision summary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from stablab import ddf as ddfmod
from stablab.data import StabilityDataset
from stablab.decision import DecisionSummary, summarize_decision
from stablab.lmm import (
    OLS,
    RI,
    RIS,
    FitResult,
    ModelSpec,
    PredictionRow,
    build_design,
    fit_reml,
    predict,
)
from stablab.numcore import f_sf, t_quantile

__all__ = [
    "METHOD_LABELS",
    "TraceStep",
    "WorkflowResult",
    "AnalysisContext",
    "analyze",
    "analyze_mixed",
    "analyze_ols",
    "analyze_fixed_q1e",
    "analyze_sat_reduced",
    "analyze_sat_aicc",
    "aicc_value",
    "reduce_random_structure",
    "slope_contribution_at",
    "intercept_contribution_at",
]

METHOD_LABELS = ("OLS", "FIXED", "CONTAIN", "SAT", "SAT_reduced", "SAT_AICc")


@dataclass(frozen=True)
class TraceStep:
    """A step-down rule that fired: rule name, statistic, threshold."""

    rule: str
    statistic: float
    threshold: float


@dataclass(frozen=True)
class WorkflowResult:
    method_label: str
    final_model: str                 # "ris" | "ri" | "ols" | "fixed:<form>"
    reduction_trace: tuple[TraceStep, ...]
    predictions: tuple[PredictionRow, ...]
    decision: DecisionSummary


def slope_contribution_at(theta, t_star: float) -> float:
    """Random-slope share of the marginal variance at t_star (full model)."""
    b0 = theta.sigma2_b0 or 0.0
    b1 = theta.sigma2_b1 or 0.0
    return t_star ** 2 * b1 / (b0 + t_star ** 2 * b1 + theta.sigma2_e)


def intercept_contribution_at(theta, t_star: float) -> float:
    """Random-intercept share of the marginal variance at t_star."""
    b0 = theta.sigma2_b0 or 0.0
    b1 = theta.sigma2_b1 or 0.0
    return b0 / (b0 + t_star ** 2 * b1 + theta.sigma2_e)


def aicc_value(fit: FitResult) -> float:
    """Small-sample corrected information criterion on the REML scale.

    d counts the covariance parameters of the declared model (3, 2, 1 for
    the full, intercept-only, and pooled models) and the effective sample
    size is n - p; identical fixed effects keep values comparable across
    the candidate set.
    """
    d = fit.spec.n_cov_params
    nstar = fit.n - fit.p
    if nstar <= d + 1:
        raise ValueError(f"effective sample size {nstar} too small for d={d}")
    return -2.0 * fit.reml_loglik + 2.0 * d + 2.0 * d * (d + 1) / (nstar - d - 1)


class AnalysisContext:
    """Lazy per-dataset cache of fits shared across analysis methods."""

    def __init__(self, ds: StabilityDataset, t_star: float = 48.0,
                 alpha: float = 0.05, grid=None):
        self.ds = ds
        self.t_star = float(t_star)
        self.alpha = float(alpha)
        if grid is None:
            grid = ds.scheduled_months()
        # the expiry month is always scored
        self.grid = tuple(sorted({float(g) for g in grid} | {self.t_star}))
        self._fits: dict[str, FitResult] = {}
        self._y = ds.values

    def fit(self, kind: str) -> FitResult:
        if kind not in self._fits:
            design = build_design(self.ds, ModelSpec(kind))
            self._fits[kind] = fit_reml(design, self._y, compute_asycov=(kind != OLS))
        return self._fits[kind]

    # -- row builders -----------------------------------------------------

    def mixed_rows(self, fit: FitResult, ddf_method: str) -> tuple[PredictionRow, ...]:
        lots = fit.lot_levels()
        targets = [(lot, m, "conditional") for lot in lots for m in self.grid]
        if ddf_method == ddfmod.CONTAIN:
            nu = float(ddfmod.containment_ddf(fit.design))
            nus = [nu] * len(targets)
        elif ddf_method == ddfmod.SAT:
            reports = ddfmod.satterthwaite_ddf_batch(fit, targets)
            nus = [r.nu for r in reports]
        else:
            raise ValueError(f"unknown mixed-model ddf method {ddf_method!r}")
        return tuple(predict(fit, lot, m, "conditional", self.alpha, nu)
                     for (lot, m, _), nu in zip(targets, nus))

    def ols_rows(self) -> tuple[PredictionRow, ...]:
        fit = self.fit(OLS)
        nu = float(fit.n - 2)
        lots = self.ds.lot_levels
        return tuple(predict(fit, lot, m, "conditional", self.alpha, nu)
                     for lot in lots for m in self.grid)


def _result(ctx: AnalysisContext, label: str, final_model: str, trace,
            rows) -> WorkflowResult:
    decision = summarize_decision(label, rows, ctx.ds.lsl, ctx.t_star)
    return WorkflowResult(method_label=label, final_model=final_model,
                          reduction_trace=tuple(trace), predictions=tuple(rows),
                          decision=decision)


def analyze_mixed(ds: StabilityDataset, ddf_method: str,
                  spec: ModelSpec = ModelSpec(RIS), t_star: float = 48.0,
                  alpha: float = 0.05, grid=None,
                  ctx: AnalysisContext | None = None) -> WorkflowResult:
    """Mixed-model workflow: fit, conditional predictions, chosen DDF."""
    ctx = ctx or AnalysisContext(ds, t_star, alpha, grid)
    fit = ctx.fit(spec.kind)
    rows = ctx.mixed_rows(fit, ddf_method)
    return _result(ctx, ddf_method, spec.kind, (), rows)


def analyze_ols(ds: StabilityDataset, t_star: float = 48.0, alpha: float = 0.05,
                grid=None, ctx: AnalysisContext | None = None) -> WorkflowResult:
    """Pooled regression: the same mean-line limit applies to every lot."""
    ctx = ctx or AnalysisContext(ds, t_star, alpha, grid)
    return _result(ctx, "OLS", OLS, (), ctx.ols_rows())


def reduce_random_structure(ctx: AnalysisContext, fit_ris: FitResult,
                            t_star: float):
    """10% variance-contribution step-down from the full random model.

    Drops the random slope when its fitted contribution to the marginal
    variance at t_star is below 0.10, then drops the random intercept from
    the refit on the same rule. Boundary-zero components contribute 0, so
    the rule fires for them.
    """
    trace: list[TraceStep] = []
    p_b1 = slope_contribution_at(fit_ris.theta_hat, t_star)
    if p_b1 >= 0.10:
        return ModelSpec(RIS), trace
    trace.append(TraceStep("drop_random_slope", p_b1, 0.10))
    fit_ri = ctx.fit(RI)
    p_b0 = fit_ri.theta_hat.vcfrac()
    if p_b0 >= 0.10:
        return ModelSpec(RI), trace
    trace.append(TraceStep("drop_random_intercept", p_b0, 0.10))
    return ModelSpec(OLS), trace


def analyze_sat_reduced(ds: StabilityDataset, t_star: float = 48.0,
                        alpha: float = 0.05, grid=None,
                        ctx: AnalysisContext | None = None) -> WorkflowResult:
    ctx = ctx or AnalysisContext(ds, t_star, alpha, grid)
    fit_ris = ctx.fit(RIS)
    final_spec, trace = reduce_random_structure(ctx, fit_ris, ctx.t_star)
    if final_spec.kind == OLS:
        rows = ctx.ols_rows()
    else:
        rows = ctx.mixed_rows(ctx.fit(final_spec.kind), ddfmod.SAT)
    return _result(ctx, "SAT_reduced", final_spec.kind, trace, rows)


def analyze_sat_aicc(ds: StabilityDataset, t_star: float = 48.0,
                     alpha: float = 0.05, grid=None,
                     ctx: AnalysisContext | None = None) -> WorkflowResult:
    """AICc step-down among the three candidates, then SAT or OLS limits."""
    ctx = ctx or AnalysisContext(ds, t_star, alpha, grid)
    fits = {kind: ctx.fit(kind) for kind in (RIS, RI, OLS)}
    aiccs = {kind: aicc_value(fit) for kind, fit in fits.items()}
    # ties prefer fewer covariance parameters
    winner = min(aiccs, key=lambda k: (aiccs[k], fits[k].spec.n_cov_params))
    trace: list[TraceStep] = []
    if winner != RIS:
        trace.append(TraceStep(f"aicc_select_{winner}",
                               aiccs[winner] - aiccs[RIS], 0.0))
    if winner == OLS:
        rows = ctx.ols_rows()
    else:
        rows = ctx.mixed_rows(fits[winner], ddfmod.SAT)
    return _result(ctx, "SAT_AICc", winner, trace, rows)


# -- fixed-lot (Q1E-style) comparator -------------------------------------

def _lstsq_rss(X: np.ndarray, y: np.ndarray):
    beta, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    rss = float(np.sum((y - X @ beta) ** 2))
    return beta, rss, rank


def _fixed_designs(ds: StabilityDataset):
    t = ds.months
    idx = ds.lot_index()
    L = len(ds.lot_levels)
    ind = np.zeros((ds.n, L))
    ind[np.arange(ds.n), idx] = 1.0
    X_sep = np.hstack([ind, ind * t[:, None]])          # lot + lot-by-time
    X_common = np.hstack([ind, t[:, None]])             # lot + common slope
    X_pooled = np.column_stack([np.ones(ds.n), t])      # pooled regression
    return X_sep, X_common, X_pooled


def analyze_fixed_q1e(ds: StabilityDataset, t_star: float = 48.0,
                      alpha: float = 0.05, grid=None,
                      ctx: AnalysisContext | None = None) -> WorkflowResult:
    """Fixed-lot ANCOVA with sequential poolability testing at p >= 0.25.

    Slope pooling is tested first (lot-by-time against a common slope), then
    intercept pooling against pooled regression. The decision uses the worst
    lot's limits from the final model.
    """
    ctx = ctx or AnalysisContext(ds, t_star, alpha, grid)
    y = ds.values
    L = len(ds.lot_levels)
    n = ds.n
    X_sep, X_common, X_pooled = _fixed_designs(ds)

    beta_sep, rss_sep, rank_sep = _lstsq_rss(X_sep, y)
    if rank_sep < 2 * L:
        raise ValueError("fixed-lot model rank failure: a lot has fewer than "
                         "2 distinct time points under unpooled slopes")
    beta_common, rss_common, rank_common = _lstsq_rss(X_common, y)
    beta_pooled, rss_pooled, _ = _lstsq_rss(X_pooled, y)

    trace: list[TraceStep] = []
    df_sep = n - 2 * L
    f_slope = ((rss_common - rss_sep) / (L - 1)) / (rss_sep / df_sep)
    p_slope = f_sf(f_slope, L - 1, df_sep)
    if p_slope >= 0.25:
        trace.append(TraceStep("pool_slopes", p_slope, 0.25))
        df_common = n - (L + 1)
        f_int = ((rss_pooled - rss_common) / (L - 1)) / (rss_common / df_common)
        p_int = f_sf(f_int, L - 1, df_common)
        if p_int >= 0.25:
            trace.append(TraceStep("pool_intercepts", p_int, 0.25))
            form, X, beta, rss = "pooled", X_pooled, beta_pooled, rss_pooled
        else:
            form, X, beta, rss = "common_slope", X_common, beta_common, rss_common
    else:
        form, X, beta, rss = "separate", X_sep, beta_sep, rss_sep

    df_resid = n - X.shape[1]
    s2 = rss / df_resid
    XtX_inv = np.linalg.inv(X.T @ X)
    tcrit = t_quantile(1.0 - alpha, df_resid)

    def lot_row(lot_idx: int, month: float) -> np.ndarray:
        if form == "pooled":
            return np.array([1.0, month])
        x = np.zeros(X.shape[1])
        x[lot_idx] = 1.0
        if form == "common_slope":
            x[L] = month
        else:
            x[L + lot_idx] = month
        return x

    rows = []
    for lot_idx, lot in enumerate(ds.lot_levels):
        for m in ctx.grid:
            x = lot_row(lot_idx, m)
            pred = float(x @ beta)
            se = math.sqrt(s2 * float(x @ XtX_inv @ x))
            rows.append(PredictionRow(lot_id=lot, month=m, pred=pred, se_pred=se,
                                      ddf=float(df_resid), lcl=pred - tcrit * se,
                                      kind="conditional", alpha=alpha))
    return _result(ctx, "FIXED", f"fixed:{form}", trace, rows)


_DISPATCH = {
    "OLS": lambda ds, **kw: analyze_ols(ds, **kw),
    "FIXED": lambda ds, **kw: analyze_fixed_q1e(ds, **kw),
    "CONTAIN": lambda ds, **kw: analyze_mixed(ds, ddfmod.CONTAIN, **kw),
    "SAT": lambda ds, **kw: analyze_mixed(ds, ddfmod.SAT, **kw),
    "SAT_reduced": lambda ds, **kw: analyze_sat_reduced(ds, **kw),
    "SAT_AICc": lambda ds, **kw: analyze_sat_aicc(ds, **kw),
}


def analyze(ds: StabilityDataset, method: str, t_star: float = 48.0,
            alpha: float = 0.05, grid=None,
            ctx: AnalysisContext | None = None) -> WorkflowResult:
    """Run one of the named analysis approaches on a dataset."""
    if method not in _DISPATCH:
        raise ValueError(f"unknown method {method!r}; choose from {METHOD_LABELS}")
    return _DISPATCH[method](ds, t_star=t_star, alpha=alpha, grid=grid, ctx=ctx)
