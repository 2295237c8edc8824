"""Monte Carlo engine for the operating-characteristic studies.

Generates balanced random-intercept datasets over a grid of true lot
variance fractions and aggregates margin/DDF behavior, boundary frequencies,
pointwise coverage, and proposed-expiry decision rates for the analysis
methods. Replicates are keyed by counter-based random streams, so results
are identical regardless of worker count or scheduling.
"""

from __future__ import annotations

import math
import multiprocessing
from dataclasses import dataclass

import numpy as np

from stablab import ddf as ddfmod
from stablab.benchmark import BenchmarkInputs, benchmark_support_probability
from stablab.data import StabilityDataset
from stablab.lmm import (
    OLS,
    RI,
    RIS,
    ConvergenceError,
    ModelSpec,
    build_design,
    fit_reml,
)
from stablab.numcore import RngStream, t_quantile
from stablab.workflows import (
    METHOD_LABELS,
    AnalysisContext,
    aicc_value,
    analyze,
    intercept_contribution_at,
    slope_contribution_at,
)

__all__ = [
    "SimConfig",
    "GridResult",
    "simulate_dataset",
    "run_margin_df_grid",
    "summarize_boundary_frequencies",
    "run_coverage_grid",
    "run_decision_grid",
]

# stream namespaces per diagnostic so draws never collide across grids
_DIAG_BASE = {"margin": 1000, "table2": 2000, "coverage": 3000, "decision": 4000}

_FAILURE_KINDS = (ConvergenceError, ddfmod.SatUnavailable, np.linalg.LinAlgError)


@dataclass(frozen=True)
class SimConfig:
    """Simulation design; defaults reproduce the baseline study grid."""

    L: int = 10
    months: tuple[float, ...] = (0.0, 3.0, 6.0, 9.0, 12.0, 24.0, 36.0)
    beta0: float = 100.0
    crossing_month: float = 57.0
    lsl: float = 90.0
    sigma_tot2: float = 1.0
    vcfrac_grid: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    reps_margin: int = 200
    reps_table2: int = 500
    reps_coverage: int = 1500
    reps_decision: int = 2000
    t_star: float = 48.0
    alpha: float = 0.05
    seed: int = 12345

    def __post_init__(self):
        if self.L < 2:
            raise ValueError("need at least 2 lots")
        if len(set(self.months)) < 3:
            raise ValueError("need at least 3 distinct months")
        if any(not 0.0 <= v < 1.0 for v in self.vcfrac_grid):
            raise ValueError("vcfrac values must lie in [0, 1)")
        if self.crossing_month <= max(self.months):
            raise ValueError("crossing month must exceed the last pull")

    @property
    def beta1(self) -> float:
        return (self.lsl - self.beta0) / self.crossing_month

    def lot_labels(self) -> tuple[str, ...]:
        width = len(str(self.L))
        return tuple(f"L{i + 1:0{width}d}" for i in range(self.L))


@dataclass(frozen=True)
class GridResult:
    """Aggregated Monte Carlo rows for one diagnostic."""

    diagnostic: str
    rows: tuple[dict, ...]
    config: SimConfig


def _simulate_with_truth(config: SimConfig, vcfrac_true: float, stream: RngStream):
    rng = stream.generator()
    s2b = vcfrac_true * config.sigma_tot2
    s2e = (1.0 - vcfrac_true) * config.sigma_tot2
    b = math.sqrt(s2b) * rng.standard_normal(config.L)
    months = np.asarray(config.months, dtype=float)
    m = months.size
    eps = math.sqrt(s2e) * rng.standard_normal(config.L * m)
    t = np.tile(months, config.L)
    lot_idx = np.repeat(np.arange(config.L), m)
    y = config.beta0 + config.beta1 * t + b[lot_idx] + eps
    labels = config.lot_labels()
    lots = tuple(labels[i] for i in lot_idx)
    ds = StabilityDataset(lots, t, y, attribute_name="simulated", lsl=config.lsl)
    return ds, b


def simulate_dataset(config: SimConfig, vcfrac_true: float,
                     stream: RngStream) -> StabilityDataset:
    """One balanced dataset from the random-intercept generating process."""
    ds, _ = _simulate_with_truth(config, vcfrac_true, stream)
    return ds


def _stream(config: SimConfig, diag: str, setting_idx: int, rep: int) -> RngStream:
    return RngStream(config.seed, _DIAG_BASE[diag] + setting_idx, rep)


def _parallel(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) < 2:
        return [fn(t) for t in tasks]
    chunk = max(1, len(tasks) // (jobs * 8))
    with multiprocessing.Pool(processes=jobs) as pool:
        return pool.map(fn, tasks, chunksize=chunk)


# -- margin / DDF grid (random-intercept analysis model) -------------------

_MARGIN_METHODS = ("OLS", "CONTAIN", "SAT", "SAT_reduced", "SAT_AICc")


def _margin_worker(task):
    config, vcfrac, setting_idx, rep = task
    ds, _ = _simulate_with_truth(config, vcfrac, _stream(config, "margin", setting_idx, rep))
    months = sorted(set(config.months))
    lots = ds.lot_levels
    try:
        design_ri = build_design(ds, ModelSpec(RI))
        fit_ri = fit_reml(design_ri, ds.values)
        design_ols = build_design(ds, ModelSpec(OLS))
        fit_ols = fit_reml(design_ols, ds.values)

        nu_ols = float(fit_ols.n - 2)
        tcrit_ols = t_quantile(0.95, nu_ols)
        se_ols = np.array([math.sqrt(fit_ols.mme_inverse[0, 0]
                                     + 2 * m * fit_ols.mme_inverse[0, 1]
                                     + m * m * fit_ols.mme_inverse[1, 1])
                           for m in months])
        ols_margin = float(np.mean(tcrit_ols * se_ols))

        targets = [(lot, m, "conditional") for lot in lots for m in months]
        # containment: constant DDF, conditional standard errors from the fit
        nu_contain = float(ddfmod.containment_ddf(design_ri))
        lams_se = []
        for lot, m, _ in targets:
            lam = np.zeros(2 + fit_ri.active_cols.size)
            lam[0], lam[1] = 1.0, m
            for pos, col in enumerate(fit_ri.active_cols):
                if design_ri.z_lot[col] == lots.index(lot):
                    lam[2 + pos] = 1.0
            lams_se.append(math.sqrt(float(lam @ fit_ri.mme_inverse @ lam)))
        se_cond = np.array(lams_se)
        contain_margin = float(np.mean(t_quantile(0.95, nu_contain) * se_cond))

        sat_reports = ddfmod.satterthwaite_ddf_batch(fit_ri, targets)
        sat_nus = np.array([r.nu for r in sat_reports])
        sat_ses = np.sqrt(np.array([r.v_hat for r in sat_reports]))
        sat_margin = float(np.mean([t_quantile(0.95, nu) * se
                                    for nu, se in zip(sat_nus, sat_ses)]))
        sat_ddf = float(np.mean(sat_nus))

        vcfrac_hat = fit_ri.theta_hat.vcfrac()
        per_method = {
            "OLS": (ols_margin, nu_ols),
            "CONTAIN": (contain_margin, nu_contain),
            "SAT": (sat_margin, sat_ddf),
        }
        if vcfrac_hat < 0.10:
            per_method["SAT_reduced"] = per_method["OLS"]
        else:
            per_method["SAT_reduced"] = per_method["SAT"]
        if aicc_value(fit_ri) <= aicc_value(fit_ols):
            per_method["SAT_AICc"] = per_method["SAT"]
        else:
            per_method["SAT_AICc"] = per_method["OLS"]
        return (vcfrac, vcfrac_hat, per_method, None)
    except _FAILURE_KINDS as exc:
        return (vcfrac, np.nan, None, repr(exc))


def _fitted_bin(vcfrac_hat: float, n_bins: int = 20):
    if vcfrac_hat == 0.0:
        return (0.0, 0.0)
    k = min(int(vcfrac_hat * n_bins), n_bins - 1)
    return (k / n_bins, (k + 1) / n_bins)


def run_margin_df_grid(config: SimConfig, jobs: int = 1) -> GridResult:
    """Mean LCL margin and mean DDF per method, indexed both by the true and
    by the fitted lot variance fraction (random-intercept analysis model)."""
    tasks = [(config, v, i, r)
             for i, v in enumerate(config.vcfrac_grid)
             for r in range(config.reps_margin)]
    results = _parallel(_margin_worker, tasks, jobs)
    rows = []
    by_true: dict = {}
    by_bin: dict = {}
    failures: dict = {}
    for vcfrac, vcfrac_hat, per_method, err in results:
        if err is not None:
            failures[vcfrac] = failures.get(vcfrac, 0) + 1
            continue
        by_true.setdefault(vcfrac, []).append(per_method)
        by_bin.setdefault(_fitted_bin(vcfrac_hat), []).append(per_method)
    for vcfrac in config.vcfrac_grid:
        recs = by_true.get(vcfrac, [])
        for method in _MARGIN_METHODS:
            rows.append({
                "index_type": "vcfrac_true", "bin_low": vcfrac, "bin_high": vcfrac,
                "method": method,
                "mean_margin": float(np.mean([r[method][0] for r in recs])) if recs else math.nan,
                "mean_ddf": float(np.mean([r[method][1] for r in recs])) if recs else math.nan,
                "n_datasets": len(recs),
                "n_failed": failures.get(vcfrac, 0),
            })
    for (lo, hi) in sorted(by_bin):
        recs = by_bin[(lo, hi)]
        for method in _MARGIN_METHODS:
            rows.append({
                "index_type": "vcfrac_hat_bin", "bin_low": lo, "bin_high": hi,
                "method": method,
                "mean_margin": float(np.mean([r[method][0] for r in recs])),
                "mean_ddf": float(np.mean([r[method][1] for r in recs])),
                "n_datasets": len(recs),
                "n_failed": 0,
            })
    return GridResult("margin_ddf", tuple(rows), config)


# -- boundary-frequency table (full random-intercept-and-slope fit) --------

def _table2_worker(task):
    config, vcfrac, setting_idx, rep = task
    ds, _ = _simulate_with_truth(config, vcfrac, _stream(config, "table2", setting_idx, rep))
    try:
        design = build_design(ds, ModelSpec(RIS))
        fit = fit_reml(design, ds.values, compute_asycov=False)
        th = fit.theta_hat
        return (vcfrac, th.sigma2_b0 == 0.0, th.sigma2_b1 == 0.0,
                intercept_contribution_at(th, config.t_star),
                slope_contribution_at(th, config.t_star), None)
    except _FAILURE_KINDS as exc:
        return (vcfrac, None, None, None, None, repr(exc))


def summarize_boundary_frequencies(config: SimConfig, jobs: int = 1) -> GridResult:
    """Boundary frequencies and mean fitted variance contributions at t_star
    under the full random-intercept-and-slope fit."""
    tasks = [(config, v, i, r)
             for i, v in enumerate(config.vcfrac_grid)
             for r in range(config.reps_table2)]
    results = _parallel(_table2_worker, tasks, jobs)
    acc: dict = {v: [] for v in config.vcfrac_grid}
    failed: dict = {v: 0 for v in config.vcfrac_grid}
    for vcfrac, b0z, b1z, p0, p1, err in results:
        if err is not None:
            failed[vcfrac] += 1
        else:
            acc[vcfrac].append((b0z, b1z, p0, p1))
    rows = []
    for v in config.vcfrac_grid:
        recs = acc[v]
        rows.append({
            "vcfrac_true": v,
            "p_sigma2_b0_zero": float(np.mean([r[0] for r in recs])) if recs else math.nan,
            "p_sigma2_b1_zero": float(np.mean([r[1] for r in recs])) if recs else math.nan,
            "mean_p_b0_tstar": float(np.mean([r[2] for r in recs])) if recs else math.nan,
            "mean_p_b1_tstar": float(np.mean([r[3] for r in recs])) if recs else math.nan,
            "n_reps": len(recs),
            "n_failed": failed[v],
        })
    return GridResult("table2", tuple(rows), config)


# -- coverage and decision grids (all six methods) --------------------------

def _method_lcls_at_tstar(config: SimConfig, ds: StabilityDataset):
    """LCL per lot at t_star for every analysis method; per-method errors
    are reported, not raised."""
    ctx = AnalysisContext(ds, t_star=config.t_star, alpha=config.alpha,
                          grid=(config.t_star,))
    out = {}
    for method in METHOD_LABELS:
        try:
            res = analyze(ds, method, t_star=config.t_star, alpha=config.alpha,
                          grid=(config.t_star,), ctx=ctx)
            out[method] = {r.lot_id: r.lcl for r in res.predictions}
        except _FAILURE_KINDS as exc:
            out[method] = repr(exc)
    return out


def _coverage_worker(task):
    config, vcfrac, setting_idx, rep = task
    ds, b = _simulate_with_truth(config, vcfrac, _stream(config, "coverage", setting_idx, rep))
    lcls = _method_lcls_at_tstar(config, ds)
    mu_true = {label: config.beta0 + config.beta1 * config.t_star + b[i]
               for i, label in enumerate(config.lot_labels())}
    out = {}
    for method, res in lcls.items():
        if isinstance(res, str):
            out[method] = res
        else:
            out[method] = [res[lot] <= mu_true[lot] for lot in res]
    return (vcfrac, out)


def run_coverage_grid(config: SimConfig, jobs: int = 1) -> GridResult:
    """Pointwise coverage of the one-sided lower limits for the true
    conditional means at t_star, pooled across lot-dataset pairs."""
    tasks = [(config, v, i, r)
             for i, v in enumerate(config.vcfrac_grid)
             for r in range(config.reps_coverage)]
    results = _parallel(_coverage_worker, tasks, jobs)
    acc: dict = {(v, m): [] for v in config.vcfrac_grid for m in METHOD_LABELS}
    failed: dict = {(v, m): 0 for v in config.vcfrac_grid for m in METHOD_LABELS}
    for vcfrac, out in results:
        for method, indicators in out.items():
            if isinstance(indicators, str):
                failed[(vcfrac, method)] += 1
            else:
                acc[(vcfrac, method)].extend(indicators)
    rows = []
    for v in config.vcfrac_grid:
        for method in METHOD_LABELS:
            hits = acc[(v, method)]
            rows.append({
                "vcfrac_true": v,
                "method": method,
                "coverage": float(np.mean(hits)) if hits else math.nan,
                "n_pairs": len(hits),
                "n_failed": failed[(v, method)],
            })
    return GridResult("coverage", tuple(rows), config)


def _decision_worker(task):
    config, vcfrac, setting_idx, rep = task
    ds, _ = _simulate_with_truth(config, vcfrac, _stream(config, "decision", setting_idx, rep))
    lcls = _method_lcls_at_tstar(config, ds)
    out = {}
    for method, res in lcls.items():
        if isinstance(res, str):
            out[method] = res
        else:
            out[method] = bool(min(res.values()) >= config.lsl)
    return (vcfrac, out)


def run_decision_grid(config: SimConfig, jobs: int = 1) -> GridResult:
    """Pr(Support at t_star) per method, with the known-parameter benchmark
    appended as an "Expected" pseudo-method per setting."""
    tasks = [(config, v, i, r)
             for i, v in enumerate(config.vcfrac_grid)
             for r in range(config.reps_decision)]
    results = _parallel(_decision_worker, tasks, jobs)
    acc: dict = {(v, m): [] for v in config.vcfrac_grid for m in METHOD_LABELS}
    failed: dict = {(v, m): 0 for v in config.vcfrac_grid for m in METHOD_LABELS}
    for vcfrac, out in results:
        for method, supported in out.items():
            if isinstance(supported, str):
                failed[(vcfrac, method)] += 1
            else:
                acc[(vcfrac, method)].append(supported)
    rows = []
    for v in config.vcfrac_grid:
        for method in METHOD_LABELS:
            sup = acc[(v, method)]
            rows.append({
                "vcfrac_true": v,
                "method": method,
                "support_rate": float(np.mean(sup)) if sup else math.nan,
                "n_reps": len(sup),
                "n_failed": failed[(v, method)],
            })
        expected = benchmark_support_probability(BenchmarkInputs.from_config(config, v))
        rows.append({
            "vcfrac_true": v,
            "method": "Expected",
            "support_rate": expected,
            "n_reps": 0,
            "n_failed": 0,
        })
    return GridResult("decision", tuple(rows), config)
