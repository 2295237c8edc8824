"""Known-parameter baselines for the proposed-expiry decision.

All quantities here treat the generating random-intercept model as known:
the pooled-regression reference crossing time for the zero-lot-variance
case, the conditional-mean prediction-error variance from the mixed-model
equations, and the all-lots pass probability via a multivariate-Normal tail.
Normal critical values are used throughout because no variance is estimated.

The mixed-model equations are assembled densely here, independent of the
fitting engine's factorized path, so cross-checks between the two are
meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from stablab.numcore import mvn_all_above, normal_cdf, normal_quantile

__all__ = [
    "BenchmarkInputs",
    "ols_reference_crossing",
    "vci_known",
    "predictor_covariance",
    "benchmark_support_probability",
]


@dataclass(frozen=True)
class BenchmarkInputs:
    """Design and generating parameters for the known-theta baselines."""

    months: tuple[float, ...]    # schedule per lot (balanced design)
    L: int
    sigma2_b0: float
    sigma2_e: float
    beta0: float
    beta1: float
    lsl: float
    t_star: float = 48.0
    alpha: float = 0.05

    @property
    def n(self) -> int:
        return self.L * len(self.months)

    def tbar(self) -> float:
        t = np.repeat(np.asarray(self.months, dtype=float), self.L)
        return float(t.mean())

    def sxx(self) -> float:
        t = np.repeat(np.asarray(self.months, dtype=float), self.L)
        return float(np.sum((t - t.mean()) ** 2))

    def mean_at(self, t: float) -> float:
        return self.beta0 + self.beta1 * t

    @staticmethod
    def from_config(config, vcfrac_true: float, crossing_month: float | None = None):
        cm = crossing_month if crossing_month is not None else config.crossing_month
        beta1 = (config.lsl - config.beta0) / cm
        return BenchmarkInputs(
            months=tuple(float(m) for m in config.months),
            L=config.L,
            sigma2_b0=vcfrac_true * config.sigma_tot2,
            sigma2_e=(1.0 - vcfrac_true) * config.sigma_tot2,
            beta0=config.beta0,
            beta1=beta1,
            lsl=config.lsl,
            t_star=config.t_star,
            alpha=config.alpha,
        )


def _ols_lcl(inputs: BenchmarkInputs, t: float) -> float:
    z = normal_quantile(1.0 - inputs.alpha)
    se = math.sqrt(inputs.sigma2_e) * math.sqrt(
        1.0 / inputs.n + (t - inputs.tbar()) ** 2 / inputs.sxx())
    return inputs.mean_at(t) - z * se


def ols_reference_crossing(inputs: BenchmarkInputs, tol: float = 1e-6) -> float:
    """Smallest t past the last pull where the pooled-regression lower bound
    meets the specification limit (zero lot variance case)."""
    if inputs.sigma2_b0 != 0.0:
        raise ValueError("reference crossing is defined for sigma2_b0 = 0")
    lo = max(inputs.months)
    crossing_month = (inputs.lsl - inputs.beta0) / inputs.beta1
    hi = 10.0 * crossing_month
    f = lambda t: _ols_lcl(inputs, t) - inputs.lsl
    if f(lo) <= 0:
        return lo
    if f(hi) > 0:
        raise ValueError(f"no crossing in [{lo}, {hi}]")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _mme_inverse_dense(inputs: BenchmarkInputs):
    """Dense mixed-model-equation inverse for the random-intercept design."""
    months = np.asarray(inputs.months, dtype=float)
    m = months.size
    L = inputs.L
    t = np.tile(months, L)
    n = t.size
    X = np.column_stack([np.ones(n), t])
    Z = np.kron(np.eye(L), np.ones((m, 1)))
    s2b, s2e = inputs.sigma2_b0, inputs.sigma2_e
    K = np.block([
        [X.T @ X, X.T @ Z],
        [Z.T @ X, Z.T @ Z + (s2e / s2b) * np.eye(L)],
    ]) / s2e
    C = np.linalg.inv(K)
    W = np.hstack([X, Z])
    V = s2e * np.eye(n) + s2b * (Z @ Z.T)
    return C, W, V


def vci_known(inputs: BenchmarkInputs, lot: int = 0) -> float:
    """Prediction-error variance of a lot's conditional mean at t_star.

    Lot-independent on balanced designs; the pooled-regression mean-line
    variance is the zero-lot-variance limit.
    """
    if inputs.sigma2_b0 == 0.0:
        return inputs.sigma2_e * (1.0 / inputs.n
                                  + (inputs.t_star - inputs.tbar()) ** 2 / inputs.sxx())
    C, _, _ = _mme_inverse_dense(inputs)
    lam = np.zeros(2 + inputs.L)
    lam[0] = 1.0
    lam[1] = inputs.t_star
    lam[2 + lot] = 1.0
    return float(lam @ C @ lam)


def predictor_covariance(inputs: BenchmarkInputs) -> np.ndarray:
    """Exact covariance of the per-lot conditional-mean predictors at t_star."""
    C, W, V = _mme_inverse_dense(inputs)
    L = inputs.L
    Lam = np.zeros((L, 2 + L))
    Lam[:, 0] = 1.0
    Lam[:, 1] = inputs.t_star
    Lam[:, 2:] = np.eye(L)
    A = Lam @ C @ W.T / inputs.sigma2_e     # predictor = A @ y
    return A @ V @ A.T


def benchmark_support_probability(inputs: BenchmarkInputs) -> float:
    """Probability that every lot's known-theta lower bound clears the LSL.

    The predictor vector is multivariate Normal; the all-lots event is a
    shifted tail of that distribution with threshold LSL + z * sqrt(V_CI).
    """
    z = normal_quantile(1.0 - inputs.alpha)
    vci = vci_known(inputs)
    threshold = inputs.lsl + z * math.sqrt(vci)
    mean_val = inputs.mean_at(inputs.t_star)
    if inputs.sigma2_b0 == 0.0:
        # pooled predictor is common to all lots: one-dimensional tail
        return normal_cdf((mean_val - threshold) / math.sqrt(vci))
    cov = predictor_covariance(inputs)
    return mvn_all_above(np.full(inputs.L, mean_val), cov, threshold)
