"""Denominator degrees of freedom for prediction rows.

Three methods: containment (design-based, constant across contrasts),
residual (pooled-regression df), and Satterthwaite (contrast-specific,
delta method over variance-component uncertainty, with boundary reversion).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from stablab.lmm import OLS, FitResult, _mme_from_cp, asycov_full
from stablab.numcore import matrix_rank

__all__ = [
    "CONTAIN",
    "SAT",
    "RESIDUAL",
    "DdfReport",
    "SatUnavailable",
    "containment_ddf",
    "residual_ddf",
    "satt_df_from_components",
    "satterthwaite_ddf",
    "satterthwaite_ddf_batch",
]

CONTAIN = "CONTAIN"
SAT = "SAT"
RESIDUAL = "RESIDUAL"


class SatUnavailable(RuntimeError):
    """Satterthwaite DDF cannot be computed for this fit or contrast."""


@dataclass(frozen=True)
class DdfReport:
    method: str
    nu: float
    v_hat: float
    gradient: np.ndarray | None = None
    quad_form: float | None = None
    reverted: bool = False


def containment_ddf(design) -> int:
    """Design-based DDF: n - rank([X Z]); constant across lots and months."""
    if design.spec.kind == OLS:
        raise ValueError("containment DDF applies to mixed models; use residual_ddf")
    nu = design.n - matrix_rank(design.xz())
    if nu <= 0:
        raise ValueError(f"containment DDF nonpositive ({nu}); design too rich")
    return int(nu)


def residual_ddf(design) -> int:
    """Pooled-regression DDF: n - rank(X)."""
    nu = design.n - matrix_rank(design.X)
    if nu <= 0:
        raise ValueError(f"residual DDF nonpositive ({nu})")
    return int(nu)


def satt_df_from_components(v: float, g, omega) -> float:
    """nu = 2 v^2 / (g' Omega g); shared by the main path and the rebuild."""
    if not v > 0:
        raise ValueError("prediction variance must be positive")
    g = np.asarray(g, dtype=float)
    omega = np.asarray(omega, dtype=float)
    quad = float(g @ omega @ g)
    if not quad > 0:
        raise SatUnavailable(f"nonpositive delta-method quadratic form ({quad:.3e})")
    return 2.0 * v * v / quad


def _target_lambdas(fit: FitResult, targets):
    """Full-width contrast vectors over (fixed, all random) coefficients.

    The conditional-mean contrast for lot i includes the lot's random
    intercept and slope positions even when a fitted variance component is
    zero: the component contributes nothing at the estimate but its
    variance derivative is defined one-sided.
    """
    design = fit.design
    q = design.q
    lams = np.zeros((len(targets), 2 + q))
    marginal = np.zeros(len(targets), dtype=bool)
    for r, (lot, month, kind) in enumerate(targets):
        lams[r, 0] = 1.0
        lams[r, 1] = month
        if kind == "marginal" or fit.spec.kind == OLS:
            marginal[r] = True
            continue
        if kind != "conditional":
            raise ValueError(f"unknown prediction kind {kind!r}")
        lot_idx = design.lot_levels.index(lot)
        for col in range(q):
            if design.z_lot[col] == lot_idx:
                lams[r, 2 + col] = 1.0 if design.z_comp[col] == 0 else month
    return lams, marginal


def _variances_at(fit: FitResult, params: np.ndarray, lams, marginal):
    """Prediction variances for all targets at covariance parameters
    ``params`` (all random components followed by the residual variance).
    Z columns of zero-variance components are dropped from the mixed-model
    equations, matching their zero contribution to the variance."""
    theta_random = params[:-1]
    _, _, C, cols = _mme_from_cp(fit._cp, fit.design, theta_random, params[-1])
    keep = np.concatenate([np.arange(2), 2 + cols]) if cols.size else np.arange(2)
    sub = lams[:, keep]
    v = np.einsum("ri,ij,rj->r", sub, C, sub)
    if marginal.any():
        vm = np.einsum("ri,ij,rj->r", lams[:, :2], C[:2, :2], lams[:, :2])
        v = np.where(marginal, vm, v)
    return v


def _fd_gradient(fun, x0, steps, richardson=False, only=None):
    """Central-difference Jacobian columns of a vector-valued function;
    forward differences where a step would cross zero. ``only`` restricts
    the computed columns (others are zero)."""
    cols_needed = range(x0.size) if only is None else list(only)

    def central(h):
        cols = np.zeros((np.atleast_1d(fun(x0)).size, x0.size))
        for j in cols_needed:
            e = np.zeros(x0.size)
            e[j] = h[j]
            if x0[j] - h[j] < 0:
                cols[:, j] = (fun(x0 + e) - fun(x0)) / h[j]
            else:
                cols[:, j] = (fun(x0 + e) - fun(x0 - e)) / (2.0 * h[j])
        return cols

    g1 = central(steps)
    if not richardson:
        return g1
    g2 = central(0.5 * steps)
    return (4.0 * g2 - g1) / 3.0


def satterthwaite_ddf_batch(fit: FitResult, targets, richardson=False) -> list[DdfReport]:
    """Satterthwaite DDF for many (lot, month, kind) targets of one fit.

    When every random component is estimated at the boundary the report
    reverts to residual DDF, reproducing the documented discontinuity rather
    than smoothing it. With a partial boundary (some components zero, some
    interior) the zero components remain in the delta-method parameter
    vector: their variance derivative is taken one-sided and the asymptotic
    covariance comes from the full boundary-aware Hessian.
    """
    design = fit.design
    if fit.spec.kind == OLS:
        raise ValueError("Satterthwaite targets a mixed-model fit; use residual_ddf")
    interior = fit.interior_components()
    lams, marginal = _target_lambdas(fit, targets)
    if not interior:
        nu = float(residual_ddf(design))
        v0 = np.einsum("ri,ij,rj->r", lams[:, :2], fit.mme_inverse[:2, :2], lams[:, :2])
        return [DdfReport(RESIDUAL, nu, float(v), reverted=True) for v in v0]

    theta_random = fit.theta_random
    if len(interior) == fit.spec.n_vc:
        omega = fit.asycov
        if omega is None:
            raise SatUnavailable("asymptotic covariance unavailable for this fit")
        expected = fit.spec.vc_names + ("sigma2_e",)
        if fit.asycov_params != expected:
            raise SatUnavailable(
                f"asycov parameters {fit.asycov_params} do not match {expected}")
        idx = np.arange(fit.spec.n_vc + 1)
    else:
        omega_full = asycov_full(fit)
        if omega_full is None:
            raise SatUnavailable(
                "boundary-aware asymptotic covariance unavailable (indefinite Hessian)")
        # the quadratic form runs over the reduced model's parameters, but
        # their uncertainty comes from the full boundary-aware Hessian
        idx = np.array(list(interior) + [fit.spec.n_vc])
        omega = omega_full[np.ix_(idx, idx)]

    params = np.concatenate([theta_random, [fit.theta_hat.sigma2_e]])
    steps = np.maximum(1e-4 * params, 1e-7 * fit.var_y)

    def vfun(p):
        return _variances_at(fit, p, lams, marginal)

    v0 = vfun(params)
    grads = _fd_gradient(vfun, params, steps, richardson=richardson,
                         only=idx)
    out = []
    for r in range(len(targets)):
        g = grads[r][idx]
        quad = float(g @ omega @ g)
        if not (v0[r] > 0 and quad > 0):
            raise SatUnavailable(
                f"nonpositive variance or quadratic form at target {targets[r]}")
        out.append(DdfReport(SAT, 2.0 * v0[r] ** 2 / quad, float(v0[r]),
                             gradient=g.copy(), quad_form=quad, reverted=False))
    return out


def satterthwaite_ddf(fit: FitResult, target) -> DdfReport:
    """Satterthwaite DDF report for a single (lot, month, kind) target."""
    return satterthwaite_ddf_batch(fit, [target])[0]
