"""Reconstruction of Satterthwaite DDF from first principles at one scored
point: prediction variance, finite-difference gradient over the covariance
parameters, delta-method quadratic form, and the implied t multiplier, for
both the conditional and the marginal prediction.

The prediction-variance function here is assembled densely from the design
matrices, independent of the factorized path used by the ddf module, so the
two can cross-check each other.
"""

from __future__ import annotations

import numpy as np

from stablab.ddf import satt_df_from_components, satterthwaite_ddf
from stablab.lmm import RI, FitResult, predict
from stablab.numcore import t_quantile

__all__ = ["rebuild_report", "rebuild_from_components"]


def _dense_c(X: np.ndarray, Z: np.ndarray, sigma2_b0: float, sigma2_e: float) -> np.ndarray:
    q = Z.shape[1]
    K = np.block([
        [X.T @ X, X.T @ Z],
        [Z.T @ X, Z.T @ Z + (sigma2_e / sigma2_b0) * np.eye(q)],
    ]) / sigma2_e
    return np.linalg.inv(K)


def _pred_variance(X, Z, sigma2_b0, sigma2_e, lot_idx: int, month: float, kind: str) -> float:
    C = _dense_c(X, Z, sigma2_b0, sigma2_e)
    x = np.array([1.0, month])
    if kind == "marginal":
        return float(x @ C[:2, :2] @ x)
    lam = np.zeros(2 + Z.shape[1])
    lam[:2] = x
    lam[2 + lot_idx] = 1.0
    return float(lam @ C @ lam)


def rebuild_from_components(design, theta, omega: np.ndarray, lot: str, month: float,
                            alpha: float = 0.05, var_y: float | None = None):
    """Delta-method DDF reconstruction at held covariance parameters.

    ``omega`` is the 2x2 asymptotic covariance of (sigma2_b0, sigma2_e);
    returns one record per prediction kind with the gradient, quadratic
    form, rebuilt DDF, and implied t multiplier.
    """
    if design.spec.kind != RI:
        raise ValueError("the reconstruction targets the random-intercept model")
    if not (theta.sigma2_b0 and theta.sigma2_b0 > 0):
        raise ValueError("boundary fit: reconstruction undefined; "
                         "Satterthwaite reverts to residual DDF at the boundary")
    lot_idx = design.lot_levels.index(lot)
    X, Z = design.X, design.Z
    th = np.array([theta.sigma2_b0, theta.sigma2_e])
    scale = var_y if var_y is not None else float(np.sum(th))
    steps = np.maximum(1e-4 * th, 1e-7 * scale)
    records = []
    for kind in ("conditional", "marginal"):
        def v_of(p):
            return _pred_variance(X, Z, p[0], p[1], lot_idx, month, kind)

        v0 = v_of(th)
        g = np.empty(2)
        for j in range(2):
            e = np.zeros(2)
            e[j] = steps[j]
            g[j] = (v_of(th + e) - v_of(th - e)) / (2.0 * steps[j])
        quad = float(g @ omega @ g)
        nu = satt_df_from_components(v0, g, omega)
        records.append({
            "kind": kind,
            "v_hat": v0,
            "g_sigma2_b0": float(g[0]),
            "g_sigma2_e": float(g[1]),
            "quad_form": quad,
            "nu_rebuilt": nu,
            "t_multiplier": t_quantile(1.0 - alpha, nu),
        })
    return records


def rebuild_report(fit: FitResult, lot: str, month: float, alpha: float = 0.05):
    """Side-by-side conditional/marginal DDF reconstruction for one fit.

    Emits, per prediction kind: the prediction, its variance, the
    finite-difference gradient over (sigma2_b0, sigma2_e), the delta-method
    quadratic form, the rebuilt DDF, the engine-reported DDF, and the
    implied t multiplier.
    """
    if fit.spec.kind != RI:
        raise ValueError("the reconstruction targets the random-intercept model")
    if any(fit.boundary_flags):
        raise ValueError("boundary fit: reconstruction undefined; "
                         "Satterthwaite reverts to residual DDF at the boundary")
    if fit.asycov is None:
        raise ValueError("asymptotic covariance unavailable for this fit")
    records = rebuild_from_components(fit.design, fit.theta_hat, fit.asycov,
                                      lot, month, alpha=alpha, var_y=fit.var_y)
    rows = []
    for rec in records:
        engine = satterthwaite_ddf(fit, (lot, month, rec["kind"]))
        pred = predict(fit, lot, month, rec["kind"], alpha, engine.nu)
        rows.append({
            "kind": rec["kind"],
            "pred": pred.pred,
            "v_hat": rec["v_hat"],
            "g_sigma2_b0": rec["g_sigma2_b0"],
            "g_sigma2_e": rec["g_sigma2_e"],
            "quad_form": rec["quad_form"],
            "nu_rebuilt": rec["nu_rebuilt"],
            "nu_engine": engine.nu,
            "t_multiplier": rec["t_multiplier"],
        })
    return rows
