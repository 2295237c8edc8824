"""Independent oracles used by the unit and acceptance suites.

These deliberately avoid the package's factorized code paths: the balanced
random-intercept REML criterion below is evaluated through the eigenstructure
of the exchangeable covariance, vectorized over a dense parameter grid, and
maximized by grid search plus golden-section refinement.
"""

import math

import numpy as np

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _balanced_ri_stats(ds):
    months = np.asarray(sorted(set(ds.months.tolist())))
    L = len(ds.lot_levels)
    m = months.size
    idx = ds.lot_index()
    t = ds.months
    y = ds.values
    n = t.size
    X = np.column_stack([np.ones(n), t])
    lot_sums_x = np.stack([np.bincount(idx, weights=X[:, 0]),
                           np.bincount(idx, weights=X[:, 1])], axis=1)  # L x 2
    lot_sums_y = np.bincount(idx, weights=y)
    return {
        "n": n, "p": 2, "L": L, "m": m,
        "XtX": X.T @ X, "Xty": X.T @ y, "yty": float(y @ y),
        "sx": lot_sums_x, "sy": lot_sums_y,
    }


def balanced_ri_criterion(ds, s2b, s2e):
    """Vectorized restricted log-likelihood over arrays of (s2b, s2e).

    Uses V^-1 = (I - k * blockmean) / s2e with k = s2b / (s2e + m s2b) and
    log|V| = L (m-1) log s2e + L log(s2e + m s2b), valid for balanced
    random-intercept designs.
    """
    st = _balanced_ri_stats(ds)
    s2b = np.asarray(s2b, dtype=float)
    s2e = np.asarray(s2e, dtype=float)
    m = st["m"]
    lam = s2e + m * s2b
    k = s2b / (s2e * lam)
    # X'V^-1X = XtX/s2e - k * sum_i sx_i sx_i'
    SxSx = np.einsum("ij,ik->jk", st["sx"], st["sx"])
    SxSy = st["sx"].T @ st["sy"]
    SySy = float(st["sy"] @ st["sy"])
    a = st["XtX"][0, 0] / s2e - k * SxSx[0, 0]
    b = st["XtX"][0, 1] / s2e - k * SxSx[0, 1]
    d = st["XtX"][1, 1] / s2e - k * SxSx[1, 1]
    u = st["Xty"][0] / s2e - k * SxSy[0]
    v = st["Xty"][1] / s2e - k * SxSy[1]
    yviy = st["yty"] / s2e - k * SySy
    det = a * d - b * b
    beta0 = (d * u - b * v) / det
    beta1 = (-b * u + a * v) / det
    quad = yviy - (u * beta0 + v * beta1)
    logdet_v = st["L"] * (m - 1) * np.log(s2e) + st["L"] * np.log(lam)
    npp = st["n"] - st["p"]
    return -0.5 * (logdet_v + np.log(det) + quad) - 0.5 * npp * math.log(2 * math.pi)


def balanced_ri_oracle_optimum(ds, grid_size: int = 400) -> float:
    """Bounded-REML optimum criterion value by dense grid + golden refinement."""
    var_y = float(np.var(ds.values, ddof=1))
    s2b = np.concatenate([[0.0], np.geomspace(1e-8 * var_y, 30 * var_y, grid_size - 1)])
    s2e = np.geomspace(1e-4 * var_y, 30 * var_y, grid_size)
    B, E = np.meshgrid(s2b, s2e, indexing="ij")
    vals = balanced_ri_criterion(ds, B, E)
    i, j = np.unravel_index(np.argmax(vals), vals.shape)
    best_b, best_e, best = float(B[i, j]), float(E[i, j]), float(vals[i, j])

    def golden_max(f, lo, hi, iters=80):
        c = hi - GOLDEN * (hi - lo)
        d = lo + GOLDEN * (hi - lo)
        fc, fd = f(c), f(d)
        for _ in range(iters):
            if fc > fd:
                hi, d, fd = d, c, fc
                c = hi - GOLDEN * (hi - lo)
                fc = f(c)
            else:
                lo, c, fc = c, d, fd
                d = lo + GOLDEN * (hi - lo)
                fd = f(d)
        return 0.5 * (lo + hi)

    for _ in range(8):
        if best_b > 0:
            lo, hi = best_b / 4, best_b * 4
            best_b = golden_max(lambda x: float(balanced_ri_criterion(ds, x, best_e)), lo, hi)
            # boundary candidate stays in play
            if float(balanced_ri_criterion(ds, 0.0, best_e)) >= float(
                    balanced_ri_criterion(ds, best_b, best_e)):
                best_b = 0.0
        best_e = golden_max(lambda x: float(balanced_ri_criterion(ds, best_b, x)),
                            best_e / 4, best_e * 4)
        best = float(balanced_ri_criterion(ds, best_b, best_e))
    return best
