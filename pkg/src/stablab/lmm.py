"""Bounded-REML fitting of the stability mixed models.

Covers the three candidate models (random intercept + uncorrelated random
slope, random intercept only, pooled regression), Henderson mixed-model
equations, conditional/marginal predictions with prediction-error variances,
and the asymptotic covariance of the variance components.

The REML criterion is evaluated through a Woodbury factorization of
V = sigma_e^2 (I + Z Gamma Z'); because random-effect columns of different
lots are orthogonal, the capacitance matrix splits into per-lot 1x1 or 2x2
blocks and each evaluation is a handful of closed-form vector operations on
precomputed cross products. The residual variance is profiled out and the
bounded optimization runs over the variance ratios gamma_j = sigma_j^2 /
sigma_e^2 on the nonnegative orthant.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from stablab.data import StabilityDataset
from stablab.numcore import t_quantile

__all__ = [
    "ConvergenceError",
    "ModelSpec",
    "Theta",
    "DesignMatrices",
    "FitResult",
    "PredictionRow",
    "build_design",
    "reml_criterion",
    "fit_reml",
    "fit_at_theta",
    "asycov",
    "mme_solve",
    "predict",
]

_LOG2PI = math.log(2.0 * math.pi)
_START_RATIOS = (0.0, 0.01, 0.1, 1.0, 10.0)
_NM_FATOL = 1e-12

RIS = "ris"
RI = "ri"
OLS = "ols"

_VC_NAMES = {RIS: ("sigma2_b0", "sigma2_b1"), RI: ("sigma2_b0",), OLS: ()}


class ConvergenceError(RuntimeError):
    """REML optimization failed to produce a finite optimum."""


@dataclass(frozen=True)
class ModelSpec:
    """Candidate model identity; fixed effects are always (intercept, month)."""

    kind: str

    def __post_init__(self):
        if self.kind not in (RIS, RI, OLS):
            raise ValueError(f"unknown model kind {self.kind!r}")

    @property
    def vc_names(self) -> tuple[str, ...]:
        return _VC_NAMES[self.kind]

    @property
    def n_vc(self) -> int:
        return len(self.vc_names)

    @property
    def n_cov_params(self) -> int:
        """Covariance parameters including the residual variance."""
        return self.n_vc + 1


@dataclass(frozen=True)
class Theta:
    """Variance components; random components absent for simpler models."""

    sigma2_b0: float | None
    sigma2_b1: float | None
    sigma2_e: float

    def __post_init__(self):
        for name in ("sigma2_b0", "sigma2_b1"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not self.sigma2_e > 0:
            raise ValueError("sigma2_e must be positive")

    def random_vector(self, spec: ModelSpec) -> np.ndarray:
        vals = []
        for name in spec.vc_names:
            v = getattr(self, name)
            if v is None:
                raise ValueError(f"model {spec.kind} requires {name}")
            vals.append(v)
        return np.array(vals, dtype=float)

    @staticmethod
    def from_vector(spec: ModelSpec, random: np.ndarray, sigma2_e: float) -> "Theta":
        vals = {"sigma2_b0": None, "sigma2_b1": None}
        for name, v in zip(spec.vc_names, random):
            vals[name] = float(v)
        return Theta(vals["sigma2_b0"], vals["sigma2_b1"], float(sigma2_e))

    def vcfrac(self) -> float:
        """Lot-intercept variance fraction sigma2_b0 / (sigma2_b0 + sigma2_e)."""
        b0 = self.sigma2_b0 or 0.0
        return b0 / (b0 + self.sigma2_e)


@dataclass(frozen=True, eq=False)
class DesignMatrices:
    """Fixed and random design for one dataset under one model."""

    spec: ModelSpec
    X: np.ndarray
    Z: np.ndarray
    lot_levels: tuple[str, ...]
    z_comp: np.ndarray   # variance-component index per Z column (0=b0, 1=b1)
    z_lot: np.ndarray    # lot index per Z column
    months: np.ndarray
    lot_index: np.ndarray

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    def xz(self) -> np.ndarray:
        if self.q == 0:
            return self.X
        return np.hstack([self.X, self.Z])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.spec.kind.encode())
        h.update("|".join(self.lot_levels).encode())
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.Z).tobytes())
        return h.hexdigest()[:16]


def build_design(ds: StabilityDataset, spec: ModelSpec) -> DesignMatrices:
    """Design matrices with columns in lexicographic lot order."""
    t = ds.months
    n = ds.n
    X = np.column_stack([np.ones(n), t])
    levels = ds.lot_levels
    L = len(levels)
    lot_idx = ds.lot_index()
    if spec.kind == OLS:
        Z = np.zeros((n, 0))
        z_comp = np.zeros(0, dtype=int)
        z_lot = np.zeros(0, dtype=int)
    else:
        ind = np.zeros((n, L))
        ind[np.arange(n), lot_idx] = 1.0
        if spec.kind == RI:
            Z = ind
            z_comp = np.zeros(L, dtype=int)
            z_lot = np.arange(L)
        else:
            Z = np.hstack([ind, ind * t[:, None]])
            z_comp = np.repeat([0, 1], L)
            z_lot = np.tile(np.arange(L), 2)
    return DesignMatrices(spec, X, Z, levels, z_comp, z_lot, t.copy(), lot_idx)


class _CrossProducts:
    """Sufficient statistics for the REML criterion and the MME.

    Random-effect columns of different lots are orthogonal, so the Woodbury
    capacitance matrix is block-diagonal by lot; the criterion only needs
    the per-lot scalars collected here (count, sums of t, t^2, y, t*y).
    """

    __slots__ = ("XtX", "Xty", "ZtX", "Zty", "ZtZ", "yty", "y", "n", "p", "var_y",
                 "comp_cols", "lot_n", "lot_st", "lot_stt", "lot_sy", "lot_sty",
                 "zx", "g3")

    def __init__(self, design: DesignMatrices, y: np.ndarray):
        X, Z = design.X, design.Z
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.ZtX = Z.T @ X
        self.Zty = Z.T @ y
        self.ZtZ = Z.T @ Z
        self.yty = float(y @ y)
        self.y = np.asarray(y, dtype=float).copy()
        self.n = design.n
        self.p = design.p
        self.var_y = float(np.var(y, ddof=1)) if design.n > 1 else 0.0
        self.comp_cols = tuple(np.flatnonzero(design.z_comp == c)
                               for c in range(design.spec.n_vc))
        L = len(design.lot_levels)
        idx = design.lot_index
        t = design.months
        self.lot_n = np.bincount(idx, minlength=L).astype(float)
        self.lot_st = np.bincount(idx, weights=t, minlength=L)
        self.lot_stt = np.bincount(idx, weights=t * t, minlength=L)
        self.lot_sy = np.bincount(idx, weights=y, minlength=L)
        self.lot_sty = np.bincount(idx, weights=t * y, minlength=L)
        # per-lot rows of [Z'X | Z'y] for the intercept and slope components
        self.zx = (np.column_stack([self.lot_n, self.lot_st, self.lot_sy]),
                   np.column_stack([self.lot_st, self.lot_stt, self.lot_sty]))
        self.g3 = np.array([
            [self.XtX[0, 0], self.XtX[0, 1], self.Xty[0]],
            [self.XtX[1, 0], self.XtX[1, 1], self.Xty[1]],
            [self.Xty[0], self.Xty[1], self.yty],
        ])


def _active_cols(cp: _CrossProducts, positive_mask) -> np.ndarray:
    cols = [cp.comp_cols[c] for c, on in enumerate(positive_mask) if on]
    if not cols:
        return np.zeros(0, dtype=int)
    return np.concatenate(cols)


def _w_parts(cp: _CrossProducts, gamma: np.ndarray):
    """Woodbury pieces for W = I + Z Gamma Z' restricted to active columns.

    Returns (logdet_W, logdet_XtWiX, beta_gls, Q) with Q the weighted
    residual sum of squares at the GLS solution. The capacitance matrix is
    handled as per-lot 1x1 or 2x2 blocks in closed form.
    """
    n_vc = gamma.shape[0]
    g0 = gamma[0] if n_vc >= 1 else 0.0
    g1 = gamma[1] if n_vc >= 2 else 0.0
    if g0 > 0 and g1 > 0:
        b11 = 1.0 + g0 * cp.lot_n
        b22 = 1.0 + g1 * cp.lot_stt
        b12 = math.sqrt(g0 * g1) * cp.lot_st
        det = b11 * b22 - b12 * b12
        logdet_w = float(np.sum(np.log(det)))
        r0 = math.sqrt(g0) * cp.zx[0]
        r1 = math.sqrt(g1) * cp.zx[1]
        w0 = (b22[:, None] * r0 - b12[:, None] * r1) / det[:, None]
        w1 = (-b12[:, None] * r0 + b11[:, None] * r1) / det[:, None]
        S = r0.T @ w0 + r1.T @ w1
        G = cp.g3 - S
    elif g0 > 0 or g1 > 0:
        g, comp = (g0, 0) if g0 > 0 else (g1, 1)
        diag = 1.0 + g * (cp.lot_n if comp == 0 else cp.lot_stt)
        logdet_w = float(np.sum(np.log(diag)))
        r = cp.zx[comp]
        S = (g * r / diag[:, None]).T @ r
        G = cp.g3 - S
    else:
        logdet_w = 0.0
        G = cp.g3
    a, b, d = G[0, 0], G[0, 1], G[1, 1]
    det_x = a * d - b * b
    if det_x <= 0:
        return logdet_w, -np.inf, np.zeros(2), np.inf
    beta = np.array([(d * G[0, 2] - b * G[1, 2]) / det_x,
                     (-b * G[0, 2] + a * G[1, 2]) / det_x])
    Q = G[2, 2] - G[0, 2] * beta[0] - G[1, 2] * beta[1]
    return logdet_w, math.log(det_x), beta, Q


def _profiled_loglik(cp: _CrossProducts, gamma: np.ndarray):
    """Restricted log-likelihood maximized over sigma_e^2 at fixed ratios."""
    logdet_w, logdet_x, beta, Q = _w_parts(cp, gamma)
    npp = cp.n - cp.p
    if not np.isfinite(logdet_x) or Q <= 0:
        return -np.inf, np.nan, beta
    s2e = Q / npp
    ll = -0.5 * (npp * (1.0 + math.log(s2e)) + logdet_w + logdet_x) - 0.5 * npp * _LOG2PI
    return ll, s2e, beta


def _full_loglik(cp: _CrossProducts, theta_random: np.ndarray, sigma2_e: float) -> float:
    gamma = np.asarray(theta_random, dtype=float) / sigma2_e
    logdet_w, logdet_x, _, Q = _w_parts(cp, gamma)
    npp = cp.n - cp.p
    if not np.isfinite(logdet_x):
        return -np.inf
    return -0.5 * (npp * math.log(sigma2_e) + logdet_w + logdet_x + Q / sigma2_e) \
        - 0.5 * npp * _LOG2PI


def reml_criterion(theta: Theta, design: DesignMatrices, y: np.ndarray) -> float:
    """Restricted log-likelihood with the fixed effects profiled out.

    The additive constant is fixed so values are comparable across candidate
    models sharing the (intercept, month) fixed effects.
    """
    y = np.asarray(y, dtype=float)
    cp = _CrossProducts(design, y)
    return _full_loglik(cp, theta.random_vector(design.spec), theta.sigma2_e)


def _projected_nelder_mead(f, x0, steps, fatol=_NM_FATOL, maxiter=None):
    """Derivative-free simplex minimization projected onto the orthant."""
    x0 = np.clip(np.asarray(x0, dtype=float), 0.0, None)
    n = x0.size
    if maxiter is None:
        maxiter = 250 * n
    simplex = [x0]
    for i in range(n):
        v = x0.copy()
        v[i] += steps[i]
        simplex.append(np.clip(v, 0.0, None))
    simplex = np.array(simplex)
    fvals = np.array([f(v) for v in simplex])
    for _ in range(maxiter):
        order = np.argsort(fvals, kind="stable")
        simplex, fvals = simplex[order], fvals[order]
        if fvals[-1] - fvals[0] < fatol:
            break
        centroid = simplex[:-1].mean(axis=0)
        xr = np.clip(2.0 * centroid - simplex[-1], 0.0, None)
        fr = f(xr)
        if fr < fvals[0]:
            xe = np.clip(3.0 * centroid - 2.0 * simplex[-1], 0.0, None)
            fe = f(xe)
            if fe < fr:
                simplex[-1], fvals[-1] = xe, fe
            else:
                simplex[-1], fvals[-1] = xr, fr
        elif fr < fvals[-2]:
            simplex[-1], fvals[-1] = xr, fr
        else:
            if fr < fvals[-1]:
                xc = np.clip(centroid + 0.5 * (xr - centroid), 0.0, None)
            else:
                xc = centroid + 0.5 * (simplex[-1] - centroid)
            fc = f(xc)
            if fc < min(fr, fvals[-1]):
                simplex[-1], fvals[-1] = xc, fc
            else:
                simplex = np.clip(simplex[0] + 0.5 * (simplex - simplex[0]), 0.0, None)
                fvals = np.array([f(v) for v in simplex])
    i = int(np.argmin(fvals))
    return simplex[i], float(fvals[i])


def _optimize_ratios(cp: _CrossProducts, n_vc: int):
    """Bounded maximization of the profiled criterion over the ratio orthant.

    The optimizer works on rescaled ratios (the slope ratio is multiplied by
    the mean squared month) so the start grid covers comparable variance
    contributions for both components. Every boundary face is optimized
    separately so exact-zero solutions are representable; ties prefer the
    solution with more components at zero.
    """
    # u = gamma * comp_scale puts both components on a contribution scale
    comp_scale = np.ones(n_vc)
    if n_vc >= 2:
        comp_scale[1] = max(float(np.sum(cp.lot_stt)) / cp.n, 1.0)

    candidates = []
    for zero_set in itertools.chain.from_iterable(
            itertools.combinations(range(n_vc), k) for k in range(n_vc + 1)):
        free = [c for c in range(n_vc) if c not in zero_set]

        def embed(ufree):
            gamma = np.zeros(n_vc)
            for c, v in zip(free, ufree):
                gamma[c] = v / comp_scale[c]
            return gamma

        if not free:
            val, _, _ = _profiled_loglik(cp, np.zeros(n_vc))
            candidates.append((val, np.zeros(n_vc)))
            continue

        def neg(ufree):
            val, _, _ = _profiled_loglik(cp, embed(np.clip(ufree, 0.0, None)))
            return -val if np.isfinite(val) else np.inf

        # screen the start grid, descend from the most promising points
        starts = [np.array(s, dtype=float)
                  for s in itertools.product(_START_RATIOS, repeat=len(free))]
        starts.sort(key=neg)
        best_x, best_f = None, np.inf
        for start in starts[:4]:
            steps = [max(0.5 * s, 0.25) for s in start]
            x, fx = _projected_nelder_mead(neg, start, steps, fatol=1e-9)
            if fx < best_f:
                best_x, best_f = x, fx
        # final polish from the multi-start winner at full tolerance
        steps = [max(0.05 * v, 1e-3) for v in best_x]
        x, fx = _projected_nelder_mead(neg, best_x, steps, fatol=_NM_FATOL)
        if fx < best_f:
            best_x, best_f = x, fx
        candidates.append((-best_f, embed(best_x)))

    best_val = max(v for v, _ in candidates)
    if not np.isfinite(best_val):
        raise ConvergenceError("REML criterion unbounded or undefined")
    tol = 1e-10 * (1.0 + abs(best_val))
    near = [(v, g) for v, g in candidates if v >= best_val - tol]
    near.sort(key=lambda vg: (-np.sum(vg[1] == 0.0), -vg[0]))
    return near[0][1]


@dataclass(frozen=True)
class PredictionRow:
    """Per (lot, month) prediction with one-sided lower confidence limit."""

    lot_id: str | None
    month: float
    pred: float
    se_pred: float
    ddf: float
    lcl: float
    kind: str          # "conditional" | "marginal"
    alpha: float = 0.05


@dataclass(frozen=True, eq=False)
class FitResult:
    """REML fit: estimates, EBLUPs, MME inverse, and variance-parameter
    asymptotic covariance (over interior components only)."""

    spec: ModelSpec
    theta_hat: Theta
    beta_hat: np.ndarray
    blups: np.ndarray                 # aligned with design Z columns; 0 where dropped
    mme_inverse: np.ndarray           # C over (fixed, active random) coefficients
    active_cols: np.ndarray           # Z column indices retained in the MME
    reml_loglik: float
    asycov: np.ndarray | None
    asycov_params: tuple[str, ...]
    boundary_flags: tuple[bool, ...]  # per random component, spec.vc_names order
    n: int
    p: int
    design_fingerprint: str
    design: DesignMatrices = field(repr=False)
    var_y: float = field(repr=False, default=0.0)
    _cp: object = field(repr=False, default=None, compare=False)

    @property
    def theta_random(self) -> np.ndarray:
        return self.theta_hat.random_vector(self.spec)

    def interior_components(self) -> tuple[int, ...]:
        return tuple(c for c, flag in enumerate(self.boundary_flags) if not flag)

    def lot_levels(self) -> tuple[str, ...]:
        return self.design.lot_levels


def _mme_from_cp(cp: _CrossProducts, design: DesignMatrices,
                 theta_random: np.ndarray, sigma2_e: float):
    """C (inverse MME coefficient matrix) and solutions at the given theta.

    Zero-variance components have their Z columns removed before assembly.
    """
    active_mask = theta_random > 0
    cols = _active_cols(cp, active_mask)
    k = cols.size
    if k:
        var_col = theta_random[design.z_comp[cols]]
        K = np.empty((2 + k, 2 + k))
        K[:2, :2] = cp.XtX
        K[:2, 2:] = cp.ZtX[cols].T
        K[2:, :2] = cp.ZtX[cols]
        K[2:, 2:] = cp.ZtZ[np.ix_(cols, cols)]
        K[2 + np.arange(k), 2 + np.arange(k)] += sigma2_e / var_col
        rhs = np.concatenate([cp.Xty, cp.Zty[cols]])
    else:
        K = cp.XtX.copy()
        rhs = cp.Xty.copy()
    K /= sigma2_e
    try:
        C = np.linalg.inv(K)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"singular MME coefficient matrix: {exc}") from None
    sol = C @ (rhs / sigma2_e)
    beta = sol[:2]
    blups = np.zeros(design.q)
    if k:
        blups[cols] = sol[2:]
    return beta, blups, C, cols


def mme_solve(theta: Theta, design: DesignMatrices, y: np.ndarray):
    """Solve Henderson's mixed model equations at the given theta.

    Returns (beta, blups, C) with C the inverse coefficient matrix over the
    (fixed, retained random) coefficients.
    """
    y = np.asarray(y, dtype=float)
    cp = _CrossProducts(design, y)
    beta, blups, C, _ = _mme_from_cp(cp, design, theta.random_vector(design.spec),
                                     theta.sigma2_e)
    return beta, blups, C


def _pd_inverse(H: np.ndarray, fallback: np.ndarray | None = None) -> np.ndarray | None:
    """Inverse of H when positive definite, else of the fallback matrix.

    Observed REML Hessians are frequently indefinite at or near the
    boundary of the parameter space; the expected information is the
    principled positive definite substitute there (Fisher-scoring
    convention). A minimal ridge is the last resort.
    """
    for M in (H, fallback):
        if M is None:
            continue
        try:
            eig = np.linalg.eigvalsh(M)
        except np.linalg.LinAlgError:
            continue
        if not np.all(np.isfinite(eig)):
            continue
        if eig[0] > 0:
            omega = np.linalg.inv(M)
            return 0.5 * (omega + omega.T)
    M = fallback if fallback is not None else H
    eig = np.linalg.eigvalsh(M)
    if not np.all(np.isfinite(eig)):
        return None
    ridge = -min(eig[0], 0.0) + 1e-10 * max(1.0, abs(eig[-1]))
    omega = np.linalg.inv(M + ridge * np.eye(M.shape[0]))
    return 0.5 * (omega + omega.T)


def _compute_asycov(cp: _CrossProducts, design: DesignMatrices,
                    theta_random: np.ndarray, sigma2_e: float):
    """Asymptotic covariance of the interior (non-boundary) covariance
    parameters: inverse observed information, falling back to expected
    information when the observed curvature is indefinite."""
    spec = design.spec
    interior = [c for c in range(spec.n_vc) if theta_random[c] > 0]
    names = tuple(spec.vc_names[c] for c in interior) + ("sigma2_e",)
    H_all, I_all = information_matrices(design, cp.y, theta_random, sigma2_e)
    idx = np.array(interior + [spec.n_vc])
    sub = np.ix_(idx, idx)
    omega = _pd_inverse(H_all[sub], I_all[sub])
    return omega, names


def information_matrices(design: DesignMatrices, y: np.ndarray,
                         theta_random: np.ndarray, sigma2_e: float):
    """Analytic observed and expected REML information, all covariance
    parameters (boundary components included, one-sided).

    Observed: H_jk = y'P V_j P V_k P y - 0.5 tr(P V_j P V_k); expected:
    I_jk = 0.5 tr(P V_j P V_k), with P the REML projection at theta and
    V_j the per-parameter derivative of the marginal covariance. Computed
    analytically because finite differences lose all precision when a
    component is within a few orders of magnitude of zero.
    """
    X, Z = design.X, design.Z
    n = design.n
    V = sigma2_e * np.eye(n)
    parts = []
    for c in range(design.spec.n_vc):
        Zc = Z[:, design.z_comp == c]
        Vc = Zc @ Zc.T
        parts.append(Vc)
        if theta_random[c] > 0:
            V += theta_random[c] * Vc
    parts.append(np.eye(n))
    Vi = np.linalg.inv(V)
    XtViX_inv = np.linalg.inv(X.T @ Vi @ X)
    P = Vi - Vi @ X @ XtViX_inv @ X.T @ Vi
    w = P @ y
    m = len(parts)
    A = [P @ Vj for Vj in parts]
    u = [Vj @ w for Vj in parts]
    Pu = [P @ uj for uj in u]
    H = np.empty((m, m))
    info = np.empty((m, m))
    for j in range(m):
        for k in range(j, m):
            tr = float(np.sum(A[j] * A[k].T))
            yterm = float(u[j] @ Pu[k])
            info[j, k] = info[k, j] = 0.5 * tr
            H[j, k] = H[k, j] = yterm - 0.5 * tr
    return H, info


def observed_information(design: DesignMatrices, y: np.ndarray,
                         theta_random: np.ndarray, sigma2_e: float) -> np.ndarray:
    return information_matrices(design, y, theta_random, sigma2_e)[0]


def expected_information(design: DesignMatrices, theta_random: np.ndarray,
                         sigma2_e: float) -> np.ndarray:
    n = design.n
    return information_matrices(design, np.zeros(n), theta_random, sigma2_e)[1]


def asycov_full(fit: "FitResult") -> np.ndarray | None:
    """Boundary-aware asymptotic covariance over ALL covariance parameters.

    Boundary components stay in the parameter vector, which is what
    Satterthwaite inference needs when only some components sit on the
    boundary: inverse observed Hessian when positive definite, expected
    information otherwise.
    """
    H, info = information_matrices(fit.design, fit._cp.y, fit.theta_random,
                                   fit.theta_hat.sigma2_e)
    return _pd_inverse(H, info)


def asycov(fit: "FitResult") -> np.ndarray | None:
    """Asymptotic covariance of the fit's interior covariance parameters.

    Rows/columns exist only for non-boundary components (order given by
    ``fit.asycov_params``); None when unavailable.
    """
    return fit.asycov


def fit_at_theta(design: DesignMatrices, y: np.ndarray, theta: Theta,
                 asycov_override: np.ndarray | None = None,
                 compute_asycov: bool = False) -> FitResult:
    """FitResult at held covariance parameters (no REML iteration).

    Used for known-parameter baselines and for reconstruction exercises where
    the covariance parameters come from a published fit.
    """
    y = np.asarray(y, dtype=float)
    cp = _CrossProducts(design, y)
    theta_random = theta.random_vector(design.spec)
    beta, blups, C, cols = _mme_from_cp(cp, design, theta_random, theta.sigma2_e)
    flags = tuple(bool(v <= 0.0) for v in theta_random)
    interior = [c for c in range(design.spec.n_vc) if theta_random[c] > 0]
    names = tuple(design.spec.vc_names[c] for c in interior) + ("sigma2_e",)
    omega = asycov_override
    if omega is None and compute_asycov:
        omega, names = _compute_asycov(cp, design, theta_random, theta.sigma2_e)
    return FitResult(
        spec=design.spec, theta_hat=theta, beta_hat=beta, blups=blups,
        mme_inverse=C, active_cols=cols,
        reml_loglik=_full_loglik(cp, theta_random, theta.sigma2_e),
        asycov=omega, asycov_params=names, boundary_flags=flags,
        n=design.n, p=design.p, design_fingerprint=design.fingerprint(),
        design=design, var_y=cp.var_y, _cp=cp,
    )


def fit_reml(design: DesignMatrices, y: np.ndarray, spec: ModelSpec | None = None,
             compute_asycov: bool = True) -> FitResult:
    """Bounded-REML fit; exact boundary solutions are detected and flagged.

    Components whose fitted variance falls below ZERO_TOL = 1e-10 * var(y)
    are clamped to exactly zero. Downstream DDF logic, not the engine,
    implements reversion behavior for clamped components.
    """
    if spec is not None and spec != design.spec:
        raise ValueError("spec does not match the design")
    spec = design.spec
    y = np.asarray(y, dtype=float)
    n_theta = spec.n_vc + 1
    if design.n <= design.p + n_theta:
        raise ValueError("not enough observations to estimate the model")
    cp = _CrossProducts(design, y)

    if spec.kind == OLS:
        _, _, beta, rss = _w_parts(cp, np.zeros(0))
        npp = cp.n - cp.p
        s2e = rss / npp
        theta = Theta(None, None, s2e)
        ll, _, _ = _profiled_loglik(cp, np.zeros(0))
        omega = np.array([[2.0 * s2e ** 2 / npp]]) if compute_asycov else None
        C = s2e * np.linalg.inv(cp.XtX)
        return FitResult(
            spec=spec, theta_hat=theta, beta_hat=beta, blups=np.zeros(0),
            mme_inverse=C, active_cols=np.zeros(0, dtype=int),
            reml_loglik=ll, asycov=omega, asycov_params=("sigma2_e",),
            boundary_flags=(), n=design.n, p=design.p,
            design_fingerprint=design.fingerprint(), design=design,
            var_y=cp.var_y, _cp=cp,
        )

    gamma = _optimize_ratios(cp, spec.n_vc)
    ll, s2e, _ = _profiled_loglik(cp, gamma)
    if not (np.isfinite(ll) and np.isfinite(s2e) and s2e > 0):
        raise ConvergenceError("REML optimization produced a non-finite optimum")
    theta_random = gamma * s2e
    zero_tol = 1e-10 * cp.var_y
    clamped = (theta_random > 0) & (theta_random < zero_tol)
    if np.any(clamped):
        gamma = np.where(clamped, 0.0, gamma)
        ll, s2e, _ = _profiled_loglik(cp, gamma)
        theta_random = gamma * s2e
    theta = Theta.from_vector(spec, theta_random, s2e)
    beta, blups, C, cols = _mme_from_cp(cp, design, theta_random, s2e)
    flags = tuple(bool(v == 0.0) for v in theta_random)
    omega, names = (None, tuple(spec.vc_names[c] for c in range(spec.n_vc)
                                if theta_random[c] > 0) + ("sigma2_e",))
    if compute_asycov:
        omega, names = _compute_asycov(cp, design, theta_random, s2e)
    return FitResult(
        spec=spec, theta_hat=theta, beta_hat=beta, blups=blups,
        mme_inverse=C, active_cols=cols, reml_loglik=ll,
        asycov=omega, asycov_params=names, boundary_flags=flags,
        n=design.n, p=design.p, design_fingerprint=design.fingerprint(),
        design=design, var_y=cp.var_y, _cp=cp,
    )


def _conditional_lambda(fit: FitResult, lot_idx: int, month: float) -> np.ndarray:
    design = fit.design
    lam = np.zeros(2 + fit.active_cols.size)
    lam[0] = 1.0
    lam[1] = month
    for pos, col in enumerate(fit.active_cols):
        if design.z_lot[col] == lot_idx:
            lam[2 + pos] = 1.0 if design.z_comp[col] == 0 else month
    return lam


def prediction_variance(fit: FitResult, lot: str | None, month: float, kind: str) -> float:
    """Prediction-error variance of the conditional or marginal mean."""
    if kind == "marginal" or fit.spec.kind == OLS:
        x = np.array([1.0, month])
        return float(x @ fit.mme_inverse[:2, :2] @ x)
    if kind != "conditional":
        raise ValueError(f"unknown prediction kind {kind!r}")
    lot_idx = fit.design.lot_levels.index(lot)
    lam = _conditional_lambda(fit, lot_idx, month)
    return float(lam @ fit.mme_inverse @ lam)


def predict(fit: FitResult, lot: str | None, month: float, kind: str,
            alpha: float = 0.05, ddf: float = np.nan) -> PredictionRow:
    """Conditional or marginal prediction row at (lot, month).

    The denominator degrees of freedom are supplied by the caller (see the
    ddf module); the lower confidence limit is one-sided at level alpha.
    """
    if not 0.0 < alpha <= 0.5:
        raise ValueError("alpha must be in (0, 0.5]")
    if kind not in ("conditional", "marginal"):
        raise ValueError(f"unknown prediction kind {kind!r}")
    design = fit.design
    x = np.array([1.0, month])
    pred = float(x @ fit.beta_hat)
    if kind == "conditional" and fit.spec.kind != OLS:
        if lot is None or lot not in design.lot_levels:
            raise ValueError(f"unknown lot {lot!r}")
        lot_idx = design.lot_levels.index(lot)
        for col in fit.active_cols:
            if design.z_lot[col] == lot_idx:
                pred += fit.blups[col] * (1.0 if design.z_comp[col] == 0 else month)
    v = prediction_variance(fit, lot, month, kind)
    se = math.sqrt(max(v, 0.0))
    lcl = pred - t_quantile(1.0 - alpha, ddf) * se if np.isfinite(ddf) else np.nan
    return PredictionRow(lot_id=lot, month=float(month), pred=pred, se_pred=se,
                         ddf=float(ddf), lcl=lcl, kind=kind, alpha=alpha)
