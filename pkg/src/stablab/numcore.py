"""Special functions, linear-algebra utilities, multivariate-Normal tail
probability, and reproducible random streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "RngStream",
    "t_quantile",
    "normal_quantile",
    "normal_cdf",
    "f_sf",
    "matrix_rank",
    "mvn_all_above",
    "rng_normal",
]

_MC_DRAWS = 2_000_000
_MC_SEED = 0x5AB1E
_QUAD_NODES = 201


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by (seed, setting, replicate).

    Distinct keys give statistically independent, order-independent streams,
    so parallel execution cannot change simulated results.
    """

    seed: int
    setting_index: int = 0
    replicate_index: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed,
                                    spawn_key=(self.setting_index, self.replicate_index))
        return np.random.Generator(np.random.Philox(ss))


def rng_normal(stream: RngStream, n: int) -> np.ndarray:
    """n iid N(0,1) draws, deterministic given the stream key."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    return stream.generator().standard_normal(n)


def t_quantile(p: float, df: float) -> float:
    """Student-t inverse CDF; fractional df allowed."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must be in (0,1), got {p}")
    if not df > 0:
        raise ValueError(f"df must be positive, got {df}")
    return float(special.stdtrit(df, p))


def normal_quantile(p: float) -> float:
    """Standard Normal inverse CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must be in (0,1), got {p}")
    return float(special.ndtri(p))


def normal_cdf(x: float) -> float:
    return float(special.ndtr(x))


def f_sf(x: float, df1: float, df2: float) -> float:
    """Upper tail probability of the F distribution (for pooling tests)."""
    if x < 0:
        return 1.0
    return float(special.fdtrc(df1, df2, x))


def matrix_rank(M: np.ndarray, tol: float = 1e-10) -> int:
    """Numerical rank: singular values below tol * s_max count as zero."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        raise ValueError("empty matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix entries must be finite")
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def _compound_symmetric(cov: np.ndarray, tol: float) -> tuple[float, float] | None:
    """Return (a, b) if cov is a*I + b*J within tol and b >= -tol, else None."""
    L = cov.shape[0]
    if L == 1:
        return float(cov[0, 0]), 0.0
    off = cov[~np.eye(L, dtype=bool)]
    b = float(off.mean())
    a = float(np.mean(np.diag(cov)) - b)
    model = a * np.eye(L) + b * np.ones((L, L))
    if np.max(np.abs(cov - model)) > tol or b < -tol:
        return None
    return a, max(b, 0.0)


def mvn_all_above(mean, cov, threshold: float) -> float:
    """P(min_i X_i >= threshold) for X ~ N(mean, cov).

    Compound-symmetric covariances (a*I + b*J with b >= 0) are evaluated by
    one-dimensional Gauss-Hermite quadrature over the shared factor; anything
    else falls back to fixed-seed Monte Carlo with 2e6 draws.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    L = mean.shape[0]
    if cov.shape != (L, L):
        raise ValueError(f"dimension mismatch: mean has length {L}, cov is {cov.shape}")
    scale = max(1.0, float(np.max(np.abs(cov))))
    if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
        raise ValueError("covariance must be symmetric")
    cov = 0.5 * (cov + cov.T)
    eigvals = np.linalg.eigvalsh(cov)
    if eigvals[0] < -1e-10 * scale:
        raise ValueError(f"covariance not PSD (min eigenvalue {eigvals[0]:.3e})")

    off = cov[~np.eye(L, dtype=bool)]
    if L == 1 or np.max(np.abs(off)) <= 1e-10 * scale:
        # independent components: exact product of one-dimensional tails
        sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        tails = np.where(sd > 0, special.ndtr((mean - threshold) / np.where(sd > 0, sd, 1.0)),
                         (mean >= threshold).astype(float))
        return float(np.prod(tails))
    cs = _compound_symmetric(cov, 1e-10 * scale)
    if cs is not None:
        a, b = cs
        return _all_above_cs(mean, a, b, threshold)
    return _all_above_mc(mean, cov, threshold)


def _all_above_cs(mean: np.ndarray, a: float, b: float, c: float) -> float:
    if a < 1e-14:
        # degenerate: all variation is the shared factor
        if b < 1e-14:
            return float(np.all(mean >= c))
        return float(special.ndtr((np.min(mean) - c) / np.sqrt(b)))
    nodes, weights = np.polynomial.hermite.hermgauss(_QUAD_NODES)
    # shared factor u = sqrt(2) * x under the Hermite weight exp(-x^2)
    u = np.sqrt(2.0) * nodes
    z = (mean[None, :] - c + np.sqrt(b) * u[:, None]) / np.sqrt(a)
    integrand = np.prod(special.ndtr(z), axis=1)
    return float(np.dot(weights, integrand) / np.sqrt(np.pi))


def _all_above_mc(mean: np.ndarray, cov: np.ndarray, c: float) -> float:
    L = mean.shape[0]
    w, Q = np.linalg.eigh(cov)
    root = Q * np.sqrt(np.clip(w, 0.0, None))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=_MC_SEED)))
    hits = 0
    chunk = 250_000
    total = _MC_DRAWS
    done = 0
    while done < total:
        k = min(chunk, total - done)
        x = rng.standard_normal((k, L)) @ root.T + mean
        hits += int(np.sum(x.min(axis=1) >= c))
        done += k
    return hits / total
