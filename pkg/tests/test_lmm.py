import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from stablab.lmm import (
    ConvergenceError,
    ModelSpec,
    Theta,
    asycov_full,
    build_design,
    fit_at_theta,
    fit_reml,
    information_matrices,
    mme_solve,
    predict,
    prediction_variance,
    reml_criterion,
)

from conftest import WORKED_MONTHS, WORKED_THETA, balanced_dataset, simulated_ri


def dense_reml(theta: Theta, design, y) -> float:
    """Independent dense-matrix restricted log-likelihood."""
    n, p = design.n, design.p
    V = theta.sigma2_e * np.eye(n)
    for c in range(design.spec.n_vc):
        var = theta.random_vector(design.spec)[c]
        if var > 0:
            Zc = design.Z[:, design.z_comp == c]
            V += var * (Zc @ Zc.T)
    Vi = np.linalg.inv(V)
    X = design.X
    XtViX = X.T @ Vi @ X
    beta = np.linalg.solve(XtViX, X.T @ Vi @ y)
    r = y - X @ beta
    return float(-0.5 * (np.linalg.slogdet(V)[1] + np.linalg.slogdet(XtViX)[1]
                         + r @ Vi @ r) - (n - p) / 2 * math.log(2 * math.pi))


def test_reml_criterion_matches_dense_oracle():
    ds, _ = simulated_ri(6, (0, 3, 6, 12, 24), 0.4, seed=1)
    for kind, theta in [
        ("ri", Theta(0.3, None, 0.8)),
        ("ris", Theta(0.3, 2e-4, 0.8)),
        ("ols", Theta(None, None, 1.1)),
    ]:
        design = build_design(ds, ModelSpec(kind))
        got = reml_criterion(theta, design, ds.values)
        want = dense_reml(theta, design, ds.values)
        assert got == pytest.approx(want, rel=1e-10, abs=1e-9)


def test_reml_criterion_scale_equivariance():
    ds, _ = simulated_ri(5, (0, 6, 12, 24), 0.3, seed=2)
    design = build_design(ds, ModelSpec("ri"))
    theta = Theta(0.2, None, 0.9)
    base = reml_criterion(theta, design, ds.values)
    c2 = 7.3
    scaled = reml_criterion(Theta(0.2 * c2, None, 0.9 * c2), design,
                            ds.values * math.sqrt(c2))
    npp = design.n - design.p
    assert scaled == pytest.approx(base - npp / 2 * math.log(c2), rel=1e-12)


def test_reml_criterion_ri_nests_ols():
    ds, _ = simulated_ri(5, (0, 6, 12, 24), 0.3, seed=3)
    d_ri = build_design(ds, ModelSpec("ri"))
    d_ols = build_design(ds, ModelSpec("ols"))
    s2 = 0.834
    assert reml_criterion(Theta(0.0, None, s2), d_ri, ds.values) == pytest.approx(
        reml_criterion(Theta(None, None, s2), d_ols, ds.values), rel=1e-12)


def test_ols_fit_matches_normal_equations():
    ds, _ = simulated_ri(6, (0, 3, 9, 18, 36), 0.0, seed=4)
    design = build_design(ds, ModelSpec("ols"))
    fit = fit_reml(design, ds.values)
    X, y = design.X, ds.values
    beta = np.linalg.solve(X.T @ X, X.T @ y)
    assert_allclose(fit.beta_hat, beta, rtol=1e-12)
    rss = float(np.sum((y - X @ beta) ** 2))
    assert fit.theta_hat.sigma2_e == pytest.approx(rss / (design.n - 2), rel=1e-12)
    # closed-form OLS restricted likelihood
    npp = design.n - 2
    s2 = rss / npp
    want = -0.5 * (npp * (1 + math.log(s2)) + math.log(np.linalg.det(X.T @ X))) \
        - npp / 2 * math.log(2 * math.pi)
    assert fit.reml_loglik == pytest.approx(want, rel=1e-12)
    assert fit.asycov[0, 0] == pytest.approx(2 * s2 ** 2 / npp, rel=1e-12)


def test_mme_identities_against_gls():
    ds, _ = simulated_ri(7, (0, 3, 6, 12, 24, 36), 0.5, seed=5)
    design = build_design(ds, ModelSpec("ris"))
    theta = Theta(0.4, 3e-4, 0.7)
    beta, blups, C = mme_solve(theta, design, ds.values)
    y = ds.values
    G = np.diag(np.concatenate([np.full(7, 0.4), np.full(7, 3e-4)]))
    V = theta.sigma2_e * np.eye(design.n) + design.Z @ G @ design.Z.T
    Vi = np.linalg.inv(V)
    X = design.X
    beta_gls = np.linalg.solve(X.T @ Vi @ X, X.T @ Vi @ y)
    assert_allclose(beta, beta_gls, rtol=1e-10)
    blup_ref = G @ design.Z.T @ Vi @ (y - X @ beta_gls)
    assert_allclose(blups, blup_ref, rtol=1e-9, atol=1e-12)
    # fixed block of the MME inverse is the GLS covariance
    assert_allclose(C[:2, :2], np.linalg.inv(X.T @ Vi @ X), rtol=1e-10)


def test_mme_balanced_exchangeability():
    ds, _ = simulated_ri(10, (0, 3, 6, 9, 12, 24, 36), 0.5, seed=6)
    design = build_design(ds, ModelSpec("ri"))
    theta = Theta(0.5, None, 0.5)
    _, _, C = mme_solve(theta, design, ds.values)
    diag = np.diag(C)[2:]
    assert np.ptp(diag) < 1e-12


def test_fit_reml_boundary_exact_zero():
    # identical lots: between-lot variance cannot be positive at the optimum
    months = (0, 3, 6, 9, 12, 24, 36)
    base = 100.0 - 0.1 * np.asarray(months)
    values = np.concatenate([base + [0.3, -0.2, 0.1, 0.0, -0.1, 0.2, -0.3]] * 4)
    ds = balanced_dataset(4, months, values=values)
    fit = fit_reml(build_design(ds, ModelSpec("ri")), ds.values)
    assert fit.theta_hat.sigma2_b0 == 0.0
    assert fit.boundary_flags == (True,)
    assert fit.asycov_params == ("sigma2_e",)


def test_fit_reml_nesting_monotonicity():
    for seed in range(4):
        ds, _ = simulated_ri(8, (0, 3, 6, 12, 24, 36), 0.3, seed=seed)
        lls = {}
        for kind in ("ris", "ri", "ols"):
            fit = fit_reml(build_design(ds, ModelSpec(kind)), ds.values,
                           compute_asycov=False)
            lls[kind] = fit.reml_loglik
        assert lls["ris"] >= lls["ri"] - 1e-8
        assert lls["ri"] >= lls["ols"] - 1e-8


def test_fit_reml_ri_matches_grid_oracle_small():
    from oracles import balanced_ri_oracle_optimum
    for seed in (0, 1):
        ds, _ = simulated_ri(10, (0, 3, 6, 9, 12, 24, 36), 0.25, seed=seed)
        fit = fit_reml(build_design(ds, ModelSpec("ri")), ds.values,
                       compute_asycov=False)
        oracle = balanced_ri_oracle_optimum(ds)
        assert abs(oracle - fit.reml_loglik) <= 1e-6 * abs(fit.reml_loglik)


def test_predict_ols_conditional_equals_marginal(ds_10x7):
    design = build_design(ds_10x7, ModelSpec("ols"))
    fit = fit_reml(design, ds_10x7.values)
    for month in (0.0, 24.0, 48.0):
        rc = predict(fit, "A", month, "conditional", 0.05, 68.0)
        rm = predict(fit, "A", month, "marginal", 0.05, 68.0)
        assert rc.pred == rm.pred
        assert rc.se_pred == rm.se_pred
        assert rc.lcl == rm.lcl


def test_predict_lcl_arithmetic():
    from stablab.numcore import t_quantile
    ds, _ = simulated_ri(4, (0, 6, 12, 24), 0.2, seed=9)
    fit = fit_reml(build_design(ds, ModelSpec("ri")), ds.values)
    row = predict(fit, "B", 18.0, "conditional", 0.05, 40.0)
    assert row.lcl == pytest.approx(row.pred - t_quantile(0.95, 40.0) * row.se_pred,
                                    rel=1e-15)
    with pytest.raises(ValueError, match="unknown lot"):
        predict(fit, "Z", 18.0, "conditional", 0.05, 40.0)
    with pytest.raises(ValueError, match="alpha"):
        predict(fit, "B", 18.0, "conditional", 0.9, 40.0)


def test_conditional_se_dominates_marginal_near_boundary():
    # holds in the small-lot-variance regime the study targets; at large
    # vcfrac the lot's own data pin the conditional mean more tightly than
    # the marginal line, so the ordering genuinely reverses there
    for vc, seed in ((0.02, 0), (0.1, 1), (0.25, 2)):
        ds, _ = simulated_ri(10, (0, 3, 6, 9, 12, 24, 36), vc, seed=seed)
        fit = fit_reml(build_design(ds, ModelSpec("ri")), ds.values)
        if fit.theta_hat.vcfrac() > 0.4:
            continue
        for month in (0.0, 12.0, 36.0, 48.0):
            vc_ = prediction_variance(fit, "C", month, "conditional")
            vm_ = prediction_variance(fit, "C", month, "marginal")
            assert vc_ >= vm_ - 1e-12


def test_conditional_se_exchangeable_across_lots(ds_10x7):
    fit = fit_reml(build_design(ds_10x7, ModelSpec("ri")), ds_10x7.values)
    ses = [prediction_variance(fit, lot, 48.0, "conditional")
           for lot in ds_10x7.lot_levels]
    assert np.ptp(ses) < 1e-12


def test_worked_example_prediction_variances():
    ds = balanced_dataset(14, WORKED_MONTHS)
    design = build_design(ds, ModelSpec("ri"))
    fit = fit_at_theta(design, ds.values, WORKED_THETA)
    v_cond = prediction_variance(fit, "G", 24.0, "conditional")
    v_marg = prediction_variance(fit, "G", 24.0, "marginal")
    assert v_cond == pytest.approx(0.005451, abs=1.5e-6)
    assert v_marg == pytest.approx(0.002212, abs=1e-6)


def test_observed_information_matches_fd_at_interior_fit():
    ds, _ = simulated_ri(10, (0, 3, 6, 9, 12, 24, 36), 0.5, seed=13)
    design = build_design(ds, ModelSpec("ri"))
    fit = fit_reml(design, ds.values)
    th = fit.theta_hat
    x0 = np.array([th.sigma2_b0, th.sigma2_e])

    def nll(params):
        return -dense_reml(Theta(params[0], None, params[1]), design, ds.values)

    H_fd = np.empty((2, 2))
    h = 1e-4 * x0
    f0 = nll(x0)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h[i]
        H_fd[i, i] = (nll(x0 + e) - 2 * f0 + nll(x0 - e)) / h[i] ** 2
    e0, e1 = np.array([h[0], 0.0]), np.array([0.0, h[1]])
    H_fd[0, 1] = H_fd[1, 0] = (nll(x0 + e0 + e1) - nll(x0 + e0 - e1)
                               - nll(x0 - e0 + e1) + nll(x0 - e0 - e1)) / (4 * h[0] * h[1])
    H_an, _ = information_matrices(design, ds.values, fit.theta_random, th.sigma2_e)
    assert_allclose(H_an, H_fd, rtol=2e-4)
    # the fit's asycov is the inverse of this Hessian at interior fits
    assert_allclose(fit.asycov, np.linalg.inv(H_an), rtol=1e-8)
    assert_allclose(asycov_full(fit), fit.asycov, rtol=1e-10)


def test_asycov_positive_semidefinite():
    for seed in range(3):
        ds, _ = simulated_ri(10, (0, 3, 6, 9, 12, 24, 36), 0.3, seed=seed)
        fit = fit_reml(build_design(ds, ModelSpec("ris")), ds.values)
        if fit.asycov is not None:
            eig = np.linalg.eigvalsh(fit.asycov)
            assert eig[0] > -1e-8
            assert_allclose(fit.asycov, fit.asycov.T, atol=1e-12)


def test_degenerate_ris_design_accepted():
    # one lot observed at a single time point: G inverse still regularizes
    lots = ("A",) * 7 + ("B",) * 7 + ("C",)
    months = np.array([0, 3, 6, 9, 12, 24, 36, 0, 3, 6, 9, 12, 24, 36, 12], dtype=float)
    rng = np.random.default_rng(8)
    values = 100 - 0.15 * months + rng.standard_normal(months.size)
    from stablab.data import StabilityDataset
    ds = StabilityDataset(lots, months, values)
    fit = fit_reml(build_design(ds, ModelSpec("ris")), ds.values, compute_asycov=False)
    assert np.isfinite(fit.reml_loglik)


def test_fit_requires_enough_observations():
    from stablab.data import StabilityDataset
    ds = StabilityDataset(("A", "A", "B", "B"), np.array([0.0, 3.0, 0.0, 6.0]),
                          np.array([1.0, 2.0, 3.0, 4.0]))
    with pytest.raises(ValueError, match="observations"):
        fit_reml(build_design(ds, ModelSpec("ris")), ds.values)


def test_design_fingerprint_stable(ds_10x7):
    d1 = build_design(ds_10x7, ModelSpec("ri"))
    d2 = build_design(ds_10x7, ModelSpec("ri"))
    assert d1.fingerprint() == d2.fingerprint()
    d3 = build_design(ds_10x7, ModelSpec("ris"))
    assert d3.fingerprint() != d1.fingerprint()
