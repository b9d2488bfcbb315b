import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atebench.hal import (
    BasisFunction,
    CapacityError,
    FoldError,
    HalConfig,
    HalFit,
    cv_select_lambda,
    enumerate_basis,
    evaluate_basis,
    fit_hal,
    fit_lasso_path,
    lambda_grid,
    lambda_max,
    lasso_path,
    make_folds,
    max_degree_for,
    normalized_scores,
    predict,
    score_threshold,
    undersmooth,
)
from atebench.hal.basis import BasisExpansion
from atebench.hal.fit import CvResult, _from_solution, anchor_state


# basis


def test_dedup_single_covariate():
    X = np.array([[0.2], [0.5], [0.5]])
    exp = enumerate_basis(X, max_degree=1, knot_rule=False)
    assert [f.knot for f in exp.functions] == [(0.2,), (0.5,)]


def test_two_binary_covariates_degree_two():
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]] * 4, dtype=float)
    exp = enumerate_basis(X, max_degree=2)
    nontrivial = [f for f, col in zip(exp.functions, exp.design.T) if not col.all()]
    assert {(f.support, f.knot) for f in nontrivial} == {
        ((0,), (1.0,)),
        ((1,), (1.0,)),
        ((0, 1), (1.0, 1.0)),
    }
    cols = {tuple(c) for c in exp.design.T}
    assert len(cols) == exp.n_functions
    assert exp.design.any(axis=0).all()


def test_max_degree_rule():
    assert max_degree_for(20) == 2
    assert max_degree_for(19) == 3


def test_knot_cap_bins_marginals():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(100, 2))
    exp = enumerate_basis(X, max_degree=2)
    main = [f for f in exp.functions if f.degree == 1 and f.support == (0,)]
    assert len(main) <= 10
    pairs = [f for f in exp.functions if f.degree == 2]
    assert len({f.knot[0] for f in pairs}) <= 5


def test_capacity_error():
    X = np.random.default_rng(1).normal(size=(400, 6))
    with pytest.raises(CapacityError):
        enumerate_basis(X, max_degree=3, max_columns=50)


def test_evaluate_examples():
    assert evaluate_basis(BasisFunction((0,), (0.2,)), [0.3]) == 1
    assert evaluate_basis(BasisFunction((0, 1), (0.2, 0.7)), [0.3, 0.5]) == 0
    assert evaluate_basis(BasisFunction((0,), (0.2,)), [0.2]) == 1


def test_basis_function_validation():
    with pytest.raises(ValueError):
        BasisFunction((1, 0), (0.0, 0.0))
    with pytest.raises(ValueError):
        BasisFunction((), ())


@settings(max_examples=200, deadline=None)
@given(
    knot=st.lists(st.floats(-5, 5), min_size=2, max_size=2),
    x=st.lists(st.floats(-5, 5), min_size=2, max_size=2),
    bump=st.lists(st.floats(0, 3), min_size=2, max_size=2),
)
def test_evaluate_monotone(knot, x, bump):
    f = BasisFunction((0, 1), tuple(knot))
    x2 = [a + b for a, b in zip(x, bump)]
    assert evaluate_basis(f, x) <= evaluate_basis(f, x2)


# lasso path


def random_problem(rng, n=60, p=8):
    X = (rng.normal(size=(n, p)) > 0).astype(np.uint8)
    y = X[:, 0] * 1.5 - X[:, 1] + rng.normal(size=n)
    return X, y


def test_null_model_above_lambda_max():
    rng = np.random.default_rng(2)
    X, y = random_problem(rng)
    lm = lambda_max(X, y)
    fits = fit_lasso_path(X, y, "gaussian", [lm * 1.01, lm])
    for fit in fits:
        assert fit.n_nonzero == 0
        assert fit.intercept == pytest.approx(y.mean())


def test_constant_y_gives_zero_coefficients():
    rng = np.random.default_rng(3)
    X, _ = random_problem(rng)
    fits = fit_lasso_path(X, np.full(60, 2.0), "gaussian", [1.0, 0.1, 0.01])
    assert all(f.n_nonzero == 0 for f in fits)


def test_single_column_soft_threshold():
    rng = np.random.default_rng(4)
    phi = (rng.uniform(size=40) > 0.4).astype(float)
    y = 2 * phi + rng.normal(size=40)
    lam = 0.05
    cov = np.mean((phi - phi.mean()) * (y - y.mean()))
    var = phi.var()
    z = cov / var
    expected = np.sign(z) * max(abs(z) - lam / var, 0.0)
    fit = fit_lasso_path(phi[:, None], y, "gaussian", [lam])[0]
    assert fit.coef[0] == pytest.approx(expected, abs=1e-6)


def test_non_finite_y_rejected():
    X = np.eye(3, dtype=np.uint8)
    with pytest.raises(ValueError):
        fit_lasso_path(X, np.array([1.0, np.nan, 0.0]), "gaussian", [0.1])


@pytest.mark.parametrize("family", ["gaussian", "binomial"])
def test_kkt_conditions(family):
    rng = np.random.default_rng(5)
    X, y = random_problem(rng, n=120, p=10)
    if family == "binomial":
        y = (y > 0).astype(float)
    lams = lambda_grid(lambda_max(X, y), 10, 1e-2)
    for sol in lasso_path(X, y, family, lams):
        eta = sol.intercept + X @ sol.coef
        mu = 1 / (1 + np.exp(-eta)) if family == "binomial" else eta
        grad = X.T @ (y - mu) / len(y)
        active = sol.coef != 0
        assert np.all(np.abs(grad[~active]) <= sol.lam + 1e-6)
        np.testing.assert_allclose(grad[active], sol.lam * np.sign(sol.coef[active]), atol=1e-6)
        assert abs(np.mean(y - mu)) < 1e-6


def test_path_l1_monotone():
    rng = np.random.default_rng(6)
    X, y = random_problem(rng, n=100, p=6)
    lams = lambda_grid(lambda_max(X, y), 30, 1e-3)
    l1 = [f.l1_norm for f in fit_lasso_path(X, y, "gaussian", lams)]
    assert np.all(np.diff(l1) >= -1e-6)


# cross-validation


def test_loo_folds():
    folds = make_folds(10, 10, np.random.default_rng(0))
    assert sorted(np.bincount(folds)) == [1] * 10


def test_too_few_rows_for_folds():
    with pytest.raises(FoldError):
        cv_select_lambda(np.eye(5, dtype=np.uint8), np.arange(5.0), "gaussian", folds=10)


def test_cv_pure_noise_near_null():
    rng = np.random.default_rng(7)
    X = (rng.normal(size=(200, 10)) > 0).astype(np.uint8)
    y = rng.normal(size=200)
    cv = cv_select_lambda(X, y, "gaussian", 10, rng)
    assert cv.fit.n_nonzero <= 3
    assert cv.lambda_cv >= cv.lambdas[0] * 0.3


def test_cv_linear_signal_active():
    rng = np.random.default_rng(8)
    X = (rng.normal(size=(500, 10)) > 0).astype(np.uint8)
    y = 3.0 * X[:, 4] + 0.1 * rng.normal(size=500)
    cv = cv_select_lambda(X, y, "gaussian", 10, rng)
    assert cv.solution.coef[4] > 2.5


# normalized scores and undersmoothing


def manual_anchor(r_cv, Phi):
    expansion = BasisExpansion(tuple(BasisFunction((j,), (0.5,)) for j in range(Phi.shape[1])), Phi)
    y = np.zeros(len(r_cv))
    cv_fit = HalFit(0.0, (), np.zeros(0), 1.0, "gaussian", y - r_cv)
    return expansion, anchor_state(cv_fit, expansion, y, np.arange(Phi.shape[1])), y


def test_normalized_score_hand_example():
    Phi = np.array([[1], [0]], dtype=np.uint8)
    expansion, anchor, y = manual_anchor(np.array([1.0, -1.0]), Phi)
    current = HalFit(0.0, (), np.zeros(0), 0.5, "gaussian", y - np.array([1.0, -1.0]))
    assert normalized_scores(current, anchor, expansion, y)[0] == pytest.approx(1.0)


def test_normalized_score_saturated_and_intercept_direction():
    Phi = np.array([[1, 1], [1, 0], [1, 1], [1, 0]], dtype=np.uint8)
    r_cv = np.array([1.0, -2.0, 0.5, 0.3])
    expansion, anchor, y = manual_anchor(r_cv, Phi)
    saturated = HalFit(0.0, (), np.zeros(0), 0.1, "gaussian", y.copy())
    assert np.all(normalized_scores(saturated, anchor, expansion, y) == 0)
    mean_zero = HalFit(0.0, (), np.zeros(0), 0.1, "gaussian", y - np.array([1.0, -1.0, 2.0, -2.0]))
    assert normalized_scores(mean_zero, anchor, expansion, y)[0] == 0


def test_zero_denominator_directions_excluded():
    Phi = np.array([[1, 0], [0, 0], [1, 0]], dtype=np.uint8)
    expansion, anchor, _ = manual_anchor(np.array([1.0, 2.0, 3.0]), Phi)
    assert len(anchor.active_directions) == 1
    assert len(anchor.excluded) == 1


def test_threshold_value():
    assert score_threshold(100) == pytest.approx(0.021714, abs=1e-6)


def test_criterion_met_at_cv_takes_no_steps():
    rng = np.random.default_rng(9)
    X, y = random_problem(rng, n=80, p=4)
    sol = lasso_path(X, y, "gaussian", [1e-10])[0]
    exp = BasisExpansion(tuple(BasisFunction((j,), (0.5,)) for j in range(4)), X)
    cv_fit = _from_solution(exp, sol, "gaussian")
    cv = CvResult(1e-10, cv_fit, np.array([1e-10]), np.array([0.0]), sol)
    fit, state = undersmooth(exp, y, "gaussian", HalConfig(), cv=cv)
    assert state.steps_taken == 0 and state.converged
    assert fit is cv_fit


def test_null_model_skips_undersmoothing():
    rng = np.random.default_rng(10)
    X = (rng.normal(size=(100, 3)) > 0).astype(float)
    res = fit_hal(X, rng.normal(size=100), HalConfig(), rng)
    if res.cv_fit.n_nonzero == 0:
        assert res.state.skipped and res.fit is res.cv_fit
    y = np.full(100, 0.3)
    res = fit_hal(X, y, HalConfig(), rng)
    assert res.state.skipped and res.fit.n_nonzero == 0


def test_undersmooth_post_condition():
    rng = np.random.default_rng(11)
    X = rng.uniform(-1, 1, size=(200, 2))
    y = np.sin(3 * X[:, 0]) + (X[:, 1] > 0) + 0.3 * rng.normal(size=200)
    res = fit_hal(X, y, HalConfig(), rng)
    if res.state.converged:
        assert res.state.max_score <= score_threshold(200)
    assert res.fit.lam <= res.cv_fit.lam
    assert res.fit.l1_norm == pytest.approx(np.abs(res.fit.coef).sum())


# predict and serialization


def test_predict_examples():
    f = BasisFunction((0,), (0.0,))
    null_g = HalFit(1.5, (), np.zeros(0), 0.1, "gaussian", np.zeros(2))
    np.testing.assert_array_equal(predict(null_g, np.zeros((3, 1))), 1.5)
    null_b = HalFit(0.0, (), np.zeros(0), 0.1, "binomial", np.full(2, 0.5))
    np.testing.assert_array_equal(predict(null_b, np.zeros((3, 1))), 0.5)
    one = HalFit(1.0, (f,), np.array([2.0]), 0.1, "gaussian", np.zeros(2))
    assert predict(one, np.array([[1.0]]))[0] == 3.0


@pytest.mark.parametrize("family", ["gaussian", "binomial"])
def test_predict_reproduces_fitted_and_json_round_trip(family):
    rng = np.random.default_rng(12)
    X = rng.uniform(size=(150, 3))
    eta = 2 * (X[:, 0] > 0.5) - (X[:, 1] > 0.3)
    y = eta + 0.5 * rng.normal(size=150)
    if family == "binomial":
        y = (rng.uniform(size=150) < 1 / (1 + np.exp(-eta))).astype(float)
    fit = fit_hal(X, y, HalConfig(family=family), rng).fit
    np.testing.assert_array_equal(predict(fit, X), fit.fitted_values)
    back = HalFit.from_json(fit.to_json())
    assert back.intercept == fit.intercept and back.lam == fit.lam
    np.testing.assert_array_equal(back.coef, fit.coef)
    assert back.functions == fit.functions
    np.testing.assert_array_equal(predict(back, X), predict(fit, X))
    if family == "binomial":
        assert np.all((fit.fitted_values > 0) & (fit.fitted_values < 1))


def test_config_validation():
    with pytest.raises(ValueError):
        HalConfig(undersmooth_decay=1.0)
    with pytest.raises(ValueError):
        HalConfig(lambda_grid_size=1)
    assert math.isclose(HalConfig().undersmooth_decay, 0.9)
