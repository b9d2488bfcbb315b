import math

import numpy as np
import pytest

from atebench.estimators import (
    METHODS,
    Z_975,
    AteEstimate,
    DegenerateArmError,
    FluctuationError,
    NuisanceBundle,
    aiptw,
    build_nuisances,
    bundle_from_fits,
    bundles_needed,
    canonical_method,
    ctmle_greedy,
    cv_variant,
    diff_in_means,
    estimate,
    fit_nuisances,
    iptw,
    iptw_hajek,
    solve_epsilon,
    tmle,
    truncate_g,
)
from atebench.learners import logistic_regression
from atebench.super_learner import SlConfig, make_folds
from conftest import make_data
from oracles import expit, oracle_tmle


def bundle(g, qa=None, q1=None, q0=None, cross=False):
    g = np.asarray(g, dtype=float)
    z = np.zeros_like(g)
    return NuisanceBundle(g, z if qa is None else qa, z if q1 is None else q1,
                          z if q0 is None else q0, cross)


def random_case(rng, n=200, extreme=False):
    W = rng.normal(size=n)
    g_true = expit(2.5 * W if extreme else 0.8 * W)
    A = (rng.uniform(size=n) < g_true).astype(float)
    Y = 1 + A + W + rng.normal(size=n)
    q1 = 2 + 0.7 * W + 0.3 * rng.normal(size=n)
    q0 = 1 + 0.7 * W + 0.3 * rng.normal(size=n)
    qa = np.where(A == 1, q1, q0)
    g = truncate_g(np.clip(g_true + 0.1 * rng.normal(size=n), 0.001, 0.999))
    return make_data(A, Y, W), NuisanceBundle(g, qa, q1, q0)


# truncation and IPTW


def test_truncate_g():
    np.testing.assert_array_equal(truncate_g([0.01, 0.5, 0.99]), [0.025, 0.5, 0.975])


def test_iptw_balanced_example():
    data, b = make_data([1, 0], [3, 1]), bundle([0.5, 0.5])
    assert iptw(data, b).psi == pytest.approx(2.0)
    assert iptw_hajek(data, b).psi == pytest.approx(2.0)


def test_iptw_four_row_example_and_shift():
    b = bundle([0.5, 0.5, 0.8, 0.2])
    data = make_data([1, 0, 1, 0], [2, 0, 4, 2])
    assert iptw(data, b).psi == pytest.approx(1.625)
    assert iptw_hajek(data, b).psi == pytest.approx(2.0)
    shifted = make_data([1, 0, 1, 0], np.array([2, 0, 4, 2]) + 10.0)
    assert abs(iptw_hajek(shifted, b).psi - 2.0) < 1e-10
    # both arms' weights sum to 3.25 here, so the plain form is shift invariant too
    assert iptw(shifted, b).psi == pytest.approx(1.625)
    unequal = bundle([0.5, 0.5, 0.8, 0.4])
    assert iptw(shifted, unequal).psi != pytest.approx(iptw(data, unequal).psi)
    assert abs(iptw_hajek(shifted, unequal).psi - iptw_hajek(data, unequal).psi) < 1e-10


def test_iptw_ic_and_names():
    data, b = make_data([1, 0, 1, 0], [2, 0, 4, 2]), bundle([0.5, 0.5, 0.8, 0.2])
    plain, hajek = iptw(data, b), iptw_hajek(data, b)
    assert plain.method == "IPTW-unnormalized" and hajek.method == "IPTW"
    np.testing.assert_allclose(hajek.ic, plain.ic)
    expected = np.array([4.0, 0.0, 5.0, -2.5]) - 1.625
    np.testing.assert_allclose(plain.ic, expected)
    assert plain.se == pytest.approx(np.std(expected, ddof=1) / 2)


def test_degenerate_arm():
    with pytest.raises(DegenerateArmError):
        iptw(make_data([1, 1], [1, 2]), bundle([0.5, 0.5]))


# A-IPTW


def test_aiptw_hand_case():
    data = make_data([1, 0], [2, 1])
    b = bundle([0.5, 0.5], qa=np.array([1.0, 0.0]), q1=np.ones(2), q0=np.zeros(2))
    assert aiptw(data, b).psi == pytest.approx(1.0)


def test_aiptw_reductions(rng):
    data, b = random_case(rng)
    exact = make_data(data.A, b.qbar_a, data.W)
    assert aiptw(exact, b).psi == pytest.approx(np.mean(b.qbar_1 - b.qbar_0))
    zero_q = bundle(b.g)
    assert aiptw(data, zero_q).psi == pytest.approx(iptw(data, zero_q).psi)
    est = aiptw(data, b)
    assert abs(est.ic.mean()) <= 1e-12 * max(1.0, abs(est.psi))


# TMLE


FIXTURE = dict(
    A=np.array([1.0, 0.0, 1.0, 0.0]),
    Y=np.array([2.0, 0.5, 3.0, 1.5]),
    g=np.array([0.6, 0.3, 0.8, 0.5]),
    q1=np.array([2.2, 1.8, 2.6, 2.0]),
    q0=np.array([1.0, 0.7, 1.4, 1.1]),
)


def test_tmle_matches_bisection_oracle_on_fixture():
    f = FIXTURE
    qa = np.where(f["A"] == 1, f["q1"], f["q0"])
    est = tmle(make_data(f["A"], f["Y"]), NuisanceBundle(f["g"], qa, f["q1"], f["q0"]))
    assert est.psi == pytest.approx(oracle_tmle(f["A"], f["Y"], f["g"], qa, f["q1"], f["q0"]), abs=1e-8)
    assert abs(est.ic.mean()) <= 1e-8 * est.ic.std(ddof=1)


def test_tmle_score_identity_random_bundles(rng):
    for k in range(30):
        data, b = random_case(rng, extreme=k % 2 == 1)
        est = tmle(data, b)
        assert abs(est.ic.mean()) <= 1e-8 * est.ic.std(ddof=1)
        oracle = oracle_tmle(data.A, data.Y, b.g, b.qbar_a, b.qbar_1, b.qbar_0)
        assert est.psi == pytest.approx(oracle, abs=1e-8)
        assert np.isfinite(est.psi)
        assert est.ci_width == pytest.approx(2 * Z_975 * est.se)


def test_tmle_zero_score_gives_zero_epsilon():
    A = np.array([1.0, 1.0, 0.0, 0.0])
    g = np.full(4, 0.5)
    q1 = np.array([2.0, 2.0, 2.0, 2.0])
    q0 = np.array([1.0, 1.0, 0.5, 0.5])
    qa = np.where(A == 1, q1, q0)
    Y = qa + np.array([0.3, -0.3, 0.2, -0.2])
    est = tmle(make_data(A, Y), NuisanceBundle(g, qa, q1, q0))
    assert est.diagnostics["epsilon"] == pytest.approx(0.0, abs=1e-12)
    assert est.psi == pytest.approx(np.mean(q1 - q0), abs=1e-10)


def test_solve_epsilon_no_root():
    H = np.array([1.0, 1.0])
    with pytest.raises(FluctuationError):
        solve_epsilon(np.array([1.0, 1.0]), np.array([-30.0, -30.0]), H)


def test_tmle_constant_outcome():
    A = np.array([1.0, 0.0, 1.0, 0.0])
    est = tmle(make_data(A, np.full(4, 3.0)), bundle(np.full(4, 0.5), np.full(4, 3.0),
                                                     np.full(4, 3.0), np.full(4, 3.0)))
    assert est.psi == pytest.approx(0.0, abs=1e-12)


def test_tmle_plugin_bounded_at_truncation(rng):
    data, b = random_case(rng, extreme=True)
    b = NuisanceBundle(np.where(b.g > 0.5, 0.975, 0.025), b.qbar_a, b.qbar_1, b.qbar_0)
    est = tmle(data, b)
    assert np.isfinite(est.psi) and np.isfinite(est.se)


# CV variants


def test_cv_variant_equal_bundle(rng):
    data, b = random_case(rng)
    cross = NuisanceBundle(b.g, b.qbar_a, b.qbar_1, b.qbar_0, cross_fitted=True)
    for name, base in (("iptw", iptw_hajek), ("aiptw", aiptw), ("tmle", tmle)):
        cv = cv_variant(name, data, cross)
        assert cv.method == "CV-" + base(data, b).method
        assert cv.psi == base(data, b).psi
    with pytest.raises(ValueError):
        cv_variant("tmle", data, b)
    with pytest.raises(ValueError):
        cv_variant("ctmle", data, cross)


def test_cv_iptw_close_to_iptw_under_randomization():
    rng = np.random.default_rng(31)
    cfg = SlConfig(library=("mean", "glm"))
    for _ in range(50):
        n = 2000
        W = rng.normal(size=(n, 2))
        A = (rng.uniform(size=n) < 0.5).astype(float)
        Y = W[:, 0] + A + rng.normal(size=n)
        data = make_data(A, Y, W)
        fits = fit_nuisances(data, cfg, rng)
        plain = bundle_from_fits(data, fits, "plain")
        cross = bundle_from_fits(data, fits, "cross_fitted")
        delta = estimate("CV-IPTW", data, cross=cross).psi - estimate("IPTW", data, plain).psi
        assert abs(delta) < 0.02


def test_cv_tmle_score_identity(rng):
    n = 400
    W = rng.normal(size=(n, 2))
    A = (rng.uniform(size=n) < expit(W[:, 0])).astype(float)
    Y = W[:, 1] + A + rng.normal(size=n)
    data = make_data(A, Y, W)
    cross = build_nuisances(data, SlConfig(library=("mean", "glm", "boost_50")), "cross_fitted", rng)
    est = cv_variant("tmle", data, cross)
    assert abs(est.ic.mean()) <= 1e-8 * est.ic.std(ddof=1)


# C-TMLE


def test_ctmle_no_covariates_is_marginal_tmle(rng):
    data, b = random_case(rng)
    Z = np.zeros((len(data.A), 0))
    est = ctmle_greedy(data, Z, b, make_folds(len(data.A), 5, rng))
    g = np.full(len(data.A), data.A.mean())
    ref = tmle(data, NuisanceBundle(g, b.qbar_a, b.qbar_1, b.qbar_0))
    assert est.diagnostics["selected_index"] == 0
    assert est.psi == pytest.approx(ref.psi, abs=1e-8)


def test_ctmle_single_confounder_matches_tmle():
    rng = np.random.default_rng(5)
    n = 600
    W = rng.normal(size=n)
    A = (rng.uniform(size=n) < expit(1.2 * W)).astype(float)
    Y = 2 * W + A + 0.5 * rng.normal(size=n)
    data = make_data(A, Y, W)
    # misspecified Q leaves confounding for g to remove
    q1, q0 = np.full(n, Y[A == 1].mean()), np.full(n, Y[A == 0].mean())
    b = NuisanceBundle(np.full(n, 0.5), np.where(A == 1, q1, q0), q1, q0)
    est = ctmle_greedy(data, W[:, None], b, make_folds(n, 5, rng))
    assert est.diagnostics["selected_index"] == 1
    assert est.diagnostics["n_fluctuations"] == 1
    beta = logistic_regression(W[:, None], A)
    g = truncate_g(expit(beta[0] + beta[1] * W))
    ref = tmle(data, NuisanceBundle(g, b.qbar_a, q1, q0))
    assert est.psi == pytest.approx(ref.psi, abs=1e-8)


def test_ctmle_excludes_instrument():
    rng = np.random.default_rng(8)
    excluded = 0
    for _ in range(100):
        n = 300
        W = rng.normal(size=n)
        A = (rng.uniform(size=n) < expit(1.5 * W)).astype(float)
        Y = 1 + A + rng.normal(size=n)
        # mean-learner initial Q: the fluctuation has to carry the treatment effect
        q = np.full(n, Y.mean())
        b = NuisanceBundle(np.full(n, 0.5), q, q, q)
        est = ctmle_greedy(make_data(A, Y, W), W[:, None], b, make_folds(n, 5, rng))
        excluded += est.diagnostics["selected_index"] == 0
    assert excluded > 50


# difference in means


def test_diff_in_means_examples():
    est = diff_in_means(make_data([1, 1, 0, 0], [3, 1, 2, 0]))
    assert est.psi == 1.0 and est.se == pytest.approx(math.sqrt(2))
    assert est.ic.size == 0
    flat = diff_in_means(make_data([1, 1, 0, 0], [3, 3, 2, 2]))
    assert flat.se == 0 and flat.ci == (1.0, 1.0)
    with pytest.raises(DegenerateArmError):
        diff_in_means(make_data([1, 0, 0], [1, 2, 3]))


# nuisances and registry


def test_build_nuisances_truncates_and_shapes(rng):
    n = 400
    W = rng.normal(size=(n, 1))
    A = (W[:, 0] > 0).astype(float)
    A[:4] = 1 - A[:4]
    data = make_data(A, W[:, 0] + A, W)
    for mode in ("plain", "cross_fitted"):
        b = build_nuisances(data, SlConfig(library=("glm", "boost_50")), mode, rng)
        assert b.g.min() == pytest.approx(0.025) and b.g.max() == pytest.approx(0.975)
        assert {len(v) for v in (b.g, b.qbar_a, b.qbar_1, b.qbar_0)} == {n}
        assert b.cross_fitted == (mode == "cross_fitted")


def test_build_nuisances_null_outcome(rng):
    n = 2000
    W = rng.normal(size=(n, 2))
    A = (rng.uniform(size=n) < 0.5).astype(float)
    Y = rng.normal(size=n)
    b = build_nuisances(make_data(A, Y, W), SlConfig(), "plain", rng)
    assert np.max(np.abs(b.qbar_1 - Y.mean())) < 0.05
    assert np.max(np.abs(b.qbar_0 - Y.mean())) < 0.05


def test_bundle_validation():
    with pytest.raises(ValueError):
        bundle([0.0, 0.5])
    with pytest.raises(ValueError):
        NuisanceBundle(np.full(2, 0.5), np.zeros(3), np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        bundle([0.5, 0.5], qa=np.array([np.nan, 0.0]))


def test_registry(rng):
    assert canonical_method("cv_tmle") == "CV-TMLE"
    assert canonical_method("Diff-in-Mean") == "Diff-in-Mean"
    with pytest.raises(ValueError):
        canonical_method("bart")
    assert bundles_needed(["TMLE", "CV-IPTW", "diff_in_means"]) == {"plain", "cross_fitted"}
    assert bundles_needed(["Diff-in-Mean"]) == set()
    data, b = random_case(rng)
    cross = NuisanceBundle(b.g, b.qbar_a, b.qbar_1, b.qbar_0, True)
    for m in METHODS:
        est = estimate(m, data, b, cross, rng)
        assert est.method == m and np.isfinite(est.psi)
    with pytest.raises(ValueError):
        estimate("TMLE", data)


def test_record_round_trip():
    est = AteEstimate("TMLE", 1.5, 0.2, (1.1, 1.9), diagnostics={"epsilon": 0.01})
    back = AteEstimate.from_record(est.to_record())
    assert back.psi == est.psi and back.ci == est.ci and back.diagnostics == est.diagnostics
