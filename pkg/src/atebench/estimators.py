"""ATE estimators with influence-curve standard errors and 95% Wald intervals.

All estimators are pure functions of the data (``A``, ``Y`` and, for C-TMLE,
``W``) and a :class:`NuisanceBundle` of per-observation nuisance values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .learners import expit, logistic_regression, logit, make_library
from .super_learner import (
    FoldScheme,
    SlConfig,
    cross_fitted_predictions,
    fit_super_learner,
    make_folds,
)

Z_975 = 1.959964
DEFAULT_DELTA = 0.025
Q_CLIP = 1e-4
Y_PAD = 0.01
EPS_BOUND = 10.0


class EstimatorError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DegenerateArmError(EstimatorError):
    """A treatment arm is empty (or too small for the requested quantity)."""


class FluctuationError(EstimatorError):
    """The logistic fluctuation has no solution in the search interval."""


@dataclass(frozen=True)
class NuisanceBundle:
    g: np.ndarray
    qbar_a: np.ndarray
    qbar_1: np.ndarray
    qbar_0: np.ndarray
    cross_fitted: bool = False

    def __post_init__(self):
        vecs = {}
        for name in ("g", "qbar_a", "qbar_1", "qbar_0"):
            v = np.asarray(getattr(self, name), dtype=float).ravel()
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} has non-finite entries")
            vecs[name] = v
            object.__setattr__(self, name, v)
        if len({v.shape[0] for v in vecs.values()}) != 1:
            raise ValueError("nuisance vectors differ in length")
        if np.any(vecs["g"] <= 0) or np.any(vecs["g"] >= 1):
            raise ValueError("propensity values must lie strictly inside (0, 1)")

    @property
    def n(self) -> int:
        return self.g.shape[0]


@dataclass(frozen=True)
class AteEstimate:
    method: str
    psi: float
    se: float
    ci: tuple[float, float]
    ic: np.ndarray = field(default_factory=lambda: np.empty(0))
    diagnostics: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "method": self.method,
            "psi": self.psi,
            "se": self.se,
            "ci_lo": self.ci[0],
            "ci_hi": self.ci[1],
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "AteEstimate":
        return cls(rec["method"], float(rec["psi"]), float(rec["se"]),
                   (float(rec["ci_lo"]), float(rec["ci_hi"])), diagnostics=rec.get("diagnostics", {}))

    @property
    def ci_width(self) -> float:
        return self.ci[1] - self.ci[0]

    def renamed(self, method: str) -> "AteEstimate":
        return replace(self, method=method)


@dataclass(frozen=True)
class FluctuationResult:
    epsilon: float
    clever: np.ndarray
    updated_qbar_1: np.ndarray
    updated_qbar_0: np.ndarray
    updated_qbar_a: np.ndarray
    iterations: int = 0


def wald(psi: float, se: float) -> tuple[float, float]:
    return (psi - Z_975 * se, psi + Z_975 * se)


def from_ic(method: str, psi: float, ic: np.ndarray, **diagnostics) -> AteEstimate:
    """Estimate whose SE is SD(ic)/sqrt(n) with the 1/(n-1) variance."""
    n = ic.shape[0]
    se = float(np.std(ic, ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    return AteEstimate(method, float(psi), se, wald(psi, se), ic, diagnostics)


def truncate_g(g_raw, delta: float = DEFAULT_DELTA) -> np.ndarray:
    return np.clip(np.asarray(g_raw, dtype=float), delta, 1.0 - delta)


def _arrays(data):
    A = np.asarray(data.A, dtype=float)
    Y = np.asarray(data.Y, dtype=float)
    return A, Y


def _check_arms(A):
    n1 = int(A.sum())
    if n1 == 0 or n1 == A.shape[0]:
        raise DegenerateArmError("one treatment arm has no members")


def _clever(A, g):
    return A / g - (1 - A) / (1 - g)


def iptw(data, bundle: NuisanceBundle) -> AteEstimate:
    """Unnormalized inverse-probability-weighted estimate."""
    A, Y = _arrays(data)
    _check_arms(A)
    g = bundle.g
    weighted = Y * _clever(A, g)
    psi = float(np.mean(weighted))
    return from_ic("IPTW-unnormalized", psi, weighted - psi)


def iptw_hajek(data, bundle: NuisanceBundle) -> AteEstimate:
    """Hajek (arm-normalized) IPTW, reported under the name ``IPTW``.

    The SE uses the known-g influence curve of the unnormalized form.
    """
    A, Y = _arrays(data)
    _check_arms(A)
    g = bundle.g
    w1 = A / g
    w0 = (1 - A) / (1 - g)
    psi = float(np.sum(w1 * Y) / np.sum(w1) - np.sum(w0 * Y) / np.sum(w0))
    weighted = Y * (w1 - w0)
    return from_ic("IPTW", psi, weighted - np.mean(weighted), psi_unnormalized=float(np.mean(weighted)))


def aiptw(data, bundle: NuisanceBundle) -> AteEstimate:
    A, Y = _arrays(data)
    eic = (Y - bundle.qbar_a) * _clever(A, bundle.g) + bundle.qbar_1 - bundle.qbar_0
    psi = float(np.mean(eic))
    return from_ic("A-IPTW", psi, eic - psi)


# -- TMLE -------------------------------------------------------------------


@dataclass(frozen=True)
class _Scale:
    lo: float
    hi: float

    @classmethod
    def from_outcome(cls, Y):
        lo, hi = float(np.min(Y)), float(np.max(Y))
        span = hi - lo
        if span <= 0:
            span = max(abs(lo), 1.0)
        return cls(lo - Y_PAD * span, hi + Y_PAD * span)

    def down(self, v, clip=True):
        s = (np.asarray(v, dtype=float) - self.lo) / (self.hi - self.lo)
        return np.clip(s, Q_CLIP, 1 - Q_CLIP) if clip else s

    def up(self, s):
        return self.lo + s * (self.hi - self.lo)


def _score(eps, ystar, offset, H):
    return float(np.dot(H, ystar - expit(offset + eps * H)))


def solve_epsilon(ystar, offset, H, tol: float = 1e-10, max_iter: int = 200) -> tuple[float, int]:
    """Root of the logistic score in ``eps`` on ``[-10, 10]``: Newton guarded by bisection."""
    lo, hi = -EPS_BOUND, EPS_BOUND
    s_lo, s_hi = _score(lo, ystar, offset, H), _score(hi, ystar, offset, H)
    if s_lo < 0 or s_hi > 0:
        raise FluctuationError(
            "fluctuation score has no root in [-10, 10]",
            {"score_at_-10": s_lo, "score_at_10": s_hi},
        )
    eps = 0.0
    for it in range(1, max_iter + 1):
        mu = expit(offset + eps * H)
        s = float(np.dot(H, ystar - mu))
        if s == 0.0:
            return eps, it
        # score is decreasing in eps
        if s > 0:
            lo = eps
        else:
            hi = eps
        info = float(np.dot(H * H, mu * (1 - mu)))
        cand = eps + s / info if info > 0 else math.nan
        if not (lo < cand < hi):
            cand = 0.5 * (lo + hi)
        step = cand - eps
        eps = cand
        if abs(step) < tol or hi - lo < tol:
            return eps, it
    raise FluctuationError("fluctuation did not converge", {"epsilon": eps, "iterations": max_iter})


def fluctuate(ystar, A, g, q_a, q_1, q_0) -> FluctuationResult:
    """Logistic fluctuation of scaled outcome regressions along the clever covariate."""
    H = _clever(A, g)
    eps, iters = solve_epsilon(ystar, logit(q_a), H)
    return FluctuationResult(
        epsilon=eps,
        clever=H,
        updated_qbar_1=expit(logit(q_1) + eps / g),
        updated_qbar_0=expit(logit(q_0) - eps / (1 - g)),
        updated_qbar_a=expit(logit(q_a) + eps * H),
        iterations=iters,
    )


def _tmle_from_update(method, A, Y, g, scale: _Scale, fl: FluctuationResult, **diag) -> AteEstimate:
    q1 = scale.up(fl.updated_qbar_1)
    q0 = scale.up(fl.updated_qbar_0)
    qa = scale.up(fl.updated_qbar_a)
    psi = float(np.mean(q1 - q0))
    ic = (Y - qa) * _clever(A, g) + q1 - q0 - psi
    return from_ic(method, psi, ic, epsilon=fl.epsilon, iterations=fl.iterations, **diag)


def tmle(data, bundle: NuisanceBundle) -> AteEstimate:
    A, Y = _arrays(data)
    scale = _Scale.from_outcome(Y)
    ystar = scale.down(Y, clip=False)
    fl = fluctuate(ystar, A, bundle.g, scale.down(bundle.qbar_a), scale.down(bundle.qbar_1),
                   scale.down(bundle.qbar_0))
    return _tmle_from_update("TMLE", A, Y, bundle.g, scale, fl)


_BASE = {"iptw": iptw_hajek, "aiptw": aiptw, "tmle": tmle}


def cv_variant(estimator: str, data, bundle: NuisanceBundle) -> AteEstimate:
    """Base estimator applied to a cross-fitted bundle; name gets a ``CV-`` prefix."""
    if estimator not in _BASE:
        raise ValueError(f"cv_variant supports {sorted(_BASE)}, not {estimator!r}")
    if not bundle.cross_fitted:
        raise ValueError("cv_variant needs a cross-fitted bundle")
    est = _BASE[estimator](data, bundle)
    return est.renamed("CV-" + est.method)


def diff_in_means(data) -> AteEstimate:
    """Difference in arm means with the Neyman variance."""
    A, Y = _arrays(data)
    y1, y0 = Y[A == 1], Y[A == 0]
    if y1.size < 2 or y0.size < 2:
        raise DegenerateArmError("each arm needs at least two members for the Neyman variance")
    psi = float(y1.mean() - y0.mean())
    var = float(y1.var(ddof=1) / y1.size + y0.var(ddof=1) / y0.size)
    se = math.sqrt(var)
    return AteEstimate("Diff-in-Mean", psi, se, wald(psi, se), np.empty(0), {"n1": y1.size, "n0": y0.size})


# -- C-TMLE -----------------------------------------------------------------


@dataclass(frozen=True)
class _GModel:
    cols: tuple[int, ...]
    beta: np.ndarray

    def predict(self, Z, delta):
        eta = np.full(Z.shape[0], self.beta[0])
        if self.cols:
            eta = eta + Z[:, list(self.cols)] @ self.beta[1:]
        return truncate_g(expit(eta), delta)


def _fit_g(Z, A, cols, delta):
    beta = logistic_regression(Z[:, list(cols)], A)
    return _GModel(tuple(cols), beta)


@dataclass(frozen=True)
class _Step:
    """One candidate: the fluctuation chain applied to the initial Q and its g."""

    cols: tuple[int, ...]
    chain: tuple  # ((GModel, eps), ...)
    loss: float

    @property
    def g(self) -> _GModel:
        return self.chain[-1][0]


def _apply_chain(chain, A, Z, q_a, q_1, q_0, delta):
    la, l1, l0 = logit(q_a), logit(q_1), logit(q_0)
    for gm, eps in chain:
        g = gm.predict(Z, delta)
        la = la + eps * _clever(A, g)
        l1 = l1 + eps / g
        l0 = l0 - eps / (1 - g)
    return expit(la), expit(l1), expit(l0)


def _greedy_sequence(ystar, A, Z, q_a, q_1, q_0, delta, max_steps=None) -> list[_Step]:
    K = Z.shape[1]
    max_steps = K if max_steps is None else min(K, max_steps)

    def candidate(base_chain, cols):
        gm = _fit_g(Z, A, cols, delta)
        qa, _, _ = _apply_chain(base_chain, A, Z, q_a, q_1, q_0, delta)
        eps, _ = solve_epsilon(ystar, logit(qa), _clever(A, gm.predict(Z, delta)))
        chain = base_chain + ((gm, eps),)
        upd, _, _ = _apply_chain(chain, A, Z, q_a, q_1, q_0, delta)
        return _Step(tuple(cols), chain, float(np.mean((ystar - upd) ** 2)))

    steps = [candidate((), ())]
    base: tuple = ()
    while len(steps) <= max_steps:
        prev = steps[-1]
        remaining = [j for j in range(K) if j not in prev.cols]
        options = [candidate(base, prev.cols + (j,)) for j in remaining]
        best = min(options, key=lambda s: s.loss)
        if best.loss >= prev.loss:
            # targeting from the previous update keeps the loss sequence monotone
            base = prev.chain
            options = [candidate(base, prev.cols + (j,)) for j in remaining]
            best = min(options, key=lambda s: s.loss)
        steps.append(best)
    return steps


def ctmle_greedy(data, g_covariates, q_bundle: NuisanceBundle, folds: FoldScheme,
                 delta: float = DEFAULT_DELTA, max_steps: int | None = None) -> AteEstimate:
    """Collaborative TMLE with a greedy forward-stepwise logistic propensity.

    Candidate ``k`` adds one covariate to candidate ``k-1``; the covariate is
    the one whose targeted Q has the lowest squared error on the [0, 1]
    outcome scale.  The index is chosen by V-fold cross-validated loss.
    """
    A, Y = _arrays(data)
    _check_arms(A)
    Z = np.asarray(g_covariates, dtype=float).reshape(A.shape[0], -1)
    scale = _Scale.from_outcome(Y)
    ystar = scale.down(Y, clip=False)
    qa, q1, q0 = (scale.down(v) for v in (q_bundle.qbar_a, q_bundle.qbar_1, q_bundle.qbar_0))

    K = Z.shape[1] if max_steps is None else min(Z.shape[1], max_steps)
    cv_loss = np.zeros(K + 1)
    for v in range(1, folds.V + 1):
        val = folds.test_mask(v)
        tr = ~val
        seq = _greedy_sequence(ystar[tr], A[tr], Z[tr], qa[tr], q1[tr], q0[tr], delta, K)
        for k, step in enumerate(seq):
            upd, _, _ = _apply_chain(step.chain, A[val], Z[val], qa[val], q1[val], q0[val], delta)
            cv_loss[k] += np.sum((ystar[val] - upd) ** 2)
    cv_loss /= A.shape[0]
    k_star = int(np.argmin(cv_loss))

    seq = _greedy_sequence(ystar, A, Z, qa, q1, q0, delta, k_star)
    chosen = seq[k_star]
    ua, u1, u0 = _apply_chain(chosen.chain, A, Z, qa, q1, q0, delta)
    g = chosen.g.predict(Z, delta)
    fl = FluctuationResult(chosen.chain[-1][1], _clever(A, g), u1, u0, ua)
    return _tmle_from_update("C-TMLE", A, Y, g, scale, fl, selected_index=k_star,
                             selected_covariates=list(chosen.cols), cv_loss=cv_loss.tolist(),
                             n_fluctuations=len(chosen.chain))


# -- nuisance estimation ----------------------------------------------------


@dataclass(frozen=True)
class NuisanceFits:
    """Super Learner fits for g and Qbar sharing one fold scheme."""

    g_fit: object
    q_fit: object
    folds: FoldScheme


def fit_nuisances(data, sl_config: SlConfig | None = None, rng=None, folds: FoldScheme | None = None
                  ) -> NuisanceFits:
    sl_config = sl_config or SlConfig()
    A, Y = _arrays(data)
    _check_arms(A)
    W = np.asarray(data.W, dtype=float).reshape(A.shape[0], -1)
    if folds is None:
        rng = rng if rng is not None else np.random.default_rng()
        folds = make_folds(A.shape[0], sl_config.folds, rng)
    g_fit = fit_super_learner(W, A, make_library(sl_config.library), "binomial", folds)
    q_fit = fit_super_learner(np.column_stack([A, W]), Y, make_library(sl_config.library), "gaussian", folds)
    return NuisanceFits(g_fit, q_fit, folds)


def bundle_from_fits(data, fits: NuisanceFits, mode: str = "plain", delta: float = DEFAULT_DELTA
                     ) -> NuisanceBundle:
    if mode not in ("plain", "cross_fitted"):
        raise ValueError(f"unknown nuisance mode {mode!r}")
    A, _ = _arrays(data)
    W = np.asarray(data.W, dtype=float).reshape(A.shape[0], -1)
    n = A.shape[0]
    rows = {a: np.column_stack([np.full(n, float(a)), W]) for a in (0, 1)}
    AW = np.column_stack([A, W])
    if mode == "plain":
        pred_g, pred_q = fits.g_fit.predict, fits.q_fit.predict
    else:
        def pred_g(X):
            return cross_fitted_predictions(fits.g_fit, X)

        def pred_q(X):
            return cross_fitted_predictions(fits.q_fit, X)
    return NuisanceBundle(
        g=truncate_g(pred_g(W), delta),
        qbar_a=pred_q(AW),
        qbar_1=pred_q(rows[1]),
        qbar_0=pred_q(rows[0]),
        cross_fitted=mode == "cross_fitted",
    )


def build_nuisances(data, sl_config: SlConfig | None = None, mode: str = "plain", rng=None,
                    delta: float = DEFAULT_DELTA) -> NuisanceBundle:
    return bundle_from_fits(data, fit_nuisances(data, sl_config, rng), mode, delta)


# -- registry ---------------------------------------------------------------

METHODS = (
    "IPTW",
    "IPTW-unnormalized",
    "CV-IPTW",
    "A-IPTW",
    "CV-A-IPTW",
    "TMLE",
    "CV-TMLE",
    "C-TMLE",
    "Diff-in-Mean",
)
ALIASES = {
    "iptw": "IPTW",
    "iptw_hajek": "IPTW",
    "iptw_unnormalized": "IPTW-unnormalized",
    "cv_iptw": "CV-IPTW",
    "aiptw": "A-IPTW",
    "cv_aiptw": "CV-A-IPTW",
    "tmle": "TMLE",
    "cv_tmle": "CV-TMLE",
    "ctmle": "C-TMLE",
    "diff_in_means": "Diff-in-Mean",
}
_NEEDS = {
    "IPTW": "plain",
    "IPTW-unnormalized": "plain",
    "A-IPTW": "plain",
    "TMLE": "plain",
    "C-TMLE": "plain",
    "CV-IPTW": "cross_fitted",
    "CV-A-IPTW": "cross_fitted",
    "CV-TMLE": "cross_fitted",
    "Diff-in-Mean": None,
}
CTMLE_FOLDS = 5


def canonical_method(name: str) -> str:
    if name in METHODS:
        return name
    key = name.strip().lower().replace("-", "_")
    if key in ALIASES:
        return ALIASES[key]
    raise ValueError(f"unknown estimator {name!r}; choose from {list(METHODS)}")


def bundles_needed(methods) -> set[str]:
    return {_NEEDS[canonical_method(m)] for m in methods} - {None}


def estimate(method: str, data, plain: NuisanceBundle | None = None,
             cross: NuisanceBundle | None = None, rng=None) -> AteEstimate:
    """Dispatch one named estimator; ``rng`` draws the C-TMLE selection folds."""
    m = canonical_method(method)
    need = _NEEDS[m]
    bundle = plain if need == "plain" else cross if need == "cross_fitted" else None
    if need is not None and bundle is None:
        raise ValueError(f"{m} needs a {need} nuisance bundle")
    if m == "IPTW":
        return iptw_hajek(data, bundle)
    if m == "IPTW-unnormalized":
        return iptw(data, bundle)
    if m == "A-IPTW":
        return aiptw(data, bundle)
    if m == "TMLE":
        return tmle(data, bundle)
    if m.startswith("CV-"):
        return cv_variant({"CV-IPTW": "iptw", "CV-A-IPTW": "aiptw", "CV-TMLE": "tmle"}[m], data, bundle)
    if m == "C-TMLE":
        rng = rng if rng is not None else np.random.default_rng()
        n = np.asarray(data.A).shape[0]
        return ctmle_greedy(data, data.W, bundle, make_folds(n, min(CTMLE_FOLDS, n), rng))
    return diff_in_means(data)


__all__ = [
    "ALIASES",
    "AteEstimate",
    "DegenerateArmError",
    "EstimatorError",
    "FluctuationError",
    "FluctuationResult",
    "METHODS",
    "NuisanceBundle",
    "NuisanceFits",
    "Z_975",
    "aiptw",
    "build_nuisances",
    "bundle_from_fits",
    "bundles_needed",
    "canonical_method",
    "ctmle_greedy",
    "cv_variant",
    "diff_in_means",
    "estimate",
    "fit_nuisances",
    "fluctuate",
    "iptw",
    "iptw_hajek",
    "solve_epsilon",
    "tmle",
    "truncate_g",
]
