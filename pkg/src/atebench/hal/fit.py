"""HAL fits: cross-validated penalty selection and undersmoothing."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .basis import BasisExpansion, BasisFunction, design_matrix, enumerate_basis
from .solver import LassoSolution, _EarlyStop as _PathStop, lambda_grid, lambda_max, lasso_path

log = logging.getLogger(__name__)

JSON_FORMAT = "atebench.halfit"
JSON_VERSION = 1


class FoldError(ValueError):
    pass


@dataclass(frozen=True)
class HalConfig:
    """Tuning of basis enumeration, the lambda path and undersmoothing.

    ``max_degree=None`` applies the default interaction rule (degree 2 when
    there are at least 20 input columns, else 3).
    """

    family: str = "gaussian"
    max_degree: int | None = None
    knot_rule: bool = True
    lambda_grid_size: int = 100
    lambda_min_ratio: float = 1e-4
    cv_folds: int = 10
    undersmooth_decay: float = 0.9
    max_undersmooth_steps: int = 200
    max_columns: int = 20_000
    tol: float = 1e-7
    cv_patience: int | None = 20

    def __post_init__(self):
        if not 0 < self.undersmooth_decay < 1:
            raise ValueError("undersmooth_decay must lie in (0, 1)")
        if self.lambda_grid_size < 2:
            raise ValueError("lambda_grid_size must be at least 2")
        if self.family not in ("gaussian", "binomial"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.max_undersmooth_steps < 0:
            raise ValueError("max_undersmooth_steps must be nonnegative")

    def with_family(self, family: str) -> "HalConfig":
        from dataclasses import replace

        return replace(self, family=family)


def _linear(D: np.ndarray, intercept: float, coef: np.ndarray) -> np.ndarray:
    if D.shape[1] == 0:
        return np.full(D.shape[0], float(intercept))
    return intercept + np.ascontiguousarray(D, dtype=np.float64) @ coef


def _expit(eta):
    return 0.5 * (1.0 + np.tanh(0.5 * eta))


@dataclass(frozen=True)
class HalFit:
    intercept: float
    functions: tuple[BasisFunction, ...]
    coef: np.ndarray
    lam: float
    family: str
    fitted_values: np.ndarray | None = field(default=None, repr=False)

    @property
    def coefficients(self) -> dict[BasisFunction, float]:
        return {f: float(c) for f, c in zip(self.functions, self.coef)}

    @property
    def l1_norm(self) -> float:
        return float(np.sum(np.abs(self.coef)))

    @property
    def n_nonzero(self) -> int:
        return int(np.count_nonzero(self.coef))

    def linear_predictor(self, X) -> np.ndarray:
        return _linear(design_matrix(self.functions, X), self.intercept, self.coef)

    def predict(self, X) -> np.ndarray:
        return predict(self, X)

    def to_dict(self) -> dict:
        return {
            "format": JSON_FORMAT,
            "version": JSON_VERSION,
            "family": self.family,
            "intercept": float(self.intercept),
            "lambda": float(self.lam),
            "basis": [
                {"support": list(f.support), "knot": list(f.knot), "coefficient": float(c)}
                for f, c in zip(self.functions, self.coef)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "HalFit":
        if doc.get("format") != JSON_FORMAT:
            raise ValueError("not a HAL fit document")
        if doc.get("version") != JSON_VERSION:
            raise ValueError(f"unsupported HAL fit version {doc.get('version')!r}")
        functions = tuple(BasisFunction(tuple(b["support"]), tuple(b["knot"])) for b in doc["basis"])
        coef = np.array([b["coefficient"] for b in doc["basis"]], dtype=float)
        return cls(float(doc["intercept"]), functions, coef, float(doc["lambda"]), doc["family"])

    @classmethod
    def from_json(cls, text: str) -> "HalFit":
        return cls.from_dict(json.loads(text))


def predict(fit: HalFit, X) -> np.ndarray:
    eta = fit.linear_predictor(X)
    return _expit(eta) if fit.family == "binomial" else eta


def _from_solution(expansion: BasisExpansion, sol: LassoSolution, family: str) -> HalFit:
    nz = np.flatnonzero(sol.coef)
    functions = tuple(expansion.functions[j] for j in nz)
    coef = sol.coef[nz].copy()
    eta = _linear(expansion.design[:, nz], sol.intercept, coef)
    fitted = _expit(eta) if family == "binomial" else eta
    return HalFit(sol.intercept, functions, coef, sol.lam, family, fitted)


def _as_expansion(design) -> BasisExpansion:
    if isinstance(design, BasisExpansion):
        return design
    design = np.asarray(design)
    functions = tuple(BasisFunction((j,), (0.5,)) for j in range(design.shape[1]))
    return BasisExpansion(functions, design)


def fit_lasso_path(design, y, family: str, lambdas, weights=None, tol: float = 1e-7) -> list[HalFit]:
    """Penalized fits along a descending path, one HalFit per lambda.

    ``design`` is a BasisExpansion or a bare 0/1 matrix; for a bare matrix
    column ``j`` is labelled as the indicator ``x_j >= 0.5``.
    """
    expansion = _as_expansion(design)
    sols = lasso_path(expansion.design, y, family, lambdas, weights=weights, tol=tol)
    return [_from_solution(expansion, s, family) for s in sols]


def make_folds(n: int, V: int, rng) -> np.ndarray:
    """Fold id in ``0..V-1`` for each row; sizes differ by at most one."""
    if V < 2:
        raise FoldError("need at least two folds")
    if n < V:
        raise FoldError(f"{n} rows cannot fill {V} folds")
    perm = rng.permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % V
    return folds


def _loss(y, pred, family):
    if family == "gaussian":
        return (y - pred) ** 2
    p = np.clip(pred, 1e-12, 1 - 1e-12)
    return -(y * np.log(p) + (1 - y) * np.log(1 - p))


@dataclass(frozen=True)
class CvResult:
    lambda_cv: float
    fit: HalFit
    lambdas: np.ndarray
    cv_risk: np.ndarray
    solution: LassoSolution


def cv_select_lambda(
    design,
    y,
    family: str,
    folds: int = 10,
    rng=None,
    grid_size: int = 100,
    min_ratio: float = 1e-4,
    tol: float = 1e-7,
    fold_ids: np.ndarray | None = None,
    patience: int | None = 20,
) -> CvResult:
    """Choose lambda by V-fold CV over a log-spaced grid from lambda_max.

    Folds walk down the grid together.  The walk ends at the bottom of the
    grid, once any fold's path saturates (deviance explained above 0.999 or
    no longer improving), or ``patience`` grid points after the last
    improvement of the CV risk.
    """
    expansion = _as_expansion(design)
    X = expansion.design
    y = np.asarray(y, dtype=float)
    n = len(y)
    if rng is None:
        rng = np.random.default_rng(0)
    if fold_ids is None:
        fold_ids = make_folds(n, folds, rng)
    V = int(fold_ids.max()) + 1
    lams = lambda_grid(lambda_max(X, y), grid_size, min_ratio)
    Xf = X.astype(np.float64)
    splits = []
    for v in range(V):
        train = fold_ids != v
        if train.sum() < 2:
            raise FoldError("training split has fewer than two rows")
        Xtr = np.ascontiguousarray(X[train])
        splits.append((Xtr, y[train], Xf[~train], y[~train], _PathStop(Xtr, y[train], np.ones(len(Xtr)), family)))
    warm: list = [None] * V
    risk = []
    best, since_best = 0, 0
    for k, lam in enumerate(lams):
        total, saturated = 0.0, False
        for v, (Xtr, ytr, Xte, yte, stop) in enumerate(splits):
            s = lasso_path(Xtr, ytr, family, [lam], tol=tol, init=warm[v])[0]
            warm[v] = (s.intercept, s.coef)
            eta = s.intercept + Xte @ s.coef
            pred = _expit(eta) if family == "binomial" else eta
            total += _loss(yte, pred, family).sum()
            saturated |= stop.done(s)
        risk.append(total / n)
        if risk[-1] < risk[best]:
            best, since_best = k, 0
        else:
            since_best += 1
        if saturated or (patience is not None and since_best >= patience):
            break
    risk = np.array(risk)
    lams = lams[: len(risk)]
    best = int(np.argmin(risk))
    full = lasso_path(X, y, family, lams[: best + 1], tol=tol)[-1]
    return CvResult(float(lams[best]), _from_solution(expansion, full, family), lams, risk, full)


@dataclass(frozen=True)
class UndersmoothState:
    lambda_cv: float
    sigma: np.ndarray
    active_directions: tuple[BasisFunction, ...]
    active_index: np.ndarray
    excluded: tuple[BasisFunction, ...]
    steps_taken: int
    threshold: float
    max_score: float
    converged: bool
    skipped: bool = False


def score_threshold(n: int) -> float:
    return 1.0 / (math.sqrt(n) * math.log(n))


def anchor_state(cv_fit: HalFit, expansion: BasisExpansion, y, active_index) -> UndersmoothState:
    """Score SDs at the CV fit for the given active columns."""
    y = np.asarray(y, dtype=float)
    n = len(y)
    r = y - cv_fit.fitted_values
    Phi = expansion.design[:, active_index].astype(np.float64)
    sigma = (r[:, None] * Phi).std(axis=0)
    keep = sigma > 0
    excluded = tuple(expansion.functions[j] for j in np.asarray(active_index)[~keep])
    if excluded:
        log.info("excluding %d directions with zero score variance", len(excluded))
    idx = np.asarray(active_index)[keep]
    return UndersmoothState(
        lambda_cv=cv_fit.lam,
        sigma=sigma[keep],
        active_directions=tuple(expansion.functions[j] for j in idx),
        active_index=idx,
        excluded=excluded,
        steps_taken=0,
        threshold=score_threshold(n),
        max_score=math.nan,
        converged=False,
    )


def normalized_scores(current: HalFit, anchor: UndersmoothState, design, y) -> np.ndarray:
    """``|mean(r * phi)| / sd(r_cv * phi)`` for each anchored direction."""
    expansion = _as_expansion(design)
    y = np.asarray(y, dtype=float)
    r = y - current.fitted_values
    Phi = expansion.design[:, anchor.active_index].astype(np.float64)
    return np.abs((r[:, None] * Phi).mean(axis=0)) / anchor.sigma


def _replace(state: UndersmoothState, **kw) -> UndersmoothState:
    from dataclasses import replace

    return replace(state, **kw)


def undersmooth(
    design,
    y,
    family: str | None = None,
    config: HalConfig | None = None,
    rng=None,
    cv: CvResult | None = None,
) -> tuple[HalFit, UndersmoothState]:
    """Lower lambda geometrically from the CV choice until every active
    direction's normalized score is at most ``1 / (sqrt(n) log n)``."""
    config = config or HalConfig()
    family = family or config.family
    expansion = _as_expansion(design)
    y = np.asarray(y, dtype=float)
    n = len(y)
    if cv is None:
        cv = cv_select_lambda(
            expansion, y, family, config.cv_folds, rng,
            config.lambda_grid_size, config.lambda_min_ratio, config.tol,
            patience=config.cv_patience,
        )
    fit = cv.fit
    active_index = np.flatnonzero(cv.solution.coef)
    if len(active_index) == 0:
        state = anchor_state(fit, expansion, y, active_index)
        return fit, _replace(state, converged=True, skipped=True, max_score=0.0)

    state = anchor_state(fit, expansion, y, active_index)
    if len(state.active_index) == 0:
        return fit, _replace(state, converged=True, max_score=0.0)

    scores = normalized_scores(fit, state, expansion, y)
    best_fit, best_score = fit, float(scores.max())
    sol = cv.solution
    lam = cv.lambda_cv
    steps = 0
    while best_score > state.threshold and steps < config.max_undersmooth_steps:
        lam *= config.undersmooth_decay
        sol = lasso_path(
            expansion.design, y, family, [lam], tol=config.tol, init=(sol.intercept, sol.coef)
        )[0]
        steps += 1
        fit = _from_solution(expansion, sol, family)
        score = float(normalized_scores(fit, state, expansion, y).max())
        if score < best_score or score <= state.threshold:
            best_fit, best_score = fit, score
        if score <= state.threshold:
            break
    converged = best_score <= state.threshold
    if not converged:
        log.warning(
            "undersmoothing stopped after %d steps with max score %.3g > %.3g",
            steps, best_score, state.threshold,
        )
    return best_fit, _replace(state, steps_taken=steps, max_score=best_score, converged=converged)


@dataclass(frozen=True)
class HalResult:
    fit: HalFit
    state: UndersmoothState
    cv_fit: HalFit
    expansion_size: int


def fit_hal(X, y, config: HalConfig | None = None, rng=None, undersmoothed: bool = True) -> HalResult:
    """Enumerate the basis on ``X`` and fit (undersmoothed) HAL."""
    config = config or HalConfig()
    expansion = enumerate_basis(X, config.max_degree, config.max_columns, config.knot_rule)
    cv = cv_select_lambda(
        expansion, y, config.family, config.cv_folds, rng,
        config.lambda_grid_size, config.lambda_min_ratio, config.tol,
        patience=config.cv_patience,
    )
    if not undersmoothed:
        state = anchor_state(cv.fit, expansion, y, np.flatnonzero(cv.solution.coef))
        return HalResult(cv.fit, _replace(state, skipped=True), cv.fit, expansion.n_functions)
    fit, state = undersmooth(expansion, y, config.family, config, rng, cv=cv)
    return HalResult(fit, state, cv.fit, expansion.n_functions)


def summarize(fit: HalFit) -> dict:
    return {"n_coef": fit.n_nonzero, "lambda": fit.lam, "l1_norm": fit.l1_norm}


__all__: Sequence[str] = [
    "HalConfig", "HalFit", "UndersmoothState", "CvResult", "HalResult",
    "fit_lasso_path", "cv_select_lambda", "normalized_scores", "undersmooth",
    "predict", "fit_hal", "make_folds", "score_threshold",
]
