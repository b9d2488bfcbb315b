"""Stacked ensemble (Super Learner) with out-of-fold cross-fitting.

One V-fold pass produces the out-of-fold (OOF) candidate matrix, the
per-fold candidate fits and the meta-learner.  Gaussian outcomes use a
convex (nonnegative, sum-to-one) least-squares combination; binomial outcomes
use a logistic regression on the raw candidate probabilities.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .hal.fit import FoldError
from .hal.fit import make_folds as _fold_ids
from .learners import DEFAULT_LIBRARY, expit, logistic_regression, make_library

PROB_CLIP = 1e-6
# ridge on the logistic meta slopes; candidates are often nearly collinear
META_RIDGE = 1e-4


class EnsembleError(RuntimeError):
    """Every candidate learner failed."""


class LearnerWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FoldScheme:
    """Fold id in ``1..V`` for each row."""

    assignments: np.ndarray
    V: int

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=np.int64)
        if self.V < 2:
            raise FoldError("need at least two folds")
        if a.ndim != 1 or a.min(initial=1) < 1 or a.max(initial=1) > self.V:
            raise FoldError(f"fold ids must lie in 1..{self.V}")
        sizes = np.bincount(a, minlength=self.V + 1)[1:]
        if sizes.min() == 0:
            raise FoldError("every fold must be nonempty")
        object.__setattr__(self, "assignments", a)

    @property
    def n(self) -> int:
        return self.assignments.shape[0]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.V + 1)[1:]

    def test_mask(self, v: int) -> np.ndarray:
        return self.assignments == v


def make_folds(n: int, V: int, rng: np.random.Generator) -> FoldScheme:
    """Random permutation split into ``V`` folds whose sizes differ by at most one."""
    return FoldScheme(_fold_ids(n, V, rng) + 1, V)


@dataclass(frozen=True)
class SlConfig:
    library: tuple[str, ...] = DEFAULT_LIBRARY
    folds: int = 10

    def __post_init__(self):
        object.__setattr__(self, "library", tuple(self.library))
        if not self.library:
            raise ValueError("the learner library is empty")
        make_library(self.library)
        if self.folds < 2:
            raise ValueError("need at least two folds")


def _project_simplex(v: np.ndarray) -> np.ndarray:
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def convex_least_squares(Z: np.ndarray, y: np.ndarray, tol: float = 1e-10,
                         max_iter: int = 20_000) -> np.ndarray:
    """Minimize ``||y - Z w||^2`` over the probability simplex.

    Accelerated projected gradient started at the best single column; the
    returned point is never worse than that vertex.
    """
    Z = np.asarray(Z, dtype=float)
    n, L = Z.shape
    if L == 1:
        return np.ones(1)
    G = Z.T @ Z / n
    b = Z.T @ y / n

    def risk(w):
        return float(w @ G @ w - 2 * b @ w)

    col_risk = np.diag(G) - 2 * b
    w = np.zeros(L)
    w[int(np.argmin(col_risk))] = 1.0
    best, best_risk = w.copy(), risk(w)
    step = 1.0 / max(np.linalg.eigvalsh(G)[-1], 1e-300)
    z, t = w.copy(), 1.0
    for _ in range(max_iter):
        w_new = _project_simplex(z - step * (G @ z - b))
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        z = w_new + (t - 1) / t_new * (w_new - w)
        moved = np.max(np.abs(w_new - w))
        w, t = w_new, t_new
        r = risk(w)
        if r < best_risk:
            best, best_risk = w.copy(), r
        if moved < tol:
            break
    return best


@dataclass(frozen=True)
class SuperLearnerFit:
    family: str
    learner_names: tuple[str, ...]
    learner_fits: tuple
    meta_weights: np.ndarray
    meta_intercept: float
    oof_matrix: np.ndarray
    fold_learner_fits: tuple
    folds: FoldScheme
    dropped: tuple[str, ...] = field(default=())

    def combine(self, P: np.ndarray) -> np.ndarray:
        """Meta-combination of an ``n x L`` matrix of candidate predictions."""
        P = np.asarray(P, dtype=float)
        if self.family == "gaussian":
            return P @ self.meta_weights
        eta = self.meta_intercept + P @ self.meta_weights
        return np.clip(expit(eta), PROB_CLIP, 1 - PROB_CLIP)

    def candidate_predictions(self, X) -> np.ndarray:
        return np.column_stack([f.predict(X) for f in self.learner_fits])

    def predict(self, X) -> np.ndarray:
        return self.combine(self.candidate_predictions(X))

    def oof_predictions(self) -> np.ndarray:
        return self.combine(self.oof_matrix)


def _candidate_loss(y, pred, family):
    if pred.ndim == 2:
        y = y.reshape(-1, 1)
    if family == "gaussian":
        return np.mean((y - pred) ** 2, axis=0)
    p = np.clip(pred, PROB_CLIP, 1 - PROB_CLIP)
    return -np.mean(y * np.log(p) + (1 - y) * np.log1p(-p), axis=0)


def candidate_cv_risks(slfit: SuperLearnerFit, y) -> np.ndarray:
    """CV risk of every retained candidate (squared error or log loss)."""
    return _candidate_loss(np.asarray(y, dtype=float), slfit.oof_matrix, slfit.family)


def cv_risk(slfit: SuperLearnerFit, y) -> float:
    """Risk of the meta-combination of the OOF matrix."""
    return float(_candidate_loss(np.asarray(y, dtype=float), slfit.oof_predictions(), slfit.family))


def _checked_predict(fit, X, family):
    pred = np.asarray(fit.predict(X), dtype=float)
    if pred.shape != (X.shape[0],) or not np.all(np.isfinite(pred)):
        raise FloatingPointError("non-finite or misshapen predictions")
    if family == "binomial" and (pred.min() < 0 or pred.max() > 1):
        raise FloatingPointError("probabilities outside [0, 1]")
    return pred


def fit_super_learner(X, y, library, family: str, folds: FoldScheme) -> SuperLearnerFit:
    """Fit every candidate on each training split and on the full data, then the meta-learner.

    A candidate that raises or predicts non-finite values on any split is
    dropped with a warning.
    """
    if family not in ("gaussian", "binomial"):
        raise ValueError(f"unknown family {family!r}")
    if not library:
        raise ValueError("the learner library is empty")
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if X.shape[0] != n or folds.n != n:
        raise ValueError("X, y and folds disagree on the number of rows")

    names, fits, cols, per_fold, dropped = [], [], [], [], []
    for learner in library:
        name = getattr(learner, "name", type(learner).__name__)
        try:
            oof = np.empty(n)
            fold_fits = []
            for v in range(1, folds.V + 1):
                test = folds.test_mask(v)
                fit = learner.fit(X[~test], y[~test], family)
                oof[test] = _checked_predict(fit, X[test], family)
                fold_fits.append(fit)
            full = learner.fit(X, y, family)
            _checked_predict(full, X, family)
        except Exception as exc:  # noqa: BLE001 - any learner failure is survivable
            warnings.warn(f"learner {name} dropped: {exc}", LearnerWarning, stacklevel=2)
            dropped.append(name)
            continue
        names.append(name)
        fits.append(full)
        cols.append(oof)
        per_fold.append(fold_fits)
    if not names:
        raise EnsembleError("every learner in the library failed")

    Z = np.column_stack(cols)
    if family == "gaussian":
        weights, intercept = convex_least_squares(Z, y), 0.0
    else:
        beta = logistic_regression(Z, y, ridge=META_RIDGE)
        weights, intercept = beta[1:], float(beta[0])
    # fold_learner_fits[v - 1][l] is learner l trained without fold v
    by_fold = tuple(tuple(per_fold[l][v] for l in range(len(names))) for v in range(folds.V))
    return SuperLearnerFit(
        family=family,
        learner_names=tuple(names),
        learner_fits=tuple(fits),
        meta_weights=np.asarray(weights, dtype=float),
        meta_intercept=intercept,
        oof_matrix=Z,
        fold_learner_fits=by_fold,
        folds=folds,
        dropped=tuple(dropped),
    )


def cross_fitted_predictions(slfit: SuperLearnerFit, X) -> np.ndarray:
    """Row ``i`` of fold ``v`` is predicted by the candidates trained without fold ``v``.

    ``X`` must have the training rows in training order; the covariate values
    may differ (e.g. treatment set to a counterfactual level).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.shape[0] != slfit.folds.n:
        raise ValueError("cross-fitted prediction needs the training rows")
    P = np.empty((X.shape[0], len(slfit.learner_names)))
    for v in range(1, slfit.folds.V + 1):
        test = slfit.folds.test_mask(v)
        for l, fit in enumerate(slfit.fold_learner_fits[v - 1]):
            P[test, l] = fit.predict(X[test])
    return slfit.combine(P)


def super_learner(X, y, family: str, config: SlConfig | None = None,
                  rng: np.random.Generator | None = None, folds: FoldScheme | None = None
                  ) -> SuperLearnerFit:
    """Convenience wrapper: build the library and folds from ``config``."""
    config = config or SlConfig()
    if folds is None:
        rng = rng if rng is not None else np.random.default_rng()
        folds = make_folds(len(y), config.folds, rng)
    return fit_super_learner(X, y, make_library(config.library), family, folds)


__all__ = [
    "EnsembleError",
    "FoldScheme",
    "LearnerWarning",
    "SlConfig",
    "SuperLearnerFit",
    "candidate_cv_risks",
    "convex_least_squares",
    "cross_fitted_predictions",
    "cv_risk",
    "fit_super_learner",
    "make_folds",
    "super_learner",
]
