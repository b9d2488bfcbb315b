"""Candidate learners for the Super Learner library.

Every learner exposes ``fit(X, y, family) -> predictor`` and the predictor
exposes ``predict(X)``.  Binomial predictors return probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .hal.solver import lambda_max, lasso_path


def expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def _check_family(family):
    if family not in ("gaussian", "binomial"):
        raise ValueError(f"unknown family {family!r}")


@dataclass(frozen=True)
class ConstantPredictor:
    value: float

    def predict(self, X):
        return np.full(np.asarray(X).shape[0], self.value)


class MeanLearner:
    name = "mean"

    def fit(self, X, y, family):
        _check_family(family)
        return ConstantPredictor(float(np.mean(y)))


@dataclass(frozen=True)
class LinearPredictor:
    intercept: float
    coef: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    family: str

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        eta = self.intercept + ((X - self.center) / self.scale) @ self.coef
        return expit(eta) if self.family == "binomial" else eta


def _standardize(X):
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return (X - center) / scale, center, scale


def logistic_regression(Z, y, ridge: float = 1e-8, max_iter: int = 100, tol: float = 1e-10,
                        offset=None, weights=None):
    """Newton-Raphson logistic regression with intercept as column 0 of the result.

    A small ridge on the slopes keeps the solution finite under separation.
    """
    Z = np.asarray(Z, dtype=float)
    n, k = Z.shape
    D = np.column_stack([np.ones(n), Z])
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    ybar = np.clip(np.sum(w * y) / np.sum(w), 1e-6, 1 - 1e-6)
    beta = np.zeros(k + 1)
    beta[0] = np.log(ybar / (1 - ybar))
    pen = np.full(k + 1, ridge * n)
    pen[0] = 0.0

    def objective(b):
        eta = off + D @ b
        return np.sum(w * (np.logaddexp(0, eta) - y * eta)) + 0.5 * np.sum(pen * b * b)

    obj = objective(beta)
    for _ in range(max_iter):
        eta = off + D @ beta
        mu = expit(eta)
        grad = D.T @ (w * (y - mu)) - pen * beta
        H = (D * (w * mu * (1 - mu))[:, None]).T @ D + np.diag(pen) + 1e-12 * np.eye(k + 1)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            new = objective(cand)
            if new <= obj + 1e-12 * abs(obj):
                break
            t *= 0.5
            if t < 1e-8:
                return beta
        beta, gain = cand, obj - new
        obj = new
        if np.max(np.abs(t * step)) < tol or gain < 1e-14 * max(1.0, abs(obj)):
            break
    return beta


class GLMLearner:
    """Main-terms linear regression (gaussian) or logistic regression."""

    name = "glm"

    def fit(self, X, y, family):
        _check_family(family)
        X = np.asarray(X, dtype=float)
        Z, center, scale = _standardize(X)
        if family == "gaussian":
            D = np.column_stack([np.ones(len(y)), Z])
            beta = np.linalg.lstsq(D, y, rcond=None)[0]
        else:
            beta = logistic_regression(Z, y)
        return LinearPredictor(float(beta[0]), beta[1:], center, scale, family)


class LassoLearner:
    """L1-penalized GLM on standardized columns at ``ratio * lambda_max``."""

    def __init__(self, ratio: float):
        self.ratio = ratio
        self.name = f"lasso_{ratio:g}"

    def fit(self, X, y, family):
        _check_family(family)
        X = np.asarray(X, dtype=float)
        Z, center, scale = _standardize(X)
        lmax = lambda_max(Z, y)
        if lmax <= 0 or X.shape[1] == 0:
            b0 = float(np.mean(y))
            if family == "binomial":
                b0 = float(logit(np.clip(b0, 1e-6, 1 - 1e-6)))
            return LinearPredictor(b0, np.zeros(X.shape[1]), center, scale, family)
        lams = np.geomspace(lmax, lmax * self.ratio, 8)
        sol = lasso_path(Z, y, family, lams)[-1]
        return LinearPredictor(sol.intercept, sol.coef, center, scale, family)


@njit(cache=True)
def _boost(X, order, y, binomial, n_rounds, lr, min_leaf):
    n, p = X.shape
    feats = np.zeros(n_rounds, dtype=np.int64)
    thr = np.zeros(n_rounds)
    left = np.zeros(n_rounds)
    right = np.zeros(n_rounds)
    ybar = y.mean()
    if binomial:
        yb = min(max(ybar, 1e-6), 1 - 1e-6)
        f0 = np.log(yb / (1 - yb))
    else:
        f0 = ybar
    F = np.full(n, f0)
    g = np.empty(n)
    h = np.empty(n)
    for r in range(n_rounds):
        for i in range(n):
            if binomial:
                mu = 1.0 / (1.0 + np.exp(-F[i]))
                g[i] = y[i] - mu
                h[i] = max(mu * (1 - mu), 1e-12)
            else:
                g[i] = y[i] - F[i]
                h[i] = 1.0
        G = g.sum()
        Htot = h.sum()
        best_gain = -1.0
        best_f = -1
        best_t = 0.0
        best_l = 0.0
        best_r = 0.0
        base = G * G / Htot
        for j in range(p):
            gl = 0.0
            hl = 0.0
            for k in range(n - 1):
                i = order[k, j]
                gl += g[i]
                hl += h[i]
                if k + 1 < min_leaf or n - k - 1 < min_leaf:
                    continue
                xa = X[i, j]
                xb = X[order[k + 1, j], j]
                if xb <= xa:
                    continue
                hr = Htot - hl
                gr = G - gl
                gain = gl * gl / hl + gr * gr / hr - base
                if gain > best_gain:
                    best_gain = gain
                    best_f = j
                    best_t = 0.5 * (xa + xb)
                    best_l = gl / hl
                    best_r = gr / hr
        if best_f < 0:
            feats[r] = 0
            thr[r] = np.inf
            left[r] = lr * G / Htot
            right[r] = 0.0
        else:
            feats[r] = best_f
            thr[r] = best_t
            left[r] = lr * best_l
            right[r] = lr * best_r
        for i in range(n):
            if X[i, feats[r]] <= thr[r]:
                F[i] += left[r]
            else:
                F[i] += right[r]
    return f0, feats, thr, left, right


@njit(cache=True)
def _boost_predict(X, f0, feats, thr, left, right):
    n = X.shape[0]
    F = np.full(n, f0)
    for r in range(feats.shape[0]):
        j = feats[r]
        for i in range(n):
            if X[i, j] <= thr[r]:
                F[i] += left[r]
            else:
                F[i] += right[r]
    return F


@dataclass(frozen=True)
class StumpEnsemble:
    f0: float
    feats: np.ndarray
    thr: np.ndarray
    left: np.ndarray
    right: np.ndarray
    family: str

    def predict(self, X):
        X = np.ascontiguousarray(X, dtype=float)
        F = _boost_predict(X, self.f0, self.feats, self.thr, self.left, self.right)
        return expit(F) if self.family == "binomial" else F


class BoostedStumps:
    """Gradient boosting of depth-1 trees (Newton leaf values for binomial).

    Splits leaving fewer than ``min_leaf`` rows on either side are skipped.
    """

    def __init__(self, n_rounds: int = 100, learning_rate: float = 0.1, min_leaf: int = 20):
        self.n_rounds = n_rounds
        self.learning_rate = learning_rate
        self.min_leaf = min_leaf
        self.name = f"boost_{n_rounds}"

    def fit(self, X, y, family):
        _check_family(family)
        X = np.ascontiguousarray(X, dtype=float)
        if X.shape[1] == 0:
            return ConstantPredictor(float(np.mean(y)))
        order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable"))
        f0, feats, thr, left, right = _boost(
            X, order, np.asarray(y, dtype=float), family == "binomial", self.n_rounds, self.learning_rate,
            self.min_leaf,
        )
        return StumpEnsemble(f0, feats, thr, left, right, family)


LEARNERS = {
    "mean": MeanLearner,
    "glm": GLMLearner,
    "lasso_0.2": lambda: LassoLearner(0.2),
    "lasso_0.05": lambda: LassoLearner(0.05),
    "lasso_0.01": lambda: LassoLearner(0.01),
    "boost_50": lambda: BoostedStumps(50, 0.1),
    "boost_200": lambda: BoostedStumps(200, 0.1),
}
DEFAULT_LIBRARY = tuple(LEARNERS)


def make_library(names=DEFAULT_LIBRARY) -> list:
    unknown = [n for n in names if n not in LEARNERS]
    if unknown:
        raise ValueError(f"unknown learners: {unknown}; choose from {sorted(LEARNERS)}")
    return [LEARNERS[n]() for n in names]
