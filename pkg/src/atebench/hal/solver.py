"""Coordinate-descent lasso for gaussian and logistic models.

Objective (gaussian)::

    (1/2n) * sum_i w_i (y_i - b0 - x_i @ beta)^2 + lam * sum_j |beta_j|

and (binomial) the mean negative log-likelihood with logit link plus the
same penalty.  The penalty acts on the coefficients in the units of the
supplied columns.  Columns are centred internally so the intercept drops out
of the coordinate updates.  The binomial family is solved by iteratively
reweighted least squares with a monotone line search on the penalized
objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

FAMILIES = ("gaussian", "binomial")


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, lam: float):
        super().__init__(f"{message} (lambda={lam:.6g})")
        self.lam = lam


@dataclass(frozen=True)
class LassoSolution:
    lam: float
    intercept: float
    coef: np.ndarray
    n_sweeps: int


@njit(cache=True)
def _soft(x, t):
    # relative slack so that lam == lambda_max yields an exact zero
    if abs(x) <= t * (1.0 + 1e-12):
        return 0.0
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


@njit(cache=True)
def _sweep(X, w, r, beta, xbar, v, lam, n, cols):
    maxd = 0.0
    nrow = X.shape[0]
    for jj in range(cols.shape[0]):
        j = cols[jj]
        vj = v[j]
        if vj <= 1e-14:
            continue
        s1 = 0.0
        s0 = 0.0
        for i in range(nrow):
            wr = w[i] * r[i]
            s1 += wr * X[i, j]
            s0 += wr
        g = (s1 - xbar[j] * s0) / n
        old = beta[j]
        new = _soft(g + vj * old, lam) / vj
        d = new - old
        if d != 0.0:
            xb = xbar[j]
            for i in range(nrow):
                r[i] -= d * (X[i, j] - xb)
            beta[j] = new
            step = abs(d) * np.sqrt(vj)
            if step > maxd:
                maxd = step
    return maxd


@njit(cache=True)
def _newton_step(X, z, w, zbar, xbar, lam, beta, r, n):
    """Move towards the exact minimizer on the current sign pattern.

    On a fixed orthant the objective is a smooth quadratic, so the segment
    from ``beta`` to its minimizer decreases the objective until the first
    coefficient reaches zero; stop there.  ``r`` is rebuilt afterwards.
    """
    S = np.nonzero(beta)[0]
    k = S.shape[0]
    if k == 0:
        return
    nrow = X.shape[0]
    Xs = np.empty((nrow, k))
    zs = np.empty(nrow)
    for i in range(nrow):
        sw = np.sqrt(w[i])
        zs[i] = sw * (z[i] - zbar)
        for a in range(k):
            j = S[a]
            Xs[i, a] = sw * (X[i, j] - xbar[j])
    G = Xs.T @ Xs / n
    c = Xs.T @ zs / n
    ridge = 0.0
    for a in range(k):
        ridge += G[a, a]
        c[a] -= lam * np.sign(beta[S[a]])
    ridge = 1e-12 * ridge / k + 1e-300
    for a in range(k):
        G[a, a] += ridge
    target = np.linalg.solve(G, c)
    t = 1.0
    hit = -1
    for a in range(k):
        b = beta[S[a]]
        if target[a] * b <= 0.0:
            ta = b / (b - target[a])
            if ta < t:
                t = ta
                hit = a
    for a in range(k):
        b = beta[S[a]]
        beta[S[a]] = b + t * (target[a] - b)
    if hit >= 0:
        beta[S[hit]] = 0.0
    for i in range(nrow):
        acc = z[i] - zbar
        for a in range(k):
            j = S[a]
            acc -= beta[j] * (X[i, j] - xbar[j])
        r[i] = acc


@njit(cache=True)
def _wls_lasso(X, z, w, lam, beta, tol, max_sweeps):
    """Weighted lasso by cyclic coordinate descent with active-set cycling.

    ``beta`` is updated in place (warm start).  Returns (intercept, sweeps,
    converged).
    """
    nrow, m = X.shape
    n = float(nrow)
    sw = 0.0
    for i in range(nrow):
        sw += w[i]
    xbar = np.zeros(m)
    v = np.zeros(m)
    for j in range(m):
        s = 0.0
        for i in range(nrow):
            s += w[i] * X[i, j]
        xbar[j] = s / sw
        s = 0.0
        for i in range(nrow):
            d = X[i, j] - xbar[j]
            s += w[i] * d * d
        v[j] = s / n
    zbar = 0.0
    for i in range(nrow):
        zbar += w[i] * z[i]
    zbar /= sw
    r = np.empty(nrow)
    for i in range(nrow):
        r[i] = z[i] - zbar
    for j in range(m):
        bj = beta[j]
        if bj != 0.0:
            if v[j] <= 1e-14:
                beta[j] = 0.0
                continue
            xb = xbar[j]
            for i in range(nrow):
                r[i] -= bj * (X[i, j] - xb)

    all_cols = np.arange(m)
    sweeps = 0
    converged = False
    while sweeps < max_sweeps:
        maxd = _sweep(X, w, r, beta, xbar, v, lam, n, all_cols)
        sweeps += 1
        if maxd < tol:
            converged = True
            break
        active = np.nonzero(beta)[0]
        inner = 0
        while sweeps < max_sweeps:
            maxd = _sweep(X, w, r, beta, xbar, v, lam, n, active)
            sweeps += 1
            inner += 1
            if maxd < tol:
                break
            if inner % 4 == 0:
                _newton_step(X, z, w, zbar, xbar, lam, beta, r, n)
                active = np.nonzero(beta)[0]
    b0 = zbar
    for j in range(m):
        b0 -= xbar[j] * beta[j]
    return b0, sweeps, converged


def _as_design(X) -> np.ndarray:
    X = np.asarray(X)
    if X.dtype not in (np.uint8, np.float64):
        X = X.astype(np.float64)
    return np.ascontiguousarray(X)


def lambda_max(X, y, weights=None) -> float:
    """Smallest penalty at which every coefficient is zero."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    if X.shape[1] == 0:
        return 0.0
    ybar = np.sum(w * y) / np.sum(w)
    return float(np.max(np.abs(X.T @ (w * (y - ybar)))) / len(y))


def lambda_grid(lam_max: float, size: int = 100, ratio: float = 1e-4) -> np.ndarray:
    if size < 2:
        raise ValueError("lambda grid needs at least two points")
    if lam_max <= 0:
        lam_max = 1e-8
    return np.geomspace(lam_max, lam_max * ratio, size)


def _expit(eta):
    return 0.5 * (1.0 + np.tanh(0.5 * eta))


def _binomial_objective(X, y, w, b0, beta, lam):
    eta = b0 + X @ beta
    nll = np.sum(w * (np.logaddexp(0.0, eta) - y * eta)) / len(y)
    return nll + lam * np.sum(np.abs(beta))


def lasso_path(
    X,
    y,
    family: str,
    lambdas,
    weights=None,
    tol: float = 1e-7,
    max_sweeps: int = 100_000,
    max_irls: int = 200,
    init: tuple[float, np.ndarray] | None = None,
    early_stop: bool = False,
) -> list[LassoSolution]:
    """Solve the penalized problem along a strictly descending lambda path.

    With ``early_stop`` the path ends once the fraction of deviance
    explained exceeds 0.999 or improves by less than 1e-5 (relative) between
    consecutive lambdas, so fewer solutions than lambdas may be returned.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    X = _as_design(X)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X and y have incompatible shapes")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains non-finite values")
    lambdas = np.atleast_1d(np.asarray(lambdas, dtype=float))
    if np.any(lambdas <= 0) or np.any(np.diff(lambdas) >= 0):
        raise ValueError("lambdas must be positive and strictly descending")
    if family == "binomial" and not np.all((y >= 0) & (y <= 1)):
        raise ValueError("binomial outcome must lie in [0, 1]")
    n, m = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be nonnegative with a positive entry")

    if init is None:
        beta = np.zeros(m)
        b0 = None
    else:
        b0, beta = float(init[0]), np.array(init[1], dtype=float)

    out = []
    stopper = _EarlyStop(X, y, w, family) if early_stop else None
    if family == "gaussian":
        for lam in lambdas:
            b0, sweeps, ok = _wls_lasso(X, y, w, float(lam), beta, tol, max_sweeps)
            if not ok:
                raise ConvergenceError("coordinate descent did not converge", lam)
            out.append(LassoSolution(float(lam), float(b0), beta.copy(), int(sweeps)))
            if stopper is not None and stopper.done(out[-1]):
                break
        return out

    ybar = np.clip(np.sum(w * y) / np.sum(w), 1e-10, 1 - 1e-10)
    if b0 is None:
        b0 = float(np.log(ybar / (1 - ybar)))
    Xf = X.astype(float) if X.dtype != np.float64 else X
    colsd = np.sqrt(np.maximum(Xf.var(axis=0), 0.0)) if m else np.zeros(0)
    for lam in lambdas:
        lam = float(lam)
        obj = _binomial_objective(Xf, y, w, b0, beta, lam)
        total = 0
        for _ in range(max_irls):
            eta = b0 + Xf @ beta
            mu = _expit(eta)
            var = np.maximum(mu * (1 - mu), 1e-5)
            z = eta + (y - mu) / var
            new_beta = beta.copy()
            new_b0, sweeps, ok = _wls_lasso(X, z, w * var, lam, new_beta, tol, max_sweeps)
            total += sweeps
            if not ok:
                raise ConvergenceError("inner coordinate descent did not converge", lam)
            new_obj = _binomial_objective(Xf, y, w, new_b0, new_beta, lam)
            if new_obj > obj + 1e-13 * max(1.0, abs(obj)):
                t, accepted = 1.0, False
                while t > 1e-6:
                    t *= 0.5
                    cand_beta = beta + t * (new_beta - beta)
                    cand_b0 = b0 + t * (new_b0 - b0)
                    cand_obj = _binomial_objective(Xf, y, w, cand_b0, cand_beta, lam)
                    if cand_obj <= obj:
                        new_beta, new_b0, new_obj = cand_beta, cand_b0, cand_obj
                        accepted = True
                        break
                if not accepted:
                    new_beta, new_b0, new_obj = beta, b0, obj
            change = max(
                float(np.max(np.abs(new_beta - beta) * colsd)) if m else 0.0,
                abs(new_b0 - b0),
            )
            beta, b0 = new_beta, float(new_b0)
            gain = obj - new_obj
            obj = min(obj, new_obj)
            # near separation the coefficients drift with no objective gain
            if change < tol or gain <= 1e-12 * max(1.0, abs(obj)):
                break
        else:
            raise ConvergenceError("IRLS did not converge", lam)
        out.append(LassoSolution(lam, float(b0), beta.copy(), total))
        if stopper is not None and stopper.done(out[-1]):
            break
    return out


class _EarlyStop:
    def __init__(self, X, y, w, family):
        self.X, self.y, self.w, self.family = X, y, w, family
        ybar = np.sum(w * y) / np.sum(w)
        self.null = self._dev(np.full(len(y), ybar))
        self.prev = 0.0

    def _dev(self, mu):
        if self.family == "gaussian":
            return float(np.sum(self.w * (self.y - mu) ** 2))
        mu = np.clip(mu, 1e-15, 1 - 1e-15)
        y = self.y
        return float(-2 * np.sum(self.w * (y * np.log(mu) + (1 - y) * np.log(1 - mu))))

    def done(self, sol: LassoSolution) -> bool:
        if self.null <= 0:
            return True
        eta = sol.intercept + self.X @ sol.coef
        mu = _expit(eta) if self.family == "binomial" else eta
        ratio = 1.0 - self._dev(mu) / self.null
        stop = ratio > 0.999 or (self.prev > 0 and ratio - self.prev < 1e-5 * ratio)
        self.prev = ratio
        return stop


def penalized_objective(X, y, family, intercept, coef, lam, weights=None) -> float:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    coef = np.asarray(coef, dtype=float)
    if family == "gaussian":
        res = y - intercept - X @ coef
        return float(0.5 * np.sum(w * res**2) / len(y) + lam * np.sum(np.abs(coef)))
    return float(_binomial_objective(X, y, w, intercept, coef, lam))
