"""Semiparametric data-generating distribution fitted by undersmoothed HAL.

Sampling follows the structural model W -> A -> Y:

1. draw whole rows of W with replacement from the study covariates;
2. draw A ~ Bernoulli(g(W)), or Bernoulli(p_bar) when g is randomized;
3. set Y = Qbar(A, W) + N(0, residual_sd^2).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .data_model import AnalysisDataset
from .hal import HalConfig, HalFit, cv_select_lambda, enumerate_basis, undersmooth

DGD_FORMAT = "atebench.dgd"
DGD_VERSION = 1
DEFAULT_TRUTH_DRAWS = 50_000
# spawn key reserved for the true-ATE Monte Carlo draw
TRUTH_STREAM = 0x7A7E


def truth_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(TRUTH_STREAM,)))


@dataclass(frozen=True)
class DgdModel:
    q_fit: HalFit
    g_fit: HalFit | None
    w_pool: np.ndarray
    residual_sd: float
    p_bar: float | None = None
    true_ate: float = math.nan
    column_names: tuple[str, ...] = ()
    seed_meta: dict = field(default_factory=dict)
    fit_summary: list = field(default_factory=list)

    def __post_init__(self):
        pool = np.asarray(self.w_pool, dtype=float)
        if pool.ndim == 1:
            pool = pool.reshape(-1, 1)
        if pool.shape[0] == 0:
            raise ValueError("covariate pool is empty")
        if not self.residual_sd >= 0:
            raise ValueError("residual_sd must be nonnegative")
        if self.g_fit is None:
            if self.p_bar is None or not 0 <= self.p_bar <= 1:
                raise ValueError("randomized model needs p_bar in [0, 1]")
        object.__setattr__(self, "w_pool", pool)
        if not self.column_names:
            names = tuple(f"W{j + 1}" for j in range(pool.shape[1]))
            object.__setattr__(self, "column_names", names)

    @property
    def randomized(self) -> bool:
        return self.g_fit is None

    def propensity(self, W) -> np.ndarray:
        W = np.asarray(W, dtype=float)
        if self.g_fit is None:
            return np.full(W.shape[0], float(self.p_bar))
        return self.g_fit.predict(W)

    def outcome(self, A, W) -> np.ndarray:
        W = np.asarray(W, dtype=float)
        A = np.broadcast_to(np.asarray(A, dtype=float), (W.shape[0],))
        return self.q_fit.predict(np.column_stack([A, W]))

    def with_true_ate(self, value: float, **meta) -> "DgdModel":
        from dataclasses import replace

        return replace(self, true_ate=float(value), seed_meta={**self.seed_meta, **meta})

    def to_dict(self) -> dict:
        return {
            "format": DGD_FORMAT,
            "version": DGD_VERSION,
            "q_fit": self.q_fit.to_dict(),
            "g_fit": None if self.g_fit is None else self.g_fit.to_dict(),
            "randomized": self.randomized,
            "p_bar": self.p_bar,
            "residual_sd": float(self.residual_sd),
            "true_ate": float(self.true_ate),
            "column_names": list(self.column_names),
            "w_pool": self.w_pool.tolist(),
            "seed_meta": self.seed_meta,
            "fit_summary": self.fit_summary,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, doc: dict) -> "DgdModel":
        if doc.get("format") != DGD_FORMAT or doc.get("version") != DGD_VERSION:
            raise ValueError("not a supported DGD model document")
        g = doc["g_fit"]
        return cls(
            q_fit=HalFit.from_dict(doc["q_fit"]),
            g_fit=None if g is None else HalFit.from_dict(g),
            w_pool=np.array(doc["w_pool"], dtype=float),
            residual_sd=float(doc["residual_sd"]),
            p_bar=doc["p_bar"],
            true_ate=float(doc["true_ate"]),
            column_names=tuple(doc["column_names"]),
            seed_meta=doc.get("seed_meta", {}),
            fit_summary=doc.get("fit_summary", []),
        )

    @classmethod
    def from_json(cls, text: str) -> "DgdModel":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class SimulatedDataset(AnalysisDataset):
    replicate_index: int = 0
    seed: Any = None


def _summary_row(model: str, fit: HalFit, undersmoothed: bool, state=None) -> dict:
    row = {
        "model": model,
        "undersmoothed": undersmoothed,
        "n_coef": fit.n_nonzero,
        "lambda": fit.lam,
        "l1_norm": fit.l1_norm,
    }
    if state is not None:
        row.update(steps=state.steps_taken, converged=state.converged, max_score=state.max_score)
    return row


def fit_dgd(
    dataset: AnalysisDataset,
    config: HalConfig | None = None,
    seed: int = 0,
    truth_draws: int = DEFAULT_TRUTH_DRAWS,
) -> DgdModel:
    """Fit g (W -> A) and Qbar ((A, W) -> Y) by undersmoothed HAL.

    When the CV-selected propensity fit has no basis function the treatment
    is treated as randomized with ``p_bar = expit(intercept)`` and g is not
    undersmoothed.
    """
    config = config or HalConfig()
    ss = np.random.SeedSequence(seed)
    g_seq, q_seq = ss.spawn(2)
    W, A, Y = dataset.W, dataset.A.astype(float), dataset.Y
    summary = []

    g_fit, p_bar = None, None
    g_cfg = config.with_family("binomial")
    if dataset.p == 0 or np.all(A == A[0]):
        p_bar = float(A.mean())
        summary.append({"model": "g", "undersmoothed": False, "n_coef": 0,
                        "lambda": math.nan, "l1_norm": 0.0})
    else:
        g_basis = enumerate_basis(W, g_cfg.max_degree, g_cfg.max_columns, g_cfg.knot_rule)
        g_rng = np.random.default_rng(g_seq)
        cv = cv_select_lambda(
            g_basis, A, "binomial", g_cfg.cv_folds, g_rng, g_cfg.lambda_grid_size,
            g_cfg.lambda_min_ratio, g_cfg.tol, patience=g_cfg.cv_patience,
        )
        if cv.fit.n_nonzero == 0:
            p_bar = float(1.0 / (1.0 + math.exp(-cv.fit.intercept)))
            summary.append(_summary_row("g", cv.fit, False))
        else:
            g_fit, g_state = undersmooth(g_basis, A, "binomial", g_cfg, g_rng, cv=cv)
            summary.append(_summary_row("g", g_fit, True, g_state))

    q_cfg = config.with_family("gaussian")
    AW = np.column_stack([A, W])
    q_basis = enumerate_basis(AW, q_cfg.max_degree, q_cfg.max_columns, q_cfg.knot_rule)
    q_fit, q_state = undersmooth(q_basis, Y, "gaussian", q_cfg, np.random.default_rng(q_seq))
    summary.append(_summary_row("Q", q_fit, True, q_state))
    residual_sd = float(np.sqrt(np.mean((q_fit.fitted_values - Y) ** 2)))

    model = DgdModel(
        q_fit=q_fit,
        g_fit=g_fit,
        w_pool=W,
        residual_sd=residual_sd,
        p_bar=p_bar,
        column_names=dataset.column_names,
        seed_meta={"fit_seed": seed},
        fit_summary=summary,
    )
    psi0 = true_ate(model, truth_draws, truth_rng(seed))
    return model.with_true_ate(psi0, truth_draws=truth_draws, truth_seed=[seed, TRUTH_STREAM])


def sample(model: DgdModel, n: int, rng: np.random.Generator, replicate_index: int = 0,
           seed: Any = None) -> SimulatedDataset:
    if n < 1:
        raise ValueError("sample size must be positive")
    idx = rng.integers(0, model.w_pool.shape[0], size=n)
    W = model.w_pool[idx]
    g = model.propensity(W)
    A = (rng.random(n) < g).astype(np.int64)
    noise = rng.normal(0.0, 1.0, size=n) * model.residual_sd
    Y = model.outcome(A, W) + noise
    return SimulatedDataset(W, A, Y, model.column_names, replicate_index=replicate_index, seed=seed)


def ate_contrast(model: DgdModel, W) -> np.ndarray:
    return model.outcome(1.0, W) - model.outcome(0.0, W)


def true_ate(model: DgdModel, N: int = DEFAULT_TRUTH_DRAWS, rng: np.random.Generator | None = None,
             return_se: bool = False):
    """Monte-Carlo mean of Qbar(1, W) - Qbar(0, W) over N pooled W rows."""
    if N < 1:
        raise ValueError("N must be positive")
    rng = rng if rng is not None else truth_rng(0)
    idx = rng.integers(0, model.w_pool.shape[0], size=N)
    diff = ate_contrast(model, model.w_pool[idx])
    psi = float(diff.mean())
    if return_se:
        return psi, float(diff.std(ddof=1) / math.sqrt(N)) if N > 1 else 0.0
    return psi


__all__ = ["DgdModel", "SimulatedDataset", "fit_dgd", "sample", "true_ate", "truth_rng"]
