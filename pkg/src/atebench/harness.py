"""Monte-Carlo driver: sample replicates, run estimators, aggregate metrics.

Replicate ``r`` draws everything (covariates, treatment, noise, folds) from
``SeedSequence(master_seed, spawn_key=(r,))``, so any replicate can be rerun
in isolation and results do not depend on the worker count.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .dgd_sim import DgdModel, ate_contrast, sample
from .estimators import (
    DEFAULT_DELTA,
    METHODS,
    Z_975,
    AteEstimate,
    bundle_from_fits,
    bundles_needed,
    canonical_method,
    estimate,
    fit_nuisances,
)
from .hal import BasisFunction, HalConfig, HalFit
from .super_learner import SlConfig

SCENARIOS = ("from_dgd", "randomized_rct", "positivity_stress")
DEFAULT_ESTIMATORS = tuple(m for m in METHODS if m != "IPTW-unnormalized")
REPORT_COLUMNS = ("Scenario", "Method", "TrueATE", "Variance", "Bias", "MSE", "rMSE",
                  "Coverage", "Coverage2", "CIwidth")


class HarnessError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    n_reps: int = 500
    n_per_rep: int | None = None
    estimators: tuple[str, ...] = DEFAULT_ESTIMATORS
    master_seed: int = 0
    scenario: str = "from_dgd"
    sl: SlConfig = field(default_factory=SlConfig)
    hal: HalConfig = field(default_factory=HalConfig)
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if self.n_reps < 1:
            raise ValueError("n_reps must be at least 1")
        if not self.estimators:
            raise ValueError("no estimators configured")
        if self.n_per_rep is not None and self.n_per_rep < 4:
            raise ValueError("n_per_rep must be at least 4")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")
        names = tuple(dict.fromkeys(canonical_method(m) for m in self.estimators))
        object.__setattr__(self, "estimators", names)


@dataclass(frozen=True)
class RepResult:
    replicate_index: int
    estimates: dict
    errors: dict
    seconds: float

    def to_dict(self) -> dict:
        return {
            "replicate_index": self.replicate_index,
            "estimates": {m: e.to_record() for m, e in self.estimates.items()},
            "errors": self.errors,
            "seconds": self.seconds,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RepResult":
        est = {m: AteEstimate.from_record(r) for m, r in doc["estimates"].items()}
        return cls(int(doc["replicate_index"]), est, dict(doc["errors"]), float(doc["seconds"]))


def replicate_rng(master_seed: int, r: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(r,)))


def run_replicate(model: DgdModel, config: SimConfig, r: int) -> RepResult:
    """Sample one dataset and evaluate every configured estimator on shared nuisances."""
    start = time.perf_counter()
    rng = replicate_rng(config.master_seed, r)
    n = config.n_per_rep or model.w_pool.shape[0]
    data = sample(model, n, rng, replicate_index=r, seed=[config.master_seed, r])
    estimates, errors = {}, {}
    bundles = {}
    needed = bundles_needed(config.estimators)
    if needed:
        try:
            fits = fit_nuisances(data, config.sl, rng)
            for mode in sorted(needed):
                bundles[mode] = bundle_from_fits(data, fits, mode, config.delta)
        except Exception as exc:  # noqa: BLE001 - recorded per replicate
            errors["nuisances"] = f"{type(exc).__name__}: {exc}"
    for m in config.estimators:
        try:
            estimates[m] = estimate(m, data, bundles.get("plain"), bundles.get("cross_fitted"), rng)
        except Exception as exc:  # noqa: BLE001
            errors[m] = f"{type(exc).__name__}: {exc}"
    return RepResult(r, estimates, errors, time.perf_counter() - start)


def _run_chunk(args):
    model, config, indices = args
    return [run_replicate(model, config, r) for r in indices]


def run_simulation(model: DgdModel, config: SimConfig, workers: int = 1, progress=None) -> list[RepResult]:
    """Run ``config.n_reps`` replicates, optionally across worker processes.

    Results come back ordered by replicate index.
    """
    if not math.isfinite(model.true_ate):
        raise HarnessError("the model has no cached true ATE")
    indices = list(range(config.n_reps))
    results: list[RepResult] = []
    if workers <= 1:
        for r in indices:
            results.append(run_replicate(model, config, r))
            if progress:
                progress(len(results), config.n_reps)
    else:
        chunks = [indices[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(_run_chunk, [(model, config, c) for c in chunks if c]):
                results.extend(part)
        results.sort(key=lambda rr: rr.replicate_index)
    if all(not rr.estimates for rr in results):
        raise HarnessError("every replicate failed")
    return results


# -- metrics ----------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRow:
    method: str
    true_ate: float
    variance: float
    bias: float
    mse: float
    rmse: float | None
    coverage: float
    coverage2: float
    ci_width: float
    n_ok: int = 0
    n_failed: int = 0
    scenario: str = ""
    note: str = ""


def compute_metrics(results: list[RepResult], true_ate: float, ci_level: float = 0.95,
                    scenario: str = "", reference: str = "IPTW") -> list[MetricsRow]:
    """One row per method, in the order methods first appear in ``results``.

    Failed replicates are excluded and counted.  ``rmse`` is relative to the
    ``reference`` method's MSE and is ``None`` when that method is absent.
    """
    if not math.isclose(ci_level, 0.95):
        raise ValueError("only 95% intervals are supported")
    methods: list[str] = []
    for rr in results:
        for m in list(rr.estimates) + [k for k in rr.errors if k != "nuisances"]:
            if m not in methods:
                methods.append(m)
    raw = {}
    for m in methods:
        ests = [rr.estimates[m] for rr in results if m in rr.estimates]
        failed = sum(1 for rr in results if m not in rr.estimates)
        psi = np.array([e.psi for e in ests])
        R = psi.size
        if R < 2:
            raw[m] = dict(variance=math.nan, bias=math.nan, mse=math.nan, coverage=math.nan,
                          coverage2=math.nan, ci_width=math.nan, n_ok=R, n_failed=failed,
                          note="fewer than two successful replicates")
            continue
        lo = np.array([e.ci[0] for e in ests])
        hi = np.array([e.ci[1] for e in ests])
        sd = float(np.std(psi, ddof=1))
        raw[m] = dict(
            variance=float(np.var(psi, ddof=1)),
            bias=float(np.mean(psi) - true_ate),
            mse=float(np.mean((psi - true_ate) ** 2)),
            coverage=float(np.mean((lo <= true_ate) & (true_ate <= hi))),
            coverage2=float(np.mean(np.abs(psi - true_ate) <= Z_975 * sd)),
            ci_width=float(np.mean(hi - lo)),
            n_ok=R,
            n_failed=failed,
            note="",
        )
    ref = raw.get(reference, {}).get("mse", math.nan)
    rows = []
    for m in methods:
        d = raw[m]
        if reference not in raw:
            rmse, note = None, (d["note"] + "; " if d["note"] else "") + f"{reference} not run, rMSE omitted"
        else:
            rmse, note = d["mse"] / ref if ref > 0 else math.nan, d["note"]
        rows.append(MetricsRow(m, float(true_ate), d["variance"], d["bias"], d["mse"], rmse, d["coverage"],
                               d["coverage2"], d["ci_width"], d["n_ok"], d["n_failed"], scenario, note))
    return rows


# -- reports ----------------------------------------------------------------


def _row_values(row: MetricsRow) -> dict:
    return {
        "Scenario": row.scenario,
        "Method": row.method,
        "TrueATE": row.true_ate,
        "Variance": row.variance,
        "Bias": row.bias,
        "MSE": row.mse,
        "rMSE": row.rmse,
        "Coverage": row.coverage,
        "Coverage2": row.coverage2,
        "CIwidth": row.ci_width,
    }


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    return f"{v:.6g}"


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def report(metrics: list[MetricsRow], fmt: str, path) -> None:
    """Write the metrics table as CSV (6 significant digits) or JSON (full precision)."""
    if not metrics:
        raise ValueError("no metrics to report")
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for row in metrics:
                vals = _row_values(row)
                w.writerow([_fmt(vals[c]) for c in REPORT_COLUMNS])
    elif fmt == "json":
        doc = [{k: _json_safe(v) for k, v in asdict(row).items()} for row in metrics]
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def read_report_json(path) -> list[MetricsRow]:
    with open(path) as fh:
        doc = json.load(fh)
    rows = []
    for d in doc:
        for k in ("variance", "bias", "mse", "coverage", "coverage2", "ci_width", "true_ate"):
            if d[k] is None:
                d[k] = math.nan
        rows.append(MetricsRow(**d))
    return rows


def write_results(results: list[RepResult], path) -> None:
    """Replicate outputs as JSON lines (used by ``report`` to re-aggregate)."""
    with open(path, "w") as fh:
        for rr in results:
            fh.write(json.dumps(rr.to_dict()) + "\n")


def read_results(path) -> list[RepResult]:
    with open(path) as fh:
        return [RepResult.from_dict(json.loads(line)) for line in fh if line.strip()]


def config_hash(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def manifest(config_doc: dict, master_seed: int, results: list[RepResult] | None = None, **extra) -> dict:
    failures: dict[str, int] = {}
    for rr in results or []:
        for m in rr.errors:
            failures[m] = failures.get(m, 0) + 1
    return {
        "artifact": "atebench",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": config_doc,
        "config_hash": config_hash(config_doc),
        "master_seed": master_seed,
        "failures": failures,
        **extra,
    }


# -- scenarios --------------------------------------------------------------


def _steps(column: int, knots, coef) -> tuple[list, list]:
    return [BasisFunction((column,), (float(k),)) for k in knots], [float(coef)] * len(knots)


def _fit(intercept, terms, family) -> HalFit:
    functions, coef = [], []
    for fs, cs in terms:
        functions += fs
        coef += cs
    return HalFit(float(intercept), tuple(functions), np.array(coef, dtype=float), 0.0, family)


def _exact_ate(model: DgdModel) -> float:
    # W is resampled uniformly from the pool, so the pool mean is the exact truth
    return float(np.mean(ate_contrast(model, model.w_pool)))


PROGNOSTIC_KNOTS = tuple(np.round(np.arange(-2.0, 2.01, 0.25), 2))


def randomized_rct(params: dict, rng: np.random.Generator) -> DgdModel:
    """Randomized treatment with constant effect and a prognostic covariate ``W1``.

    ``Qbar(A, W) = 1 + effect * A + stair(W1)`` where the stair rises by
    ``prognostic`` at each knot of a 0.25-spaced grid on [-2, 2], so it is
    close to linear in ``W1``; ``W2`` is noise.
    """
    p = {"p_bar": 0.5, "effect": 0.5, "prognostic": 0.25, "residual_sd": 1.0, "pool_size": 5000, **params}
    W = rng.normal(size=(int(p["pool_size"]), 2))
    q = _fit(1.0, [_steps(0, [1.0], p["effect"]), _steps(1, PROGNOSTIC_KNOTS, p["prognostic"])], "gaussian")
    model = DgdModel(q, None, W, float(p["residual_sd"]), p_bar=float(p["p_bar"]),
                     seed_meta={"scenario": "randomized_rct", "params": p})
    return model.with_true_ate(float(p["effect"]))


def positivity_stress(params: dict, rng: np.random.Generator) -> DgdModel:
    """Confounded design where ``W1`` nearly separates the treatment arms.

    ``W1`` drives treatment only (it never enters ``Qbar``): roughly one row
    in five has ``g >= 0.99`` and one in five has ``g`` near 0.02.  ``W2`` and
    ``W3`` confound moderately and ``W2`` modifies the effect.  With
    ``drop_offending`` the same design is built without ``W1``.
    """
    p = {"effect": 1.0, "residual_sd": 1.0, "pool_size": 5000, "separation": 5.0,
         "drop_offending": False, **params}
    W = rng.normal(size=(int(p["pool_size"]), 3))
    drop = bool(p["drop_offending"])
    s = float(p["separation"])
    shift = 0 if drop else 1  # column offset of W2, W3 in the pool
    g_terms = [_steps(shift, [0.0], 0.6), _steps(shift + 1, [0.0], 0.5)]
    g_intercept = -0.3
    if not drop:
        g_terms += [_steps(0, [-0.8], s - 1.0), _steps(0, [0.8], s)]
        g_intercept -= s - 1.0
    g = _fit(g_intercept, g_terms, "binomial")
    # columns of (A, W): A is 0, W2 is 1 + shift, W3 is 2 + shift
    q = _fit(0.0, [
        _steps(0, [1.0], p["effect"]),
        _steps(1 + shift, [0.0], 1.0),
        _steps(2 + shift, [0.5], 0.8),
        ([BasisFunction((0, 1 + shift), (1.0, 0.0))], [0.5]),
    ], "gaussian")
    pool = W[:, 1:] if drop else W
    names = ("W2", "W3") if drop else ("W1", "W2", "W3")
    model = DgdModel(q, g, pool, float(p["residual_sd"]), column_names=names,
                     seed_meta={"scenario": "positivity_stress", "params": p})
    return model.with_true_ate(_exact_ate(model))


def make_scenario(kind: str, params: dict | None = None, rng: np.random.Generator | None = None,
                  model: DgdModel | None = None) -> DgdModel:
    params = dict(params or {})
    if kind == "from_dgd":
        model = model if model is not None else params.get("model")
        if not isinstance(model, DgdModel):
            raise ValueError("from_dgd needs a fitted DgdModel")
        return model
    rng = rng if rng is not None else np.random.default_rng(0)
    if kind == "randomized_rct":
        return randomized_rct(params, rng)
    if kind == "positivity_stress":
        return positivity_stress(params, rng)
    raise ValueError(f"unknown scenario {kind!r}; choose from {SCENARIOS}")


__all__ = [
    "DEFAULT_ESTIMATORS",
    "HarnessError",
    "MetricsRow",
    "REPORT_COLUMNS",
    "RepResult",
    "SCENARIOS",
    "SimConfig",
    "compute_metrics",
    "config_hash",
    "make_scenario",
    "manifest",
    "read_report_json",
    "read_results",
    "replicate_rng",
    "report",
    "run_replicate",
    "run_simulation",
    "write_results",
]
