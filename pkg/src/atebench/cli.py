"""Command-line entry point: ``atebench <command> [--config FILE] [flags]``.

Commands: ``fit-dgd``, ``simulate``, ``estimate``, ``benchmark``, ``report``.
Exit codes: 0 success, 2 validation error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .data_model import ColumnSpec, DataFormatError, EmptyDatasetError, SchemaError, TreatmentMappingError
from .data_model import DEFAULT_MISSING, load_csv, preprocess, validate_specs
from .dgd_sim import DgdModel, fit_dgd, sample
from .estimators import bundle_from_fits, bundles_needed, estimate, fit_nuisances
from .harness import (
    SCENARIOS,
    SimConfig,
    compute_metrics,
    make_scenario,
    manifest,
    read_results,
    report,
    run_simulation,
    write_results,
)
from .hal import HalConfig
from .super_learner import SlConfig

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
SCENARIO_STREAM = 0x5CE
MODEL_FILE = "dgd_model.json"

_HAL_KEYS = {f.name for f in fields(HalConfig)} - {"family"}
_SL_KEYS = {"library", "folds"}
_SIM_KEYS = {"n_reps", "n_per_rep", "estimators", "master_seed", "scenario", "workers", "delta"}
_SCENARIO_KEYS = {"p_bar", "effect", "prognostic", "residual_sd", "pool_size", "separation", "drop_offending"}
_DATA_KEYS = {"path", "columns", "treatment_map", "missing"}
_COLUMN_KEYS = {"name", "kind", "role"}
_OUTPUT_KEYS = {"dir", "model"}
_SECTIONS = {"data": _DATA_KEYS, "hal": _HAL_KEYS, "sl": _SL_KEYS, "sim": _SIM_KEYS,
             "scenario": _SCENARIO_KEYS, "output": _OUTPUT_KEYS}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    path: Path
    columns: tuple[ColumnSpec, ...]
    treatment_map: dict
    missing: frozenset


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig | None
    hal: HalConfig
    sl: SlConfig
    sim: SimConfig
    scenario_params: dict
    out_dir: Path
    model_path: Path | None
    workers: int
    document: dict = field(default_factory=dict)
    overrides: dict = field(default_factory=dict)


def _check_keys(where: str, doc: dict, allowed: set) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    _check_keys(name, sec, _SECTIONS[name])
    return sec


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def load_config(path: str | None, args: argparse.Namespace | None = None) -> RunConfig:
    """Parse and validate a TOML config; command-line flags override file values."""
    doc: dict = {}
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = p.resolve().parent
    _check_keys("top level", doc, set(_SECTIONS))
    secs = {name: _section(doc, name) for name in _SECTIONS}

    overrides = {}
    if args is not None:
        for flag, key in (("seed", "master_seed"), ("reps", "n_reps"), ("scenario", "scenario"),
                          ("workers", "workers")):
            value = getattr(args, flag, None)
            if value is not None:
                overrides[key] = value
        if getattr(args, "out", None) is not None:
            overrides["out"] = args.out
    sim_doc = {**secs["sim"], **{k: v for k, v in overrides.items() if k in _SIM_KEYS}}

    data = None
    if secs["data"]:
        d = secs["data"]
        if "path" not in d or "columns" not in d:
            raise ConfigError("[data] needs 'path' and 'columns'")
        for col in d["columns"]:
            if not isinstance(col, dict):
                raise ConfigError("[data].columns entries must be tables")
            _check_keys("data.columns", col, _COLUMN_KEYS)
        try:
            specs = tuple(ColumnSpec(c["name"], c["kind"], c["role"]) for c in d["columns"])
            validate_specs(specs)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"[data].columns: {exc}") from None
        data = DataConfig(
            path=_resolve(base, d["path"]),
            columns=specs,
            treatment_map=dict(d.get("treatment_map", {"1": 1, "0": 0})),
            missing=frozenset(d.get("missing", DEFAULT_MISSING)),
        )

    try:
        hal = HalConfig(**secs["hal"])
        sl = SlConfig(**secs["sl"])
        workers = sim_doc.pop("workers", None)
        sim = SimConfig(
            n_reps=int(sim_doc.get("n_reps", 500)),
            n_per_rep=sim_doc.get("n_per_rep"),
            estimators=tuple(sim_doc.get("estimators", SimConfig().estimators)),
            master_seed=int(sim_doc.get("master_seed", 0)),
            scenario=sim_doc.get("scenario", "from_dgd"),
            sl=sl,
            hal=hal,
            delta=float(sim_doc.get("delta", 0.025)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    if workers is None:
        workers = os.environ.get("ATEBENCH_WORKERS", 1)
    try:
        workers = int(workers)
    except ValueError:
        raise ConfigError(f"worker count must be an integer, got {workers!r}") from None
    if workers < 1:
        raise ConfigError("worker count must be at least 1")

    out_dir = Path(overrides.get("out") or _resolve(base, secs["output"].get("dir", "atebench_out")))
    model_path = secs["output"].get("model")
    model_path = _resolve(base, model_path) if model_path else None
    resolved = {name: dict(sec) for name, sec in secs.items()}
    resolved["sim"] = {**resolved["sim"], **{k: v for k, v in overrides.items() if k in _SIM_KEYS}}
    return RunConfig(data, hal, sl, sim, dict(secs["scenario"]), out_dir, model_path, workers,
                     resolved, overrides)


# -- helpers ----------------------------------------------------------------


def _load_dataset(cfg: RunConfig):
    if cfg.data is None:
        raise ConfigError("this command needs a [data] section")
    if not cfg.data.path.is_file():
        raise ConfigError(f"data file not found: {cfg.data.path}")
    table = load_csv(cfg.data.path, cfg.data.columns, cfg.data.missing)
    return preprocess(table, cfg.data.columns, cfg.data.treatment_map)


def _model_file(cfg: RunConfig) -> Path:
    return cfg.model_path or cfg.out_dir / MODEL_FILE


def _scenario_model(cfg: RunConfig) -> DgdModel:
    kind = cfg.sim.scenario
    if kind == "from_dgd":
        path = _model_file(cfg)
        if not path.is_file():
            raise ConfigError(f"from_dgd needs a fitted model; {path} does not exist (run fit-dgd)")
        return make_scenario(kind, model=DgdModel.from_json(path.read_text()))
    rng = np.random.default_rng(np.random.SeedSequence(cfg.sim.master_seed, spawn_key=(SCENARIO_STREAM,)))
    return make_scenario(kind, cfg.scenario_params, rng)


def _write_manifest(cfg: RunConfig, command: str, **extra) -> None:
    doc = manifest(cfg.document, cfg.sim.master_seed, command=command, overrides=cfg.overrides,
                   workers=cfg.workers, **extra)
    (cfg.out_dir / "manifest.json").write_text(json.dumps(doc, indent=2, default=str) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _echo_table(header, rows, out=None) -> None:
    out = out or sys.stdout
    cells = [[str(h) for h in header]] + [[f"{v:.6g}" if isinstance(v, float) else str(v) for v in r]
                                          for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)), file=out)


# -- commands ---------------------------------------------------------------


def cmd_fit_dgd(cfg: RunConfig) -> int:
    dataset = _load_dataset(cfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    model = fit_dgd(dataset, cfg.hal, seed=cfg.sim.master_seed)
    path = _model_file(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model.to_json(sort_keys=True) + "\n")
    header = ("model", "n", "p", "undersmoothed", "n_coef", "lambda", "l1_norm", "randomized", "true_ate")
    rows = [(s["model"], dataset.n, dataset.p, "T" if s["undersmoothed"] else "F", s["n_coef"],
             float(s["lambda"]), float(s["l1_norm"]), "T" if model.randomized else "F", model.true_ate)
            for s in model.fit_summary]
    _write_csv(cfg.out_dir / "fit_summary.csv", header, rows)
    _echo_table(header, rows)
    _write_manifest(cfg, "fit-dgd", model_file=str(path), true_ate=model.true_ate)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    model = _scenario_model(cfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    n = cfg.sim.n_per_rep or model.w_pool.shape[0]
    width = len(str(cfg.sim.n_reps - 1))
    for r in range(cfg.sim.n_reps):
        rng = np.random.default_rng(np.random.SeedSequence(cfg.sim.master_seed, spawn_key=(r,)))
        d = sample(model, n, rng, replicate_index=r)
        rows = [list(w) + [int(a), y] for w, a, y in zip(d.W.tolist(), d.A, d.Y.tolist())]
        _write_csv(cfg.out_dir / f"replicate_{r:0{width}d}.csv", list(d.column_names) + ["A", "Y"], rows)
    _write_manifest(cfg, "simulate", true_ate=model.true_ate, n_per_rep=n)
    print(f"wrote {cfg.sim.n_reps} replicate(s) of n={n} to {cfg.out_dir}")
    return EXIT_OK


def cmd_estimate(cfg: RunConfig) -> int:
    dataset = _load_dataset(cfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.sim.master_seed))
    needed = bundles_needed(cfg.sim.estimators)
    bundles, builds = {}, {"plain": 0, "cross_fitted": 0}
    if needed:
        fits = fit_nuisances(dataset, cfg.sl, rng)
        for mode in sorted(needed):
            bundles[mode] = bundle_from_fits(dataset, fits, mode, cfg.sim.delta)
            builds[mode] += 1
    records, errors = [], {}
    for m in cfg.sim.estimators:
        try:
            records.append(estimate(m, dataset, bundles.get("plain"), bundles.get("cross_fitted"), rng))
        except Exception as exc:  # noqa: BLE001 - reported per method
            errors[m] = f"{type(exc).__name__}: {exc}"
    header = ("method", "psi", "se", "ci_lo", "ci_hi")
    rows = [(e.method, e.psi, e.se, e.ci[0], e.ci[1]) for e in records]
    _write_csv(cfg.out_dir / "estimates.csv", header, rows)
    (cfg.out_dir / "estimates.json").write_text(
        json.dumps([e.to_record() for e in records], indent=2, default=str) + "\n")
    _echo_table(header, rows)
    for m, msg in errors.items():
        print(f"{m} failed: {msg}", file=sys.stderr)
    _write_manifest(cfg, "estimate", bundle_builds=builds, errors=errors, n=dataset.n, p=dataset.p)
    if not records:
        raise RuntimeError("every estimator failed")
    return EXIT_OK


def _metrics_table(metrics):
    header = ("Method", "TrueATE", "Variance", "Bias", "MSE", "rMSE", "Coverage", "Coverage2", "CIwidth")
    rows = [(r.method, r.true_ate, r.variance, r.bias, r.mse, "" if r.rmse is None else r.rmse, r.coverage,
             r.coverage2, r.ci_width) for r in metrics]
    return header, rows


def _emit_metrics(cfg: RunConfig, metrics) -> None:
    report(metrics, "csv", cfg.out_dir / "metrics.csv")
    report(metrics, "json", cfg.out_dir / "metrics.json")
    _echo_table(*_metrics_table(metrics))


def cmd_benchmark(cfg: RunConfig) -> int:
    model = _scenario_model(cfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    results = run_simulation(model, cfg.sim, workers=cfg.workers)
    write_results(results, cfg.out_dir / "replicates.jsonl")
    metrics = compute_metrics(results, model.true_ate, scenario=cfg.sim.scenario)
    _emit_metrics(cfg, metrics)
    _write_manifest(cfg, "benchmark", true_ate=model.true_ate, scenario=cfg.sim.scenario,
                    n_per_rep=cfg.sim.n_per_rep or model.w_pool.shape[0])
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    reps = cfg.out_dir / "replicates.jsonl"
    man = cfg.out_dir / "manifest.json"
    if not reps.is_file() or not man.is_file():
        raise ConfigError(f"{cfg.out_dir} has no saved benchmark run (replicates.jsonl + manifest.json)")
    info = json.loads(man.read_text())
    metrics = compute_metrics(read_results(reps), float(info["true_ate"]), scenario=info.get("scenario", ""))
    _emit_metrics(cfg, metrics)
    return EXIT_OK


COMMANDS = {
    "fit-dgd": cmd_fit_dgd,
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "benchmark": cmd_benchmark,
    "report": cmd_report,
}


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atebench", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"atebench {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=_u64, help="master seed")
        p.add_argument("--reps", type=int, help="number of replicates")
        p.add_argument("--workers", type=int, help="worker processes (default $ATEBENCH_WORKERS or 1)")
        p.add_argument("--scenario", choices=SCENARIOS, help="simulation scenario")
        p.add_argument("--out", help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        cfg = load_config(args.config, args)
    except ConfigError as exc:
        print(f"atebench: configuration error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return COMMANDS[args.command](cfg)
    except (ConfigError, SchemaError, DataFormatError, EmptyDatasetError, TreatmentMappingError) as exc:
        print(f"atebench: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"atebench: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
