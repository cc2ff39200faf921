"""Command-line front end: simulate, fit, evaluate and benchmark.

Runs are driven by an INI file with one flat section per concern::

    [data]       kind, n_train, n_test, omega, covariates, train_csv, test_csv, c_minus, c_plus
    [solver]     name plus any hyperparameter of that solver
    [da]         lam, tau, n_rounds, folds, initial
    [surface]    ridge, a_scale, x_scale
    [run]        seeds, oracle, out, baseline_weights
    [benchmark]  solvers, da, s_learner, ablation, values

Every key is optional; unknown sections or keys are rejected by name.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import platform
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .core import DataError, Dataset, RngState, TreatmentSupport, load_dataset_csv, make_treatment_grid, save_dataset_csv
from .daloop import DaConfig, RoundError, run_da
from .density import fit_gps
from .dgp import (OracleCurves, SemiSynthDGP, SyntheticDGP, SyntheticParams, closed_form_curves,
                  load_covariates_csv, mc_ground_truth)
from .evaluation import aggregate_seeds, evaluate, factual_rmse, panel_rmse, policy_values, regret
from .numerics import SolveError
from .policy import SurfaceParams, fit_s_learner, policy_from_panel
from .solvers import SOLVER_PARAMS, SolverError, load_bridge, make_params, save_bridge

logger = logging.getLogger("daprox")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4
ABLATION_AXES = ("tau", "lam", "n_rounds", "omega")


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class DataSpec:
    kind: str = "synthetic"
    n_train: int = 3000
    n_test: int = 1000
    omega: float = 1.0
    covariates: str = ""
    train_csv: str = ""
    test_csv: str = ""
    c_minus: float = 0.0
    c_plus: float = 1.0


@dataclass(frozen=True)
class BenchmarkSpec:
    solvers: tuple = ("PMMR",)
    da: tuple = ("off", "on")
    s_learner: bool = False
    ablation: str = ""
    values: tuple = ()


@dataclass(frozen=True)
class RunConfig:
    data: DataSpec = field(default_factory=DataSpec)
    solver: object = field(default_factory=lambda: make_params("PMMR"))
    da: DaConfig = field(default_factory=DaConfig)
    seeds: tuple = (0,)
    oracle: str = "closed"
    out: str = "runs"
    baseline_weights: str = "uniform"
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)

    def oracle_b(self) -> int | None:
        """``None`` for the closed form, else the Monte Carlo draw count."""
        return parse_oracle(self.oracle)

    def canonical(self) -> dict:
        d = {"data": asdict(self.data), "solver": {"name": self.solver.solver, **asdict(self.solver)},
             "da": {k: v for k, v in asdict(self.da).items() if k not in ("solver", "surface")},
             "surface": asdict(self.da.surface), "seeds": list(self.seeds), "oracle": self.oracle,
             "baseline_weights": self.baseline_weights, "benchmark": asdict(self.benchmark)}
        return json.loads(json.dumps(d))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.canonical(), sort_keys=True).encode()).hexdigest()


def parse_oracle(text: str) -> int | None:
    text = str(text).strip()
    if text == "closed":
        return None
    if text.startswith("mc:"):
        try:
            b = int(text[3:])
        except ValueError:
            b = 0
        if b >= 2:
            return b
    raise ConfigError(f"run.oracle: expected 'closed' or 'mc:B' with B >= 2, got {text!r}")


def _coerce(section, key, raw, proto):
    try:
        if isinstance(proto, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "on", "off", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "on", "1")
        if isinstance(proto, int):
            return int(raw)
        if isinstance(proto, float):
            return float(raw)
        if isinstance(proto, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if proto and isinstance(proto[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r}") from None


def _section_values(cp, section, cls, skip=()):
    if not cp.has_section(section):
        return {}
    proto = {f.name: getattr(cls(), f.name) for f in fields(cls) if f.name not in skip}
    out = {}
    for key, raw in cp.items(section):
        if key not in proto:
            raise ConfigError(f"unknown key {section}.{key}; expected one of {sorted(proto)}")
        out[key] = _coerce(section, key, raw, proto[key])
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Parse an INI file into a validated ``RunConfig``; defaults fill every gap."""
    cp = configparser.ConfigParser(interpolation=None)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    known = {"data", "solver", "da", "surface", "run", "benchmark"}
    for s in cp.sections():
        if s not in known:
            raise ConfigError(f"unknown section [{s}]; expected one of {sorted(known)}")
    try:
        data = DataSpec(**_section_values(cp, "data", DataSpec))
        if data.kind not in ("synthetic", "semisynth", "csv"):
            raise ConfigError(f"data.kind: expected synthetic, semisynth or csv, got {data.kind!r}")
        if data.n_train < 10 or data.n_test < 1:
            raise ConfigError("data.n_train must be >= 10 and data.n_test >= 1")

        solver_kw = dict(cp.items("solver")) if cp.has_section("solver") else {}
        name = solver_kw.pop("name", "PMMR").strip().upper()
        if name not in SOLVER_PARAMS:
            raise ConfigError(f"solver.name: unknown solver {name!r}; expected one of {sorted(SOLVER_PARAMS)}")
        solver = _solver_from_section(name, solver_kw)

        surface = SurfaceParams(**_section_values(cp, "surface", SurfaceParams))
        da_kw = _section_values(cp, "da", DaConfig, skip=("solver", "surface"))
        da = DaConfig(solver=solver, surface=surface, **da_kw)

        run_kw = {}
        if cp.has_section("run"):
            allowed = {"seeds", "oracle", "out", "baseline_weights"}
            for key, raw in cp.items("run"):
                if key not in allowed:
                    raise ConfigError(f"unknown key run.{key}; expected one of {sorted(allowed)}")
                run_kw[key] = _coerce("run", key, raw, (0,) if key == "seeds" else "")
        bench = BenchmarkSpec(**_section_values(cp, "benchmark", BenchmarkSpec))
        for key, val in (overrides or {}).items():
            run_kw[key] = val
        cfg = RunConfig(data=data, solver=solver, da=da, benchmark=bench, **run_kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    _validate(cfg)
    return cfg


def _solver_from_section(name, raw: dict):
    cls = SOLVER_PARAMS[name]
    proto = cls()
    kw = {}
    for key, val in raw.items():
        if not hasattr(proto, key) or key == "solver":
            allowed = sorted(f.name for f in fields(cls))
            raise ConfigError(f"unknown key solver.{key} for {name}; expected one of {allowed}")
        current = getattr(proto, key)
        kw[key] = _coerce("solver", key, val, current if not isinstance(current, tuple) else (0,))
    return cls(**kw)


def _validate(cfg: RunConfig):
    if not cfg.seeds:
        raise ConfigError("run.seeds: need at least one seed")
    cfg.oracle_b()
    if cfg.data.kind != "synthetic" and cfg.oracle == "closed":
        raise ConfigError(f"run.oracle: the closed form exists only for synthetic data, not {cfg.data.kind!r}")
    if cfg.baseline_weights not in ("uniform", "ipw"):
        raise ConfigError("run.baseline_weights: expected 'uniform' or 'ipw'")
    b = cfg.benchmark
    for s in b.solvers:
        if s.upper() not in SOLVER_PARAMS:
            raise ConfigError(f"benchmark.solvers: unknown solver {s!r}")
    if not set(b.da) <= {"on", "off"} or not b.da:
        raise ConfigError("benchmark.da: expected a list drawn from on, off")
    if b.ablation and b.ablation not in ABLATION_AXES:
        raise ConfigError(f"benchmark.ablation: expected one of {ABLATION_AXES}, got {b.ablation!r}")
    if b.ablation and not b.values:
        raise ConfigError("benchmark.values: an ablation needs at least one value")
    if b.ablation == "omega" and cfg.data.kind != "synthetic":
        raise ConfigError("benchmark.ablation: omega sweeps need synthetic data")


# ------------------------------------------------------------------ pipeline pieces


def _dgp_for(cfg: RunConfig):
    if cfg.data.kind == "synthetic":
        return SyntheticDGP(SyntheticParams(omega=cfg.data.omega))
    if cfg.data.kind == "semisynth":
        cov = load_covariates_csv(cfg.data.covariates) if cfg.data.covariates else None
        return SemiSynthDGP(covariates=cov)
    return None


def simulate_data(cfg: RunConfig, seed: int):
    """Train/test datasets plus oracle curves at the test covariates."""
    rng = RngState(seed)
    if cfg.data.kind == "csv":
        support = TreatmentSupport(cfg.data.c_minus, cfg.data.c_plus)
        if not cfg.data.train_csv:
            raise ConfigError("data.train_csv is required for csv data")
        train = load_dataset_csv(cfg.data.train_csv, support)
        test = load_dataset_csv(cfg.data.test_csv, support) if cfg.data.test_csv else None
        return train, test, None
    dgp = _dgp_for(cfg)
    train, _ = dgp.sample(cfg.data.n_train, rng.child("train"))
    test, _ = dgp.sample(cfg.data.n_test, rng.child("test"))
    grid = make_treatment_grid(dgp.support)
    b = cfg.oracle_b()
    oracle = closed_form_curves(dgp, test.x, grid) if b is None else mc_ground_truth(dgp, test.x, grid, b, rng.child("oracle"))
    return train, test, oracle


def arm_config(cfg: RunConfig, solver_name: str | None, da_on: bool) -> DaConfig:
    solver = cfg.solver if solver_name is None or solver_name.upper() == cfg.solver.solver \
        else make_params(solver_name)
    if da_on:
        return replace(cfg.da, solver=solver)
    return replace(cfg.da, solver=solver, n_rounds=0, initial=cfg.baseline_weights)


def fit_arm(train: Dataset, da_config: DaConfig, seed: int):
    gps = fit_gps(train) if (da_config.initial == "ipw" or da_config.n_rounds > 0) else None
    return run_da(train, gps, da_config, RngState(seed).child("fit"))


def manifest(cfg: RunConfig, seed, command: str, extra: dict | None = None) -> dict:
    return {"command": command, "config_sha256": cfg.digest(), "config": cfg.canonical(), "seed": seed,
            "versions": {"daprox": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            **(extra or {})}


def _write_json(path: Path, payload):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_panel(path: Path, panel, grid):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["x_index", *[repr(float(a)) for a in grid]])
        for i, row in enumerate(panel):
            wr.writerow([i, *[repr(float(v)) for v in row]])


def _read_panel(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    grid = np.array([float(v) for v in rows[0][1:]])
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]]), grid


def _ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {p}: {exc}") from None
    return p


# ------------------------------------------------------------------ commands


def cmd_simulate(cfg: RunConfig, seed: int, out) -> Path:
    if cfg.data.kind == "csv":
        raise ConfigError("simulate needs data.kind = synthetic or semisynth")
    out = _ensure_dir(out)
    train, test, oracle = simulate_data(cfg, seed)
    save_dataset_csv(train, out / "train.csv")
    save_dataset_csv(test, out / "test.csv")
    _write_json(out / "support.json", train.support.to_dict())
    oracle.to_csv(out / "oracle.csv")
    _write_json(out / "manifest.json", manifest(cfg, seed, "simulate"))
    return out


def _load_split(directory: Path, name: str) -> Dataset:
    support = TreatmentSupport.from_dict(json.loads((directory / "support.json").read_text(encoding="utf-8")))
    return load_dataset_csv(directory / f"{name}.csv", support)


def cmd_fit(cfg: RunConfig, seed: int, data_dir, out) -> Path:
    data_dir, out = Path(data_dir), _ensure_dir(out)
    if not (data_dir / "train.csv").exists():
        raise ConfigError(f"no train.csv in {data_dir}; run simulate first")
    train = _load_split(data_dir, "train")
    da_cfg = cfg.da if cfg.da.n_rounds > 0 else replace(cfg.da, initial=cfg.baseline_weights)
    result = fit_arm(train, da_cfg, seed)
    save_bridge(result.bridge, out / "bridge.json")
    grid = make_treatment_grid(train.support)
    x_eval = _load_split(data_dir, "test").x if (data_dir / "test.csv").exists() else train.x
    panel = result.surface.on_grid(grid, x_eval)
    _write_panel(out / "surface.csv", panel, grid)
    policy = policy_from_panel(panel, grid)
    with open(out / "policy.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["x_index", "a"])
        for i, a in enumerate(policy):
            wr.writerow([i, repr(float(a))])
    _write_json(out / "diagnostics.json", result.diagnostics())
    _write_json(out / "manifest.json", manifest(cfg, seed, "fit", {"data_dir": str(data_dir)}))
    return out


def cmd_evaluate(cfg: RunConfig, data_dir, fit_dir, out) -> dict:
    data_dir, fit_dir, out = Path(data_dir), Path(fit_dir), _ensure_dir(out)
    oracle = OracleCurves.from_csv(data_dir / "oracle.csv")
    test = _load_split(data_dir, "test")
    panel, grid = _read_panel(fit_dir / "surface.csv")
    if not np.allclose(grid, oracle.grid):
        raise ConfigError("surface grid does not match oracle grid")
    policy = policy_from_panel(panel, oracle.grid)
    mean_regret, per_point = regret(policy, oracle)
    value, best = policy_values(policy, oracle)
    bridge = load_bridge(fit_dir / "bridge.json")
    report = {"regret": mean_regret, "counterfactual_rmse": panel_rmse(panel, oracle),
              "factual_rmse": factual_rmse(bridge, test), "policy_value": value, "oracle_value": best}
    _write_json(out / "metrics.json", report)
    with open(out / "per_point_regret.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["x_index", "regret"])
        for i, r in enumerate(per_point):
            wr.writerow([i, repr(float(r))])
    return report


# ------------------------------------------------------------------ benchmark


@dataclass(frozen=True)
class Cell:
    arm: str
    solver: str
    da: bool
    seed: int
    axis_value: float | None = None


def _cells(cfg: RunConfig):
    b = cfg.benchmark
    values = [float(v) for v in b.values] if b.ablation else [None]
    cells = []
    for v in values:
        for s in b.solvers:
            for flag in b.da:
                arm = ("DA-" if flag == "on" else "") + s.upper()
                cells.extend(Cell(arm, s.upper(), flag == "on", seed, v) for seed in cfg.seeds)
        if b.s_learner:
            cells.extend(Cell("S-learner", "", False, seed, v) for seed in cfg.seeds)
    return cells


def _cell_config(cfg: RunConfig, cell: Cell) -> RunConfig:
    axis = cfg.benchmark.ablation
    if not axis or cell.axis_value is None:
        return cfg
    if axis == "omega":
        return replace(cfg, data=replace(cfg.data, omega=cell.axis_value))
    value = int(cell.axis_value) if axis == "n_rounds" else cell.axis_value
    return replace(cfg, da=replace(cfg.da, **{axis: value}))


def run_cell(cfg: RunConfig, cell: Cell) -> dict:
    ccfg = _cell_config(cfg, cell)
    train, test, oracle = simulate_data(ccfg, cell.seed)
    grid = oracle.grid
    if cell.arm == "S-learner":
        surface = fit_s_learner(train, ccfg.da.surface, RngState(cell.seed).child("s-learner"))
        panel = surface.on_grid(grid, test.x)
        policy = policy_from_panel(panel, grid)
        mean_regret, _ = regret(policy, oracle)
        fr = float(np.sqrt(np.mean((train.y - surface.predict(train.a, train.x)) ** 2)))
        value, best = policy_values(policy, oracle)
        return {"regret": mean_regret, "counterfactual_rmse": panel_rmse(panel, oracle), "factual_rmse": fr,
                "policy_value": value, "oracle_value": best}
    result = fit_arm(train, arm_config(ccfg, cell.solver, cell.da), cell.seed)
    policy = policy_from_panel(result.surface.on_grid(grid, test.x), grid)
    return evaluate(policy, result.surface, result.bridge, oracle, test.x, test).to_dict()


def _run_cell_safe(args):
    cfg, cell = args
    try:
        return cell, run_cell(cfg, cell), None
    except (SolverError, SolveError, RoundError, np.linalg.LinAlgError, ValueError) as exc:
        return cell, None, f"{type(exc).__name__}: {exc}"


def cmd_benchmark(cfg: RunConfig, out, jobs: int = 1) -> tuple[dict, int]:
    out = _ensure_dir(out)
    cells = _cells(cfg)
    work = [(cfg, c) for c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_safe, work))
    else:
        results = [_run_cell_safe(w) for w in work]

    metrics = ("regret", "counterfactual_rmse", "factual_rmse")
    with open(out / "per_seed.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["arm", "axis", "value", "seed", "status", *metrics, "error"])
        for cell, rep, err in results:
            vals = [repr(rep[m]) for m in metrics] if rep else [""] * len(metrics)
            wr.writerow([cell.arm, cfg.benchmark.ablation, "" if cell.axis_value is None else repr(cell.axis_value),
                         cell.seed, "ok" if rep else "failed", *vals, err or ""])

    ok = {(c.arm, c.axis_value, c.seed): r for c, r, e in results if r is not None}
    summaries = {}
    groups = sorted({(c.arm, c.axis_value) for c in cells}, key=lambda t: (t[1] is None, t[1] or 0.0, t[0]))
    for arm, value in groups:
        seeds = [s for s in cfg.seeds if (arm, value, s) in ok]
        if not seeds:
            continue
        key = arm if value is None else f"{arm}@{cfg.benchmark.ablation}={value:g}"
        entry = {}
        base_arm = arm[3:] if arm.startswith("DA-") else None
        for m in metrics:
            runs = [ok[(arm, value, s)] for s in seeds]
            paired = [s for s in seeds if (base_arm, value, s) in ok] if base_arm else []
            if base_arm and paired:
                summ = aggregate_seeds([ok[(arm, value, s)] for s in paired],
                                       [ok[(base_arm, value, s)] for s in paired], m)
            else:
                summ = aggregate_seeds(runs, metric=m)
            entry[m] = summ.to_dict()
        entry["seeds"] = seeds
        summaries[key] = entry
    failed = [(c, e) for c, r, e in results if r is None]
    _write_json(out / "summary.json", summaries)
    _write_json(out / "manifest.json", manifest(cfg, list(cfg.seeds), "benchmark",
                                               {"cells": len(cells), "failed": len(failed)}))
    for c, e in failed:
        logger.error("cell %s seed %d failed: %s", c.arm, c.seed, e)
    return summaries, EXIT_PARTIAL if failed else EXIT_OK


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="override the seed list with a single seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel benchmark cells")
    common.add_argument("--out", help="output directory")
    common.add_argument("--oracle", help="closed or mc:B")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="daprox", description="Decision-aware proximal bridge learning.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write train/test data and oracle curves")
    p_fit = sub.add_parser("fit", parents=[common], help="fit a (decision-aware) bridge")
    p_fit.add_argument("--data", required=True, help="directory written by simulate")
    p_eval = sub.add_parser("evaluate", parents=[common], help="score a fit against oracle curves")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--fit", required=True, help="directory written by fit")
    sub.add_parser("benchmark", parents=[common], help="sweep solvers x DA x seeds")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = {}
        if args.seed is not None:
            overrides["seeds"] = (args.seed,)
        if args.oracle is not None:
            overrides["oracle"] = args.oracle
        if args.out is not None:
            overrides["out"] = args.out
        cfg = load_config(args.config, overrides)
        seed = cfg.seeds[0]
        if args.command == "simulate":
            cmd_simulate(cfg, seed, cfg.out)
        elif args.command == "fit":
            cmd_fit(cfg, seed, args.data, cfg.out)
        elif args.command == "evaluate":
            report = cmd_evaluate(cfg, args.data, args.fit, cfg.out)
            print(json.dumps(report, indent=2, sort_keys=True))
        else:
            _, code = cmd_benchmark(cfg, cfg.out, max(1, args.jobs))
            return code
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, SolveError, RoundError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
