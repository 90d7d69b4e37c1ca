"""Command-line runner: single experiments, grid sweeps and table re-derivation.

Every run writes ``<out-dir>/<run-id>/`` with ``config.json``, ``rounds.csv``,
``metrics.csv``, ``summary.json`` and ``footprint.csv``. A sweep additionally
writes ``results.csv``, ``convergence.csv`` and ``footprint.csv`` at the top of
its output directory; ``report`` rebuilds those three from the run directories.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .config import ExperimentConfig, check_config, config_from_dict, _build
from .errors import ConfigurationError
from .orchestrator import RunResult, composition, footprint, run_fedavg, run_semipfl

log = logging.getLogger("semipfl")

METHODS = {"semipfl": run_semipfl, "fedavg": run_fedavg}


@dataclass
class SweepSpec:
    labeled: list[int] = field(default_factory=lambda: [0, 10, 20, 40])
    users: list[int] = field(default_factory=lambda: [10])
    scenarios: list[int] = field(default_factory=lambda: [1])
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    methods: list[str] = field(default_factory=lambda: ["semipfl"])
    # when set, rounds = rounds_per_user * K so every cell gives each user the same budget
    rounds_per_user: int | None = None
    workers: int = 1

    def check(self) -> list[str]:
        errors = []
        for name in ("labeled", "users", "scenarios", "seeds", "methods"):
            value = getattr(self, name)
            if not isinstance(value, list) or not value:
                errors.append(f"sweep.{name}: must be a non-empty list")
        if errors:
            return errors
        for name in ("labeled", "users", "scenarios", "seeds"):
            if any(isinstance(v, bool) or not isinstance(v, int) for v in getattr(self, name)):
                errors.append(f"sweep.{name}: entries must be integers")
        if len(set(self.seeds)) != len(self.seeds):
            errors.append("sweep.seeds: seeds must be distinct")
        if any(m not in METHODS for m in self.methods):
            errors.append(f"sweep.methods: entries must be among {sorted(METHODS)}")
        if self.rounds_per_user is not None and (not isinstance(self.rounds_per_user, int)
                                                 or self.rounds_per_user < 1):
            errors.append("sweep.rounds_per_user: must be a positive integer")
        if not isinstance(self.workers, int) or self.workers < 1:
            errors.append("sweep.workers: must be a positive integer")
        return errors

    def cells(self):
        for method in self.methods:
            for ell in self.labeled:
                for k in self.users:
                    for scenario in self.scenarios:
                        yield method, ell, k, scenario

    def cell_config(self, base: ExperimentConfig, ell: int, k: int, scenario: int,
                    seed: int) -> ExperimentConfig:
        changes = dict(labeled_per_class=ell, n_users=k, scenario=scenario, seed=seed)
        if self.rounds_per_user is not None:
            changes["rounds"] = self.rounds_per_user * k
        return base.replace(**changes)


def _read_yaml(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return data


def validate_config(path) -> tuple[ExperimentConfig | None, list[str]]:
    """Parse a config file; returns ``(config, [])`` or ``(None, errors)``."""
    try:
        data = _read_yaml(path)
    except ConfigurationError as exc:
        return None, exc.errors
    data = {k: v for k, v in data.items() if k != "sweep"}
    try:
        return config_from_dict(data), []
    except ConfigurationError as exc:
        return None, exc.errors


def load_sweep(path) -> tuple[ExperimentConfig, SweepSpec]:
    data = _read_yaml(path)
    errors: list[str] = []
    spec = _build(SweepSpec, data.pop("sweep", None), "sweep", errors)
    errors += spec.check() if not errors else []
    try:
        cfg = config_from_dict(data)
    except ConfigurationError as exc:
        errors += exc.errors
        cfg = None
    if errors:
        raise ConfigurationError(errors)
    return cfg, spec


# --- per-run output -----------------------------------------------------------------

def run_id(method: str, cfg: ExperimentConfig) -> str:
    return (f"{method}-l{cfg.labeled_per_class}-k{cfg.n_users}-s{cfg.scenario}"
            f"-r{cfg.rounds}-seed{cfg.seed}")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _model_parameters(result: RunResult) -> int:
    """Parameters a user evaluates at inference time (cost proxy)."""
    if result.method == "fedavg":
        return int(result.models["global"].size)
    sizes = [m.size for m in result.models.values()]
    return int(sizes[0]) if sizes else 0


def write_run(result: RunResult, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for stale in ("error.json",):
        (directory / stale).unlink(missing_ok=True)
    _write_json(directory / "config.json", {"method": result.method, **result.config.to_dict()})
    rows = []
    for lg in result.logs:
        ev = list(lg.eval.values())
        rows.append([
            lg.round, lg.user, repr(lg.loss_before), repr(lg.loss_after),
            sum(s.kept for s in lg.selection), sum(s.fallback for s in lg.selection),
            ";".join(repr(c) for c in lg.chi), lg.scalars_down, lg.scalars_up,
            repr(float(np.mean([e[0] for e in ev]))) if ev else "",
            repr(float(np.mean([e[1] for e in ev]))) if ev else "",
        ])
    _write_csv(directory / "rounds.csv",
               ["round", "user", "loss_before", "loss_after", "kept", "fallbacks", "chi",
                "scalars_down", "scalars_up", "eval_f1", "eval_kappa"], rows)
    _write_csv(directory / "metrics.csv", ["user", "f1", "kappa"],
               [[u, repr(f1), repr(k)] for u, (f1, k) in sorted(result.metrics.items())])
    _write_csv(directory / "footprint.csv", ["round", "bytes_down", "bytes_up", "cumulative"],
               [[r.round, r.bytes_down, r.bytes_up, r.cumulative] for r in footprint(result.logs)])
    summary = result.summary()
    summary.update(run_id=directory.name, parameters=_model_parameters(result),
                   composition=composition(result.config.n_users, result.config.scenario))
    _write_json(directory / "summary.json", summary)


def execute(method: str, cfg: ExperimentConfig, out_dir: Path) -> Path:
    """Run one experiment and store it; failures are written to ``error.json`` and re-raised."""
    directory = out_dir / run_id(method, cfg)
    try:
        result = METHODS[method](cfg)
    except Exception as exc:
        directory.mkdir(parents=True, exist_ok=True)
        _write_json(directory / "config.json", {"method": method, **cfg.to_dict()})
        _write_json(directory / "error.json", {"error": f"{type(exc).__name__}: {exc}"})
        raise
    write_run(result, directory)
    return directory


def _execute_quietly(job):
    method, cfg, out_dir = job
    try:
        execute(method, cfg, out_dir)
        return None
    except Exception as exc:
        log.debug("%s", traceback.format_exc())
        return f"{type(exc).__name__}: {exc}"


# --- sweep tables -------------------------------------------------------------------

def _fmt(mean: float, std: float) -> str:
    return f"{mean:.4f}({std:.4f})"


def build_report(out_dir) -> dict[str, Path]:
    """Aggregate every run directory under ``out_dir`` into the sweep tables."""
    out_dir = Path(out_dir)
    cells: dict[tuple, dict] = {}
    for directory in sorted(p for p in out_dir.iterdir() if (p / "config.json").is_file()):
        cfg = json.loads((directory / "config.json").read_text(encoding="utf-8"))
        key = (cfg["method"], cfg["labeled_per_class"], cfg["n_users"], cfg["scenario"])
        cell = cells.setdefault(key, {"runs": [], "failures": [], "convergence": {},
                                      "footprint": None})
        if (directory / "error.json").is_file():
            cell["failures"].append(directory.name)
            continue
        summary = json.loads((directory / "summary.json").read_text(encoding="utf-8"))
        cell["runs"].append(summary)
        with (directory / "rounds.csv").open(encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if row["eval_f1"]:
                    cell["convergence"].setdefault(int(row["round"]), []).append(
                        (float(row["eval_f1"]), float(row["eval_kappa"])))
        if cell["footprint"] is None:
            with (directory / "footprint.csv").open(encoding="utf-8") as fh:
                cell["footprint"] = [[int(v) for v in row] for row in list(csv.reader(fh))[1:]]

    result_rows, conv_rows, foot_rows = [], [], []
    for key in sorted(cells):
        method, ell, k, scenario = key
        cell = cells[key]
        f1 = np.array([s["f1_mean"] for s in cell["runs"]])
        kappa = np.array([s["kappa_mean"] for s in cell["runs"]])
        n = len(cell["runs"])
        stats = [float(f1.mean()), float(f1.std()), float(kappa.mean()), float(kappa.std())] \
            if n else [float("nan")] * 4
        result_rows.append([method, ell, k, scenario, composition(k, scenario), n,
                            len(cell["failures"]), *[repr(v) for v in stats],
                            _fmt(stats[0], stats[1]), _fmt(stats[2], stats[3]),
                            cell["runs"][0]["parameters"] if n else "",
                            ";".join(cell["failures"])])
        for rnd in sorted(cell["convergence"]):
            vals = np.array(cell["convergence"][rnd])
            conv_rows.append([method, ell, k, scenario, rnd, len(vals),
                              repr(float(vals[:, 0].mean())), repr(float(vals[:, 1].mean()))])
        for rnd, down, up, cumulative in cell["footprint"] or []:
            foot_rows.append([method, ell, k, scenario, rnd, down, up, cumulative])

    cell_header = ["method", "labeled", "users", "scenario"]
    paths = {name: out_dir / f"{name}.csv" for name in ("results", "convergence", "footprint")}
    _write_csv(paths["results"], cell_header + [
        "composition", "runs", "failures", "f1_mean", "f1_std", "kappa_mean", "kappa_std",
        "f1", "kappa", "parameters", "failed_runs"], result_rows)
    _write_csv(paths["convergence"], cell_header + ["round", "runs", "f1_mean", "kappa_mean"],
               conv_rows)
    _write_csv(paths["footprint"], cell_header + ["round", "bytes_down", "bytes_up",
                                                  "cumulative"], foot_rows)
    return paths


def run_sweep(base: ExperimentConfig, spec: SweepSpec, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(method, spec.cell_config(base, ell, k, scenario, seed), out_dir)
            for method, ell, k, scenario in spec.cells() for seed in spec.seeds]
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            outcomes = list(pool.map(_execute_quietly, jobs))
    else:
        outcomes = [_execute_quietly(job) for job in jobs]
    for (method, cfg, _), failure in zip(jobs, outcomes):
        if failure:
            log.warning("run %s failed: %s", run_id(method, cfg), failure)
    return build_report(out_dir)


# --- entry point --------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semipfl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("config")
    run.add_argument("--method", choices=sorted(METHODS), default="semipfl")
    run.add_argument("--seed", type=int)
    run.add_argument("--out-dir", default="out")

    sweep = sub.add_parser("sweep", help="run the grid in the config's 'sweep' section")
    sweep.add_argument("config")
    sweep.add_argument("--seed", type=int, help="replace the seed list with this one seed")
    sweep.add_argument("--out-dir", default="out")
    sweep.add_argument("--workers", type=int)

    report = sub.add_parser("report", help="rebuild sweep tables from stored runs")
    report.add_argument("out_dir")

    validate = sub.add_parser("validate", help="check a config file and print it normalized")
    validate.add_argument("config")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    try:
        if args.command == "validate":
            cfg, errors = validate_config(args.config)
            if errors:
                for e in errors:
                    print(e, file=sys.stderr)
                return 2
            print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        elif args.command == "run":
            cfg, errors = validate_config(args.config)
            if errors:
                raise ConfigurationError(errors)
            if args.seed is not None:
                cfg = cfg.replace(seed=args.seed)
            directory = execute(args.method, cfg, Path(args.out_dir))
            summary = json.loads((directory / "summary.json").read_text(encoding="utf-8"))
            print(f"{directory}: macro-F1 {_fmt(summary['f1_mean'], summary['f1_std'])} "
                  f"kappa {_fmt(summary['kappa_mean'], summary['kappa_std'])}")
        elif args.command == "sweep":
            cfg, spec = load_sweep(args.config)
            if args.seed is not None:
                spec.seeds = [args.seed]
            if args.workers is not None:
                spec.workers = args.workers
            errors = spec.check() + check_config(cfg)
            if errors:
                raise ConfigurationError(errors)
            paths = run_sweep(cfg, spec, args.out_dir)
            print(paths["results"].read_text(encoding="utf-8"), end="")
        else:
            paths = build_report(args.out_dir)
            print(paths["results"].read_text(encoding="utf-8"), end="")
    except ConfigurationError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
