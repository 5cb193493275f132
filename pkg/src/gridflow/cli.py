"""Command-line entry point: ``gridflow --model henon --filter lgbf,egbf,pf --grid 31``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, build_config, config_to_text, read_config_file
from .errors import ConfigError, SimulationError
from .evaluation import SCHEMA_VERSION, ExperimentResult, run_experiment, write_records
from .model import get_model

EXIT_OK, EXIT_DIVERGED, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

LABELS = {"lgbf": "LGbF", "egbf": "EGbF", "pf": "PF"}

# flag name -> config key
_FLAG_KEYS = {
    "model": "model", "filter": "filter", "grid": "grid", "particles": "particles",
    "kappa": "kappa", "mc_runs": "mc_runs", "steps": "steps", "seed": "seed",
    "out": "out", "workers": "workers",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridflow", description="Grid-based filter Monte-Carlo experiments.")
    p.add_argument("--model", help="henon, ct5d, linear1d or linear2d")
    p.add_argument("--filter", help="comma list of lgbf, egbf, pf")
    p.add_argument("--grid", help="comma list of odd point counts (one value applies to every axis)")
    p.add_argument("--particles", help="PF particle count (default: total grid points)")
    p.add_argument("--kappa", help="grid half-width in standard deviations (default 5)")
    p.add_argument("--mc-runs", dest="mc_runs", help="Monte-Carlo runs (default 100)")
    p.add_argument("--steps", help="time steps after k=0 (default 10)")
    p.add_argument("--seed", help="master seed (default 1)")
    p.add_argument("--out", help="output directory (default $GRIDFLOW_OUT, else ./gridflow-out)")
    p.add_argument("--config", help="flat key=value config file; flags override it")
    p.add_argument("--debug-dump", dest="debug_dump", action="store_true", default=None,
                   help="write per-step PMD dumps for run 0")
    p.add_argument("--workers", help="worker processes for MC runs (default 1)")
    p.add_argument("--set", dest="params", action="append", default=[], metavar="PARAM=VALUE",
                   help="model parameter override, e.g. --set r=0.1 (repeatable)")
    return p


def parse_config(argv=None, config_file=None) -> ExperimentConfig:
    """Flags override values from the config file, which override defaults."""
    args = build_parser().parse_args(argv)
    path = args.config or config_file
    file_values = read_config_file(path) if path else {}
    overrides = {key: getattr(args, flag) for flag, key in _FLAG_KEYS.items()}
    if args.debug_dump:
        overrides["debug_dump"] = "true"
    for item in args.params:
        if "=" not in item:
            raise ConfigError("--set", f"expected PARAM=VALUE, got {item!r}")
        name, value = item.split("=", 1)
        name = name.strip()
        overrides[name if name.startswith("model.") else f"model.{name}"] = value
    return build_config(file_values, overrides)


def format_time(t: float) -> str:
    if not math.isfinite(t):
        return "n/a"
    mant, exp = f"{t:.1e}".split("e")
    return f"{mant}e{int(exp)}"


def format_table(result: ExperimentResult) -> str:
    """Technique / RMSE / ANEES / Time [sec] (mean per prediction step)."""
    rows = [("Technique", "RMSE", "ANEES", "Time [sec]")]
    for name, s in result.summaries.items():
        diverged = f"  ({len(s.diverged_runs)} of {s.runs} runs diverged)" if s.diverged_runs else ""
        rows.append((LABELS.get(name, name), f"{s.rmse:.3f}", f"{s.anees:.2f}",
                     format_time(s.mean_predict_time) + diverged))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = ["  ".join(r[i].ljust(widths[i]) for i in range(3)) + "  " + r[3] for r in rows]
    return "\n".join(line.rstrip() for line in lines) + "\n"


def _clean(x):
    """JSON-safe copy: NaN/inf become null."""
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def summary_document(result: ExperimentResult) -> dict:
    cfg = result.config
    return _clean({
        "schema_version": SCHEMA_VERSION,
        "config": {
            "model": cfg.model, "filters": list(cfg.filters), "grid": list(cfg.counts),
            "particles": cfg.n_particles, "kappa": cfg.kappa, "mc_runs": cfg.mc_runs,
            "steps": cfg.steps, "seed": cfg.seed,
            "model_params": {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(cfg.model_params.items())},
        },
        "truth_redraws": result.truth_redraws,
        "filters": {name: s.metrics_dict() for name, s in result.summaries.items()},
        "timing": {name: s.timing_dict() for name, s in result.summaries.items()},
    })


def write_trajectories(path, result: ExperimentResult) -> Path:
    """True vs estimated positions per run and step, for trajectory plots."""
    model = get_model(result.config.model, result.config.model_params)
    pos = list(model.position_indices) or list(range(model.state_dim))
    header = ["filter", "run", "k"] + [f"true_{i + 1}" for i in pos] + [f"est_{i + 1}" for i in pos]
    lines = [",".join(header)]
    for name, recs in result.records.items():
        for r in recs:
            for k in range(r.steps):
                vals = [repr(float(v)) for v in r.truth[k, pos]] + [repr(float(v)) for v in r.mean[k, pos]]
                lines.append(",".join([name, str(r.run), str(k)] + vals))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def emit_outputs(result: ExperimentResult, out_dir) -> dict:
    """Write summary.json, records.csv, table.txt, config.txt and trajectories.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "summary": out / "summary.json",
        "records": out / "records.csv",
        "table": out / "table.txt",
        "config": out / "config.txt",
        "trajectories": out / "trajectories.csv",
    }
    paths["summary"].write_text(json.dumps(summary_document(result), indent=2) + "\n", encoding="utf-8")
    write_records(paths["records"], result.records)
    paths["table"].write_text(format_table(result), encoding="utf-8")
    paths["config"].write_text(config_to_text(result.config), encoding="utf-8")
    write_trajectories(paths["trajectories"], result)
    return paths


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(f"gridflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = cfg.out or Path("gridflow-out")
    np.seterr(under="ignore")
    try:
        out.mkdir(parents=True, exist_ok=True)
        dump_root = out / "debug" if cfg.debug_dump else None
        result = run_experiment(cfg, dump_root)
        emit_outputs(result, out)
    except SimulationError as exc:
        print(f"gridflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        where = f" ({exc.filename})" if getattr(exc, "filename", None) else f" (under {out})"
        print(f"gridflow: I/O error{where}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    sys.stdout.write(format_table(result))
    for name, s in result.summaries.items():
        for run in s.diverged_runs:
            msg = next(r.message for r in result.records[name] if r.run == run)
            print(f"{LABELS.get(name, name)} run {run} diverged: {msg}", file=sys.stderr)
    if result.truth_redraws:
        print(f"{result.truth_redraws} truth trajectories left the working region and were redrawn",
              file=sys.stderr)
    return EXIT_DIVERGED if result.any_diverged else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
