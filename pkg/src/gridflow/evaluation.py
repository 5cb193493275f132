"""Monte-Carlo experiment harness: run filters on simulated trajectories, score them."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .common import likelihood, local_predict_moments, measurement_update
from .config import ExperimentConfig
from .egbf import egbf_predict
from .errors import FilterDivergence, GridDesignError, SimulationError
from .lgbf import lgbf_predict
from .model import StateSpaceModel, get_model, simulate_trajectory
from .pf import pf_init, pf_propagate, pf_update
from .pmd import (GaussianMoments, design_grid, floor_covariance, gaussian_pmd, interpolate_weights,
                  pmd_moments, save_pmd, save_point_cloud)

SCHEMA_VERSION = 1
# give up on a run after this many escaped truth trajectories
MAX_REDRAWS = 1000


@dataclass(eq=False)
class RunRecord:
    """One filter on one MC run; arrays are indexed by time step k = 0..K-1.

    ``t_predict[0]`` is 0 since the k = 0 prior is the initial density.
    A diverged run keeps the steps completed before the failure.
    """

    filter: str
    run: int
    truth: np.ndarray      # (K, n)
    mean: np.ndarray       # (K, n)
    cov: np.ndarray        # (K, n, n)
    t_predict: np.ndarray  # (K,)
    t_update: np.ndarray   # (K,)
    diverged: bool = False
    message: str = ""

    def __post_init__(self):
        k = len(self.t_update)
        if not (len(self.mean) == len(self.cov) == len(self.t_predict) == k):
            raise ValueError("inconsistent record lengths")
        if len(self.truth) < k:
            raise ValueError("truth shorter than the estimates")

    @property
    def steps(self) -> int:
        return len(self.t_update)


@dataclass
class MetricsSummary:
    filter: str
    rmse: float
    anees: float
    mean_predict_time: float
    mean_update_time: float
    runs: int
    diverged_runs: list = field(default_factory=list)
    floored_covariances: int = 0
    rmse_per_step: list = field(default_factory=list)
    anees_per_step: list = field(default_factory=list)
    predict_time_per_step: list = field(default_factory=list)
    update_time_per_step: list = field(default_factory=list)

    def metrics_dict(self) -> dict:
        """Everything except timing."""
        return {
            "rmse": self.rmse,
            "anees": self.anees,
            "runs": self.runs,
            "diverged": len(self.diverged_runs),
            "diverged_runs": list(self.diverged_runs),
            "floored_covariances": self.floored_covariances,
            "rmse_per_step": list(self.rmse_per_step),
            "anees_per_step": list(self.anees_per_step),
        }

    def timing_dict(self) -> dict:
        return {
            "mean_predict_time": self.mean_predict_time,
            "mean_update_time": self.mean_update_time,
            "predict_time_per_step": list(self.predict_time_per_step),
            "update_time_per_step": list(self.update_time_per_step),
        }


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def _completed(records):
    recs = [r for r in records if not r.diverged]
    if not recs:
        return None
    return recs


def _errors(records) -> np.ndarray:
    return np.stack([r.mean - r.truth[:r.steps] for r in records])


def rmse(records, per_step: bool = False):
    """sqrt of the squared error averaged over runs, steps and components."""
    recs = _completed(records)
    if recs is None:
        return float("nan")
    e2 = _errors(recs) ** 2
    if per_step:
        return np.sqrt(e2.mean(axis=(0, 2)))
    return float(np.sqrt(e2.mean()))


def _nees(records):
    """e^T C^-1 e per (run, step), plus how many covariances needed flooring."""
    floored = 0
    out = np.empty((len(records), records[0].steps))
    for m, r in enumerate(records):
        for k in range(r.steps):
            e = r.mean[k] - r.truth[k]
            c = r.cov[k]
            try:
                chol = np.linalg.cholesky(c)
            except np.linalg.LinAlgError:
                floored += 1
                chol = np.linalg.cholesky(floor_covariance(c))
            y = np.linalg.solve(chol, e)
            out[m, k] = y @ y
    return out, floored


def anees(records, per_step: bool = False):
    """Mean of e^T C^-1 e / n_x over runs and steps; singular C are floored."""
    recs = _completed(records)
    if recs is None:
        return float("nan")
    nees, _ = _nees(recs)
    n = recs[0].mean.shape[1]
    if per_step:
        return nees.mean(axis=0) / n
    return float(nees.mean() / n)


def summarize(name: str, records) -> MetricsSummary:
    recs = _completed(records)
    diverged = [r.run for r in records if r.diverged]
    if recs is None:
        nan = float("nan")
        return MetricsSummary(name, nan, nan, nan, nan, len(records), diverged)
    nees, floored = _nees(recs)
    n = recs[0].mean.shape[1]
    e2 = _errors(recs) ** 2
    tp = np.stack([r.t_predict for r in recs])
    tu = np.stack([r.t_update for r in recs])
    return MetricsSummary(
        filter=name,
        rmse=float(np.sqrt(e2.mean())),
        anees=float(nees.mean() / n),
        mean_predict_time=float(tp[:, 1:].mean()) if tp.shape[1] > 1 else float("nan"),
        mean_update_time=float(tu.mean()),
        runs=len(records),
        diverged_runs=diverged,
        floored_covariances=floored,
        rmse_per_step=np.sqrt(e2.mean(axis=(0, 2))).tolist(),
        anees_per_step=(nees.mean(axis=0) / n).tolist(),
        predict_time_per_step=tp.mean(axis=0).tolist(),
        update_time_per_step=tu.mean(axis=0).tolist(),
    )


# --------------------------------------------------------------------------
# single-run drivers
# --------------------------------------------------------------------------

def truth_seed(master_seed: int, run: int, draw: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence(master_seed, spawn_key=(run, 0, draw))


def pf_seed(master_seed: int, run: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master_seed, spawn_key=(run, 1))


def draw_truth(model: StateSpaceModel, steps: int, master_seed: int, run: int):
    """Truth and measurements for one run, redrawing escaped trajectories.

    Returns (states, measurements, redraws).
    """
    sim_steps = max(steps, 1)
    for draw in range(MAX_REDRAWS):
        states, meas = simulate_trajectory(model, sim_steps, truth_seed(master_seed, run, draw))
        if model.in_working_region(states):
            return states[:steps + 1], meas[:steps + 1], draw
    raise SimulationError(f"run {run}: no trajectory stayed in the working region after {MAX_REDRAWS} draws")


class _Recorder:
    def __init__(self, steps, n):
        self.mean = np.full((steps, n), np.nan)
        self.cov = np.full((steps, n, n), np.nan)
        self.t_predict = np.zeros(steps)
        self.t_update = np.zeros(steps)
        self.done = 0

    def record(self, k, mean, cov):
        self.mean[k] = mean
        self.cov[k] = cov
        self.done = k + 1

    def to_record(self, name, run, truth, error: Optional[Exception] = None) -> RunRecord:
        d = self.done
        return RunRecord(name, run, truth, self.mean[:d], self.cov[:d], self.t_predict[:d],
                         self.t_update[:d], diverged=error is not None,
                         message="" if error is None else f"{type(error).__name__}: {error}")


def _dump_backprop(dump_dir: Path, k: int, filt, trace):
    bp = trace["back_propagated"]
    save_point_cloud(dump_dir / f"k{k:03d}_backprop.csv", bp.points,
                     interpolate_weights(filt, bp.points), "weight")
    save_point_cloud(dump_dir / f"k{k:03d}_backprop_volume.csv", bp.points, bp.cell_volumes, "cell_volume")


def run_grid_filter(kind: str, model: StateSpaceModel, truth, meas, kappa: float, counts,
                    run: int = 0, dump_dir: Optional[Path] = None) -> RunRecord:
    """LGbF or EGbF from p(x_0) over all measurements; divergence is recorded, not raised."""
    steps = len(meas)
    rec = _Recorder(steps, model.state_dim)
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)
    try:
        pred = gaussian_pmd(GaussianMoments(model.initial_mean, model.initial_cov), kappa, counts)
        filt = None
        for k in range(steps):
            trace = {} if dump_dir is not None else None
            if k > 0:
                t0 = time.perf_counter()
                if kind == "lgbf":
                    pred = lgbf_predict(filt, model, kappa, counts, trace)
                else:
                    grid = design_grid(local_predict_moments(model, pmd_moments(filt)), kappa, counts)
                    pred = egbf_predict(filt, grid, model)
                rec.t_predict[k] = time.perf_counter() - t0
                if dump_dir is not None and kind == "lgbf":
                    _dump_backprop(dump_dir, k, filt, trace)
            t0 = time.perf_counter()
            filt = measurement_update(pred, likelihood(model, pred.grid, meas[k]))
            rec.t_update[k] = time.perf_counter() - t0
            m = pmd_moments(filt)
            rec.record(k, m.mean, m.cov)
            if dump_dir is not None:
                save_pmd(dump_dir / f"k{k:03d}_pred.csv", pred)
                save_pmd(dump_dir / f"k{k:03d}_filt.csv", filt)
    except (FilterDivergence, GridDesignError) as exc:
        return rec.to_record(kind, run, truth, exc)
    return rec.to_record(kind, run, truth)


def run_particle_filter(model: StateSpaceModel, truth, meas, n_particles: int, seed,
                        run: int = 0) -> RunRecord:
    steps = len(meas)
    rec = _Recorder(steps, model.state_dim)
    try:
        ps = pf_init(model, n_particles, seed)
        for k in range(steps):
            if k > 0:
                t0 = time.perf_counter()
                ps = pf_propagate(ps, model)
                rec.t_predict[k] = time.perf_counter() - t0
            t0 = time.perf_counter()
            ps = pf_update(ps, meas[k], model)
            rec.t_update[k] = time.perf_counter() - t0
            rec.record(k, ps.mean, ps.cov)
    except FilterDivergence as exc:
        return rec.to_record("pf", run, truth, exc)
    return rec.to_record("pf", run, truth)


def _one_run(cfg: ExperimentConfig, run: int, dump_root: Optional[Path]):
    model = get_model(cfg.model, cfg.model_params)
    truth, meas, redraws = draw_truth(model, cfg.steps, cfg.seed, run)
    out = {}
    for name in cfg.filters:
        if name == "pf":
            out[name] = run_particle_filter(model, truth, meas, cfg.n_particles, pf_seed(cfg.seed, run), run)
        else:
            dump = dump_root / name / f"run{run:03d}" if dump_root is not None and run == 0 else None
            out[name] = run_grid_filter(name, model, truth, meas, cfg.kappa, cfg.counts, run, dump)
    return out, redraws


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    summaries: dict   # filter -> MetricsSummary
    records: dict     # filter -> list of RunRecord, ordered by run
    truth_redraws: int = 0

    @property
    def any_diverged(self) -> bool:
        return any(s.diverged_runs for s in self.summaries.values())


def run_experiment(cfg: ExperimentConfig, dump_root: Optional[Path] = None) -> ExperimentResult:
    """All MC runs for all selected filters.

    Runs are independent; with ``cfg.workers > 1`` they execute in worker
    processes, and results are always reduced in run order. Debug dumps (if
    ``dump_root`` is given) cover run 0 of each grid filter.
    """
    runs = range(cfg.mc_runs)
    if cfg.workers > 1 and cfg.mc_runs > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_one_run, [cfg] * cfg.mc_runs, runs, [dump_root] * cfg.mc_runs))
    else:
        results = [_one_run(cfg, run, dump_root) for run in runs]
    records = {name: [res[name] for res, _ in results] for name in cfg.filters}
    summaries = {name: summarize(name, records[name]) for name in cfg.filters}
    return ExperimentResult(cfg, summaries, records, int(sum(r for _, r in results)))


# --------------------------------------------------------------------------
# record persistence
# --------------------------------------------------------------------------

TIMING_COLUMNS = ("t_predict", "t_update")


def record_header(n: int) -> list:
    iu = np.triu_indices(n)
    cols = ["filter", "run", "k", "diverged"]
    cols += [f"x_true_{i + 1}" for i in range(n)]
    cols += [f"x_est_{i + 1}" for i in range(n)]
    cols += [f"cov_{i + 1}{j + 1}" for i, j in zip(*iu)]
    return cols + list(TIMING_COLUMNS)


def write_records(path, records_by_filter: dict) -> Path:
    path = Path(path)
    first = next(iter(records_by_filter.values()))[0]
    n = first.mean.shape[1] if first.steps else first.truth.shape[1]
    iu = np.triu_indices(n)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(record_header(n))
        for name, recs in records_by_filter.items():
            for r in recs:
                for k in range(r.steps):
                    w.writerow([name, r.run, k, int(r.diverged)]
                               + [repr(float(v)) for v in r.truth[k]]
                               + [repr(float(v)) for v in r.mean[k]]
                               + [repr(float(v)) for v in r.cov[k][iu]]
                               + [repr(float(r.t_predict[k])), repr(float(r.t_update[k]))])
    return path


def read_records(path) -> dict:
    """Inverse of :func:`write_records` (runs without any written step are lost)."""
    rows: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = sum(1 for c in header if c.startswith("x_true_"))
        iu = np.triu_indices(n)
        m = len(iu[0])
        for row in reader:
            rows.setdefault(row[0], {}).setdefault(int(row[1]), []).append(row)
    out = {}
    for name, by_run in rows.items():
        recs = []
        for run, rs in by_run.items():
            vals = np.array([[float(v) for v in r[4:]] for r in rs])
            truth = vals[:, :n]
            mean = vals[:, n:2 * n]
            cov = np.zeros((len(rs), n, n))
            cov[:, iu[0], iu[1]] = vals[:, 2 * n:2 * n + m]
            cov[:, iu[1], iu[0]] = vals[:, 2 * n:2 * n + m]
            recs.append(RunRecord(name, run, truth, mean, cov, vals[:, -2], vals[:, -1],
                                  diverged=bool(int(rs[0][3]))))
        out[name] = recs
    return out
