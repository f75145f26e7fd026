"""Dataset generation, evaluation and the hyperparameter / transfer studies."""

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .arch import ArchHyper
from .flocking import (ConfigurationError, ExpertPolicy, FlockingConfig, GNNPolicy,
                       Trajectory, rollout, sample_initial_conditions, stack_states)
from .io import (atomic_write, load_checkpoint, load_trajectories, save_checkpoint,
                 save_trajectories, write_csv)
from .backprop import trajectory_forward
from .train import Dataset, TrainConfig, train_imitation

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
RESULTS_SCHEMA_VERSION = 1
RESULT_COLUMNS = ["schema_version", "experiment_id", "architecture", "G", "K", "scan_name",
                  "scan_value", "mean_normalized_cost", "std_normalized_cost", "count",
                  "failures", "wall_time"]
MAX_RESAMPLES = 100


def _concat(trajs):
    fields_ = Trajectory.__dataclass_fields__
    return Trajectory(*(np.concatenate([getattr(t, f) for t in trajs]) for f in fields_))


def expert_trajectories(cfg, count, seed, split_id=0):
    """Expert rollouts from fresh initial conditions; collisions are redrawn.

    Initial condition ``i`` uses the seed ``[seed, split_id, i]``; a failed
    trajectory is replaced by draws continuing after the last index used.
    """
    inits = stack_states([sample_initial_conditions(cfg, [seed, split_id, i])
                          for i in range(count)])
    traj = rollout(ExpertPolicy(), inits, cfg)
    next_draw = count
    resampled = 0
    while np.any(traj.failed):
        bad = np.flatnonzero(traj.failed)
        resampled += bad.size
        if resampled > MAX_RESAMPLES:
            raise ConfigurationError("expert keeps colliding; configuration infeasible")
        states = [sample_initial_conditions(cfg, [seed, split_id, next_draw + j])
                  for j in range(bad.size)]
        next_draw += bad.size
        redo = rollout(ExpertPolicy(), stack_states(states), cfg)
        for j, b in enumerate(bad):
            for f in Trajectory.__dataclass_fields__:
                getattr(traj, f)[b] = getattr(redo, f)[j]
    if resampled:
        log.info("resampled %d colliding expert trajectories", resampled)
    return traj


def generate_dataset(cfg, counts, seed):
    """Expert datasets for the ``(train, valid, test)`` counts."""
    if min(counts) < 1:
        raise ValueError("split sizes must be positive")
    splits = [expert_trajectories(cfg, n, seed, sid) for sid, n in enumerate(counts)]
    return Dataset(cfg, *splits, seed=seed)


def dataset_key(cfg, counts, seed):
    return f"{cfg.digest()}-{'-'.join(map(str, counts))}-s{seed}"


def save_dataset(directory, ds):
    directory = Path(directory)
    for split in SPLITS:
        save_trajectories(directory / f"{split}.traj", getattr(ds, split), ds.cfg)
    meta = {"seed": ds.seed, "config": asdict(ds.cfg),
            "counts": [len(getattr(ds, s)) for s in SPLITS]}
    atomic_write(directory / "meta.json", json.dumps(meta, indent=2))


def load_dataset(directory):
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    parts = {}
    for split in SPLITS:
        parts[split], cfg = load_trajectories(directory / f"{split}.traj")
    return Dataset(cfg, parts["train"], parts["valid"], parts["test"], seed=meta["seed"])


def cached_dataset(cache_dir, cfg, counts, seed):
    """Load the dataset for ``(cfg, counts, seed)`` from disk or build and store it."""
    if cache_dir is None:
        return generate_dataset(cfg, counts, seed)
    path = Path(cache_dir) / dataset_key(cfg, counts, seed)
    if (path / "meta.json").exists():
        return load_dataset(path)
    ds = generate_dataset(cfg, counts, seed)
    save_dataset(path, ds)
    return ds


def teacher_dataset(teacher, cfg, counts, seed):
    """Expert states and graphs relabelled with the actions of a fixed controller.

    The targets are exactly realizable by a student with the teacher's
    hyperparameters.
    """
    ds = generate_dataset(cfg, counts, seed)
    for split in SPLITS:
        traj = getattr(ds, split)
        traj.U = trajectory_forward(teacher, traj.S.astype(np.float64), traj.X)
    return ds


@dataclass
class Evaluation:
    mean: float
    std: float
    ratios: np.ndarray
    failures: int
    policy_cost: np.ndarray
    expert_cost: np.ndarray
    terminal_cost: np.ndarray


def evaluate_policy(policy, inits, cfg, expert_cost=None):
    """Normalized cost of ``policy`` against the expert from the same states.

    ``policy`` is a ``ModelParams`` or any rollout policy object. Rollouts
    that collide (policy or expert) are excluded and counted in ``failures``.
    """
    if not hasattr(policy, "reset"):
        policy = GNNPolicy(policy)
    learned = rollout(policy, inits, cfg, record=False)
    if expert_cost is None:
        expert = rollout(ExpertPolicy(), inits, cfg, record=False)
        expert_cost = np.where(expert.failed, np.nan, expert.cumulative_cost)
    ratios = learned.cumulative_cost / expert_cost
    ok = ~learned.failed & np.isfinite(ratios)
    good = ratios[ok]
    mean = float(good.mean()) if good.size else math.nan
    std = float(good.std()) if good.size else math.nan
    return Evaluation(mean, std, ratios, int((~ok).sum()), learned.cumulative_cost,
                      np.asarray(expert_cost), learned.terminal_cost)


@dataclass
class ExperimentSpec:
    experiment_id: str = "sweep"
    architectures: tuple = ("GF", "GCNN", "GRNN")
    grid: tuple = ((64, 3),)
    realizations: int = 10
    flocking: FlockingConfig = field(default_factory=FlockingConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    counts: tuple = (400, 20, 20)
    seed: int = 0
    out_dir: str = "runs"
    cache_dir: str = None
    jobs: int = 1
    cell_budget_s: float = 7200.0
    sizes: tuple = (50, 62, 75, 87, 100)
    init_velocities: tuple = (1.0, 2.0, 3.0, 4.0, 5.0)
    radii: tuple = (1.5, 2.0, 2.5, 3.0)
    test_count: int = 20
    train_id: str = None

    def __post_init__(self):
        if not self.grid or not self.architectures:
            raise ValueError("experiment grid must not be empty")
        if self.realizations < 1:
            raise ValueError("need at least one realization")


@dataclass
class ResultRecord:
    experiment_id: str
    architecture: str
    G: int
    K: int
    scan_name: str
    scan_value: float
    mean_normalized_cost: float
    std_normalized_cost: float
    count: int
    failures: int
    wall_time: float

    def row(self):
        return [RESULTS_SCHEMA_VERSION] + [getattr(self, c) for c in RESULT_COLUMNS[1:]]


def _cell_paths(spec, arch, G, K, r):
    # transfer studies may point train_id at the experiment that trained the cells
    base = (Path(spec.out_dir) / (spec.train_id or spec.experiment_id)
            / f"{arch}-G{G}-K{K}" / f"r{r}")
    return base / "model.ckpt", base / "train_log.csv"


def train_cell(spec, arch, G, K, r):
    """Train one (architecture, G, K, realization) cell; returns the best params.

    Each realization uses dataset seed ``spec.seed + r`` and the same seed for
    initialisation and batch order, so cells are independent of run order.
    """
    seed = spec.seed + r
    ds = cached_dataset(spec.cache_dir, spec.flocking, spec.counts, seed)
    hyper = ArchHyper(arch, G=G, K=K)
    result = train_imitation(ds, hyper, spec.training.with_(seed=seed),
                             max_seconds=spec.cell_budget_s)
    ckpt, log_path = _cell_paths(spec, arch, G, K, r)
    save_checkpoint(ckpt, result.params)
    write_csv(log_path, ["step", "train_mse", "val_cost", "wall_time"], result.log_rows())
    return ds, result


def _run_cell(args):
    spec, arch, G, K, r = args
    start = time.perf_counter()
    try:
        ds, result = train_cell(spec, arch, G, K, r)
        ev = evaluate_policy(result.params, ds.initial_states("test"), ds.cfg,
                             ds.test.cumulative_cost)
        return dict(arch=arch, G=G, K=K, r=r, mean=ev.mean, failures=ev.failures,
                    error=result.error, wall=time.perf_counter() - start,
                    terminal=float(np.mean(ev.terminal_cost)))
    except Exception as exc:  # a failing cell must not stop the sweep
        log.exception("cell %s G=%d K=%d r=%d failed", arch, G, K, r)
        return dict(arch=arch, G=G, K=K, r=r, mean=math.nan, failures=0,
                    error=repr(exc), wall=time.perf_counter() - start, terminal=math.nan)


def _map(fn, jobs, n_jobs):
    if n_jobs <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, jobs))


def _aggregate(spec, cells, scan_name="", scan_value=math.nan):
    records = []
    for arch in spec.architectures:
        for G, K in spec.grid:
            sel = [c for c in cells if (c["arch"], c["G"], c["K"]) == (arch, G, K)]
            vals = np.array([c["mean"] for c in sel if np.isfinite(c["mean"])])
            records.append(ResultRecord(
                spec.experiment_id, arch, G, K, scan_name, scan_value,
                float(vals.mean()) if vals.size else math.nan,
                float(vals.std()) if vals.size else math.nan,
                int(vals.size), int(len(sel) - vals.size + sum(c["failures"] for c in sel)),
                float(sum(c["wall"] for c in sel))))
    return records


def best_cells(records):
    """Lowest mean normalized cost per architecture."""
    best = {}
    for rec in records:
        if not np.isfinite(rec.mean_normalized_cost):
            continue
        cur = best.get(rec.architecture)
        if cur is None or rec.mean_normalized_cost < cur.mean_normalized_cost:
            best[rec.architecture] = rec
    return best


def write_report(spec, records, extra=None):
    out = Path(spec.out_dir) / spec.experiment_id
    write_csv(out / "results.csv", RESULT_COLUMNS, [r.row() for r in records])
    summary = {
        "schema_version": RESULTS_SCHEMA_VERSION,
        "experiment_id": spec.experiment_id,
        "spec": _jsonable(asdict(spec)),
        "records": [_jsonable(asdict(r)) for r in records],
        "best": {a: _jsonable(asdict(r)) for a, r in best_cells(records).items()},
    }
    if extra:
        summary.update(_jsonable(extra))
    atomic_write(out / "summary.json", json.dumps(summary, indent=2))
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if not np.isfinite(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def run_sweep(spec):
    """Train and evaluate every architecture x (G, K) x realization cell."""
    jobs = [(spec, a, G, K, r) for a in spec.architectures for G, K in spec.grid
            for r in range(spec.realizations)]
    cells = _map(_run_cell, jobs, spec.jobs)
    records = _aggregate(spec, cells)
    errors = [c for c in cells if c["error"]]
    write_report(spec, records, {"cells": cells, "errors": errors})
    return records


def scan_inits(cfg, count, seed):
    """Test initial conditions for one scan point (no expert rollouts stored)."""
    return stack_states([sample_initial_conditions(cfg, [seed, 2, i]) for i in range(count)])


def evaluate_checkpoint_scans(params, spec, seed):
    """Evaluate one trained controller over team size, velocity and radius scans."""
    out = []
    base = spec.flocking
    scans = [("N", v, base.with_(N=int(v))) for v in spec.sizes]
    scans += [("v_init_max", v, base.with_(v_init_max=float(v))) for v in spec.init_velocities]
    scans += [("R", v, base.with_(R=float(v))) for v in spec.radii]
    for name, value, cfg in scans:
        inits = scan_inits(cfg, spec.test_count, seed)
        ev = evaluate_policy(params, inits, cfg)
        out.append((name, value, ev))
    return out


def _run_transfer_cell(args):
    spec, arch, G, K, r = args
    start = time.perf_counter()
    ckpt, _ = _cell_paths(spec, arch, G, K, r)
    if ckpt.exists():
        params = load_checkpoint(ckpt)
    else:
        _, result = train_cell(spec, arch, G, K, r)
        params = result.params
    rows = []
    for name, value, ev in evaluate_checkpoint_scans(params, spec, spec.seed + r):
        rows.append(dict(arch=arch, G=G, K=K, r=r, scan=name, value=value, mean=ev.mean,
                         failures=ev.failures, wall=time.perf_counter() - start, error=None))
    return rows


def run_transfer(spec):
    """Evaluate controllers trained at ``spec.flocking`` on scanned test conditions.

    Uses checkpoints already written by ``run_sweep`` (under ``spec.train_id``
    when set, else ``spec.experiment_id``) when present; otherwise trains them. Controllers are never retrained per scan.
    """
    jobs = [(spec, a, G, K, r) for a in spec.architectures for G, K in spec.grid
            for r in range(spec.realizations)]
    rows = [row for cell in _map(_run_transfer_cell, jobs, spec.jobs) for row in cell]
    records = []
    keys = sorted({(row["scan"], row["value"]) for row in rows}, key=lambda k: (k[0], k[1]))
    for name, value in keys:
        sel = [r for r in rows if (r["scan"], r["value"]) == (name, value)]
        records += _aggregate(spec, sel, name, value)
    write_report(spec, records)
    return records
