"""Command-line front end.

Subcommands: ``dataset``, ``train``, ``eval``, ``sweep``, ``transfer`` and
``proptest``. Settings come from ``--config key=value`` files and are
overridden by flags; keys are the field names of ``FlockingConfig``,
``TrainConfig`` and ``ExperimentSpec``.
"""

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .arch import ArchHyper
from .flocking import FlockingConfig
from .harness import (ExperimentSpec, ResultRecord, cached_dataset,
                      evaluate_checkpoint_scans, evaluate_policy, generate_dataset,
                      load_dataset, run_sweep, run_transfer, save_dataset, write_report)
from .io import (atomic_write, export_params_csv, load_checkpoint, read_key_value_file,
                 save_checkpoint, write_csv)
from .train import TrainConfig, train_imitation

SPEC_ONLY = ("experiment_id", "realizations", "out_dir", "cache_dir", "jobs",
             "cell_budget_s", "test_count", "train_id")
TUPLE_KEYS = ("architectures", "grid", "counts", "sizes", "init_velocities", "radii")


def _parse_value(text, kind):
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text


def _parse_tuple(key, text):
    text = str(text)
    if key == "grid":
        # "16x2,32x3" -> ((16, 2), (32, 3))
        return tuple(tuple(int(v) for v in cell.split("x")) for cell in text.split(","))
    if key == "architectures":
        return tuple(v.strip() for v in text.split(","))
    if key in ("counts", "sizes"):
        return tuple(int(v) for v in text.split(","))
    return tuple(float(v) for v in text.split(","))


def _add_dataclass_flags(parser, cls, skip=()):
    for f in fields(cls):
        if f.name in skip:
            continue
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None,
                            help=f"{cls.__name__}.{f.name} (default {f.default})")


def _collect(cls, args, file_values):
    out = {}
    for f in fields(cls):
        raw = getattr(args, f.name, None)
        if raw is None:
            raw = file_values.get(f.name)
        if raw is None:
            continue
        kind = type(f.default) if f.default is not None else str
        out[f.name] = _parse_value(raw, kind)
    return cls(**out)


def _configs(args):
    file_values = read_key_value_file(args.config) if getattr(args, "config", None) else {}
    flock = _collect(FlockingConfig, args, file_values)
    train = _collect(TrainConfig, args, file_values)
    return flock, train, file_values


def _spec(args, file_values, flock, train, experiment_id):
    kwargs = {"flocking": flock, "training": train, "experiment_id": experiment_id}
    for key in SPEC_ONLY + TUPLE_KEYS:
        raw = getattr(args, key, None)
        if raw is None:
            raw = file_values.get(key)
        if raw is None:
            continue
        if key in TUPLE_KEYS:
            kwargs[key] = _parse_tuple(key, raw)
        elif key in ("realizations", "jobs", "test_count"):
            kwargs[key] = int(raw)
        elif key == "cell_budget_s":
            kwargs[key] = float(raw)
        else:
            kwargs[key] = raw
    if getattr(args, "seed", None) is not None:
        kwargs["seed"] = int(args.seed)
    return ExperimentSpec(**kwargs)


def _common(parser):
    parser.add_argument("--config", help="key=value settings file (flags override)")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")


def _load_or_make_dataset(args, flock, train_cfg):
    if args.data:
        return load_dataset(args.data)
    counts = tuple(int(v) for v in args.counts.split(","))
    seed = int(args.data_seed if args.data_seed is not None else train_cfg.seed)
    return cached_dataset(args.cache_dir, flock, counts, seed)


def cmd_dataset(args):
    flock, train_cfg, _ = _configs(args)
    counts = tuple(int(v) for v in args.counts.split(","))
    ds = generate_dataset(flock, counts, train_cfg.seed)
    out = Path(args.out or "dataset")
    save_dataset(out, ds)
    expert = [float(getattr(ds, s).cumulative_cost.mean()) for s in ("train", "valid", "test")]
    print(json.dumps({"out": str(out), "counts": counts, "mean_expert_cost": expert}))


def cmd_train(args):
    flock, train_cfg, _ = _configs(args)
    ds = _load_or_make_dataset(args, flock, train_cfg)
    hyper = ArchHyper(args.arch, G=int(args.G), K=int(args.K))
    result = train_imitation(ds, hyper, train_cfg)
    out = Path(args.out or "train_out")
    save_checkpoint(out / "model.ckpt", result.params)
    export_params_csv(out / "model.csv", result.params)
    write_csv(out / "train_log.csv", ["step", "train_mse", "val_cost", "wall_time"],
              result.log_rows())
    ev = evaluate_policy(result.params, ds.initial_states("test"), ds.cfg,
                         ds.test.cumulative_cost)
    summary = {"best_step": result.best_step, "best_val_cost": result.best_val_cost,
               "test_normalized_cost": ev.mean, "test_std": ev.std, "error": result.error}
    atomic_write(out / "summary.json", json.dumps(summary, indent=2))
    print(json.dumps(summary))


def cmd_eval(args):
    flock, train_cfg, _ = _configs(args)
    params = load_checkpoint(args.checkpoint)
    if args.data:
        ds = load_dataset(args.data)
        ev = evaluate_policy(params, ds.initial_states("test"), ds.cfg, ds.test.cumulative_cost)
    else:
        from .harness import scan_inits
        ev = evaluate_policy(params, scan_inits(flock, args.n_test, train_cfg.seed), flock)
    summary = {"mean_normalized_cost": ev.mean, "std": ev.std, "failures": ev.failures,
               "mean_terminal_cost": float(np.mean(ev.terminal_cost))}
    if args.out:
        atomic_write(Path(args.out) / "eval.json", json.dumps(summary, indent=2))
    print(json.dumps(summary))


def cmd_sweep(args):
    flock, train_cfg, file_values = _configs(args)
    spec = _spec(args, file_values, flock, train_cfg, args.experiment_id or "sweep")
    if args.out:
        spec.out_dir = args.out
    for rec in run_sweep(spec):
        print(f"{rec.architecture:5s} G={rec.G:3d} K={rec.K} "
              f"{rec.mean_normalized_cost:.3f} (+/- {rec.std_normalized_cost:.3f}) n={rec.count}")


def cmd_transfer(args):
    flock, train_cfg, file_values = _configs(args)
    spec = _spec(args, file_values, flock, train_cfg, args.experiment_id or "transfer")
    if args.out:
        spec.out_dir = args.out
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
        h = params.hyper
        records = []
        for name, value, ev in evaluate_checkpoint_scans(params, spec, spec.seed):
            records.append(ResultRecord(spec.experiment_id, h.arch_kind, h.G, h.K, name, value,
                                        ev.mean, ev.std, int(ev.ratios.size - ev.failures),
                                        ev.failures, 0.0))
            print(f"{name}={value}: {ev.mean:.3f} (+/- {ev.std:.3f})")
        write_report(spec, records, {"checkpoint": str(args.checkpoint)})
        return
    for rec in run_transfer(spec):
        print(f"{rec.architecture:5s} {rec.scan_name}={rec.scan_value}: "
              f"{rec.mean_normalized_cost:.3f} (+/- {rec.std_normalized_cost:.3f})")


def cmd_proptest(args):
    from .checks import run_all
    ok = run_all(seed=args.seed if args.seed is not None else 0)
    sys.exit(0 if ok else 1)


def build_parser():
    parser = argparse.ArgumentParser(prog="flockgnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="generate expert trajectories")
    _common(p)
    _add_dataclass_flags(p, FlockingConfig)
    _add_dataclass_flags(p, TrainConfig)
    p.add_argument("--counts", default="400,20,20", help="train,valid,test trajectories")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train one controller")
    _common(p)
    _add_dataclass_flags(p, FlockingConfig)
    _add_dataclass_flags(p, TrainConfig)
    p.add_argument("--arch", choices=("GF", "GCNN", "GRNN"), default="GCNN")
    p.add_argument("-G", default=64)
    p.add_argument("-K", default=3)
    p.add_argument("--data", help="dataset directory (generated when omitted)")
    p.add_argument("--counts", default="400,20,20")
    p.add_argument("--data-seed", default=None)
    p.add_argument("--cache-dir", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="normalized cost of a checkpoint")
    _common(p)
    _add_dataclass_flags(p, FlockingConfig)
    _add_dataclass_flags(p, TrainConfig)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory whose test split is used")
    p.add_argument("--n-test", type=int, default=20)
    p.set_defaults(func=cmd_eval)

    for name, func in (("sweep", cmd_sweep), ("transfer", cmd_transfer)):
        p = sub.add_parser(name, help=f"run the {name} experiment")
        _common(p)
        _add_dataclass_flags(p, FlockingConfig)
        _add_dataclass_flags(p, TrainConfig)
        _add_dataclass_flags(p, ExperimentSpec, skip=("flocking", "training", "seed"))
        if name == "transfer":
            p.add_argument("--checkpoint", help="evaluate one checkpoint instead of a grid")
        p.set_defaults(func=func)

    p = sub.add_parser("proptest", help="run the invariant suites")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_proptest)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args.func(args)


if __name__ == "__main__":
    main()
