"""``ddnn`` command line: gen-data, train, infer, sweep.

Exit status is 0 on success, 1 for invalid input (config, dataset,
checkpoint, arguments) and 2 when an internal invariant check fails.
"""

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

from . import checkpoint, experiments
from .config import ConfigError, default, load, serialize
from .data import (
    DatasetError,
    SynthParams,
    format_distribution,
    load_dataset,
    split,
    synth_generate,
    write_dataset,
    write_distribution_csv,
)
from .experiments import InvariantError
from .policy import (
    CommModel,
    ExitThresholds,
    PolicyError,
    comm_cost,
    infer_dataset,
    round_half_up,
    summarize,
    write_traces,
)
from .train import build_model, train

log = logging.getLogger("ddnn")

EXIT_OK, EXIT_INVALID, EXIT_INVARIANT = 0, 1, 2
SWEEP_KINDS = ("aggregation", "threshold", "devices", "filters", "fault")
CHECKPOINT_NAME = "model.ddnn"
HISTORY_COLUMNS = ("epoch", "local_loss", "cloud_loss", "loss", "local_acc", "cloud_acc")


class UsageError(ValueError):
    pass


# --------------------------------------------------------------- resolution


def resolve_config(args):
    cfg = load(args.config) if args.config else default()
    seed = args.seed
    if seed is None and os.environ.get("DDNN_SEED", "").strip():
        try:
            seed = int(os.environ["DDNN_SEED"])
        except ValueError:
            raise ConfigError(f"DDNN_SEED must be an integer, got {os.environ['DDNN_SEED']!r}") from None
    if seed is not None:
        if seed < 0:
            raise ConfigError("seed must be non-negative")
        cfg = cfg.with_seed(seed)
    if args.out:
        cfg = cfg.with_output(args.out)
    if getattr(args, "threshold", None) is not None:
        if not 0 <= args.threshold <= 1:
            raise ConfigError(f"threshold must lie in [0, 1], got {args.threshold}")
        cfg = cfg.with_threshold(args.threshold)
    return cfg


def synth_params(cfg):
    a = cfg.data.absence_prob
    return SynthParams(
        seed=cfg.seed,
        n_samples=cfg.data.n_samples,
        n_devices=cfg.model.devices,
        absence_prob=a[0] if len(a) == 1 else a,
        noise_sigma=cfg.data.noise_sigma,
    )


def full_dataset(cfg, path=None):
    path = path or cfg.data.path
    if path:
        ds = load_dataset(path)
    else:
        ds = synth_generate(synth_params(cfg))
    if ds.n_devices != cfg.model.devices:
        raise DatasetError(f"dataset has {ds.n_devices} devices but model.devices = {cfg.model.devices}")
    return ds


def train_test(cfg):
    return split(full_dataset(cfg), cfg.data.train_fraction, seed=cfg.seed)


def _out_dir(cfg):
    d = Path(cfg.output.directory)
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [f"{row[c]:.6f}" for c in HISTORY_COLUMNS[1:]])
    return path


# ----------------------------------------------------------------- commands


def cmd_gen_data(cfg):
    out = _out_dir(cfg) / "data"
    ds = synth_generate(synth_params(cfg))
    write_dataset(ds, out)
    write_distribution_csv(ds, _out_dir(cfg) / "distribution.csv")
    (_out_dir(cfg) / "config.ini").write_text(serialize(cfg))
    print(format_distribution(ds))
    print(f"wrote {len(ds)} samples x {ds.n_devices} devices to {out}")
    return out


def cmd_train(cfg):
    train_set, test = train_test(cfg)
    tc = cfg.train_config()
    model = build_model(tc, n_devices=train_set.n_devices, num_classes=len(train_set.class_names))
    model, history = train(model, train_set, tc)
    out = _out_dir(cfg)
    ckpt = checkpoint.save(model, out / CHECKPOINT_NAME)
    write_history(history, out / "history.csv")
    (out / "config.ini").write_text(serialize(cfg))
    rep = experiments.measure(model, test, cfg.policy.threshold)
    print(
        f"trained {tc.epochs} epochs on {len(train_set)} samples; test local {rep.local_acc:.2f}% "
        f"cloud {rep.cloud_acc:.2f}% overall {rep.overall_acc:.2f}% at T={cfg.policy.threshold}"
    )
    print(f"checkpoint {ckpt}")
    return ckpt


def _load_checkpoint(path):
    if not path:
        raise UsageError("--checkpoint is required")
    return checkpoint.load(path)


def cmd_infer(cfg, checkpoint_path, data_dir=None, sample_id=None):
    model = _load_checkpoint(checkpoint_path)
    if data_dir:
        ds = load_dataset(data_dir, split_tag="test")
    else:
        _, ds = train_test(cfg)
    if ds.n_devices != model.n_devices:
        raise DatasetError(f"checkpoint expects {model.n_devices} devices, dataset has {ds.n_devices}")
    if sample_id is not None:
        if sample_id not in ds.sample_ids:
            raise DatasetError(f"sample {sample_id!r} not found")
        ds = ds.subset([ds.sample_ids.index(sample_id)])
    comm = CommModel.from_model(model)
    traces = infer_dataset(model, ds, ExitThresholds(cfg.policy.threshold), comm)
    out = _out_dir(cfg) / "traces.csv"
    write_traces(traces, out)
    acc, local_pct, avg_bytes = summarize(traces)
    expected = comm_cost(local_pct / 100.0, comm)
    if abs(expected - avg_bytes) > 1e-6 * expected:
        raise InvariantError(f"average bytes {avg_bytes} disagree with cost model {expected}")
    print(
        f"samples {len(traces)} overall {acc:.2f}% local_exit {local_pct:.2f}% "
        f"avg_bytes {avg_bytes:.2f} (rounded {round_half_up(avg_bytes)})"
    )
    return out


def cmd_sweep(cfg, kind, checkpoint_path=None, jobs=1):
    if kind not in SWEEP_KINDS:
        raise UsageError(f"unknown sweep kind {kind!r}")
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    tc = cfg.train_config()
    T = cfg.policy.threshold
    train_set, test = train_test(cfg)
    if kind == "aggregation":
        res = experiments.run_aggregation_sweep(train_set, test, tc, T, jobs)
    elif kind == "threshold":
        res = experiments.run_threshold_sweep(_load_checkpoint(checkpoint_path), test, cfg.policy.grid)
    elif kind == "devices":
        res = experiments.run_device_scaling(train_set, test, tc, T, jobs)
    elif kind == "filters":
        res = experiments.run_filter_sweep(
            train_set, test, tc, cfg.policy.filter_counts, cfg.policy.target_local_exit, jobs
        )
    else:
        model = _load_checkpoint(checkpoint_path)
        if model.n_devices != test.n_devices:
            raise DatasetError(f"checkpoint expects {model.n_devices} devices, dataset has {test.n_devices}")
        res = experiments.run_fault_tolerance(model, test, T=T)
    out = _out_dir(cfg)
    csv_path = res.write_csv(out / f"sweep_{kind}.csv")
    res.write_manifest(out / f"sweep_{kind}.json", config=cfg.as_dict(), seed=cfg.seed, started=started)
    print(f"{kind} sweep: {len(res)} rows -> {csv_path}")
    for value, rep, _ in res.rows:
        print(
            f"  {res.axis}={experiments._fmt(value)} local {rep.local_acc:.2f} cloud {rep.cloud_acc:.2f} "
            f"overall {rep.overall_acc:.2f} exit {rep.local_exit_pct:.2f}% bytes {rep.avg_comm_bytes:.2f}"
        )
    return csv_path


# ---------------------------------------------------------------- argparse


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="run seed (falls back to $DDNN_SEED, then the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ddnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic multi-view dataset")
    sub.add_parser("train", parents=[common], help="train a model, write checkpoint and history")
    pi = sub.add_parser("infer", parents=[common], help="staged inference with an exit threshold")
    pi.add_argument("--checkpoint", required=True)
    pi.add_argument("--data", help="dataset directory (default: test split of the configured data)")
    pi.add_argument("--sample", help="run a single sample id")
    pi.add_argument("--threshold", type=float)
    ps = sub.add_parser("sweep", parents=[common], help="run one of the experiment sweeps")
    ps.add_argument("kind", choices=SWEEP_KINDS)
    ps.add_argument("--checkpoint", help="trained model (threshold and fault sweeps)")
    ps.add_argument("--jobs", type=int, default=1, help="worker processes for independent cells")
    ps.add_argument("--threshold", type=float)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # argparse exits with 2 on bad usage; 2 is reserved for invariant failures
        return EXIT_OK if e.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "infer":
            cmd_infer(cfg, args.checkpoint, args.data, args.sample)
        else:
            if args.jobs < 1:
                raise UsageError("--jobs must be >= 1")
            cmd_sweep(cfg, args.kind, args.checkpoint, args.jobs)
    except InvariantError as e:
        print(f"ddnn: invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, DatasetError, checkpoint.CheckpointError, PolicyError, UsageError, ValueError, OSError) as e:
        print(f"ddnn: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
