"""Scripted studies: aggregation schemes, thresholds, device scaling, filter
counts and single-device failures.

Every sweep returns a :class:`SweepResult`; rows are assembled in axis order
regardless of how many worker processes computed them.
"""

import csv
import json
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .data import split
from .kernels import get_backend
from .model import SCHEMES, device_memory_bytes
from .policy import (
    CommModel,
    ExitThresholds,
    comm_cost,
    infer_dataset,
    normalized_entropy,
    should_exit,
    summarize,
)
from .tensor import softmax
from .train import build_model, individual_accuracy, predict_logits, train, train_individual

DEFAULT_GRID = tuple(round(0.1 * i, 1) for i in range(11))
FILTER_COUNTS = (4, 8, 16)
VALIDATION_FRACTION = 0.2


class InvariantError(RuntimeError):
    """An internal consistency check failed; results should not be trusted."""


@dataclass(frozen=True)
class AccuracyReport:
    local_acc: float
    cloud_acc: float
    overall_acc: float
    individual_accs: tuple
    local_exit_pct: float
    avg_comm_bytes: float

    def check(self, comm):
        pcts = (self.local_acc, self.cloud_acc, self.overall_acc, self.local_exit_pct) + tuple(self.individual_accs)
        for p in pcts:
            if not 0.0 <= p <= 100.0:
                raise InvariantError(f"percentage {p} outside [0, 100]")
        expected = comm_cost(self.local_exit_pct / 100.0, comm)
        if abs(expected - self.avg_comm_bytes) > 1e-6 * max(1.0, expected):
            raise InvariantError(
                f"average bytes {self.avg_comm_bytes} disagree with the cost model ({expected}) "
                f"at {self.local_exit_pct}% local exit"
            )
        return self


def _pct(hits):
    return 100.0 * int(np.count_nonzero(hits)) / len(hits)


def measure(model, test, T, individual_models=None, failed=(), device_indices=None):
    """All accuracy measures of ``model`` on ``test`` at threshold ``T``.

    ``individual_models`` optionally maps to standalone per-device models;
    ``device_indices`` names the dataset column each one reads (defaults to
    0..n-1).
    """
    if len(test) == 0:
        raise ValueError("cannot measure on an empty test set")
    comm = CommModel.from_model(model)
    y = test.global_labels
    local, cloud = predict_logits(model, test.network_input(), failed=failed)
    local_acc = _pct(local.argmax(axis=1) == y)
    cloud_acc = _pct(cloud.argmax(axis=1) == y)

    traces = infer_dataset(model, test, ExitThresholds(T), comm, failed=failed)
    overall, local_pct, avg_bytes = summarize(traces)
    n_correct = sum(t.predicted_class == t.true_class for t in traces)
    by_exit = sum(t.predicted_class == t.true_class for t in traces if t.exit_taken == "local") + sum(
        t.predicted_class == t.true_class for t in traces if t.exit_taken == "cloud"
    )
    if n_correct != by_exit:
        raise InvariantError("overall correct count is not the sum of the per-exit correct counts")

    indiv = ()
    if individual_models:
        cols = range(len(individual_models)) if device_indices is None else device_indices
        indiv = tuple(individual_accuracy(m, test, d) for m, d in zip(individual_models, cols))
    return AccuracyReport(local_acc, cloud_acc, overall, indiv, local_pct, avg_bytes).check(comm)


# ------------------------------------------------------------------ results


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    if isinstance(v, (tuple, list)):
        return ";".join(_fmt(x) for x in v)
    return str(v)


REPORT_COLUMNS = ("local_acc", "cloud_acc", "overall_acc", "local_exit_pct", "avg_comm_bytes", "individual_accs")


@dataclass
class SweepResult:
    axis: str
    rows: list = field(default_factory=list)  # (axis value, AccuracyReport, extras dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        values = [r[0] for r in self.rows]
        if len(set(values)) != len(values):
            raise InvariantError(f"duplicate {self.axis} values in sweep rows")

    def __len__(self):
        return len(self.rows)

    def values(self):
        return [r[0] for r in self.rows]

    def reports(self):
        return [r[1] for r in self.rows]

    def column(self, name):
        return [getattr(r, name) for r in self.reports()]

    def extra_columns(self):
        cols = []
        for _, _, extra in self.rows:
            for k in extra:
                if k not in cols:
                    cols.append(k)
        return cols

    def write_csv(self, path):
        extras = self.extra_columns()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow((self.axis,) + REPORT_COLUMNS + tuple(extras))
            for value, rep, extra in self.rows:
                w.writerow(
                    [_fmt(value)]
                    + [_fmt(getattr(rep, c)) for c in REPORT_COLUMNS]
                    + [_fmt(extra.get(k, "")) for k in extras]
                )
        return path

    def write_manifest(self, path, config=None, seed=None, started=None):
        import numba

        manifest = {
            "axis": self.axis,
            "rows": len(self.rows),
            "seed": seed,
            "config": config,
            "started": started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "versions": {
                "ddnn": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "numba": numba.__version__,
                "kernel_backend": get_backend(),
            },
            "meta": self.meta,
        }
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
        return path


# -------------------------------------------------------------- cell runner


def _run_cells(fn, cells, jobs):
    """Map ``fn`` over ``cells`` and return results in cell order."""
    if jobs is None or jobs <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=min(jobs, len(cells))) as pool:
        return list(pool.map(fn, cells))


def _train_cell(args):
    train_set, config, n_devices = args
    model = build_model(config, n_devices=n_devices, num_classes=len(train_set.class_names))
    model, history = train(model, train_set, config)
    return model, history


def _individual_cell(args):
    d, train_set, config = args
    model, _ = train_individual(d, train_set, config)
    return model


# ------------------------------------------------------------------- sweeps


def run_aggregation_sweep(train_set, test, config, T=0.8, jobs=1):
    """One jointly trained model per (local, cloud) scheme pair, same seed."""
    pairs = [(lo, cl) for lo in SCHEMES for cl in SCHEMES]
    cells = [
        (train_set, replace(config, scheme_local=lo, scheme_cloud=cl), train_set.n_devices) for lo, cl in pairs
    ]
    models = _run_cells(_train_cell, cells, jobs)
    rows = []
    for (lo, cl), (model, _) in zip(pairs, models):
        rows.append((f"{lo}-{cl}", measure(model, test, T), {}))
    return SweepResult("schemes", rows)


def run_threshold_sweep(model, test, grid=DEFAULT_GRID):
    """Local exit share, overall accuracy and bytes for each threshold."""
    grid = sorted(float(t) for t in grid)
    rows = [(T, measure(model, test, T), {}) for T in grid]
    res = SweepResult("threshold", rows)
    _check_monotone(res)
    return res


def _check_monotone(res):
    pct, cost = res.column("local_exit_pct"), res.column("avg_comm_bytes")
    if any(b < a for a, b in zip(pct, pct[1:])):
        raise InvariantError("local exit share decreased as the threshold grew")
    if any(b > a + 1e-9 for a, b in zip(cost, cost[1:])):
        raise InvariantError("communication cost increased as the threshold grew")


def train_individuals(train_set, config, jobs=1):
    cells = [(d, train_set, config) for d in range(train_set.n_devices)]
    return _run_cells(_individual_cell, cells, jobs)


def device_order(individual_accs):
    """Device indices from worst to best individual accuracy (stable on ties)."""
    return [int(i) for i in np.argsort(np.asarray(individual_accs), kind="stable")]


def run_device_scaling(train_set, test, config, T=0.8, jobs=1, individual_models=None):
    """Train DDNNs over the k worst..best devices, k = 1..D."""
    if individual_models is None:
        individual_models = train_individuals(train_set, config, jobs)
    accs = [individual_accuracy(m, test, d) for d, m in enumerate(individual_models)]
    order = device_order(accs)
    cells = []
    for k in range(1, len(order) + 1):
        cells.append((train_set.select_devices(order[:k]), config, k))
    models = _run_cells(_train_cell, cells, jobs)
    rows = []
    for k, (model, _) in enumerate(models, start=1):
        keep = order[:k]
        rep = measure(model, test.select_devices(keep), T)
        rep = replace(rep, individual_accs=tuple(accs[d] for d in keep))
        rows.append((k, rep, {"devices": keep}))
    return SweepResult("devices", rows, {"individual_accs": accs, "order": order})


def local_exit_fraction(eta, T):
    return float(np.mean(should_exit(eta, T)))


def calibrate_threshold(eta, target=0.75, iters=40):
    """Binary-search T so the local exit fraction lands closest to ``target``.

    ``l(T)`` is a non-decreasing step function, so the search brackets the
    target and keeps the best value seen.
    """
    lo, hi = 0.0, 1.0
    best_t, best_gap = 1.0, abs(local_exit_fraction(eta, 1.0) - target)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        frac = local_exit_fraction(eta, mid)
        gap = abs(frac - target)
        if gap < best_gap or (gap == best_gap and mid > best_t):
            best_t, best_gap = mid, gap
        if frac < target:
            lo = mid
        else:
            hi = mid
    return best_t


def _filter_cell(args):
    f, fit, val, config = args
    cfg = replace(config, filters_per_device=f)
    model = build_model(cfg, n_devices=fit.n_devices, num_classes=len(fit.class_names))
    model, _ = train(model, fit, cfg)
    local, _ = predict_logits(model, val.network_input())
    return model, calibrate_threshold(normalized_entropy(softmax(local)))


def run_filter_sweep(train_set, test, config, filter_counts=FILTER_COUNTS, target=0.75, jobs=1):
    """Accuracy, memory and bytes as the per-device filter count grows.

    The threshold for each model is tuned on a held-out 20% of the training
    split to send about ``target`` of samples out at the local exit.
    """
    fit, val = split(train_set, 1.0 - VALIDATION_FRACTION, seed=config.seed)
    cells = [(f, fit, val, config) for f in filter_counts]
    results = _run_cells(_filter_cell, cells, jobs)
    rows = []
    for f, (model, T) in zip(filter_counts, results):
        rep = measure(model, test, T)
        mem = max(device_memory_bytes(b) for b in model.branches)
        rows.append((int(f), rep, {"threshold": T, "memory_bytes": mem}))
    return SweepResult("filters", rows, {"target_local_exit": target})


def _failure_label(failed):
    return "none" if not failed else "+".join(str(d) for d in failed)


def run_fault_tolerance(model, test, failure_sets=None, T=0.8):
    """Re-evaluate a trained model with devices switched off; no retraining.

    The default scenarios are the intact system followed by each single
    device failure.
    """
    if failure_sets is None:
        failure_sets = [()] + [(d,) for d in range(model.n_devices)]
    rows = []
    for failed in failure_sets:
        failed = tuple(sorted(set(int(d) for d in failed)))
        if any(not 0 <= d < model.n_devices for d in failed):
            raise ValueError(f"failed device set {failed} out of range for {model.n_devices} devices")
        if len(failed) == model.n_devices:
            raise ValueError("every device failed; nothing left to classify with")
        rows.append((_failure_label(failed), measure(model, test, T, failed=failed), {}))
    return SweepResult("failed", rows)
