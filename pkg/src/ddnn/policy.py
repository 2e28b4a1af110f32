"""Entropy-gated early exit and per-sample communication accounting."""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, no_grad, softmax
from .train import predict_logits

FLOAT_BYTES = 4
BITS_PER_BYTE = 8


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class ExitThresholds:
    local_T: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.local_T <= 1.0:
            raise PolicyError(f"local threshold must be in [0, 1], got {self.local_T}")


@dataclass(frozen=True)
class CommModel:
    """Sizes that fix what one end device transmits per sample."""

    num_classes: int = 3
    filters: int = 4
    filter_output_size: int = 256

    @classmethod
    def from_model(cls, model):
        return cls(model.num_classes, model.filters, model.filter_output_size)

    @property
    def local_bytes(self):
        return FLOAT_BYTES * self.num_classes

    @property
    def cloud_bytes(self):
        return self.filters * self.filter_output_size / BITS_PER_BYTE


@dataclass(frozen=True)
class InferenceTrace:
    predicted_class: int
    exit_taken: str  # "local" or "cloud"
    local_entropy: float
    cloud_entropy: float | None
    bytes_sent: float
    sample_id: str = ""
    true_class: int | None = None


def normalized_entropy(probs):
    """Entropy of a class distribution divided by log |C|, clamped to [0, 1].

    Accepts a single vector or a (N, C) batch. ``0 log 0`` is taken as 0.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.shape[-1] < 2:
        raise PolicyError("normalized entropy needs at least two classes")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise PolicyError("input is not a probability distribution")
    # H / log C written as 1 - KL(p || uniform) / log C, which is exact at
    # both ends: p * C is exactly 1 for the uniform vector
    c = p.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p * c), 0.0)
    eta = 1.0 - terms.sum(axis=-1) / math.log(c)
    eta = np.clip(eta, 0.0, 1.0)
    return float(eta) if eta.ndim == 0 else eta


def should_exit(eta, T):
    """Exit when the normalized entropy is at or below the threshold."""
    return eta <= T


def comm_cost(local_exit_fraction, comm):
    """Average bytes per sample sent by one end device.

    Every sample costs one float per class to the local aggregator; the
    ``1 - l`` share that goes on to the cloud also costs the packed
    feature maps.
    """
    if not 0.0 <= local_exit_fraction <= 1.0:
        raise PolicyError(f"local exit fraction must be in [0, 1], got {local_exit_fraction}")
    return comm.local_bytes + (1.0 - local_exit_fraction) * comm.cloud_bytes


def round_half_up(x):
    return int(math.floor(x + 0.5))


def hierarchical_infer(model, views, thresholds, comm=None, failed=(), sample_id="", true_class=None):
    """Run the staged procedure on one multi-view sample.

    Devices report class scores to the local aggregator; if the aggregated
    prediction is confident the sample exits there, otherwise the devices
    ship their binarised feature maps to the cloud, which always decides.
    ``views`` is one sample shaped (D, 3, H, W).
    """
    comm = comm or CommModel.from_model(model)
    x = np.asarray(views, dtype=np.float32)[None]
    with no_grad():
        heads, features = model.device_pass(x, mode="infer", failed=failed)
        local_p = softmax(model.local_exit(heads).data)[0]
        eta = normalized_entropy(local_p)
        if should_exit(eta, thresholds.local_T):
            return InferenceTrace(
                int(np.argmax(local_p)), "local", eta, None, float(comm.local_bytes), sample_id, true_class
            )
        cloud_p = softmax(model.cloud_exit(features, mode="infer").data)[0]
    return InferenceTrace(
        int(np.argmax(cloud_p)),
        "cloud",
        eta,
        normalized_entropy(cloud_p),
        float(comm.local_bytes + comm.cloud_bytes),
        sample_id,
        true_class,
    )


def infer_dataset(model, dataset, thresholds, comm=None, failed=(), batch_size=256):
    """Staged inference over a dataset; the cloud only sees samples that fall through."""
    comm = comm or CommModel.from_model(model)
    x = dataset.network_input()
    traces = []
    with no_grad():
        for lo in range(0, len(dataset), batch_size):
            xb = x[lo : lo + batch_size]
            heads, features = model.device_pass(xb, mode="infer", failed=failed)
            local_p = softmax(model.local_exit(heads).data)
            eta = normalized_entropy(local_p)
            stay = should_exit(eta, thresholds.local_T)
            cloud_p = cloud_eta = None
            up = np.flatnonzero(~stay)
            if up.size:
                sub = [None if f is None else _take(f, up) for f in features]
                cloud_p = softmax(model.cloud_exit(sub, mode="infer").data)
                cloud_eta = normalized_entropy(cloud_p)
            row_of = {int(j): r for r, j in enumerate(up)}
            for j in range(len(xb)):
                i = lo + j
                sid, true = dataset.sample_ids[i], int(dataset.global_labels[i])
                if stay[j]:
                    traces.append(
                        InferenceTrace(int(np.argmax(local_p[j])), "local", float(eta[j]), None,
                                       float(comm.local_bytes), sid, true)
                    )
                else:
                    r = row_of[j]
                    traces.append(
                        InferenceTrace(int(np.argmax(cloud_p[r])), "cloud", float(eta[j]), float(cloud_eta[r]),
                                       float(comm.local_bytes + comm.cloud_bytes), sid, true)
                    )
    return traces


def _take(t, rows):
    return Tensor(t.data[rows])


def summarize(traces):
    """(overall accuracy %, local exit %, mean bytes) over labelled traces."""
    n = len(traces)
    if n == 0:
        raise PolicyError("no traces to summarise")
    correct = sum(t.predicted_class == t.true_class for t in traces)
    local = sum(t.exit_taken == "local" for t in traces)
    return 100.0 * correct / n, 100.0 * local / n, sum(t.bytes_sent for t in traces) / n


TRACE_COLUMNS = ("sample_id", "predicted", "true", "exit", "local_entropy", "bytes")


def _fmt_bytes(b):
    return str(int(b)) if float(b).is_integer() else repr(float(b))


def write_traces(traces, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for t in traces:
            w.writerow([
                t.sample_id,
                t.predicted_class,
                "" if t.true_class is None else t.true_class,
                t.exit_taken,
                f"{t.local_entropy:.6f}",
                _fmt_bytes(t.bytes_sent),
            ])
    return path


def threshold_search(model, dataset, grid):
    """Grid value of T with the best overall accuracy; ties go to the larger T."""
    grid = list(grid)
    if not grid:
        raise PolicyError("threshold grid is empty")
    if len(dataset) == 0:
        raise PolicyError("validation set is empty")
    local, cloud = predict_logits(model, dataset.network_input())
    eta = normalized_entropy(softmax(local))
    y = dataset.global_labels
    lp, cp = local.argmax(axis=1), cloud.argmax(axis=1)
    best_t, best_acc = None, -1.0
    for T in sorted(grid):
        if not 0.0 <= T <= 1.0:
            raise PolicyError(f"threshold {T} outside [0, 1]")
        pred = np.where(should_exit(eta, T), lp, cp)
        acc = float(np.mean(pred == y))
        if acc >= best_acc:
            best_t, best_acc = T, acc
    return best_t
