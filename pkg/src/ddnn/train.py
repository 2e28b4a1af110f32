"""Joint end-to-end training of a DDNN and of the per-device baselines."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import SCHEMES, DdnnModel, IndividualModel, joint_loss
from .optim import AdamState, adam_step
from .tensor import no_grad, softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    adam: AdamState = field(default_factory=AdamState)
    seed: int = 0
    filters_per_device: int = 4
    scheme_local: str = "MP"
    scheme_cloud: str = "CC"
    exit_weights: tuple = (1.0, 1.0)
    cloud_filters: tuple = (16, 32)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.filters_per_device < 1:
            raise ValueError("filters_per_device must be >= 1")
        for s in (self.scheme_local, self.scheme_cloud):
            if s not in SCHEMES:
                raise ValueError(f"unknown aggregation scheme {s!r}")


def seed_streams(seed, n=2):
    """Independent generators derived from one run seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def build_model(config, n_devices=6, num_classes=3):
    init_rng, _ = seed_streams(config.seed)
    return DdnnModel(
        n_devices=n_devices,
        filters=config.filters_per_device,
        num_classes=num_classes,
        local_scheme=config.scheme_local,
        cloud_scheme=config.scheme_cloud,
        cloud_filters=config.cloud_filters,
        exit_weights=config.exit_weights,
        rng=init_rng,
    )


def _fresh_adam(config):
    return AdamState(**config.adam.hyperparameters())


def _step(params, binaries, state):
    grads = [p.grad for p in params]
    adam_step([p.data for p in params], grads, state)
    for p in params:
        p.grad = None
    for w in binaries:
        w.clip()


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield perm[lo : lo + batch_size]


def train(model, dataset, config):
    """Train every exit jointly. Returns ``(model, history)``.

    ``history`` has one dict per epoch with the mean loss and training
    accuracy of each exit.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.n_devices != model.n_devices:
        raise ValueError(f"dataset has {dataset.n_devices} devices, model expects {model.n_devices}")
    _, shuffle_rng = seed_streams(config.seed)
    x_all = dataset.network_input()
    y_all = dataset.global_labels
    params = model.parameters()
    binaries = model.binary_weights()
    state = _fresh_adam(config)
    history = []
    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(4)
        for idx in _batches(len(dataset), config.batch_size, shuffle_rng):
            y = y_all[idx]
            local, cloud, _ = model.forward(x_all[idx], mode="train")
            total, lo, cl = joint_loss(local, cloud, y, model.exit_weights)
            total.backward()
            _step(params, binaries, state)
            k = len(idx)
            sums += (
                float(lo.data) * k,
                float(cl.data) * k,
                (local.data.argmax(axis=1) == y).sum(),
                (cloud.data.argmax(axis=1) == y).sum(),
            )
        n = len(dataset)
        row = {
            "epoch": epoch,
            "local_loss": sums[0] / n,
            "cloud_loss": sums[1] / n,
            "loss": (model.exit_weights[0] * sums[0] + model.exit_weights[1] * sums[1]) / n,
            "local_acc": 100.0 * sums[2] / n,
            "cloud_acc": 100.0 * sums[3] / n,
        }
        history.append(row)
        log.debug("epoch %d loss %.4f local %.1f%% cloud %.1f%%", epoch, row["loss"], row["local_acc"], row["cloud_acc"])
    return model, history


def train_individual(device_index, dataset, config):
    """Train one device's ConvP + FC branch alone on its own present views."""
    if not 0 <= device_index < dataset.n_devices:
        raise ValueError(f"device index {device_index} out of range for {dataset.n_devices} devices")
    present = np.flatnonzero(dataset.device_labels[:, device_index] != -1)
    if present.size == 0:
        raise ValueError(f"device {device_index} has no samples with the object present")
    init_rng, shuffle_rng = seed_streams(config.seed)
    model = IndividualModel(config.filters_per_device, len(dataset.class_names), init_rng)
    x_all = dataset.subset(present).select_devices([device_index]).network_input()[:, 0]
    y_all = dataset.device_labels[present, device_index]
    params = model.parameters()
    binaries = model.binary_weights()
    state = _fresh_adam(config)
    history = []
    for epoch in range(1, config.epochs + 1):
        loss_sum = correct = 0.0
        for idx in _batches(len(present), config.batch_size, shuffle_rng):
            logits = model(x_all[idx], mode="train")
            loss = softmax_cross_entropy(logits, y_all[idx])
            loss.backward()
            _step(params, binaries, state)
            loss_sum += float(loss.data) * len(idx)
            correct += (logits.data.argmax(axis=1) == y_all[idx]).sum()
        history.append({"epoch": epoch, "loss": loss_sum / len(present), "acc": 100.0 * correct / len(present)})
    return model, history


def predict_logits(model, views, batch_size=256, failed=()):
    """Inference-mode logits of both exits, batched: ``(local, cloud)``."""
    local, cloud = [], []
    with no_grad():
        for lo in range(0, len(views), batch_size):
            lg, cg, _ = model.forward(views[lo : lo + batch_size], mode="infer", failed=failed)
            local.append(lg.data)
            cloud.append(cg.data)
    return np.concatenate(local), np.concatenate(cloud)


def individual_accuracy(model, dataset, device_index, batch_size=256):
    """Accuracy (percent) of a standalone device model over every sample.

    Samples where the object is absent still count; the device sees its
    blank view and is scored against the global label.
    """
    views = dataset.select_devices([device_index]).network_input()[:, 0]
    preds = []
    with no_grad():
        for lo in range(0, len(views), batch_size):
            preds.append(model(views[lo : lo + batch_size], mode="infer").data.argmax(axis=1))
    hits = np.concatenate(preds) == dataset.global_labels
    return 100.0 * int(np.count_nonzero(hits)) / len(hits)
