"""Multi-view, multi-camera samples: on-disk format, synthetic generator, splits.

On-disk layout (one directory per dataset)::

    index.txt            # one line per sample: <id> <label_dev0> ... <label_devN-1> <global>
    <id>_<device>.ppm    # binary PPM (P6), 32x32, maxval 255

A device label of -1 means the object is absent and that device's view is
the blank image (every pixel 128, 128, 128).
"""

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLASS_NAMES = ("car", "bus", "person")
IMAGE_SIZE = 32
BLANK_LEVEL = 128
INDEX_FILE = "index.txt"
DEFAULT_TRAIN_FRACTION = 680 / 851

BLANK_IMAGE = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), BLANK_LEVEL, dtype=np.uint8)


class DatasetError(ValueError):
    pass


def is_blank(view):
    return view.shape == BLANK_IMAGE.shape and view.tobytes() == BLANK_IMAGE.tobytes()


@dataclass
class MultiViewSample:
    views: np.ndarray  # (D, 32, 32, 3) uint8
    device_labels: tuple
    global_label: int
    sample_id: str = ""

    def validate(self):
        sid = self.sample_id or "<unnamed>"
        if not 0 <= self.global_label < len(CLASS_NAMES):
            raise DatasetError(f"sample {sid}: global label {self.global_label} outside 0..{len(CLASS_NAMES) - 1}")
        if len(self.device_labels) != len(self.views):
            raise DatasetError(f"sample {sid}: {len(self.device_labels)} labels for {len(self.views)} views")
        present = 0
        for d, (lab, view) in enumerate(zip(self.device_labels, self.views)):
            if lab not in (-1, 0, 1, 2):
                raise DatasetError(f"sample {sid}: device {d} label {lab} outside {{-1,0,1,2}}")
            if (lab == -1) != is_blank(view):
                what = "labelled absent but view is not blank" if lab == -1 else "labelled present but view is blank"
                raise DatasetError(f"sample {sid}: device {d} {what}")
            if lab != -1:
                present += 1
                if lab != self.global_label:
                    raise DatasetError(
                        f"sample {sid}: device {d} label {lab} disagrees with global label {self.global_label}"
                    )
        if present == 0:
            raise DatasetError(f"sample {sid}: object absent from every device")


@dataclass
class Dataset:
    views: np.ndarray  # (N, D, 32, 32, 3) uint8
    device_labels: np.ndarray  # (N, D) int
    global_labels: np.ndarray  # (N,) int
    sample_ids: tuple
    class_names: tuple = CLASS_NAMES
    split_tag: str = "train"

    def __post_init__(self):
        self.views = np.asarray(self.views, dtype=np.uint8)
        self.device_labels = np.asarray(self.device_labels, dtype=np.int64)
        self.global_labels = np.asarray(self.global_labels, dtype=np.int64)
        self.sample_ids = tuple(self.sample_ids)
        n = len(self.sample_ids)
        if self.views.shape[:1] != (n,) or self.device_labels.shape[0] != n or self.global_labels.shape != (n,):
            raise DatasetError("views, labels and sample ids disagree in length")

    def __len__(self):
        return len(self.sample_ids)

    def __getitem__(self, i):
        return MultiViewSample(
            self.views[i], tuple(int(v) for v in self.device_labels[i]), int(self.global_labels[i]), self.sample_ids[i]
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def n_devices(self):
        return self.views.shape[1]

    def validate(self):
        for s in self:
            s.validate()

    def subset(self, indices, split_tag=None):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.views[idx],
            self.device_labels[idx],
            self.global_labels[idx],
            tuple(self.sample_ids[i] for i in idx),
            self.class_names,
            split_tag or self.split_tag,
        )

    def select_devices(self, devices):
        """Keep only the given device columns, in the given order.

        Samples whose object is absent from every kept device stay in,
        with all-blank views.
        """
        d = list(devices)
        return Dataset(
            self.views[:, d], self.device_labels[:, d], self.global_labels, self.sample_ids, self.class_names, self.split_tag
        )

    def network_input(self):
        """Views as float32 (N, D, 3, H, W) scaled to [-1, 1]."""
        x = self.views.transpose(0, 1, 4, 2, 3).astype(np.float32)
        return x / np.float32(127.5) - np.float32(1.0)


# ---------------------------------------------------------------------- PPM


def write_ppm(path, image):
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_ppm(path):
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise DatasetError(f"{path}: truncated PPM header")
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P6":
        raise DatasetError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetError(f"{path}: malformed PPM header") from None
    if (w, h) != (IMAGE_SIZE, IMAGE_SIZE) or maxval != 255:
        raise DatasetError(f"{path}: expected {IMAGE_SIZE}x{IMAGE_SIZE} maxval 255, got {w}x{h} maxval {maxval}")
    body = raw[pos:]
    if len(body) != w * h * 3:
        raise DatasetError(f"{path}: pixel data is {len(body)} bytes, expected {w * h * 3}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


# --------------------------------------------------------------- load/write


def write_dataset(dataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, sid in enumerate(dataset.sample_ids):
        labels = " ".join(str(int(v)) for v in dataset.device_labels[i])
        lines.append(f"{sid} {labels} {int(dataset.global_labels[i])}\n")
        for d in range(dataset.n_devices):
            write_ppm(directory / f"{sid}_{d}.ppm", dataset.views[i, d])
    (directory / INDEX_FILE).write_text("".join(lines))
    return directory


def load_dataset(directory, split_tag="train"):
    directory = Path(directory)
    index = directory / INDEX_FILE
    if not index.is_file():
        raise DatasetError(f"{directory}: missing {INDEX_FILE}")
    ids, dev_labels, glob_labels, views = [], [], [], []
    n_devices = None
    for lineno, line in enumerate(index.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        sid = parts[0]
        if n_devices is None:
            n_devices = len(parts) - 2
            if n_devices < 1:
                raise DatasetError(f"{INDEX_FILE}:{lineno}: sample {sid}: need device labels and a global label")
        if len(parts) != n_devices + 2:
            raise DatasetError(
                f"{INDEX_FILE}:{lineno}: sample {sid}: expected {n_devices} device labels plus a global label"
            )
        try:
            labels = [int(v) for v in parts[1:]]
        except ValueError:
            raise DatasetError(f"{INDEX_FILE}:{lineno}: sample {sid}: labels must be integers") from None
        sample_views = []
        for d in range(n_devices):
            path = directory / f"{sid}_{d}.ppm"
            if not path.is_file():
                raise DatasetError(f"sample {sid}: missing view file {path.name}")
            try:
                sample_views.append(read_ppm(path))
            except DatasetError as e:
                raise DatasetError(f"sample {sid}: {e}") from None
        sample = MultiViewSample(np.stack(sample_views), tuple(labels[:-1]), labels[-1], sid)
        sample.validate()
        ids.append(sid)
        dev_labels.append(labels[:-1])
        glob_labels.append(labels[-1])
        views.append(sample.views)
    if not ids:
        raise DatasetError(f"{index}: no samples")
    return Dataset(np.stack(views), np.array(dev_labels), np.array(glob_labels), tuple(ids), CLASS_NAMES, split_tag)


# ---------------------------------------------------------------- synthetic


# per-device viewpoint: (mirror, dx, dy, zoom, channel order, background, noise gain)
# index 1 is the poorest viewpoint and index 5 the clearest
DEFAULT_VIEWS = (
    (False, -0.10, 0.05, 0.95, (0, 1, 2), 118, 1.15),
    (True, 0.15, -0.05, 0.75, (1, 0, 2), 140, 1.45),
    (False, 0.05, 0.10, 0.90, (2, 1, 0), 105, 1.10),
    (True, -0.05, -0.10, 1.00, (0, 2, 1), 132, 1.10),
    (False, 0.10, 0.00, 0.85, (1, 2, 0), 112, 1.20),
    (True, 0.00, 0.00, 1.05, (0, 1, 2), 125, 0.95),
)
DEFAULT_ABSENCE = (0.40, 0.50, 0.35, 0.35, 0.45, 0.30)
DEFAULT_PRIORS = (0.45, 0.20, 0.35)

CLASS_COLORS = np.array([(190, 70, 70), (190, 160, 60), (80, 100, 185)], dtype=np.float64)


@dataclass
class SynthParams:
    seed: int = 0
    n_samples: int = 851
    n_devices: int = 6
    absence_prob: object = None  # scalar, one value per device, or None for the default table
    noise_sigma: float = 140.0
    class_priors: tuple = DEFAULT_PRIORS
    view_shift: tuple = field(default=DEFAULT_VIEWS)

    def absence(self):
        a = self.absence_prob
        if a is None:
            a = tuple(DEFAULT_ABSENCE[i % len(DEFAULT_ABSENCE)] for i in range(self.n_devices))
        probs = np.full(self.n_devices, float(a)) if np.isscalar(a) else np.asarray(a, dtype=np.float64)
        if probs.shape != (self.n_devices,):
            raise ValueError(f"absence_prob needs {self.n_devices} values, got {probs.shape}")
        if np.any(probs < 0) or np.any(probs >= 1):
            raise ValueError("absence_prob must lie in [0, 1)")
        return probs

    def views(self):
        v = tuple(self.view_shift)
        if len(v) < self.n_devices:
            # extra devices cycle through the table
            v = tuple(v[i % len(v)] for i in range(self.n_devices))
        return v[: self.n_devices]

    def validate(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.n_devices < 1:
            raise ValueError("n_devices must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        p = np.asarray(self.class_priors, dtype=np.float64)
        if p.shape != (len(CLASS_NAMES),) or np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("class_priors must be three non-negative values summing to 1")
        self.absence()


_GRID = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE * 2 - 1


def _silhouette(cls, u, v):
    """Object mask (float, 0..1) and a darker-detail mask in object coordinates."""
    if cls == 0:  # car: low wide body, cabin, two wheels
        body = (np.abs(u) < 0.75) & (v > 0.0) & (v < 0.38)
        cabin = (np.abs(u) < 0.38) & (v > -0.28) & (v <= 0.0)
        wheels = ((u - 0.45) ** 2 + (v - 0.42) ** 2 < 0.16**2) | ((u + 0.45) ** 2 + (v - 0.42) ** 2 < 0.16**2)
        return body | cabin | wheels, wheels
    if cls == 1:  # bus: tall box with a row of windows
        box = (np.abs(u) < 0.82) & (v > -0.55) & (v < 0.5)
        windows = box & (v > -0.4) & (v < -0.12) & (np.mod(u + 1.0, 0.3) < 0.2)
        return box, windows
    # person: head and narrow body
    head = u**2 + (v + 0.62) ** 2 < 0.17**2
    body = (u / 0.24) ** 2 + ((v - 0.12) / 0.58) ** 2 < 1
    return head | body, head


def _smooth_noise(rng, sigma, cells=5):
    coarse = rng.standard_normal((cells, cells, 3))
    pos = np.linspace(0, cells - 1, IMAGE_SIZE)
    i0 = np.floor(pos).astype(int).clip(0, cells - 2)
    t = (pos - i0)[:, None]
    rows = coarse[i0] * (1 - t)[..., None] + coarse[i0 + 1] * t[..., None]
    cols = rows[:, i0] * (1 - t.T)[..., None] + rows[:, i0 + 1] * t.T[..., None]
    return cols * sigma


def render_view(cls, view, rng, noise_sigma):
    mirror, dx, dy, zoom, order, background, gain = view
    jx, jy = rng.uniform(-0.08, 0.08, size=2)
    jz = rng.uniform(0.92, 1.08)
    z = zoom * jz
    u = (_GRID[None, :] - dx - jx) / z
    v = (_GRID[:, None] - dy - jy) / z
    if mirror:
        u = -u
    mask, detail = _silhouette(cls, u, v)
    contrast = rng.uniform(0.7, 1.0)
    color = CLASS_COLORS[cls][list(order)]
    img = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), float(background))
    obj = background + contrast * (color - background)
    img[mask] = obj
    img[detail] = obj * 0.45
    s = noise_sigma * gain
    if s > 0:
        img += _smooth_noise(rng, s) + rng.standard_normal(img.shape) * (0.5 * s)
    out = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    if is_blank(out):  # never let a present view collide with the absence marker
        out[0, 0, 0] ^= 1
    return out


def synth_generate(params=None):
    """Deterministic synthetic multi-view dataset (one RNG stream per seed)."""
    params = params or SynthParams()
    params.validate()
    rng = np.random.default_rng(params.seed)
    n, d = params.n_samples, params.n_devices
    absence = params.absence()
    views_cfg = params.views()
    labels = rng.choice(len(CLASS_NAMES), size=n, p=np.asarray(params.class_priors, dtype=np.float64))
    views = np.empty((n, d, IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    dev_labels = np.empty((n, d), dtype=np.int64)
    for i in range(n):
        present = rng.random(d) >= absence
        if not present.any():
            present[rng.integers(d)] = True
        for k in range(d):
            if present[k]:
                views[i, k] = render_view(int(labels[i]), views_cfg[k], rng, params.noise_sigma)
                dev_labels[i, k] = labels[i]
            else:
                views[i, k] = BLANK_IMAGE
                dev_labels[i, k] = -1
    ids = tuple(f"s{i:05d}" for i in range(n))
    return Dataset(views, dev_labels, labels, ids, CLASS_NAMES, "train")


# ------------------------------------------------------------------- splits


def split(dataset, train_fraction=DEFAULT_TRAIN_FRACTION, seed=0):
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(dataset)
    n_train = int(round(n * train_fraction))
    if n_train < 1 or n - n_train < 1:
        raise ValueError(f"dataset of {n} samples is too small to split at {train_fraction:.3f}")
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return dataset.subset(train_idx, "train"), dataset.subset(test_idx, "test")


LABEL_VALUES = (-1, 0, 1, 2)


def class_distribution(dataset):
    """Per-device counts of each label value, columns ordered (-1, 0, 1, 2)."""
    table = np.zeros((dataset.n_devices, len(LABEL_VALUES)), dtype=np.int64)
    for j, lab in enumerate(LABEL_VALUES):
        table[:, j] = (dataset.device_labels == lab).sum(axis=0)
    return table


def write_distribution_csv(dataset, path):
    table = class_distribution(dataset)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["device", "absent"] + list(dataset.class_names))
        for d, row in enumerate(table):
            w.writerow([d] + [int(v) for v in row])
    return path


def format_distribution(dataset):
    table = class_distribution(dataset)
    header = f"{'device':>6} {'absent':>7} " + " ".join(f"{c:>7}" for c in dataset.class_names)
    lines = [header]
    for d, row in enumerate(table):
        lines.append(f"{d:>6} " + " ".join(f"{int(v):>7}" for v in row))
    return os.linesep.join(lines)
