"""Run configuration as flat INI text.

Sections are ``[data]``, ``[model]``, ``[training]``, ``[policy]`` and
``[output]``. Every key has a default, unknown sections or keys are errors
that carry the offending line number, and :func:`serialize` writes every
key so that ``parse(serialize(c)) == c``.
"""

from dataclasses import dataclass, field, fields, replace

from .data import DEFAULT_ABSENCE, DEFAULT_TRAIN_FRACTION
from .experiments import DEFAULT_GRID, FILTER_COUNTS
from .model import MAX_DEVICES, SCHEMES
from .optim import AdamState
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    path: str = ""  # empty means generate synthetic data in memory
    n_samples: int = 851
    noise_sigma: float = 140.0
    absence_prob: tuple = DEFAULT_ABSENCE
    train_fraction: float = DEFAULT_TRAIN_FRACTION


@dataclass(frozen=True)
class ModelSection:
    devices: int = 6
    filters: int = 4
    local_scheme: str = "MP"
    cloud_scheme: str = "CC"
    exit_weights: tuple = (1.0, 1.0)
    cloud_filters: tuple = (16, 32)


@dataclass(frozen=True)
class TrainingSection:
    epochs: int = 100
    batch_size: int = 32
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0


@dataclass(frozen=True)
class PolicySection:
    threshold: float = 0.8
    grid: tuple = DEFAULT_GRID
    filter_counts: tuple = FILTER_COUNTS
    target_local_exit: float = 0.75


@dataclass(frozen=True)
class OutputSection:
    directory: str = "ddnn-out"


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    policy: PolicySection = field(default_factory=PolicySection)
    output: OutputSection = field(default_factory=OutputSection)

    @property
    def seed(self):
        return self.training.seed

    def with_seed(self, seed):
        return replace(self, training=replace(self.training, seed=int(seed)))

    def with_output(self, directory):
        return replace(self, output=replace(self.output, directory=str(directory)))

    def with_threshold(self, T):
        return replace(self, policy=replace(self.policy, threshold=float(T)))

    def train_config(self):
        t, m = self.training, self.model
        return TrainConfig(
            epochs=t.epochs,
            batch_size=t.batch_size,
            adam=AdamState(alpha=t.alpha, beta1=t.beta1, beta2=t.beta2, epsilon=t.epsilon),
            seed=t.seed,
            filters_per_device=m.filters,
            scheme_local=m.local_scheme,
            scheme_cloud=m.cloud_scheme,
            exit_weights=m.exit_weights,
            cloud_filters=m.cloud_filters,
        )

    def as_dict(self):
        return {s.name: {f.name: getattr(getattr(self, s.name), f.name) for f in fields(s.type)} for s in fields(self)}


SECTIONS = {f.name: f.type for f in fields(RunConfig)}


# field name -> element type for tuple-valued keys
_TUPLE_ELEMS = {
    ("data", "absence_prob"): float,
    ("model", "exit_weights"): float,
    ("model", "cloud_filters"): int,
    ("policy", "grid"): float,
    ("policy", "filter_counts"): int,
}


def _field_kind(section, key):
    default = getattr(SECTIONS[section](), key)
    if (section, key) in _TUPLE_ELEMS:
        return tuple, _TUPLE_ELEMS[(section, key)]
    return type(default), None


def _convert(section, key, raw):
    kind, elem = _field_kind(section, key)
    if kind is tuple:
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if not items:
            raise ValueError("expected a comma-separated list")
        return tuple(elem(s) for s in items)
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def _render(value):
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _validate(cfg, where):
    d, m, t, p = cfg.data, cfg.model, cfg.training, cfg.policy

    def need(ok, section, key, msg):
        if not ok:
            raise ConfigError(f"{where(section, key)}{section}.{key}: {msg}")

    need(d.n_samples >= 2, "data", "n_samples", "must be at least 2")
    need(d.noise_sigma >= 0, "data", "noise_sigma", "must be non-negative")
    need(all(0 <= a < 1 for a in d.absence_prob), "data", "absence_prob", "values must lie in [0, 1)")
    need(len(d.absence_prob) in (1, m.devices) or bool(d.path), "data", "absence_prob",
         f"needs 1 or {m.devices} values")
    need(0 < d.train_fraction < 1, "data", "train_fraction", "must lie in (0, 1)")
    need(1 <= m.devices <= MAX_DEVICES, "model", "devices", f"must be in 1..{MAX_DEVICES}")
    need(m.filters >= 1, "model", "filters", "must be >= 1")
    need(m.local_scheme in SCHEMES, "model", "local_scheme", f"must be one of {', '.join(SCHEMES)}")
    need(m.cloud_scheme in SCHEMES, "model", "cloud_scheme", f"must be one of {', '.join(SCHEMES)}")
    need(len(m.exit_weights) == 2 and all(w > 0 for w in m.exit_weights), "model", "exit_weights",
         "needs two positive weights")
    need(all(f >= 1 for f in m.cloud_filters), "model", "cloud_filters", "values must be >= 1")
    need(t.epochs >= 1, "training", "epochs", "must be >= 1")
    need(t.batch_size >= 1, "training", "batch_size", "must be >= 1")
    need(t.alpha > 0, "training", "alpha", "must be positive")
    need(0 <= t.beta1 < 1, "training", "beta1", "must lie in [0, 1)")
    need(0 <= t.beta2 < 1, "training", "beta2", "must lie in [0, 1)")
    need(t.epsilon > 0, "training", "epsilon", "must be positive")
    need(t.seed >= 0, "training", "seed", "must be non-negative")
    need(0 <= p.threshold <= 1, "policy", "threshold", "must lie in [0, 1]")
    need(all(0 <= g <= 1 for g in p.grid), "policy", "grid", "values must lie in [0, 1]")
    need(len(set(p.grid)) == len(p.grid), "policy", "grid", "values must be unique")
    need(all(f >= 1 for f in p.filter_counts), "policy", "filter_counts", "values must be >= 1")
    need(0 < p.target_local_exit < 1, "policy", "target_local_exit", "must lie in (0, 1)")
    need(bool(cfg.output.directory), "output", "directory", "must not be empty")
    return cfg


def parse(text, source="<config>"):
    """Parse INI text into a validated :class:`RunConfig`."""
    values = {name: {} for name in SECTIONS}
    lines = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{source}:{lineno}: malformed section header {line!r}")
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(
                    f"{source}:{lineno}: unknown section [{section}] (expected one of {', '.join(SECTIONS)})"
                )
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key outside of any section")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        known = {f.name for f in fields(SECTIONS[section])}
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r} in [{section}]")
        if key in values[section]:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} in [{section}]")
        try:
            values[section][key] = _convert(section, key, val)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {section}.{key}: {e}") from None
        lines[(section, key)] = lineno

    cfg = RunConfig(**{name: SECTIONS[name](**values[name]) for name in SECTIONS})

    def where(section, key):
        n = lines.get((section, key))
        return f"{source}:{n}: " if n else f"{source}: "

    return _validate(cfg, where)


def serialize(cfg):
    out = []
    for s in fields(cfg):
        out.append(f"[{s.name}]")
        sec = getattr(cfg, s.name)
        for f in fields(sec):
            out.append(f"{f.name} = {_render(getattr(sec, f.name))}")
        out.append("")
    return "\n".join(out)


def load(path):
    with open(path) as fh:
        return parse(fh.read(), source=str(path))


def default():
    return _validate(RunConfig(), lambda s, k: "")
