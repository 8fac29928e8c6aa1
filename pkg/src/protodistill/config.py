"""Run configuration: a validated tree of dataclasses loaded from YAML.

Unknown keys and wrongly typed values are rejected with the dotted path of
the offending field.  ``--set a.b=value`` style overrides are applied to
the raw mapping before validation.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .exceptions import ConfigError
from .losses import INTER_MODES, LossWeights
from .prototype import DEFAULT_WINDOW
from .synthdata import PhantomSpec
from .trainer import TrainConfig


@dataclass(frozen=True)
class PhantomSection:
    n_classes: int = 4
    volume_shape: tuple = (24, 48, 48)
    slice_shape: tuple = (48, 48)
    noise_sd: float = 0.05
    jitter: float = 0.1


@dataclass(frozen=True)
class DataSection:
    n_train: int = 60
    n_val: int = 20
    n_test: int = 60
    n_train_volumes: int = 6
    n_val_volumes: int = 2
    teacher_contrast: str = "plain"


@dataclass(frozen=True)
class TrainSection:
    teacher_epochs: int = 60
    student_epochs: int = 60
    distill_epochs: int = 100
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class LossSection:
    beta: float = 0.5
    lambda_dice: float = 1.0
    lambda_ce: float = 1.0
    inter_mode: str = "channel"


@dataclass(frozen=True)
class PrototypeSection:
    window: tuple = DEFAULT_WINDOW


@dataclass(frozen=True)
class SweepSection:
    sizes: tuple = (10, 20, 40, 60)


@dataclass(frozen=True)
class PathsSection:
    out: str = "runs/default"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    phantom: PhantomSection = field(default_factory=PhantomSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossSection = field(default_factory=LossSection)
    prototype: PrototypeSection = field(default_factory=PrototypeSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    paths: PathsSection = field(default_factory=PathsSection)

    # ---- derived objects -------------------------------------------------

    def phantom_spec(self, contrast="plain"):
        p = self.phantom
        return PhantomSpec(p.n_classes, p.volume_shape, p.slice_shape, contrast, p.noise_sd, p.jitter)

    def teacher_spec(self):
        return self.phantom_spec(self.data.teacher_contrast)

    def loss_weights(self):
        return LossWeights(self.loss.beta, self.loss.lambda_dice, self.loss.lambda_ce)

    def train_config(self):
        t = self.train
        return TrainConfig(
            t.teacher_epochs, t.student_epochs, t.distill_epochs, t.batch_size,
            t.lr, t.beta1, t.beta2, t.eps, self.seed, self.loss_weights(), self.loss.inter_mode,
        )

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def config_hash(self):
        """SHA-256 of everything except output paths."""
        d = self.to_dict()
        d.pop("paths")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **overrides):
        """Copy with dotted-path overrides, e.g. ``replace(**{"loss.beta": 0})``."""
        d = self.to_dict()
        for key, value in overrides.items():
            _assign(d, key, value)
        return from_dict(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        proto = default[0] if default else 0
        return tuple(_coerce(v, proto, f"{path}[{i}]") for i, v in enumerate(value))
    raise ConfigError(path, "unsupported field type")


def _build(cls, raw, prefix):
    if not isinstance(raw, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", f"expected a mapping, got {type(raw).__name__}")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"{prefix}{key}", "unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        path = f"{prefix}{f.name}"
        default = getattr(defaults, f.name)
        if dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), raw[f.name], path + ".")
        else:
            kwargs[f.name] = _coerce(raw[f.name], default, path)
    return cls(**kwargs)


def _check(cfg):
    """Semantic validation, reported with field paths."""
    checks = [("seed", cfg.seed >= 0, "must be >= 0")]
    for name in ("n_train", "n_val", "n_test", "n_train_volumes", "n_val_volumes"):
        checks.append((f"data.{name}", getattr(cfg.data, name) >= 1, "must be >= 1"))
    checks += [
        ("phantom.volume_shape", len(cfg.phantom.volume_shape) == 3, "needs 3 sizes"),
        ("phantom.slice_shape", len(cfg.phantom.slice_shape) == 2, "needs 2 sizes"),
        ("data.teacher_contrast", cfg.data.teacher_contrast in ("plain", "shifted"), "must be plain or shifted"),
        ("loss.inter_mode", cfg.loss.inter_mode in INTER_MODES, f"must be one of {INTER_MODES}"),
        ("prototype.window", len(cfg.prototype.window) == 2
         and 0 <= cfg.prototype.window[0] < cfg.prototype.window[1] <= 1, "needs 0 <= lo < hi <= 1"),
        ("sweep.sizes", list(cfg.sweep.sizes) == sorted(cfg.sweep.sizes)
         and all(1 <= n <= cfg.data.n_train for n in cfg.sweep.sizes), "must ascend within [1, data.n_train]"),
    ]
    for path, ok, msg in checks:
        if not ok:
            raise ConfigError(path, msg)
    # delegate the remaining range checks to the owning types
    for path, build in (
        ("phantom", lambda: cfg.teacher_spec()),
        ("train", lambda: cfg.train_config()),
    ):
        try:
            build()
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from exc
    return cfg


def from_dict(raw):
    return _check(_build(RunConfig, raw or {}, ""))


def parse_value(text):
    """Parse a ``--set`` value with YAML scalar rules (``1e-3``, ``[1, 2]``, ``plain``)."""
    value = yaml.safe_load(text)
    if isinstance(value, str):
        # YAML 1.1 reads "1e-3" as a string
        try:
            return float(value)
        except ValueError:
            pass
    return value


def _assign(d, dotted, value):
    keys = dotted.split(".")
    node = d
    for i, k in enumerate(keys[:-1]):
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(".".join(keys[: i + 1]), "not a section")
    node[keys[-1]] = value


def load_config(path=None, overrides=()):
    """Read YAML (or defaults when ``path`` is None) and apply ``key=value`` overrides."""
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like dotted.key=value")
        key, text = item.split("=", 1)
        _assign(raw, key.strip(), parse_value(text))
    return from_dict(raw)


def dump_config(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
