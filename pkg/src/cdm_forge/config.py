"""Run configuration: a flat, typed ``section.key = value`` text format.

Example::

    format_version = 1
    seed = 0
    data.n_classes = 12
    denoiser.epochs = 150
    split.unseen_ids =          # empty list -> random split

Every key must exist in the schema and its value must parse as the schema
type; anything else raises :class:`ConfigError` carrying the line number and
key.  Comments start with ``#``.

Sub-seeds: the seed used by stage ``name`` is ``derive_seed(seed, name)``,
i.e. the first 8 bytes (little-endian) of ``blake2b(f"{seed}:{name}")``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .rng import derive_seed

CONFIG_FORMAT_VERSION = 1


@dataclass
class DataSection:
    n_classes: int = 12
    dim: int = 16
    n_per_class: int = 256
    nonlinearity: str = "tanh"
    anchor_scale: float = 2.0
    scale_low: float = 0.15
    scale_high: float = 0.35
    class_manifold_dim: int = 2


@dataclass
class SplitSection:
    seen_fraction: float = 5 / 6
    unseen_ids: tuple = ()


@dataclass
class ExtractorSection:
    d_f: int = 8
    hidden: int = 64
    epochs: int = 5
    batch_size: int = 64
    lr: float = 3e-3


@dataclass
class AutoencoderSection:
    mode: str = "identity"
    d_z: int = 16
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-2


@dataclass
class ScheduleSection:
    num_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class DenoiserSection:
    d_c: int = 16
    d_t: int = 32
    hidden: int = 128
    epochs: int = 150
    batch_size: int = 64
    lr: float = 1e-3
    warmup_steps: int = 500
    p_uncond: float = 0.1
    vlb_weight: float = 0.001


@dataclass
class CalibrationSection:
    shots: int = 3
    neighbors: int = 2
    per_support: bool = False
    allow_singleton: bool = False


@dataclass
class InversionSection:
    steps: int = 2000
    lr: float = 2e-4


@dataclass
class SamplerSection:
    steps: int = 25
    eta: float = 0.0
    guidance: float = 1.5
    count: int = 128


@dataclass
class EvalSection:
    full_covariance: bool = False
    fewshot: bool = True
    n_way: int = 10
    episodes: int = 10
    n_fake: int = 64
    head_epochs: int = 200
    fewshot_invert: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    split: SplitSection = field(default_factory=SplitSection)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    autoencoder: AutoencoderSection = field(default_factory=AutoencoderSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    inversion: InversionSection = field(default_factory=InversionSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)

    def items(self):
        """Every ``(dotted_key, value)`` pair in schema order."""
        for f in fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for g in fields(value):
                    yield f"{f.name}.{g.name}", getattr(value, g.name)
            else:
                yield f.name, value

    def get(self, key: str):
        obj = self
        for part in key.split("."):
            obj = getattr(obj, part)
        return obj

    def to_text(self) -> str:
        out = [f"format_version = {CONFIG_FORMAT_VERSION}"]
        out += [f"{k} = {format_value(v)}".rstrip() for k, v in self.items()]
        return "\n".join(out) + "\n"

    def validate(self) -> None:
        d, sp, cal = self.data, self.split, self.calibration
        checks = [
            (d.n_classes >= 4, "data.n_classes", "must be >= 4"),
            (d.n_per_class >= 8, "data.n_per_class", "must be >= 8"),
            (0 < sp.seen_fraction < 1, "split.seen_fraction", "must lie in (0, 1)"),
            (all(0 <= c < d.n_classes for c in sp.unseen_ids), "split.unseen_ids", "ids out of range"),
            (1 <= cal.shots < d.n_per_class, "calibration.shots", "must satisfy 1 <= K < n_per_class"),
            (cal.neighbors >= 1, "calibration.neighbors", "must be >= 1"),
            (self.autoencoder.mode in ("identity", "linear"), "autoencoder.mode", "must be identity or linear"),
            (self.autoencoder.mode == "linear" or self.autoencoder.d_z == d.dim, "autoencoder.d_z",
             "identity mode needs d_z == data.dim"),
            (self.schedule.num_steps >= 1, "schedule.num_steps", "must be >= 1"),
            (1 <= self.sampler.steps <= self.schedule.num_steps, "sampler.steps", "must lie in [1, num_steps]"),
            (self.sampler.count >= 2, "sampler.count", "need at least 2 generated items per class"),
            (self.inversion.steps >= 0, "inversion.steps", "must be >= 0"),
            (self.inversion.lr > 0, "inversion.lr", "must be > 0"),
            (self.eval.episodes >= 1, "eval.episodes", "must be >= 1"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg}", key=key)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, default, key: str, line: int | None):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError("expected true or false")
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {key}: {exc}", line=line, key=key) from None


def apply_setting(cfg: RunConfig, key: str, raw: str, line: int | None = None) -> None:
    parts = key.strip().split(".")
    obj = cfg
    for part in parts[:-1]:
        sub = getattr(obj, part, None)
        if not dataclasses.is_dataclass(sub):
            raise ConfigError(f"unknown config key {key!r}", line=line, key=key)
        obj = sub
    name = parts[-1]
    if name not in {f.name for f in fields(obj)} or dataclasses.is_dataclass(getattr(obj, name)):
        raise ConfigError(f"unknown config key {key!r}", line=line, key=key)
    setattr(obj, name, _parse_value(raw, getattr(obj, name), key, line))


def parse_config(text: str, overrides=()) -> RunConfig:
    cfg = RunConfig()
    version_seen = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key = key.strip()
        if key == "format_version":
            if value.strip() != str(CONFIG_FORMAT_VERSION):
                raise ConfigError(f"unsupported config format_version {value.strip()}", line=lineno, key=key)
            version_seen = True
            continue
        apply_setting(cfg, key, value, lineno)
    if not version_seen:
        raise ConfigError("config is missing its format_version line", line=1, key="format_version")
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value", key=item)
        apply_setting(cfg, key, value)
    cfg.validate()
    return cfg


PRESETS = ("one-shot", "three-shot")


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("cdm_forge").joinpath("presets", f"{name}.cfg").read_text()


def load_config(path: str, overrides=()) -> RunConfig:
    """Read a config file, or a shipped preset given as ``preset:<name>``."""
    if path.startswith("preset:"):
        return parse_config(preset_text(path.split(":", 1)[1]), overrides)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config(p.read_text(), overrides)
