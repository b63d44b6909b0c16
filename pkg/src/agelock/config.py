"""Experiment configuration: a YAML document mapped onto nested dataclasses.

Every section is optional; missing keys take the defaults below. Unknown keys
are rejected so a typo never silently falls back to a default. The canonical
document is what ``agelock emit-config`` prints.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .aging import MIN_DEGREE
from .doft import TrainConfig
from .errors import ConfigError
from .pim import PimConfig


@dataclass
class DataSection:
    train_images: str = "/root/data/mnist/train-images-idx3-ubyte"
    train_labels: str = "/root/data/mnist/train-labels-idx1-ubyte"
    test_images: str = "/root/data/mnist/t10k-images-idx3-ubyte"
    test_labels: str = "/root/data/mnist/t10k-labels-idx1-ubyte"
    val_holdout: int = 5000
    train_subset: int | None = None
    test_subset: int | None = None


@dataclass
class ModelSection:
    widths: list[int] = field(default_factory=lambda: [784, 256, 10])
    q: int = 1
    n: int = 8


@dataclass
class PimSection:
    array_rows: int = 64
    array_cols: int = 64
    adc_bits: int = 7
    v_inter: float = 0.01
    v_cell: float = 0.01
    adc_min: int = -64
    adc_max: int = 64


@dataclass
class AgingSection:
    sigma: float = 0.9
    alpha: float = 0.24
    aged_layers: list[int] | None = None
    shared: bool = False
    pv_std: float = 0.0
    natural_shrink: float = 0.0


@dataclass
class PretrainSection:
    eta: float = 0.01
    epochs: int = 10
    batch_size: int = 128
    optimizer: str = "adam"
    momentum: float = 0.0
    lr_schedule: str = "cosine"
    patience: int = 0


@dataclass
class DoftSection:
    lam: float = 0.05
    eta: float = 0.001
    epochs: int = 20
    batch_size: int = 128
    loss: str = "ce"
    adv_cap_factor: float = 2.0
    adv_cap_mode: str = "sample"
    patience: int = 3
    min_rel_improvement: float = 1e-4
    momentum: float = 0.0
    optimizer: str = "adam"
    shadow_clip: float | None = 1.0
    lr_schedule: str = "constant"
    learn_logit_scale: bool | None = None
    match_logit_scale: bool = True


@dataclass
class PathsSection:
    checkpoint: str | None = None
    mask: str | None = None


@dataclass
class SweepSection:
    sigma: list[float] = field(default_factory=lambda: [0.0, 0.1, 0.3, 0.5])
    alpha: list[float] = field(default_factory=lambda: [0.24])
    aged_layers: list[int | None] = field(default_factory=lambda: [None])
    lam: list[float] = field(default_factory=lambda: [0.05])
    trials: int = 20
    retrain: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    threads: int = 1
    mode: str = "functional"
    out: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    pim: PimSection = field(default_factory=PimSection)
    aging: AgingSection = field(default_factory=AgingSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    doft: DoftSection = field(default_factory=DoftSection)
    paths: PathsSection = field(default_factory=PathsSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def pim_config(self) -> PimConfig:
        return PimConfig(q=self.model.q, n=self.model.n, **dataclasses.asdict(self.pim))

    def train_config(self, which: str = "doft", **overrides) -> TrainConfig:
        if which == "pretrain":
            kw = dict(dataclasses.asdict(self.pretrain), lam=0.0)
        else:
            kw = dataclasses.asdict(self.doft)
        kw.update(seed=self.seed)
        kw.update(overrides)
        return TrainConfig(**kw)

    def validate(self) -> "ExperimentConfig":
        """Range checks that do not touch the file system."""
        if self.mode not in ("functional", "bitexact"):
            raise ConfigError(f"mode: expected functional or bitexact, got {self.mode!r}")
        if self.threads < 1:
            raise ConfigError("threads: must be >= 1")
        if len(self.model.widths) < 2 or min(self.model.widths) < 1:
            raise ConfigError("model.widths: need at least two positive widths")
        if not 0 <= self.aging.sigma <= 1:
            raise ConfigError("aging.sigma: must lie in [0, 1]")
        if not MIN_DEGREE <= self.aging.alpha <= 1:
            raise ConfigError("aging.alpha: must lie in (0, 1]")
        for key in ("sigma", "alpha", "aged_layers", "lam"):
            if not getattr(self.sweep, key):
                raise ConfigError(f"sweep.{key}: grid must not be empty")
        if self.sweep.trials < 1:
            raise ConfigError("sweep.trials: must be >= 1")
        try:
            self.pim_config()
            self.train_config("pretrain")
            self.train_config("doft")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def require_files(self, *keys: str) -> None:
        """Check that the named ``section.key`` paths exist."""
        for key in keys:
            section, name = key.split(".")
            value = getattr(getattr(self, section), name)
            if value is None:
                raise ConfigError(f"{key}: required for this command")
            if not Path(value).is_file():
                raise ConfigError(f"{key}: file not found: {value}")


# ----------------------------------------------------------------------------
# parsing


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _coerce(value, tp, key: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        options = typing.get_args(tp)
        if value is None and type(None) in options:
            return None
        errors = []
        for option in options:
            if option is type(None):
                continue
            try:
                return _coerce(value, option, key)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if errors else f"{key}: unexpected value {value!r}")
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        (item,) = typing.get_args(tp)
        return [_coerce(v, item, f"{key}[{i}]") for i, v in enumerate(value)]
    if _is_dataclass_type(tp):
        return _build(tp, value, key)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported type {tp!r}")


def _build(cls, mapping, prefix: str = ""):
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {mapping!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in mapping:
        if key not in names:
            where = f"{prefix}.{key}" if prefix else str(key)
            raise ConfigError(f"unknown key {where!r}")
    kwargs = {}
    for name in names & set(mapping):
        kwargs[name] = _coerce(mapping[name], hints[name], f"{prefix}.{name}" if prefix else name)
    return cls(**kwargs)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f" line {mark.line + 1}" if mark is not None else ""
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{source}:{line}: {problem}") from exc
    return _build(ExperimentConfig, doc).validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def emit_config(cfg: ExperimentConfig | None = None) -> str:
    """YAML text that parses back to ``cfg`` (defaults when omitted)."""
    return yaml.safe_dump(to_dict(cfg or ExperimentConfig()), sort_keys=False, default_flow_style=False)
