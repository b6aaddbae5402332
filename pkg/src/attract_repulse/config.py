"""Run configuration: one JSON file, validated, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ._validation import check_range
from .augment import AugmentConfig, AugPolicy
from .exceptions import InvalidInputError
from .losses import LossConfig
from .model import ModelSpec
from .train import OptimConfig, ScheduleConfig

_DATA_KINDS = ("cifar10", "synthetic")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.005
    warmup_start_lr: float = 1e-6
    warmup_epochs: int = 3
    total_epochs: int = 100
    batch_size: int = 64
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        self.schedule(1)  # validates the schedule fields

    def schedule(self, steps_per_epoch: int) -> ScheduleConfig:
        return ScheduleConfig(self.base_lr, self.warmup_start_lr, self.warmup_epochs,
                              self.total_epochs, steps_per_epoch)


@dataclass(frozen=True)
class DataConfig:
    """Where training/evaluation images come from.

    For ``cifar10``, ``path`` is the extracted binary directory; the training
    split is reduced to ``n_per_class`` images per class.  Without a test set
    (``use_test_split = False``) a stratified ``val_fraction`` hold-out of the
    training subset is used for evaluation instead.
    """

    kind: str = "cifar10"
    path: str | None = None
    n_per_class: int = 50
    subsample_seed: int = 0
    use_test_split: bool = True
    val_fraction: float = 0.1
    num_classes: int = 10
    image_size: int = 32
    snr: float = 3.0
    test_per_class: int = 100

    def __post_init__(self):
        if self.kind not in _DATA_KINDS:
            raise InvalidInputError(f"data.kind must be one of {_DATA_KINDS}")
        if self.n_per_class < 1:
            raise InvalidInputError("n_per_class must be >= 1")
        check_range("val_fraction", self.val_fraction, 0.0, 1.0, low_open=True, high_open=True)


@dataclass(frozen=True)
class EvalConfig:
    use_fusion: bool = True
    use_tencrop: bool = False
    tencrop_size: int = 28
    diagnostics: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str | None = None

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise InvalidInputError("seed must be an integer")
        if self.model.num_classes != self.data.num_classes and self.data.kind == "synthetic":
            raise InvalidInputError("model.num_classes must equal data.num_classes")
        if self.data.kind == "cifar10" and self.model.num_classes != 10:
            raise InvalidInputError("CIFAR-10 runs need model.num_classes = 10")

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _from_dict(cls, d, "config")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        """SHA-256 over the canonical JSON form."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _from_dict(cls, d, where: str):
    if not isinstance(d, dict):
        raise InvalidInputError(f"{where} must be a JSON object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise InvalidInputError(f"unknown key(s) in {where}: {unknown}")
    kwargs = {}
    for name, value in d.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            value = _from_dict(tp, value, f"{where}.{name}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidInputError(f"{where}: {exc}") from None


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_dict(json.load(fh))


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_json())


__all__ = ["AugPolicy", "DataConfig", "EvalConfig", "RunConfig", "TrainConfig",
           "load_config", "save_config"]
