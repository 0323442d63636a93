"""Experiment configuration: one flat key/value document, JSON on disk."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import InvalidConfig

PRESETS = ("naive", "uss", "uss-m", "soft", "soft-m", "bce", "bce-m",
           "cos-margin", "arc-margin", "unitsface")
THRESHOLD_PRESETS = frozenset({"uss", "uss-m", "unitsface"})
BCE_PRESETS = frozenset({"bce", "bce-m"})
S2C_PRESETS = frozenset({"cos-margin", "arc-margin", "unitsface"})
S2S_PRESETS = frozenset({"naive", "uss", "uss-m", "soft", "soft-m", "bce", "bce-m", "unitsface"})
MARGINAL_PRESETS = frozenset({"uss-m", "soft-m", "bce-m", "unitsface"})


@dataclass
class ExperimentConfig:
    """Every knob of a run. Unknown keys are rejected when loading.

    ``margin`` is the sample-to-sample margin used by the ``-m`` presets and
    ``unitsface``; the vanilla presets always run with margin 0.
    ``margin_c`` defaults to 0.35 for ``cos-margin``/``unitsface`` and 0.5 for
    ``arc-margin``.
    ``warmup`` ramps the learning rate linearly over the first epochs: with
    ``gamma = 64`` an unwarmed first step overshoots and collapses all
    embeddings onto one direction. ``steps_per_epoch = None`` means one pass
    over the training samples.
    """

    # data
    n_ids: int = 50
    samples_per_id: int = 20
    dim: int = 32
    sigma: float = 0.25
    data_seed: Optional[int] = None
    data_csv: Optional[str] = None
    holdout_per_id: int = 5
    # loss
    preset: str = "unitsface"
    gamma: float = 64.0
    margin: float = 0.1
    margin_c: Optional[float] = None
    scale: float = 64.0
    # network
    hidden: list = field(default_factory=lambda: [128])
    embed_dim: int = 16
    # optimization
    schedule: str = "step"
    lr: float = 0.01
    milestones: list = field(default_factory=lambda: [16, 24])
    warmup: float = 2.0
    power: float = 2.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    threshold_lr_scale: float = 1.0
    epochs: int = 28
    batch_ids: int = 32
    steps_per_epoch: Optional[int] = 50
    proxy_init: str = "mean"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise InvalidConfig(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        if self.epochs < 0 or self.batch_ids < 2:
            raise InvalidConfig("epochs must be >= 0 and batch_ids >= 2")
        if self.gamma <= 0 or self.scale <= 0:
            raise InvalidConfig("gamma and scale must be positive")
        if not 0 <= self.margin < 2:
            raise InvalidConfig("margin must lie in [0, 2)")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise InvalidConfig("steps_per_epoch must be >= 1")
        if self.proxy_init not in ("mean", "random"):
            raise InvalidConfig("proxy_init must be 'mean' or 'random'")

    @property
    def s2s_margin(self) -> float:
        return self.margin if self.preset in MARGINAL_PRESETS else 0.0

    @property
    def s2c_kind(self) -> Optional[str]:
        if self.preset == "arc-margin":
            return "angular"
        if self.preset in ("cos-margin", "unitsface"):
            return "cosine"
        return None

    @property
    def resolved_margin_c(self) -> float:
        if self.margin_c is not None:
            return self.margin_c
        return 0.5 if self.preset == "arc-margin" else 0.35

    @property
    def resolved_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise InvalidConfig(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "ExperimentConfig":
        return self.from_dict({**self.to_dict(), **changes})


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidConfig("config must be a flat JSON object")
    return ExperimentConfig.from_dict(data)
