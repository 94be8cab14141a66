"""Run configuration: one flat JSON document, defaults for every omitted key, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from pathlib import Path

from .cell import NetworkConfig
from .data import FeatureConfig
from .models import HeadSpec, fingerprint
from .optim import AlphaOptConfig, SearchLoopConfig, SgdConfig


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # searched network
    cells: int = 4
    init_channels: int = 16
    nodes: int = 4
    stem_multiplier: int = 3
    # loops
    search_epochs: int = 300
    train_epochs: int = 300
    batch_size: int = 16
    grad_clip: float = 5.0
    # weight optimizer
    lr_max: float = 0.025
    lr_min: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 3e-4
    # alpha optimizer
    alpha_lr: float = 3e-4
    alpha_beta1: float = 0.5
    alpha_beta2: float = 0.999
    alpha_weight_decay: float = 1e-3
    # head of the searched model
    lstm_units: int = 256
    bidirectional: bool = False
    attention: bool = False
    dense_widths: tuple[int, ...] = (256,)
    dropout: float = 0.0
    # baselines
    baseline_channels: int = 16
    baseline_lstm_units: int = 128
    baseline_dense_widths: tuple[int, ...] = (256,)
    baseline_dropout: float = 0.3
    # folds
    n_folds: int = 5
    folds: tuple[int, ...] | None = None
    search_fraction: float = 0.7
    # features (used by `dataset prepare`)
    sample_rate: int = 16000
    seconds: float = 8.0
    n_fft: int = 2048
    hop_length: int = 250
    # outputs
    figures: bool = True

    def __post_init__(self):
        for name in ("dense_widths", "baseline_dense_widths"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.folds is not None:
            object.__setattr__(self, "folds", tuple(self.folds))
            bad = [k for k in self.folds if not 0 <= k < self.n_folds]
            if bad:
                raise ValueError(f"fold ids {bad} outside 0..{self.n_folds - 1}")
        if not 0.0 < self.search_fraction < 1.0:
            raise ValueError(f"search_fraction must lie in (0, 1), got {self.search_fraction}")
        if self.n_folds < 2:
            raise ValueError(f"n_folds must be >= 2, got {self.n_folds}")
        # building the module configs runs their own invariant checks
        self.network, self.sgd(self.search_epochs), self.alpha_opt, self.loop, self.head

    # -- views onto module configs --------------------------------------------
    @property
    def network(self) -> NetworkConfig:
        return NetworkConfig(self.cells, self.init_channels, self.nodes, 1, self.stem_multiplier)

    def sgd(self, epochs: int) -> SgdConfig:
        return SgdConfig(self.lr_max, self.lr_min, self.momentum, self.weight_decay, epochs)

    @property
    def alpha_opt(self) -> AlphaOptConfig:
        return AlphaOptConfig(self.alpha_lr, self.alpha_beta1, self.alpha_beta2, self.alpha_weight_decay)

    @property
    def loop(self) -> SearchLoopConfig:
        return SearchLoopConfig(self.search_epochs, self.batch_size, self.grad_clip, self.seed)

    @property
    def head(self) -> HeadSpec:
        return HeadSpec(self.lstm_units, self.bidirectional, self.attention, self.dense_widths, self.dropout)

    @property
    def features(self) -> FeatureConfig:
        return FeatureConfig(sample_rate=self.sample_rate, seconds=self.seconds, n_fft=self.n_fft,
                             hop_length=self.hop_length)

    @property
    def fold_ids(self) -> tuple[int, ...]:
        return self.folds if self.folds is not None else tuple(range(self.n_folds))

    # -- serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        for key, value in doc.items():
            if isinstance(value, tuple):
                doc[key] = list(value)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())

    def replace(self, **changes) -> "RunConfig":
        return from_dict({**self.to_dict(), **changes})


_HINTS = typing.get_type_hints(RunConfig)


def _coerce(name: str, value):
    hint = _HINTS[name]
    if hint is bool:
        if not isinstance(value, bool):
            raise TypeError(f"config key {name!r} must be true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"config key {name!r} must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"config key {name!r} must be a number, got {value!r}")
        return float(value)
    # tuple[int, ...], optionally None
    if value is None and type(None) in typing.get_args(hint):
        return None
    if not isinstance(value, (list, tuple)) or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
        raise TypeError(f"config key {name!r} must be a list of integers, got {value!r}")
    return tuple(value)


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise TypeError(f"config must be a JSON object, got {type(doc).__name__}")
    unknown = sorted(set(doc) - set(_HINTS))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**{k: _coerce(k, v) for k, v in doc.items()})


def load_config(path: str | os.PathLike | None) -> RunConfig:
    """Read a JSON config file; ``None`` yields the defaults."""
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(doc)
