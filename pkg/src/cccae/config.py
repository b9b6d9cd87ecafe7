"""Run configuration read from flat ``key = value`` files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import DataError
from .nn import TrainConfig

FEATURE_KINDS = ("mfcc39", "fbank27", "f0e6", "wave100", "embed")


@dataclass
class RunConfig:
    alpha: float = 1.0
    feature: str = "embed"
    seed: int = 0
    embed_dim: int = 30
    hidden: int = 60
    context: int = 25
    cca_window: int = 300
    postfilter_window: int = 50
    use_mask: bool = True
    lr: float = 2e-4
    patience: int = 10
    cccae_epochs: int = 300
    cccae_batch: int = 512
    pretrain_epochs: int = 5
    regressor_epochs: int = 30
    regressor_batch: int = 256
    regressor_hidden1: int = 256
    regressor_hidden2: int = 128
    postfilter_epochs: int = 300
    postfilter_batch: int = 32
    postfilter_hidden: int = 64
    postfilter_patience: int = 30

    def __post_init__(self):
        if self.alpha < 0:
            raise DataError("alpha must be >= 0")
        if self.feature not in FEATURE_KINDS:
            raise DataError(f"unknown feature kind {self.feature!r}")
        for name in ("embed_dim", "context", "cca_window", "postfilter_window"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")

    def cccae_train(self):
        return TrainConfig(batch_size=self.cccae_batch, epochs=self.cccae_epochs, seed=self.seed,
                           patience=self.patience, val_fraction=0.1, lr=self.lr)

    def regressor_train(self):
        return TrainConfig(batch_size=self.regressor_batch, epochs=self.regressor_epochs,
                           seed=self.seed, patience=self.patience, val_fraction=0.1, lr=self.lr)

    def postfilter_train(self):
        return TrainConfig(batch_size=self.postfilter_batch, epochs=self.postfilter_epochs,
                           seed=self.seed, patience=self.postfilter_patience, val_fraction=0.1,
                           lr=self.lr)

    def replace(self, **changes):
        changes = {k: v for k, v in changes.items() if v is not None}
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


def _coerce(field_type, raw, key):
    try:
        if field_type in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if field_type in (int, "int"):
            return int(raw)
        if field_type in (float, "float"):
            return float(raw)
        return raw
    except ValueError as exc:
        raise DataError(f"config key {key!r}: cannot parse {raw!r}") from exc


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise DataError(f"config line {lineno}: expected key = value")
        if key not in types:
            raise DataError(f"config line {lineno}: unknown key {key!r}")
        changes[key] = _coerce(types[key], value, key)
    return dataclasses.replace(base, **changes)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
