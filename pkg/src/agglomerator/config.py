"""Run configuration: every hyper-parameter, ablation switches, profiles.

Config files are flat `key=value` text (one per line, `#` comments).
Unknown keys are rejected before any work starts. The same `key=value`
syntax is used for command-line overrides, which win over the file.

This module deliberately imports nothing heavy at module scope: the CLI
parses configuration and pins the BLAS thread count before numpy loads.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

ABLATIONS = ("I", "II", "III", "IV", "V", "VI")

# dataset id -> (H, W, C, classes)
DATASETS = {
    "mnist": (28, 28, 1, 10),
    "fashion_mnist": (28, 28, 1, 10),
    "cifar10": (32, 32, 3, 10),
    "cifar100": (32, 32, 3, 100),
    "synthetic": (28, 28, 1, 10),
}

# community-standard per-channel normalization stats, overridable in config
DEFAULT_STATS = {
    "mnist": ((0.1307,), (0.3081,)),
    "fashion_mnist": ((0.2860,), (0.3530,)),
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    dataset: str = "mnist"
    data_dir: str = ""          # empty -> $AGGLOMERATOR_DATA or ./data
    seed: int = 0
    precision: str = "float32"

    # model
    d: int = 64
    K: int = 3
    T: int = 6
    f1: int = 256
    f2: int = 0                 # 0 -> class count of the dataset
    beta: float = 8.0
    neighborhood: str = "full"  # "full" or a square radius as an integer
    dropout: float = 0.3
    ablation: str = "I"

    # optimization
    epochs_pretrain: int = 20
    epochs_train: int = 10
    batch_size: int = 128
    lr_min: float = 0.002
    lr_max: float = 0.05
    weight_decay: float = 5e-4
    momentum: float = 0.9
    temperature: float = 1.0

    # data pipeline
    subset_fraction: float = 1.0
    augment_ops: int = 2
    augment_magnitude: float = 10.0
    norm_mean: str = ""         # comma-separated floats; empty -> dataset default
    norm_std: str = ""
    workers: int = 0            # >0 pins BLAS thread count before numpy loads

    def validate(self) -> "TrainConfig":
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; known: {sorted(DATASETS)}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation variant {self.ablation!r}; known: {ABLATIONS}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.T < 1 or self.K < 1:
            raise ConfigError(f"need T >= 1 and K >= 1, got T={self.T} K={self.K}")
        if self.batch_size < 4:
            raise ConfigError(f"batch_size must be >= 4 for contrastive pairs, got {self.batch_size}")
        if self.lr_min > self.lr_max:
            raise ConfigError(f"lr_min {self.lr_min} exceeds lr_max {self.lr_max}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 < self.subset_fraction <= 1.0:
            raise ConfigError(f"subset_fraction must lie in (0, 1], got {self.subset_fraction}")
        if self.beta <= 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.neighborhood != "full":
            try:
                r = int(self.neighborhood)
            except ValueError:
                raise ConfigError(f"neighborhood must be 'full' or an integer radius, "
                                  f"got {self.neighborhood!r}") from None
            if r < 1:
                raise ConfigError(f"neighborhood radius must be >= 1, got {r}")
        if self.d % 2:
            raise ConfigError(f"d must be even (tokenizer stage width d/2), got {self.d}")
        for s in ("norm_mean", "norm_std"):
            v = getattr(self, s)
            if v:
                try:
                    vals = tuple(float(x) for x in v.split(","))
                except ValueError:
                    raise ConfigError(f"{s} must be comma-separated floats, got {v!r}") from None
                if s == "norm_std" and any(x == 0 for x in vals):
                    raise ConfigError("norm_std entries must be nonzero")
        return self

    # --- resolved views -----------------------------------------------------

    def geometry(self) -> tuple[int, int, int]:
        h, w, c, _ = DATASETS[self.dataset]
        return h, w, c

    def num_classes(self) -> int:
        return self.f2 if self.f2 else DATASETS[self.dataset][3]

    def grid(self) -> tuple[int, int]:
        h, w, _, _ = DATASETS[self.dataset]
        return h // 4, w // 4

    def norm_stats(self) -> tuple[tuple, tuple]:
        """(mean, std) per channel; config text wins over dataset defaults."""
        if self.norm_mean and self.norm_std:
            return (tuple(float(x) for x in self.norm_mean.split(",")),
                    tuple(float(x) for x in self.norm_std.split(",")))
        if self.dataset in DEFAULT_STATS:
            return DEFAULT_STATS[self.dataset]
        return None  # synthetic: computed from the train split at load time

    def neighborhood_arg(self):
        return "full" if self.neighborhood == "full" else int(self.neighborhood)

    @property
    def use_attention(self) -> bool:
        return self.ablation != "III"

    @property
    def linear_columns(self) -> bool:
        return self.ablation == "IV"

    @property
    def linear_head(self) -> bool:
        return self.ablation == "V"

    @property
    def linear_embedding(self) -> bool:
        return self.ablation == "VI"

    def column_activations(self):
        """(encoder activation, decoder activation) for the column MLPs."""
        from . import tensor as T
        if self.ablation == "II":
            return T.relu, T.relu
        return T.sine, T.gelu

    def subset_size(self, n: int) -> int:
        """ceil(fraction * n) with a guard against float round-up drift."""
        return min(n, max(1, math.ceil(self.subset_fraction * n - 1e-9)))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    typ = _FIELDS[key].type
    raw = raw.strip()
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r} expects {typ}, got {raw!r}") from None


def parse_overrides(cfg: TrainConfig, pairs: list[str]) -> TrainConfig:
    """Apply `key=value` strings on top of cfg; unknown keys rejected."""
    updates = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        updates[key.strip()] = _coerce(key.strip(), raw)
    return dataclasses.replace(cfg, **updates).validate()


def load_config_file(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        pairs.append(line)
    return parse_overrides(base or TrainConfig(), pairs)


def desk_profile() -> TrainConfig:
    """Acceptance-scale defaults: d=64, K=3, T=6, B=128, 20+10 epochs,
    a 10k-sample stratified subset of the 60k train split."""
    return TrainConfig(subset_fraction=1.0 / 6.0).validate()


def paper_profile() -> TrainConfig:
    """Published hyper-parameters: d=128, B=1024, f1=512, 300 epochs."""
    return TrainConfig(d=128, batch_size=1024, f1=512, epochs_pretrain=300,
                       epochs_train=300, subset_fraction=1.0).validate()


PROFILES = {"desk": desk_profile, "paper": paper_profile}
