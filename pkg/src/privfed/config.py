"""Flat key=value experiment configs and named presets.

A config file is lines of `section.key=value`; blank lines and `#`
comments are ignored.  Presets are built-in config dicts; a config file
given alongside a preset overlays it key by key.  Builders below turn a
merged config into datasets, shards, and run configurations.
"""

from __future__ import annotations

import numpy as np

from .attack import AttackConfig
from .data import Dataset, load_csv, load_idx, make_shards, rescale_unit, synthetic_blobs
from .federation import FederationConfig
from .mechanism import DpConfig
from .nn import ArchSpec
from .streams import RandomStream


class ConfigError(Exception):
    """Malformed, missing, or contradictory configuration."""


_REQUIRED = object()


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


class Config:
    """Typed access to merged key=value pairs."""

    def __init__(self, values: dict[str, str]):
        self.values = dict(values)

    def merged_with(self, overrides: dict[str, str]) -> "Config":
        merged = dict(self.values)
        merged.update(overrides)
        return Config(merged)

    def _raw(self, key: str, default):
        if key in self.values and self.values[key] != "":
            return self.values[key]
        if default is _REQUIRED:
            raise ConfigError(f"missing required config key {key!r}")
        return default

    def get_str(self, key: str, default=_REQUIRED, choices: tuple[str, ...] | None = None) -> str:
        value = self._raw(key, default)
        if choices is not None and value not in choices:
            raise ConfigError(f"{key} must be one of {choices}, got {value!r}")
        return value

    def get_int(self, key: str, default=_REQUIRED) -> int:
        value = self._raw(key, default)
        if isinstance(value, int):
            return value
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {value!r}") from None

    def get_float(self, key: str, default=_REQUIRED) -> float:
        value = self._raw(key, default)
        if isinstance(value, (int, float)):
            return float(value)
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {value!r}") from None

    def get_bool(self, key: str, default=_REQUIRED) -> bool:
        value = self._raw(key, default)
        if isinstance(value, bool):
            return value
        lowered = value.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key} must be true or false, got {value!r}")

    def get_optional_float(self, key: str) -> float | None:
        value = self.values.get(key, "")
        return float(value) if value != "" else None


def build_dataset(cfg: Config, seed: int) -> tuple[Dataset, Dataset]:
    """Load (or synthesize) the dataset and split off a validation part."""
    kind = cfg.get_str("dataset.kind", choices=("blobs", "idx", "csv"))
    if kind == "blobs":
        full = synthetic_blobs(
            num_classes=cfg.get_int("dataset.classes", 2),
            per_class=cfg.get_int("dataset.per_class", 200),
            dim=cfg.get_int("dataset.dim", 8),
            separation=cfg.get_float("dataset.separation", 6.0),
            seed=seed,
        )
    elif kind == "idx":
        full = load_idx(cfg.get_str("dataset.images"), cfg.get_str("dataset.labels"))
    else:
        categorical = tuple(
            c.strip() for c in cfg.get_str("dataset.categorical", "").split(",") if c.strip()
        )
        full = load_csv(cfg.get_str("dataset.path"), cfg.get_str("dataset.label_column"),
                        categorical)
    if cfg.get_bool("dataset.unit_box", False):
        full = rescale_unit(full)

    fraction = cfg.get_float("dataset.val_fraction", 0.2)
    if not 0.0 <= fraction < 1.0:
        raise ConfigError("dataset.val_fraction must lie in [0, 1)")
    if fraction == 0.0:
        return full, full
    n_val = max(1, int(round(fraction * len(full))))
    perm = RandomStream(seed).child("val-split").permutation(len(full))
    return full.subset(perm[n_val:]), full.subset(perm[:n_val])


def build_shards(cfg: Config, train: Dataset, seed: int):
    return make_shards(
        train,
        clients=cfg.get_int("fed.clients"),
        per_client=cfg.get_int("shards.per_client"),
        classes_per_client=cfg.get_int("shards.classes_per_client", train.num_classes),
        seed=seed,
        disjoint=cfg.get_bool("shards.disjoint", True),
    )


def build_arch(cfg: Config, dataset: Dataset) -> ArchSpec:
    return ArchSpec(
        name=cfg.get_str("model.arch", "mlp-tiny"),
        input_shape=dataset.feature_shape,
        num_classes=dataset.num_classes,
    )


def build_dp(cfg: Config) -> DpConfig:
    return DpConfig(
        placement=cfg.get_str("dp.placement", "none",
                              choices=("none", "per-example", "per-client")),
        clip=cfg.get_float("dp.clip", 4.0),
        sigma=cfg.get_float("dp.sigma", 6.0),
        delta=cfg.get_float("dp.delta", 1e-5),
        clip_end=cfg.get_optional_float("dp.clip_end"),
    )


def build_federation(cfg: Config, seed: int) -> FederationConfig:
    return FederationConfig(
        total_clients=cfg.get_int("fed.clients"),
        clients_per_round=cfg.get_int("fed.per_round"),
        rounds=cfg.get_int("fed.rounds"),
        local_iterations=cfg.get_int("fed.local_iterations"),
        batch_size=cfg.get_int("fed.batch_size"),
        learning_rate=cfg.get_float("fed.learning_rate", 0.1),
        aggregation=cfg.get_str("fed.aggregation", "fedsgd", choices=("fedsgd", "fedavg")),
        dp=build_dp(cfg),
        master_seed=seed,
        noise_at_client=cfg.get_bool("fed.noise_at_client", False),
    )


def build_attack_config(cfg: Config) -> AttackConfig:
    return AttackConfig(
        max_iterations=cfg.get_int("attack.max_iterations", 300),
        success_threshold=cfg.get_float("attack.threshold", 1e-4),
        seed_mode=cfg.get_str("attack.seed_mode", "patterned",
                              choices=("patterned", "uniform", "zeros")),
        optimizer=cfg.get_str("attack.optimizer", "hybrid",
                              choices=("hybrid", "gd", "adam")),
        step_size=cfg.get_float("attack.step_size", 0.3),
        fd_step=cfg.get_float("attack.fd_step", 1e-3),
        label_mode=cfg.get_str("attack.label_mode", "known", choices=("known", "infer")),
    )


_BLOBS_DESK = {
    "seed": "1",
    "dataset.kind": "blobs",
    "dataset.classes": "2",
    "dataset.per_class": "700",
    "dataset.dim": "8",
    "dataset.separation": "6.0",
    "dataset.val_fraction": "0.2",
    "shards.per_client": "50",
    "shards.classes_per_client": "2",
    "model.arch": "mlp-tiny",
    "fed.clients": "20",
    "fed.per_round": "10",
    "fed.rounds": "20",
    "fed.local_iterations": "5",
    "fed.batch_size": "5",
    "fed.learning_rate": "0.1",
    "fed.aggregation": "fedsgd",
    "dp.placement": "none",
}

_ATTACK_DESK = {
    "seed": "1",
    "dataset.kind": "blobs",
    "dataset.classes": "2",
    "dataset.per_class": "60",
    "dataset.dim": "64",
    "dataset.separation": "6.0",
    "dataset.unit_box": "true",
    "dataset.val_fraction": "0.25",
    "shards.per_client": "5",
    "shards.classes_per_client": "2",
    "model.arch": "mlp-tiny",
    "fed.clients": "10",
    "fed.per_round": "4",
    "fed.rounds": "1",
    "fed.local_iterations": "1",
    "fed.batch_size": "1",
    "fed.learning_rate": "0.1",
    "dp.placement": "none",
    "dp.clip": "4.0",
    "dp.sigma": "6.0",
    "attack.type": "type2",
    "attack.round": "0",
    "attack.client": "0",
    "attack.example": "0",
}

# Reference accounting pipelines: per-example placement composes
# rounds * local iterations steps at the global batch rate; per-client
# placement composes one step per round at the client sampling rate.
def _account(q: str, steps: str) -> dict[str, str]:
    return {"account.q": q, "account.sigma": "6.0", "account.delta": "1e-5",
            "account.steps": steps}


PRESETS: dict[str, dict[str, str]] = {
    "blobs-desk": dict(_BLOBS_DESK),
    # desk runs sample ~100x more of the data per step than the full-scale
    # profiles, so they keep a gentler sigma to stay trainable
    "blobs-desk-cdp": {**_BLOBS_DESK, "dp.placement": "per-example",
                       "dp.clip": "4.0", "dp.sigma": "0.5", "dp.delta": "1e-5"},
    "blobs-desk-cdp-decay": {**_BLOBS_DESK, "dp.placement": "per-example",
                             "dp.clip": "6.0", "dp.clip_end": "2.0",
                             "dp.sigma": "0.5", "dp.delta": "1e-5"},
    "blobs-desk-sdp": {**_BLOBS_DESK, "dp.placement": "per-client",
                       "dp.clip": "4.0", "dp.sigma": "0.5", "dp.delta": "1e-5"},
    "attack-desk": dict(_ATTACK_DESK),
    "mnist-like-paper": {
        "seed": "1",
        "dataset.kind": "idx",
        "dataset.val_fraction": "0.0",
        "shards.per_client": "500",
        "shards.classes_per_client": "10",
        "model.arch": "cnn-small",
        "fed.clients": "120",
        "fed.per_round": "100",
        "fed.rounds": "100",
        "fed.local_iterations": "100",
        "fed.batch_size": "5",
        "fed.learning_rate": "0.1",
        "dp.placement": "per-example",
        "dp.clip": "4.0",
        "dp.sigma": "6.0",
        "dp.delta": "1e-5",
    },
    # accounting-only presets (rounds x local iterations at batch rate q)
    "mnist-cdp-L100": _account("0.01", "10000"),
    "lfw-cdp-L100": _account("0.01", "6000"),
    "adult-cdp-L100": _account("0.01", "1000"),
    "cancer-cdp-L100": _account("0.01", "300"),
    "mnist-cdp-L1": _account("0.01", "100"),
    "lfw-cdp-L1": _account("0.01", "60"),
    "adult-cdp-L1": _account("0.01", "10"),
    "cancer-cdp-L1": _account("0.01", "3"),
    "mnist-sdp": _account("0.1", "100"),
    "lfw-sdp": _account("0.1", "60"),
    "adult-sdp": _account("0.1", "10"),
    "cancer-sdp": _account("0.1", "3"),
}


def load_preset(name: str) -> dict[str, str]:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return dict(PRESETS[name])
