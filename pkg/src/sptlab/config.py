"""Run configuration: strict JSON parsing with defaults, and a stable config hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .model import ModelConfig

STAGES = ("spt", "finetune", "scratch")
DEFAULT_EPOCHS = {"spt": 10, "finetune": 20, "scratch": 20}
DEFAULT_BATCH = {"spt": 32, "finetune": 100, "scratch": 100}
DEFAULT_SNAPSHOTS = (1, 10, 50, 100, 150, 200)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetRef:
    """Either the synthetic task (keyed by seed) or a directory of ``<split>.jsonl`` files."""

    kind: str = "synthetic"
    seed: int = 0
    sizes: dict | None = None
    flip_fraction: float = 0.15
    dir: str | None = None
    schema: str = "continuous"

    def __post_init__(self):
        if self.kind not in ("synthetic", "jsonl"):
            raise ConfigError(f"dataset.kind: unknown kind {self.kind!r}")
        if self.kind == "jsonl" and not self.dir:
            raise ConfigError("dataset.dir: required for jsonl datasets")

    def to_dict(self) -> dict:
        if self.kind == "synthetic":
            return {"kind": "synthetic", "seed": self.seed, "sizes": self.sizes,
                    "flip_fraction": self.flip_fraction}
        return {"kind": "jsonl", "dir": self.dir, "schema": self.schema}

    @classmethod
    def from_obj(cls, obj) -> "DatasetRef":
        if isinstance(obj, str):
            return cls(kind="jsonl", dir=obj)
        if isinstance(obj, int) and not isinstance(obj, bool):
            return cls(seed=obj)
        if not isinstance(obj, dict):
            raise ConfigError("dataset: expected an object, a directory path, or a seed")
        allowed = {"kind", "seed", "sizes", "flip_fraction", "dir", "schema"}
        for key in obj:
            if key not in allowed:
                raise ConfigError(f"dataset.{key}: unknown key")
        return cls(**obj)


@dataclass(frozen=True)
class RunConfig:
    stage: str
    seed: int
    dataset: DatasetRef = field(default_factory=DatasetRef)
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int | None = None
    lr: float = 1e-3
    batch_size: int | None = None
    weight_decay: float = 0.0
    init: dict | None = None  # {"checkpoint": path, "select": expr}
    frozen: str = "none"
    mask_fraction: float = 0.15
    snapshots: tuple = DEFAULT_SNAPSHOTS

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage: must be one of {STAGES}, got {self.stage!r}")
        if self.epochs is None:
            object.__setattr__(self, "epochs", DEFAULT_EPOCHS[self.stage])
        if self.batch_size is None:
            object.__setattr__(self, "batch_size", DEFAULT_BATCH[self.stage])
        if self.epochs < 0:
            raise ConfigError("epochs: must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be positive")
        if not self.lr > 0:
            raise ConfigError("lr: must be positive")
        if not 0.0 <= self.mask_fraction <= 1.0:
            raise ConfigError("mask_fraction: must lie in [0, 1]")
        if self.init is not None:
            if not isinstance(self.init, dict) or "checkpoint" not in self.init:
                raise ConfigError("init: expected {'checkpoint': path, 'select': expr}")
            for key in self.init:
                if key not in ("checkpoint", "select"):
                    raise ConfigError(f"init.{key}: unknown key")
            object.__setattr__(self, "init", {"checkpoint": str(self.init["checkpoint"]),
                                              "select": self.init.get("select", "all")})
        if self.stage == "scratch" and self.init is not None:
            raise ConfigError("init: scratch runs start from random initialization")
        object.__setattr__(self, "snapshots", tuple(int(s) for s in self.snapshots))

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "seed": self.seed,
            "dataset": self.dataset.to_dict(),
            "model": self.model.to_dict(),
            "epochs": self.epochs,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "weight_decay": self.weight_decay,
            "init": self.init,
            "frozen": self.frozen,
            "mask_fraction": self.mask_fraction,
            "snapshots": list(self.snapshots),
        }

    def replace(self, **kw) -> "RunConfig":
        return replace(self, **kw)


_FIELD_TYPES = {
    "seed": int, "epochs": int, "batch_size": int,
    "lr": float, "weight_decay": float, "mask_fraction": float,
    "stage": str, "frozen": str,
}


def config_from_dict(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config: expected a JSON object")
    known = {f.name for f in fields(RunConfig)}
    for key in obj:
        if key not in known:
            raise ConfigError(f"{key}: unknown config key")
    for key in ("stage", "seed"):
        if key not in obj:
            raise ConfigError(f"{key}: required")
    kw = {}
    for key, val in obj.items():
        typ = _FIELD_TYPES.get(key)
        if typ is int and (isinstance(val, bool) or not isinstance(val, int)):
            raise ConfigError(f"{key}: expected an integer")
        if typ is float and (isinstance(val, bool) or not isinstance(val, (int, float))):
            raise ConfigError(f"{key}: expected a number")
        if typ is str and not isinstance(val, str):
            raise ConfigError(f"{key}: expected a string")
        kw[key] = float(val) if typ is float else val
    if "dataset" in kw:
        kw["dataset"] = DatasetRef.from_obj(kw["dataset"])
    if "model" in kw:
        try:
            kw["model"] = ModelConfig.from_dict(kw["model"])
        except (TypeError, ValueError) as err:
            raise ConfigError(f"model: {err}") from None
    return RunConfig(**kw)


def parse_config(path) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err.msg})") from None
    return config_from_dict(obj)


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def config_hash(cfg: RunConfig | dict) -> str:
    d = cfg.to_dict() if isinstance(cfg, RunConfig) else cfg
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
