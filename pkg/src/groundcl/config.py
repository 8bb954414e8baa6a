"""Run configuration: a YAML key tree with strict schema checking and dotted overrides."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import yaml

from .experiment import TrainConfig
from .world import DatasetConfig, Dataset, make_datasets


class ConfigError(ValueError):
    pass


def _default_reason() -> DatasetConfig:
    return DatasetConfig(dialects=("reason",), n_scenes=1000, seed=1, prefix="r")


@dataclass
class RunConfig:
    joint: DatasetConfig = field(default_factory=lambda: DatasetConfig(n_scenes=2000))
    reason: DatasetConfig = field(default_factory=_default_reason)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(
        default_factory=lambda: TrainConfig(datasets=("reason",), run_id="finetune"))
    seeds: tuple[int, ...] = (0, 1, 2)

    def to_dict(self) -> dict:
        return {
            "joint": self.joint.to_dict(),
            "reason": self.reason.to_dict(),
            "train": self.train.to_dict(),
            "finetune": self.finetune.to_dict(),
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        defaults = cls().to_dict()
        check_keys(d, defaults)
        d = _merge(defaults, d)
        try:
            return cls(
                joint=DatasetConfig.from_dict(d["joint"]),
                reason=DatasetConfig.from_dict(d["reason"]),
                train=TrainConfig.from_dict(d["train"]),
                finetune=TrainConfig.from_dict(d["finetune"]),
                seeds=tuple(int(s) for s in d["seeds"]),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def with_seed(self, seed: int) -> "RunConfig":
        """Point every seed in the tree at ``seed``."""
        return replace(
            self,
            joint=replace(self.joint, seed=seed),
            reason=replace(self.reason, seed=seed + 1),
            train=replace(self.train, seed=seed),
            finetune=replace(self.finetune, seed=seed),
            seeds=(seed,),
        )

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def check_keys(given: Any, schema: Any, path: str = "") -> None:
    """Reject keys absent from the default tree (dict-valued leaves such as loss weights
    accept any term name and are checked later)."""
    if not isinstance(given, dict):
        return
    if not isinstance(schema, dict):
        raise ConfigError(f"{path or '<root>'}: expected a scalar or list, got a mapping")
    for k, v in given.items():
        if k not in schema:
            raise ConfigError(f"unknown key {path + k!r}")
        if path + k == "train.loss.weights" or path + k == "finetune.loss.weights":
            continue
        check_keys(v, schema[k], f"{path}{k}.")


def apply_override(tree: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = tree
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown key {key!r}")
    node[parts[-1]] = yaml.safe_load(raw)


def load_config(path: str | Path | None, overrides: Sequence[str] = ()) -> RunConfig:
    tree = RunConfig().to_dict()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            given = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from None
        if not isinstance(given, dict):
            raise ConfigError("config root must be a mapping")
        check_keys(given, tree)
        tree = _merge(tree, given)
    for o in overrides:
        apply_override(tree, o)
    cfg = RunConfig.from_dict(tree)
    try:
        cfg.train.validate()
        cfg.finetune.validate()
        cfg.joint.scene.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and not k == "weights":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def build_datasets(cfg: RunConfig, include_reason: bool = True) -> dict[str, Dataset]:
    out = dict(make_datasets(cfg.joint))
    if include_reason:
        out.update(make_datasets(cfg.reason))
    return out
