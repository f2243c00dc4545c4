"""Experiment configuration: one YAML file with dataset / model / training / alignment / eval blocks.

Unknown keys anywhere are errors. ``apply_overrides`` takes ``dotted.key=value``
strings whose values are parsed as YAML scalars.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from createrec.alignment import AlignmentConfig
from createrec.graph import GraphEncoderConfig
from createrec.sequential import SeqEncoderConfig
from createrec.training import TrainConfig


class ConfigError(ValueError):
    pass


SYNTHETIC_GENERATORS = ("movielens_like", "planted_rule")


@dataclass
class DatasetConfig:
    path: Optional[str] = None
    format: str = "tsv"
    delimiter: Optional[str] = None
    header: Optional[bool] = None
    # {"generator": "movielens_like", ...keyword arguments}; used when path is empty
    synthetic: Optional[dict] = None
    val_quantile: float = 0.8
    test_quantile: float = 0.9
    max_len: int = 50
    graph_fraction: float = 1.0

    def split_key(self) -> dict:
        """Fields that determine the prepared bundle."""
        keep = ("path", "format", "delimiter", "header", "synthetic", "val_quantile", "test_quantile")
        return {k: getattr(self, k) for k in keep}


@dataclass
class ModelConfig:
    dim: int = 64
    seq: SeqEncoderConfig = field(default_factory=SeqEncoderConfig)
    # None trains the sequential encoder alone
    graph: Optional[GraphEncoderConfig] = field(default_factory=GraphEncoderConfig)


@dataclass
class EvalConfig:
    ks: list[int] = field(default_factory=lambda: [10, 100])
    filter_seen: bool = True
    report_unfiltered: bool = True
    all_successive: bool = False


@dataclass
class ExperimentConfig:
    name: str = "create"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    # refit on train + validation for the tuned epoch count before testing
    retrain: bool = True
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: list[int] = field(default_factory=lambda: [0])

    def validate(self) -> None:
        d = self.dataset
        if (d.path is None) == (d.synthetic is None):
            raise ConfigError("dataset needs exactly one of 'path' or 'synthetic'")
        if d.synthetic is not None and d.synthetic.get("generator") not in SYNTHETIC_GENERATORS:
            raise ConfigError(f"dataset.synthetic.generator must be one of {SYNTHETIC_GENERATORS}")
        if not (0.0 < d.graph_fraction <= 1.0):
            raise ConfigError(f"dataset.graph_fraction must be in (0, 1], got {d.graph_fraction}")
        if not (0.0 < d.val_quantile < d.test_quantile < 1.0):
            raise ConfigError("need 0 < val_quantile < test_quantile < 1")
        if self.model.seq.dim != self.model.dim:
            raise ConfigError(f"model.seq.dim={self.model.seq.dim} differs from shared model.dim={self.model.dim}")
        if self.model.seq.max_len != d.max_len:
            raise ConfigError(f"model.seq.max_len={self.model.seq.max_len} differs from dataset.max_len={d.max_len}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        if not self.eval.ks or min(self.eval.ks) < 1:
            raise ConfigError("eval.ks must be positive integers")
        try:
            self.model.seq.validate()
            if self.model.graph is not None:
                self.model.graph.validate()
            self.training.validate()
            self.alignment.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def config_hash(self) -> str:
        """Content hash of everything except the seed list; key order does not matter."""
        body = self.to_dict()
        body.pop("seeds")
        body["training"].pop("seed")
        text = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def data_hash(self) -> str:
        text = json.dumps(self.dataset.split_key(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def train_config(self, seed: int) -> TrainConfig:
        cfg = copy.deepcopy(self.training)
        cfg.seed = seed
        return cfg


def _build(cls, data: Any, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        nested = _NESTED.get((cls, key))
        if nested is not None:
            if value is None and (cls, key) in _NULLABLE:
                kwargs[key] = None
            else:
                kwargs[key] = _build(nested, value, path)
        elif key == "adam_betas":
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


_NESTED = {
    (ExperimentConfig, "dataset"): DatasetConfig,
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "training"): TrainConfig,
    (ExperimentConfig, "alignment"): AlignmentConfig,
    (ExperimentConfig, "eval"): EvalConfig,
    (ModelConfig, "seq"): SeqEncoderConfig,
    (ModelConfig, "graph"): GraphEncoderConfig,
}
_NULLABLE = {(ModelConfig, "graph")}


def _inherit_shared(data: dict) -> dict:
    """Fill ``model.seq.dim`` / ``model.seq.max_len`` from the shared values unless set."""
    data = copy.deepcopy(data)
    model = data.get("model")
    dataset = data.get("dataset")
    if isinstance(model, dict):
        seq = model.get("seq")
        seq = {} if seq is None else seq
        if isinstance(seq, dict):
            if "dim" in model:
                seq.setdefault("dim", model["dim"])
            if isinstance(dataset, dict) and "max_len" in dataset:
                seq.setdefault("max_len", dataset["max_len"])
            model["seq"] = seq
    elif isinstance(dataset, dict) and "max_len" in dataset:
        data["model"] = {"seq": {"max_len": dataset["max_len"]}}
    return data


def from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, _inherit_shared(data), "")
    cfg.validate()
    return cfg


def _set_dotted(data: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = data
    for p in parts[:-1]:
        if node.get(p) is None:
            node[p] = {}
        if not isinstance(node[p], dict):
            raise ConfigError(f"cannot set {dotted}: {p} is not a block")
        node = node[p]
    node[parts[-1]] = value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    data = copy.deepcopy(data)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must look like dotted.key=value, got {item!r}")
        _set_dotted(data, key.strip(), yaml.safe_load(raw))
    return data


def load_config(path: str | Path, overrides: Optional[list[str]] = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(apply_overrides(data, overrides or []))
