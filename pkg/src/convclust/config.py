"""Experiment configuration: parsing, validation, canonical hashing."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

DEFAULT_DATA_ROOT = "data"


@dataclass
class TrainBlock:
    lr: float = 0.1
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 64
    dropout: float = 0.5
    patience: int | None = 5
    val_fraction: float = 0.1


@dataclass
class DictLearnBlock:
    k: int = 32
    s: int = 5
    algorithm: str = "conv-kmeans"       # or "kmeans"
    epochs: int = 10
    samples_per_epoch: int = 100_000
    zca_eps: float = 0.1
    gcn_eps: float = 1e-2


@dataclass
class DatasetBlock:
    kind: str = "mnist"                  # mnist | stl10 | synthetic-pairs
    data_root: str | None = None
    labeled_size: int | None = None
    seed: int = 0
    # synthetic-pairs parameters
    n_per_class: int = 200
    test_per_class: int = 60
    n_classes: int = 10
    image_size: int = 24

    def root(self) -> Path:
        return Path(
            self.data_root
            or os.environ.get("CONVCLUST_DATA", DEFAULT_DATA_ROOT)
        )


@dataclass
class LayerOneBlock:
    dict: DictLearnBlock = field(default_factory=DictLearnBlock)
    stride: int = 1
    pool: int | None = 2


@dataclass
class ConnectionsBlock:
    group_size: int = 4
    kg: int = 16
    s2: int = 5
    pool: int = 2
    hidden: int = 256
    train: TrainBlock = field(default_factory=TrainBlock)


@dataclass
class LayerTwoBlock:
    dict: DictLearnBlock = field(
        default_factory=lambda: DictLearnBlock(k=16, s=5)
    )
    pool: int = 2


@dataclass
class BranchBlock:
    dict: DictLearnBlock = field(
        default_factory=lambda: DictLearnBlock(k=64, s=9)
    )
    pool: int = 5


@dataclass
class ClassifierBlock:
    hidden: int = 256
    train: TrainBlock = field(default_factory=TrainBlock)


@dataclass
class StudyBlock:
    filter_counts: list = field(default_factory=lambda: [8, 16, 32, 64, 96])
    filter_sizes: list = field(default_factory=lambda: [5, 7, 9, 11, 13])
    fixed_size: int = 11
    fixed_count: int = 96
    seeds: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class GridBlock:
    seeds: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    output_dir: str | None = None
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    layer1: LayerOneBlock = field(default_factory=LayerOneBlock)
    connections: ConnectionsBlock | None = field(
        default_factory=ConnectionsBlock
    )
    layer2: LayerTwoBlock | None = field(default_factory=LayerTwoBlock)
    branch: BranchBlock | None = field(default_factory=BranchBlock)
    classifier: ClassifierBlock = field(default_factory=ClassifierBlock)
    divisor_grid: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    group_divisor: float = 1.0
    unlabeled_cap: int = 20_000
    encode_chunk: int = 256
    divisor_cv_cap: int = 2_000
    study: StudyBlock | None = None
    grid: GridBlock | None = None

    def out_dir(self) -> Path:
        return Path(self.output_dir or f"runs/{self.name}")


def _build(cls, data):
    if data is None:
        return None
    fields = {f.name: f for f in cls.__dataclass_fields__.values()}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ValueError(f"unknown config key {key!r} for {cls.__name__}")
        sub = {
            "dataset": DatasetBlock,
            "layer1": LayerOneBlock,
            "connections": ConnectionsBlock,
            "layer2": LayerTwoBlock,
            "branch": BranchBlock,
            "classifier": ClassifierBlock,
            "train": TrainBlock,
            "dict": DictLearnBlock,
            "study": StudyBlock,
            "grid": GridBlock,
        }.get(key)
        if sub is not None and isinstance(value, dict):
            kwargs[key] = _build(sub, value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data or {})


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    """Canonical hash: stable JSON serialization of the parsed structure."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True,
                      separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
