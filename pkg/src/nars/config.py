"""Run configuration: TOML file with [data] [sample] [model] [stage] [train] sections."""
from __future__ import annotations

import ast
import dataclasses
import os
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass
class DataConfig:
    dataset_dir: str = ""
    target: str = "paper"
    # node type name -> feature file, relative to dataset_dir
    features: dict[str, str] = field(default_factory=dict)
    labels: str = "labels.tsv"
    num_classes: int | None = None
    task: str | None = None
    featureless: str = "zero"  # zero | neighbor_avg | transe
    feature_dim: int | None = None
    transe_dir: str | None = None
    transe_dim: int = 64
    transe_epochs: int = 50
    transe_lr: float = 0.01
    transe_margin: float = 1.0
    drop_relations: list[str] = field(default_factory=list)
    symmetrize: bool = True
    layout: str = "auto"  # auto | stack | block


@dataclass
class SampleConfig:
    k: int = 2
    seed: int | None = None  # falls back to train.seed
    cap: int = 20
    # explicit subsets as lists of relation names; overrides sampling
    subsets: list[list[str]] | None = None


@dataclass
class ModelConfig:
    hidden: int = 64
    num_hops: int = 2
    dropout: float = 0.5
    proj_dim: int | None = None
    dtype: str = "float32"


@dataclass
class StageConfig:
    enabled: bool = False
    p: int = 1
    epochs_per_stage: int = 10
    prefetch: bool = False
    train_alpha: bool = True  # False freezes the history weight at 1


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 4096
    seed: int = 0
    select_metric: str | None = None
    ndcg_k: int | None = None
    threads: int = 1


@dataclass
class NarsConfig:
    data: DataConfig = field(default_factory=DataConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage: StageConfig = field(default_factory=StageConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def sample_seed(self) -> int:
        return self.train.seed if self.sample.seed is None else self.sample.seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NarsConfig":
        cfg = cls()
        for section, values in d.items():
            if not hasattr(cfg, section):
                raise ValueError(f"unknown config section [{section}]")
            sub = getattr(cfg, section)
            known = {f.name for f in dataclasses.fields(sub)}
            for k, v in values.items():
                if k not in known:
                    raise ValueError(f"unknown key {section}.{k}")
                setattr(sub, k, v)
        return cfg


def load_config(path: str | os.PathLike) -> NarsConfig:
    with open(path, "rb") as f:
        cfg = NarsConfig.from_dict(tomllib.load(f))
    base = os.path.dirname(os.path.abspath(path))
    if cfg.data.dataset_dir and not os.path.isabs(cfg.data.dataset_dir):
        cfg.data.dataset_dir = os.path.join(base, cfg.data.dataset_dir)
    return cfg


def apply_override(cfg: NarsConfig, assignment: str) -> None:
    """Apply ``section.key=value``; the value is parsed as a Python literal when possible."""
    if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
        raise ValueError(f"override must look like section.key=value, got {assignment!r}")
    lhs, raw = assignment.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    if raw.strip().lower() in ("true", "false"):
        value = raw.strip().lower() == "true"
    else:
        try:
            value = ast.literal_eval(raw)
        except (ValueError, SyntaxError):
            value = raw
    NarsConfig.from_dict({section: {key: value}})  # validates names
    setattr(getattr(cfg, section), key, value)
