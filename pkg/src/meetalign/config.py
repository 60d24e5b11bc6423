"""Run configuration: an INI file with sections, every field defaulted."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import ModelConfig


@dataclass
class ModelSection:
    vocab_size: int = 260
    context_length: int = 256
    n_layers: int = 2
    n_heads: int = 4
    hidden_dim: int = 64

    def build(self) -> ModelConfig:
        return ModelConfig(**asdict(self))


@dataclass
class AdapterSection:
    kind: str = "lora"            # lora | soft_prompt | handcrafted
    prompt_length: int = 8
    rank: int = 4
    alpha: float = 0.0            # 0 means alpha = rank
    levels: int = 0               # K control levels for pointwise data


@dataclass
class DataSection:
    task: str = "sort"            # sort | upper (ignored when path is set)
    n: int = 2000
    path: str = ""
    kind: str = "pairwise"
    max_input_len: int = 256
    seed: int = 0


@dataclass
class TrainSection:
    kind: str = "meet"            # meet | first_only | second_only | coh | dpo
    pet_lr: float = 1e-3
    cg_lr: float = 2e-5
    epochs: int = 5
    batch_size: int = 16
    dpo_beta: float = 0.1
    dpo_lr: float = 2e-5
    sft_epochs: int = 1
    clip_grad: float = 0.0        # 0 disables clipping
    base_steps: int = 3000
    base_lr: float = 2e-3
    base_batch_size: int = 32
    base_seed: int = 0


@dataclass
class EvalSection:
    temperature: float = 0.0
    max_len: int = 32
    temps: str = "0,0.25,0.5,0.75,1.0"
    judge_endpoint: str = ""
    judge_template: str = "dialogue"


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    adapter: AdapterSection = field(default_factory=AdapterSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    SECTIONS = ("model", "adapter", "data", "train", "eval")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def override(self, dotted: str, value) -> None:
        """Set ``section.key`` (or a top-level key) from a string or typed value."""
        if "." in dotted:
            section, key = dotted.split(".", 1)
            if section not in self.SECTIONS:
                raise KeyError(f"unknown config section {section!r}")
            target = getattr(self, section)
        else:
            target, key = self, dotted
        kinds = {f.name: f.type for f in fields(target)}
        if key not in kinds or key in self.SECTIONS:
            raise KeyError(f"unknown config key {dotted!r}")
        setattr(target, key, _coerce(getattr(target, key), value))

    def write(self, path: str | Path) -> None:
        cp = configparser.ConfigParser()
        cp["run"] = {"seed": str(self.seed)}
        for s in self.SECTIONS:
            cp[s] = {k: str(v) for k, v in asdict(getattr(self, s)).items()}
        with open(path, "w") as fh:
            cp.write(fh)


def _coerce(current, value):
    if not isinstance(value, str):
        return type(current)(value)
    if isinstance(current, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def load_config(path: str | Path | None = None) -> RunConfig:
    """Defaults, overlaid with ``path`` if given.  Unknown sections or keys are errors."""
    cfg = RunConfig()
    if path is None:
        return cfg
    cp = configparser.ConfigParser()
    with open(path) as fh:
        cp.read_file(fh)
    for section in cp.sections():
        if section == "run":
            for key, value in cp[section].items():
                cfg.override(key, value)
        elif section in RunConfig.SECTIONS:
            for key, value in cp[section].items():
                cfg.override(f"{section}.{key}", value)
        else:
            raise KeyError(f"unknown config section [{section}]")
    return cfg
