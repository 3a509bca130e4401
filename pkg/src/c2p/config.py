"""Single run configuration shared by all CLI stages.

A run config can live in a JSON file; CLI flags override file values and the
effective config is persisted verbatim into every output directory, so any
output can be reproduced from its own snapshot.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .captions import PromptPair
from .data import PreprocessPolicy
from .encoder import AdapterConfig
from .errors import NotFoundError
from .training import TrainConfig


@dataclass
class RunConfig:
    # dataset
    root: str = ""
    layout: str = "flat"
    split: str = "train"
    classes: list[str] | None = None
    manifest: str = ""
    captions: str = ""
    checkpoint: str = ""
    # prompts
    prompt_real: str = "Camera"
    prompt_fake: str = "Deepfake"
    # model
    backend: str = "toy"
    seed: int = 123
    # training
    lr: float = 4e-4
    batch_size: int = 128
    epochs: int = 1
    alpha: float = 8.0
    temperature: float = 1.0
    normalize_embeddings: bool = True
    # adapters
    lora_r: int = 6
    lora_alpha: float = 6.0
    lora_dropout: float = 0.8
    lora_targets: list[str] = field(default_factory=lambda: ["q_proj", "k_proj", "v_proj"])
    # preprocessing (training uses `crop`; evaluation always center-crops)
    target_size: int = 224
    small_image_rule: str = "tile_then_crop"
    crop: str = "random"
    # output
    out: str = "runs/out"

    def prompt_pair(self) -> PromptPair:
        return PromptPair(p_real=self.prompt_real, p_fake=self.prompt_fake)

    def adapter_config(self) -> AdapterConfig:
        return AdapterConfig(
            rank=self.lora_r,
            alpha=self.lora_alpha,
            dropout=self.lora_dropout,
            targets=tuple(self.lora_targets),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            alpha=self.alpha,
            seed=self.seed,
            temperature=self.temperature,
            normalize_embeddings=self.normalize_embeddings,
        )

    def policy(self, crop: str | None = None) -> PreprocessPolicy:
        return PreprocessPolicy(
            target_size=self.target_size,
            small_image_rule=self.small_image_rule,
            crop=crop or self.crop,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})

    @classmethod
    def from_json_file(cls, path: str | Path) -> "RunConfig":
        """Load a run config; snapshots written by the CLI load unchanged."""
        path = Path(path)
        if not path.is_file():
            raise NotFoundError(f"run config not found: {path}")
        data = json.loads(path.read_text())
        if isinstance(data.get("config"), dict):
            data = data["config"]
        return cls.from_dict(data)
