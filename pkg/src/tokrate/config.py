"""Experiment configuration: canonical JSON serialization whose hash names
the run directory, so every artifact is traceable to the exact config."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "TOKRATE_OUTPUT_ROOT"


@dataclass
class ExperimentConfig:
    manifest: str
    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    stage: int = 1
    out_dir: str = "runs"
    frame_rates: list[float] = field(default_factory=list)  # grid runs
    mel_n_mels: int | None = None  # defaults to model.n_mels

    def canonical_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]

    def run_dir(self) -> str:
        root = os.environ.get(OUTPUT_ROOT_ENV, self.out_dir)
        return os.path.join(root, self.hash())

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            raw = json.load(f)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            model = ModelConfig.from_dict(raw["model"])
            train = TrainConfig(**raw.get("train", {}))
            return cls(
                manifest=raw["manifest"],
                model=model,
                train=train,
                seed=raw.get("seed", 0),
                stage=raw.get("stage", 1),
                out_dir=raw.get("out_dir", "runs"),
                frame_rates=list(raw.get("frame_rates", [])),
                mel_n_mels=raw.get("mel_n_mels"),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad experiment config: {exc}") from exc
