"""Experiment configuration files and the bundled configs.

Every key has a default except ``model.family``: a config that names no
family is almost certainly a typo'd file, so loading it fails loudly.
Unknown keys are always errors.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from .accounting import TrainingSchedule
from .grouped_ops import ConfigError
from .model import ModelConfig
from .tensor import PRECISIONS
from .train import MaskingConfig, OptimizerConfig

REQUIRED_KEYS = ("model.family",)


class MissingKeyError(ConfigError):
    def __init__(self, key: str):
        super().__init__(f"missing required config key: {key}")
        self.key = key


def _strict(cls, data: Mapping, where: str) -> dict:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    return dict(data)


@dataclass(frozen=True)
class CorpusConfig:
    kind: str = "synthetic"          # "synthetic" or "file"
    path: str | None = None
    n_sequences: int = 1024
    eval_sequences: int = 128
    min_length: int | None = None
    branching: int = 3
    concentration: float = 0.5
    corpus_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("synthetic", "file"):
            raise ConfigError(f"corpus.kind must be 'synthetic' or 'file', got {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise ConfigError("corpus.path is required when corpus.kind is 'file'")


@dataclass(frozen=True)
class TrainingConfig:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    schedule: TrainingSchedule = field(default_factory=lambda: TrainingSchedule.two_phase(512))
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    batch_size: int = 16
    sequence_length: int = 32
    nsp: bool = True
    mode: str = "pretrain"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.mode not in ("pretrain", "finetune"):
            raise ConfigError(f"training.mode must be 'pretrain' or 'finetune', got {self.mode!r}")
        if self.batch_size <= 0 or self.sequence_length <= 0:
            raise ConfigError("training.batch_size and training.sequence_length must be positive")


@dataclass(frozen=True)
class AnalysisConfig:
    enabled: bool = False
    max_sequences: int = 1000
    length: int | None = None


@dataclass(frozen=True)
class FinetuneConfig:
    """Placeholder for a span-prediction head; only validated, never trained here."""

    task: str = "span_prediction"
    learning_rates: tuple[float, ...] = (1e-4, 1.5e-4, 2e-4)
    batch_size: int = 32
    epochs: int = 2
    dropout_rate: float = 0.1


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    training: TrainingConfig = field(default_factory=TrainingConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    finetune: FinetuneConfig | None = None
    name: str = ""
    output_dir: str = "runs"
    seed: int = 0
    precision: str = "oracle64"

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["model"] = self.model.to_dict()
        data["training"]["schedule"] = self.training.schedule.to_list()
        data["training"]["masking"]["special_ids"] = list(self.training.masking.special_ids)
        if self.finetune is not None:
            data["finetune"]["learning_rates"] = list(self.finetune.learning_rates)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        try:
            return cls._from_dict(data)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def _from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        top = _strict(cls, data, "config")
        model = top.get("model")
        if not isinstance(model, Mapping) or "family" not in model:
            raise MissingKeyError("model.family")
        top["model"] = ModelConfig.from_dict(model)
        train = _strict(TrainingConfig, top.get("training", {}), "training")
        for key, sub in (("optimizer", OptimizerConfig), ("masking", MaskingConfig), ("corpus", CorpusConfig)):
            if key in train:
                train[key] = sub(**_strict(sub, train[key], f"training.{key}"))
        if "schedule" in train:
            train["schedule"] = TrainingSchedule.from_list(train["schedule"])
        top["training"] = TrainingConfig(**train)
        top["analysis"] = AnalysisConfig(**_strict(AnalysisConfig, top.get("analysis", {}), "analysis"))
        if top.get("finetune") is not None:
            ft = _strict(FinetuneConfig, top["finetune"], "finetune")
            if "learning_rates" in ft:
                ft["learning_rates"] = tuple(ft["learning_rates"])
            top["finetune"] = FinetuneConfig(**ft)
        return cls(**top)


def bundled_names() -> list[str]:
    root = resources.files("groupbert_kit") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def read_config_json(ref: str | Path) -> dict:
    """Parse a config given as a file path or a bundled name (``groupbert-base``)."""
    path = Path(ref)
    if path.is_file():
        text = path.read_text()
    else:
        res = resources.files("groupbert_kit") / "configs" / f"{ref}.json"
        if not res.is_file():
            raise FileNotFoundError(f"no config file or bundled config named {str(ref)!r} "
                                    f"(bundled: {', '.join(bundled_names())})")
        text = res.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{ref}: invalid JSON ({exc})") from None


def load_config(ref: str | Path) -> ExperimentConfig:
    config = ExperimentConfig.from_dict(read_config_json(ref))
    if not config.name:
        object.__setattr__(config, "name", Path(str(ref)).stem)
    return config


def schema_path() -> Path:
    return Path(str(resources.files("groupbert_kit") / "schemas" / "experiment.schema.json"))
