"""Experiment configuration: a single JSON document, validated exhaustively.

Defaults are the full-scale settings (K=100, tau=0.1, M=5, R=2, F=30, nu=10,
n=200, E=5, batch 64, SGD lr 1e-4 momentum 0.9, dropout 0.5). Unknown keys
are rejected.

Schema (all sections optional except ``method``)::

    {
      "method": "um_pfssl" | "fedavg_semi" | "local_only",
      "ablation": "en+ta" | "en" | "ta" | "random",
      "seed": 0, "repeats": 1, "output_dir": "results",
      "dataset": {"kind": "synthetic", "class_count": 10, "per_class": 100,
                  "cluster_spread": 0.35, "dim": 2}
               | {"kind": "idx", "images": PATH, "labels": PATH, "limit": null},
      "partition": {"client_count": 100, "alpha": 0.5, "label_split_alpha": 0.5},
      "net": {"hidden_widths": [64], "dropout_rate": 0.5, "activation": "tanh"},
      "training": {"learning_rate": 1e-4, "momentum": 0.9, "batch_size": 64,
                   "local_epochs": 5, "warmup_epochs": 5, "objective": "sequential"},
      "protocol": {"sample_rate": 0.1, "helper_list_size": 5, "replacements": 2,
                   "search_rounds": 30, "update_period": 10, "rounds": 200,
                   "mc_samples": 10, "uncertainty_cap": null,
                   "restrict_to_sampled": false, "workers": 1}
    }
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .protocol import METHODS, RoundConfig
from .uncertainty import CORR_MODES


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SyntheticData(_Section):
    kind: Literal["synthetic"] = "synthetic"
    class_count: int = Field(10, ge=2)
    per_class: int = Field(100, ge=1)
    cluster_spread: float = Field(0.35, ge=0.0)
    dim: int = Field(2, ge=1)


class IdxData(_Section):
    kind: Literal["idx"]
    images: str
    labels: str
    limit: int | None = Field(None, ge=1)


class PartitionConfig(_Section):
    client_count: int = Field(100, ge=2)
    alpha: float = Field(0.5, gt=0.0)
    label_split_alpha: float = Field(0.5, gt=0.0)


class NetConfig(_Section):
    hidden_widths: list[int] = Field(default_factory=lambda: [64])
    dropout_rate: float = Field(0.5, ge=0.0, lt=1.0)
    activation: Literal["relu", "tanh", "identity"] = "tanh"

    @field_validator("hidden_widths")
    @classmethod
    def _positive(cls, v):
        if any(w < 1 for w in v):
            raise ValueError("hidden widths must be positive")
        return v


class TrainingConfig(_Section):
    learning_rate: float = Field(1e-4, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(64, ge=1)
    local_epochs: int = Field(5, ge=0)
    warmup_epochs: int = Field(5, ge=0)
    objective: Literal["sequential", "weighted"] = "sequential"


class ProtocolConfig(_Section):
    sample_rate: float = Field(0.1, gt=0.0, le=1.0)
    helper_list_size: int = Field(5, ge=1)
    replacements: int = Field(2, ge=0)
    search_rounds: int = Field(30, ge=0)
    update_period: int = Field(10, ge=1)
    rounds: int = Field(200, ge=0)
    mc_samples: int = Field(10, ge=1)
    uncertainty_cap: int | None = Field(None, ge=1)
    restrict_to_sampled: bool = False
    workers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _replacements_below_capacity(self):
        if self.replacements >= self.helper_list_size:
            raise ValueError(f"replacements R={self.replacements} must be < helper_list_size "
                             f"M={self.helper_list_size}")
        return self


class ExperimentConfig(_Section):
    method: str
    ablation: str = "en+ta"
    seed: int = Field(0, ge=0)
    repeats: int = Field(1, ge=1)
    output_dir: str = "results"
    dataset: Union[SyntheticData, IdxData] = Field(default_factory=SyntheticData, discriminator="kind")
    partition: PartitionConfig = Field(default_factory=PartitionConfig)
    net: NetConfig = Field(default_factory=NetConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    protocol: ProtocolConfig = Field(default_factory=ProtocolConfig)

    @field_validator("dataset", mode="before")
    @classmethod
    def _default_kind(cls, v):
        if isinstance(v, dict) and "kind" not in v:
            return {**v, "kind": "synthetic"}
        return v

    @field_validator("method")
    @classmethod
    def _known_method(cls, v):
        if not v:
            raise ValueError("method must not be empty")
        if v not in METHODS:
            raise ValueError(f"unknown method {v!r}; expected one of {METHODS}")
        return v

    @field_validator("ablation")
    @classmethod
    def _known_ablation(cls, v):
        if v not in CORR_MODES:
            raise ValueError(f"unknown ablation {v!r}; expected one of {CORR_MODES}")
        return v

    @model_validator(mode="after")
    def _sampling(self):
        RoundConfig(client_count=self.partition.client_count, sample_rate=self.protocol.sample_rate)
        return self

    def round_config(self, seed: int | None = None) -> RoundConfig:
        p, t = self.protocol, self.training
        return RoundConfig(
            client_count=self.partition.client_count, sample_rate=p.sample_rate,
            helper_list_size=p.helper_list_size, replacements=p.replacements,
            search_rounds=p.search_rounds, update_period=p.update_period, rounds=p.rounds,
            local_epochs=t.local_epochs, mc_samples=p.mc_samples, batch_size=t.batch_size,
            objective=t.objective, restrict_to_sampled=p.restrict_to_sampled, workers=p.workers,
            seed=self.seed if seed is None else seed,
        )

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    def with_overrides(self, **changes) -> "ExperimentConfig":
        """Validated copy with dotted-path overrides, e.g. ``{"protocol.update_period": 5}``."""
        data = self.model_dump(mode="json")
        for path, value in changes.items():
            node = data
            *parents, leaf = path.split(".")
            for key in parents:
                node = node[key]
            node[leaf] = value
        return config_from_dict(data)


def _describe(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def config_from_dict(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_describe(err)) from None
    except ConfigError as err:
        raise ConfigError(f"protocol: {err}") from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(cfg.to_json())
