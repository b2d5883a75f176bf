"""Run configuration: one JSON document, flag and env overrides on top.

The resolved config (all defaults filled) is echoed next to every
command's outputs so a run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .codebook import CompressionConfig
from .engine import AttributeBuildSpec
from .streams import AttributeSchema, ConfigError, StreamSchema
from .trainer import TrainConfig

ENV_OUTPUT_DIR = "STREAMBASIS_OUTPUT_DIR"
ENV_SEED = "STREAMBASIS_SEED"

EVAL_MODELS = ("compressed", "dense", "dim-reduct", "quantize", "hash-trick")


@dataclass
class EvalConfig:
    target_attribute: str = ""
    n_negatives: int = 10
    query_windows: int = 5
    recall_ks: list[int] = field(default_factory=lambda: [1, 5])
    tie_break: str = "optimistic"

    def __post_init__(self) -> None:
        if self.n_negatives < 1:
            raise ConfigError("eval.n_negatives must be >= 1")
        if self.query_windows < 1:
            raise ConfigError("eval.query_windows must be >= 1")
        if any(k < 1 for k in self.recall_ks):
            raise ConfigError("eval.recall_ks must be >= 1")
        if self.tie_break not in ("optimistic", "pessimistic"):
            raise ConfigError("eval.tie_break must be optimistic or pessimistic")


@dataclass
class RunConfig:
    dataset: str
    seed: int
    output_dir: str
    attributes: list[dict]
    timestamp_column: str = "ts"
    window_seconds: float = 3600.0
    pretrain_fraction: float = 0.5
    clusters_fraction: float = 0.01
    basis_fraction: float = 0.10
    attribute_overrides: dict[str, dict] = field(default_factory=dict)
    allocation: str = "weighted"
    workers: int = 1
    merge_policy: str = "mean"
    train: TrainConfig = field(default_factory=TrainConfig)
    compression: CompressionConfig = field(default_factory=CompressionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        if self.seed is None or self.seed < 0:
            raise ConfigError("seed is mandatory and must be a non-negative integer")
        if self.window_seconds <= 0:
            raise ConfigError("window_seconds must be positive")
        if not (0.0 < self.pretrain_fraction < 1.0):
            raise ConfigError("pretrain_fraction must be in (0, 1)")
        if not (0.0 < self.clusters_fraction <= 1.0):
            raise ConfigError("clusters_fraction must be in (0, 1]")
        if not (0.0 < self.basis_fraction <= 1.0):
            raise ConfigError("basis_fraction must be in (0, 1]")
        if self.allocation not in ("weighted", "uniform"):
            raise ConfigError("allocation must be weighted or uniform")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.merge_policy not in ("mean", "count_weighted"):
            raise ConfigError("merge_policy must be mean or count_weighted")
        if not self.attributes:
            raise ConfigError("at least one attribute must be declared")

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        data = dict(raw)
        train = TrainConfig(**data.pop("train", {}))
        compression = CompressionConfig(**data.pop("compression", {}))
        eval_cfg = EvalConfig(**data.pop("eval", {}))
        try:
            return cls(train=train, compression=compression, eval=eval_cfg, **data)
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}") from exc

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def apply_env(self) -> None:
        """Environment overrides are limited to output dir and seed."""
        out = os.environ.get(ENV_OUTPUT_DIR)
        if out:
            self.output_dir = out
        seed = os.environ.get(ENV_SEED)
        if seed:
            self.seed = int(seed)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        return data

    def echo(self, out_dir: Path, command: str) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{command}_config.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")

    # -- schema plumbing -------------------------------------------------

    def build_schemas(self) -> list[AttributeSchema]:
        schemas = []
        for index, entry in enumerate(self.attributes):
            entry = dict(entry)
            entry.setdefault("attribute_id", index)
            if "origin" in entry:
                entry["origin"] = tuple(entry["origin"])
            try:
                schemas.append(AttributeSchema(**entry))
            except TypeError as exc:
                raise ConfigError(f"bad attribute declaration {entry}: {exc}") from exc
        return schemas

    def stream_schema(self) -> StreamSchema:
        return StreamSchema(self.build_schemas(), self.timestamp_column)

    def attribute_id(self, name: str) -> int:
        for schema in self.build_schemas():
            if schema.name == name:
                return schema.attribute_id
        raise ConfigError(f"unknown attribute name {name!r}")

    def build_specs(self) -> dict[int, AttributeBuildSpec]:
        specs: dict[int, AttributeBuildSpec] = {}
        for schema in self.build_schemas():
            override = self.attribute_overrides.get(schema.name, {})
            specs[schema.attribute_id] = AttributeBuildSpec(
                clusters_fraction=override.get("clusters_fraction", self.clusters_fraction),
                basis_fraction=override.get("basis_fraction", self.basis_fraction),
                explicit_mapping_path=override.get("explicit_mapping"),
            )
        return specs

    def target_attribute_id(self) -> int:
        if not self.eval.target_attribute:
            # Default to the last declared attribute.
            return len(self.attributes) - 1
        return self.attribute_id(self.eval.target_attribute)
