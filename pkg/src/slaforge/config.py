"""Run configuration and manifest."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .agent import FULL_AGENT_CONFIG, AgentConfig
from .errors import BadConfig
from .forecaster import ARCHITECTURES, TrainConfig
from .sla import DEFAULT_RULES, SloRule
from .telemetry import SynthConfig
from .topology import DEFAULT_EDGES, NODE_NAMES, ServiceGraph, build_default_graph, read_edge_file


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GraphSection(_Strict):
    nodes: list[str] = Field(default_factory=lambda: list(NODE_NAMES))
    edges: Optional[list[tuple[str, str]]] = None
    edge_file: Optional[str] = None

    @model_validator(mode="after")
    def _one_source(self):
        if self.edges is not None and self.edge_file is not None:
            raise ValueError("give either 'edges' or 'edge_file', not both")
        return self

    def build(self) -> ServiceGraph:
        if self.edge_file is not None:
            return read_edge_file(self.edge_file, tuple(self.nodes))
        if self.edges is None and tuple(self.nodes) == NODE_NAMES:
            return build_default_graph()
        edges = self.edges if self.edges is not None else DEFAULT_EDGES
        return ServiceGraph.from_named_edges(edges, tuple(self.nodes))


class TelemetrySection(_Strict):
    source: Literal["synthetic", "csv"] = "synthetic"
    paths: list[str] = Field(default_factory=list)
    strict_metrics: bool = False
    steps: int = 20000
    burst_rate: float = 0.0035
    burst_magnitude: float = 1.0
    burst_duration: tuple[int, int] = (20, 60)
    burst_nodes: Optional[list[str]] = None
    self_coupling: float = 0.55
    neighbor_coupling: float = 0.35

    def synth_config(self, seed: int) -> SynthConfig:
        return SynthConfig(
            seed=seed,
            steps=self.steps,
            burst_rate=self.burst_rate,
            burst_magnitude=self.burst_magnitude,
            burst_duration=tuple(self.burst_duration),
            burst_nodes=tuple(self.burst_nodes) if self.burst_nodes is not None else None,
            self_coupling=self.self_coupling,
            neighbor_coupling=self.neighbor_coupling,
        )


class TransformSection(_Strict):
    n_quantiles: int = Field(1000, ge=2)


class ForecasterSection(_Strict):
    arch: Optional[Literal["table2-small", "table2-large"]] = None
    hidden: int = Field(128, ge=1)
    K: int = Field(3, ge=1)
    mode: Literal["stacked", "unrolled"] = "stacked"
    H: int = Field(4, ge=1)
    F: int = Field(4, ge=1)
    lr: float = Field(1e-2, gt=0)
    batch_size: int = Field(64, ge=1)
    max_epochs: int = Field(200, ge=1)
    patience: int = Field(10, ge=1)

    @model_validator(mode="after")
    def _apply_arch(self):
        if self.arch is not None:
            spec = ARCHITECTURES[self.arch]
            self.hidden, self.K = spec["hidden"], spec["K"]
        return self

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs, patience=self.patience, seed=seed
        )


class AgentSection(_Strict):
    preset: Literal["desk", "full"] = "desk"
    total_timesteps: Optional[int] = None
    learning_starts: Optional[int] = None
    target_update_interval: Optional[int] = None
    buffer_size: Optional[int] = None
    lr: Optional[float] = None
    gamma: Optional[float] = None
    batch_size: Optional[int] = None
    train_freq: Optional[int] = None
    max_grad_norm: Optional[float] = None
    hidden: Optional[tuple[int, ...]] = None
    exploration_fraction: Optional[float] = None
    observation: Literal["first", "full"] = "first"
    episodes: int = Field(100, ge=1)
    rolling_window: int = Field(100, ge=1)

    def agent_config(self, seed: int) -> AgentConfig:
        base = FULL_AGENT_CONFIG if self.preset == "full" else AgentConfig()
        overrides = {
            k: getattr(self, k)
            for k in (
                "total_timesteps", "learning_starts", "target_update_interval", "buffer_size", "lr", "gamma",
                "batch_size", "train_freq", "max_grad_norm", "hidden", "exploration_fraction",
            )
            if getattr(self, k) is not None
        }
        return dataclasses.replace(base, seed=seed, **overrides)


class RunConfig(_Strict):
    seed: int = 0
    out: str = "runs/default"
    graph: GraphSection = Field(default_factory=GraphSection)
    telemetry: TelemetrySection = Field(default_factory=TelemetrySection)
    transform: TransformSection = Field(default_factory=TransformSection)
    forecaster: ForecasterSection = Field(default_factory=ForecasterSection)
    slo_rules: list[dict[str, Any]] = Field(default_factory=lambda: [r.to_dict() for r in DEFAULT_RULES])
    agent: AgentSection = Field(default_factory=AgentSection)

    @field_validator("slo_rules")
    @classmethod
    def _rules_parse(cls, v):
        rules = [SloRule.from_dict(d) for d in v]
        ids = [r.id for r in rules]
        if not rules or len(set(ids)) != len(ids):
            raise ValueError(f"slo_rules must be non-empty with unique ids, got {ids}")
        return [r.to_dict() for r in rules]

    def rules(self) -> tuple[SloRule, ...]:
        return tuple(SloRule.from_dict(d) for d in self.slo_rules)

    def resolved(self) -> dict[str, Any]:
        return self.model_dump(mode="json")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.resolved(), sort_keys=False)

    def config_hash(self) -> str:
        """Hash of everything that affects results; the output directory is left out."""
        data = self.resolved()
        data.pop("out")
        blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def load_config(path: str | Path | None = None, **overrides: Any) -> RunConfig:
    """Read YAML (or defaults), apply top-level overrides, and validate."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise BadConfig(f"{path}: not valid YAML ({exc})") from None
        if loaded is not None and not isinstance(loaded, dict):
            raise BadConfig(f"{path}: top level must be a mapping")
        data = loaded or {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise BadConfig(str(exc)) from None
    except ValueError as exc:
        raise BadConfig(str(exc)) from None


class RunManifest(_Strict):
    command: str
    config_hash: str
    seed: int
    artifacts: dict[str, str]
    wall_clock_seconds: float
    metrics: dict[str, float] = Field(default_factory=dict)
