"""Run configuration with documented defaults and JSON round-tripping."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

ENDPOINT_ENV_VAR = "FLOODLOOP_EXTERNAL_ENDPOINT"

STRATEGIES = ("empty", "ruled", "scripted", "external")
SCENARIO_KINDS = ("extreme", "intermittent", "light")
ABLATIONS = ("dual_indexing", "entropy_control", "feedback_loop")
THRESHOLD_STATS = ("gap", "j")


@dataclass
class WorldConfig:
    width: int = 64
    height: int = 64
    n_regions: int = 64
    inflow_coeff: float = 0.01
    drainage_rate: float = 0.05
    diffusion_rate: float = 0.2
    road_spacing: int = 4
    elevation_relief: float = 12.0
    elevation_smoothing: int = 1
    road_depression: float = 1.5


@dataclass
class MobilityConfig:
    initial_population: int = 500
    initial_stagger: int = 60
    spawn_rate: int = 3
    n_pois: int = 16
    n_buses: int = 8
    bus_stops: int = 4
    perception_radius: int = 3
    resident_block_depth: float = 0.3
    bus_block_depth: float = 0.25
    wait_probability: float = 0.2


@dataclass
class PolicyConfig:
    tau: float = 1.2
    lambda_init: float = 1.0
    alpha: float = 0.05
    score_threshold: float = 0.7
    routing_penalty: float = 4.0


@dataclass
class KnowledgeConfig:
    embed_dim: int = 64
    top_k: int = 5
    subgraph_hops: int = 1
    graph_file: str | None = None
    segments_file: str | None = None


@dataclass
class FeedbackConfig:
    window_length: int = 10
    trigger_floor: float = 0.015
    lambda_thr: float = 1.0
    threshold_stat: str = "gap"
    cycle_len: int = 10
    weights: tuple[float, float, float, float] = (0.3, 0.3, 0.2, 0.2)


@dataclass
class RunConfig:
    scenario: str = "extreme"
    steps: int = 100
    seed: int = 7
    strategy: str = "ruled"
    ablations: tuple[str, ...] = ()
    out_dir: str = "out"
    scenario_file: str | None = None
    external_endpoint: str | None = None
    external_timeout: float = 5.0
    fallback_strategy: str = "ruled"
    heatmap_steps: tuple[int, ...] = (5, 30, 40, 45)
    workers: int = 1
    world: WorldConfig = field(default_factory=WorldConfig)
    mobility: MobilityConfig = field(default_factory=MobilityConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    knowledge: KnowledgeConfig = field(default_factory=KnowledgeConfig)
    feedback: FeedbackConfig = field(default_factory=FeedbackConfig)

    def resolved_endpoint(self) -> str | None:
        return self.external_endpoint or os.environ.get(ENDPOINT_ENV_VAR)

    def validate(self) -> None:
        if self.scenario not in SCENARIO_KINDS:
            raise ConfigError("scenario", f"must be one of {SCENARIO_KINDS}, got {self.scenario!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError("strategy", f"must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.fallback_strategy not in ("empty", "ruled"):
            raise ConfigError("fallback_strategy", f"must be a local strategy, got {self.fallback_strategy!r}")
        if self.steps < 10:
            raise ConfigError("steps", f"must be >= 10, got {self.steps}")
        for ab in self.ablations:
            if ab not in ABLATIONS:
                raise ConfigError("ablations", f"unknown ablation {ab!r}, valid: {ABLATIONS}")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")
        if self.world.width < 4 or self.world.height < 4:
            raise ConfigError("world.width", "grid must be at least 4x4")
        if self.world.n_regions < 1:
            raise ConfigError("world.n_regions", "must be >= 1")
        if self.mobility.initial_population < 0:
            raise ConfigError("mobility.initial_population", "must be >= 0")
        if not (0 < self.policy.tau):
            raise ConfigError("policy.tau", "must be positive")
        if not (0 < self.policy.alpha < 1):
            raise ConfigError("policy.alpha", "must be in (0, 1)")
        if self.feedback.threshold_stat not in THRESHOLD_STATS:
            raise ConfigError(
                "feedback.threshold_stat", f"must be one of {THRESHOLD_STATS}, got {self.feedback.threshold_stat!r}"
            )
        if self.feedback.cycle_len < 1:
            raise ConfigError("feedback.cycle_len", "must be >= 1")
        if self.feedback.window_length < 1:
            raise ConfigError("feedback.window_length", "must be >= 1")
        if len(self.feedback.weights) != 4 or any(w < 0 for w in self.feedback.weights):
            raise ConfigError("feedback.weights", "need four non-negative weights")
        if abs(sum(self.feedback.weights) - 1.0) > 1e-9:
            raise ConfigError("feedback.weights", f"must sum to 1, got {sum(self.feedback.weights)}")
        if self.strategy == "external" and not self.resolved_endpoint():
            raise ConfigError(
                "external_endpoint", f"external strategy needs an endpoint (flag or ${ENDPOINT_ENV_VAR})"
            )

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


_SECTION_TYPES = {
    "world": WorldConfig,
    "mobility": MobilityConfig,
    "policy": PolicyConfig,
    "knowledge": KnowledgeConfig,
    "feedback": FeedbackConfig,
}

_TUPLE_FIELDS = {"ablations", "heatmap_steps", "weights"}


def _build_section(cls, data: dict, path: str):
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown field")
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(path or cls.__name__, str(exc)) from exc


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        if name in data:
            sections[name] = _build_section(cls, data.pop(name), name)
    cfg = _build_section(RunConfig, data, "")
    for name, section in sections.items():
        setattr(cfg, name, section)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON: {exc}") from exc
    cfg = config_from_dict(data)
    cfg.validate()
    return cfg


def save_config(path: str | Path, cfg: RunConfig) -> None:
    Path(path).write_text(cfg.to_json() + "\n")
