"""Run configuration: one JSON file drives the cluster, workload and pipeline."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from statistics import NormalDist
from typing import Any, get_type_hints

from .errors import ConfigError


class PipelineMode(str, Enum):
    COLOCATED_SYNC = "colocated-sync"
    DISAGG_SYNC = "disagg-sync"
    ONE_STEP_ASYNC = "one-step-async"
    MICRO_BATCH_ASYNC = "micro-batch-async"

    @classmethod
    def parse(cls, name: str) -> PipelineMode:
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ConfigError(f"unknown mode {name!r}; valid modes: {valid}") from None


MEDIAN_S = 8.0
TAIL_S = 170.0
# lognormal sigma placing the 99.9th percentile at TAIL_S for median MEDIAN_S
TAIL_SIGMA = math.log(TAIL_S / MEDIAN_S) / NormalDist().inv_cdf(0.999)


@dataclass
class ClusterConfig:
    nodes: int = 2
    devices_per_node: int = 8
    mem_bytes: int = 64 * 2**30
    host_mem_bytes: int = 512 * 2**30
    training_devices: int = 2
    bandwidths: dict[str, float] = field(
        default_factory=lambda: {"d2d": 5.0e10, "h2d": 2.0e10, "d2h": 2.0e10, "rdma": 1.0e10}
    )
    latencies: dict[str, float] = field(
        default_factory=lambda: {"d2d": 2e-5, "h2d": 5e-5, "d2h": 5e-5, "rdma": 1e-4}
    )


@dataclass
class WorkflowConfig:
    agents: list[str] = field(default_factory=lambda: ["planner", "coder", "reviewer"])
    edges: list[list[str]] = field(default_factory=lambda: [["planner", "coder"], ["coder", "reviewer"]])
    k: int = 16


@dataclass
class SkewConfig:
    enabled: bool = False
    core_agent_share: float = 0.76
    core_agent: str = "coder"
    turns: int = 5


@dataclass
class LatencyConfig:
    distribution: str = "lognormal"
    params: dict[str, float] = field(default_factory=lambda: {"mu": math.log(MEDIAN_S), "sigma": TAIL_SIGMA})


@dataclass
class PipelineConfig:
    mode: str = "micro-batch-async"
    global_batch: int = 64
    micro_batch: int = 16
    delta: int = 5
    inter_query: int = 4
    intra_query: int = 16
    max_tokens: int = 8192
    lr: float = 1e-6
    seed: int = 2048
    allow_stale_carryover: bool = False
    stall_budget_s: float = 3600.0


@dataclass
class RolloutConfig:
    instances_per_agent: int = 4
    concurrency: int = 16
    timeout_factor: float = 10.0
    retry_limit: int = 3
    rebalance: bool = True
    rebalance_interval_s: float = 1.0


@dataclass
class TrainingConfig:
    allocation: str = "agent-centric"
    group_size: int = 1
    train_s_per_sample: float = 0.75
    update_s: float = 1.0
    control_s: float = 0.5
    switch_s: float = 5.0
    vocab: int = 32
    dim: int = 16
    models: dict[str, list[int]] = field(default_factory=dict)


@dataclass
class RunConfig:
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    workflow: WorkflowConfig = field(default_factory=WorkflowConfig)
    skew: SkewConfig = field(default_factory=SkewConfig)
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    steps: int = 5

    @property
    def mode(self) -> PipelineMode:
        return PipelineMode.parse(self.pipeline.mode)

    def model_shape(self, agent: str) -> tuple[int, int]:
        v, d = self.training.models.get(agent, [self.training.vocab, self.training.dim])
        return int(v), int(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **sections: dict[str, Any]) -> RunConfig:
        """Copy with selected fields overridden, e.g. ``replace(pipeline={"mode": ...})``."""
        data = self.to_dict()
        for section, values in sections.items():
            if isinstance(values, dict) and isinstance(data.get(section), dict):
                data[section].update(values)
            else:
                data[section] = values
        return from_dict(data)


_NUMBER = (int, float)


def _check_scalar(value: Any, hint: Any, where: str) -> Any:
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
    elif hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
    elif hint is float:
        if isinstance(value, bool) or not isinstance(value, _NUMBER):
            raise ConfigError(f"{where}: expected a number")
        value = float(value)
    elif hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
    return value


def _build(cls: type, data: Any, where: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown field(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, path)
        elif hint in (bool, int, float, str):
            kwargs[name] = _check_scalar(value, hint, path)
        else:
            origin = getattr(hint, "__origin__", None)
            if origin is dict and not isinstance(value, dict):
                raise ConfigError(f"{path}: expected an object")
            if origin is list and not isinstance(value, list):
                raise ConfigError(f"{path}: expected a list")
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    validate(cfg)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate(cfg: RunConfig) -> None:
    PipelineMode.parse(cfg.pipeline.mode)
    c, w, p, r, t = cfg.cluster, cfg.workflow, cfg.pipeline, cfg.rollout, cfg.training
    _require(c.nodes >= 1 and c.devices_per_node >= 1, "cluster needs nodes and devices")
    _require(c.mem_bytes > 0 and c.host_mem_bytes > 0, "memory sizes must be positive")
    for table in (c.bandwidths, c.latencies):
        _require(set(table) == {"d2d", "h2d", "d2h", "rdma"}, "link tables need exactly d2d, h2d, d2h, rdma")
    _require(all(v > 0 for v in c.bandwidths.values()), "bandwidths must be positive")
    _require(all(v >= 0 for v in c.latencies.values()), "link latencies must be non-negative")

    _require(len(w.agents) >= 1, "workflow needs at least one agent")
    _require(len(set(w.agents)) == len(w.agents), "agent ids must be unique")
    _require(all(a and "_" not in a and ":" not in a for a in w.agents), "agent ids must be non-empty without '_' or ':'")
    for e in w.edges:
        _require(len(e) == 2 and e[0] in w.agents and e[1] in w.agents, f"bad workflow edge {e}")
    _require(w.k >= 1, "k must be >= 1")

    s = cfg.skew
    _require(0.0 < s.core_agent_share < 1.0, "core_agent_share must lie in (0, 1)")
    if s.enabled:
        _require(s.core_agent in w.agents, "core_agent must be a workflow agent")
        _require(len(w.agents) >= 2, "skewed routing needs at least two agents")
        _require(s.turns >= 1, "turns must be >= 1")

    lat = cfg.latency
    needed = {"lognormal": {"mu", "sigma"}, "pareto": {"x_m", "alpha"}, "fixed": {"c"}}
    _require(lat.distribution in needed, f"latency distribution must be one of {sorted(needed)}")
    _require(set(lat.params) == needed[lat.distribution], f"{lat.distribution} needs params {sorted(needed[lat.distribution])}")
    if lat.distribution == "lognormal":
        _require(lat.params["sigma"] >= 0, "sigma must be non-negative")
    elif lat.distribution == "pareto":
        _require(lat.params["x_m"] > 0 and lat.params["alpha"] > 0, "pareto params must be positive")
    else:
        _require(lat.params["c"] > 0, "fixed latency must be positive")

    _require(p.global_batch >= 1 and p.micro_batch >= 1, "batch sizes must be positive")
    _require(p.global_batch % p.micro_batch == 0, "global_batch must be divisible by micro_batch")
    _require(p.delta >= 0, "delta must be non-negative")
    _require(p.inter_query >= 1 and p.intra_query >= 1, "parallelism limits must be positive")
    _require(p.max_tokens >= 1, "max_tokens must be >= 1")
    _require(p.lr > 0, "lr must be positive")
    _require(p.stall_budget_s > 0, "stall_budget_s must be positive")

    _require(r.instances_per_agent >= 0 and r.concurrency >= 1, "bad instance settings")
    _require(r.timeout_factor > 0 and r.retry_limit >= 0, "bad timeout settings")
    _require(r.rebalance_interval_s > 0, "rebalance_interval_s must be positive")

    _require(t.allocation in ("agent-centric", "static"), "allocation must be agent-centric or static")
    _require(t.group_size >= 1, "group_size must be >= 1")
    _require(t.vocab >= 2 and t.dim >= 1, "model shape too small")
    for agent, shape in t.models.items():
        _require(agent in w.agents and len(shape) == 2, f"bad model shape entry for {agent}")
    _require(min(t.train_s_per_sample, t.update_s, t.control_s, t.switch_s) >= 0, "costs must be non-negative")
    _require(t.train_s_per_sample > 0, "train_s_per_sample must be positive")

    total = c.nodes * c.devices_per_node
    rollout = len(w.agents) * r.instances_per_agent
    _require(c.training_devices >= t.group_size, "training pool smaller than one process group")
    if t.allocation == "static":
        _require(c.training_devices >= len(w.agents) * t.group_size, "static allocation needs one slice per agent")
    if PipelineMode(p.mode) is PipelineMode.COLOCATED_SYNC:
        _require(max(rollout, c.training_devices) <= total, "not enough devices")
    else:
        _require(rollout + c.training_devices <= total, f"{rollout} rollout + {c.training_devices} training devices exceed {total}")
    _require(cfg.steps >= 1, "steps must be >= 1")
