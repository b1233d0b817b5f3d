"""Synthetic query streams and service-time models."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .config import RunConfig
from .errors import ConfigError, UnknownWorkflow
from .policy import keyed_rng


@dataclass
class LatencyModel:
    """Per-request service seconds; every draw is keyed, so retries are reproducible."""

    distribution: str
    params: dict[str, float]
    seed: int = 0

    def __post_init__(self) -> None:
        if self.distribution not in ("lognormal", "pareto", "fixed"):
            raise ConfigError(f"unknown latency distribution {self.distribution!r}")

    @classmethod
    def fixed(cls, c: float, seed: int = 0) -> LatencyModel:
        return cls("fixed", {"c": c}, seed)

    def quantile(self, q: float) -> float:
        p = self.params
        if self.distribution == "lognormal":
            return math.exp(p["mu"] + p["sigma"] * NormalDist().inv_cdf(q))
        if self.distribution == "pareto":
            return p["x_m"] * (1.0 - q) ** (-1.0 / p["alpha"])
        return p["c"]

    def median(self) -> float:
        return self.quantile(0.5)

    def _from(self, rng: np.random.Generator, size=None):
        p = self.params
        if self.distribution == "lognormal":
            return rng.lognormal(p["mu"], p["sigma"], size)
        if self.distribution == "pareto":
            return p["x_m"] * (1.0 + rng.pareto(p["alpha"], size))
        return p["c"] if size is None else np.full(size, p["c"], dtype=float)

    def draw(self, *key: object) -> float:
        return float(self._from(keyed_rng(self.seed, "latency", *key)))

    def sample(self, n: int, stream: object = "bulk") -> np.ndarray:
        return np.asarray(self._from(keyed_rng(self.seed, "latency-bulk", stream), n), dtype=float)


@dataclass
class Stage:
    agent: str
    turn: int


@dataclass
class QuerySpec:
    """One user query: its prompt, reward target and the stage DAG it runs through."""

    query_id: str
    prompt: list[int]
    target: list[int]
    stages: list[Stage]
    edges: list[tuple[int, int]]

    def parents(self, i: int) -> list[int]:
        return [a for a, b in self.edges if b == i]

    def children(self, i: int) -> list[int]:
        return [b for a, b in self.edges if a == i]

    @property
    def roots(self) -> list[int]:
        return [i for i in range(len(self.stages)) if not self.parents(i)]

    @property
    def leaves(self) -> list[int]:
        return [i for i in range(len(self.stages)) if not self.children(i)]

    def visits(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for s in self.stages:
            out[s.agent] = out.get(s.agent, 0) + 1
        return out


def stage_dag(agents: list[str], edges: list[tuple[str, str]]) -> tuple[list[Stage], list[tuple[int, int]]]:
    """Turn an agent-level DAG into stages numbered by depth.

    Raises UnknownWorkflow for cycles, unknown agents or several sources.
    """
    index = {a: i for i, a in enumerate(agents)}
    if len(index) != len(agents):
        raise UnknownWorkflow("duplicate agents in workflow")
    e = []
    for a, b in edges:
        if a not in index or b not in index:
            raise UnknownWorkflow(f"edge {a}->{b} names an unknown agent")
        e.append((index[a], index[b]))
    indeg = [0] * len(agents)
    for _, b in e:
        indeg[b] += 1
    sources = [i for i, d in enumerate(indeg) if d == 0]
    if len(sources) != 1:
        raise UnknownWorkflow(f"workflow needs exactly one source agent, found {len(sources)}")
    depth = [0] * len(agents)
    order, frontier, remaining = [], list(sources), list(indeg)
    while frontier:
        i = frontier.pop(0)
        order.append(i)
        for a, b in e:
            if a == i:
                depth[b] = max(depth[b], depth[i] + 1)
                remaining[b] -= 1
                if remaining[b] == 0:
                    frontier.append(b)
    if len(order) != len(agents):
        raise UnknownWorkflow("workflow graph has a cycle")
    return [Stage(a, depth[i]) for i, a in enumerate(agents)], e


def skew_route(
    agents: list[str], core: str, share: float, turns: int, rng: np.random.Generator
) -> list[str]:
    """Linear route of ``turns`` visits where the core agent gets ``share`` of them.

    A random phase spreads the fractional part so the long-run share is exact.
    """
    aux = [a for a in agents if a != core]
    phase = rng.random()
    route = []
    for j in range(turns):
        if math.floor(share * (j + 1) + phase) - math.floor(share * j + phase) == 1:
            route.append(core)
        else:
            route.append(aux[int(rng.integers(len(aux)))])
    return route


@dataclass
class WorkloadTrace:
    config: RunConfig
    seed: int
    latency: LatencyModel
    prompt_len: tuple[int, int] = (4, 9)
    target_len: int = 2
    _base: tuple[list[Stage], list[tuple[int, int]]] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        w = self.config.workflow
        self._base = stage_dag(list(w.agents), [tuple(e) for e in w.edges])

    @staticmethod
    def query_id(step: int, n: int) -> str:
        return f"s{step:04d}q{n:05d}"

    def query(self, step: int, n: int) -> QuerySpec:
        qid = self.query_id(step, n)
        rng = keyed_rng(self.seed, "query", qid)
        vocab = min(self.config.model_shape(a)[0] for a in self.config.workflow.agents)
        plen = int(rng.integers(*self.prompt_len))
        prompt = [int(x) for x in rng.integers(1, vocab, plen)]
        target = [int(x) for x in rng.integers(1, vocab, self.target_len)]
        skew = self.config.skew
        if skew.enabled:
            route = skew_route(list(self.config.workflow.agents), skew.core_agent, skew.core_agent_share, skew.turns, rng)
            stages = [Stage(a, t) for t, a in enumerate(route)]
            edges = [(t, t + 1) for t in range(len(route) - 1)]
        else:
            base_stages, edges = self._base
            stages = [Stage(s.agent, s.turn) for s in base_stages]
        return QuerySpec(qid, prompt, target, stages, list(edges))

    def core_share(self, n_requests: int) -> float:
        """Empirical fraction of requests routed to the core agent."""
        core = self.config.skew.core_agent
        hits = total = n = 0
        while total < n_requests:
            q = self.query(0, n)
            v = q.visits()
            hits += v.get(core, 0)
            total += len(q.stages)
            n += 1
        return hits / total


def latency_model(config: RunConfig, seed: int | None = None) -> LatencyModel:
    lat = config.latency
    return LatencyModel(lat.distribution, dict(lat.params), config.pipeline.seed if seed is None else seed)


def gen_workload(config: RunConfig, seed: int | None = None) -> WorkloadTrace:
    seed = config.pipeline.seed if seed is None else seed
    if not 0.0 < config.skew.core_agent_share < 1.0:
        raise ConfigError("core_agent_share must lie in (0, 1)")
    return WorkloadTrace(config, seed, latency_model(config, seed))
