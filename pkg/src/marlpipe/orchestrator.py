"""Rollout/training loop under the four pipeline modes.

The orchestrator builds the simulated cluster and the engines from a
:class:`RunConfig`, then drives one rollout process and one training
process per global step on the event loop.  What differs between modes is
only when each process may start:

* colocated-sync: rollout, switch, train, switch, on one shared pool
* disagg-sync: rollout then train on separate pools
* one-step-async: rollout of step s+1 runs while step s trains
* micro-batch-async: training consumes micro batches while rollout runs

Each step trains a fixed quota of ``global_batch`` samples per agent: the
canonically first ones among the step's completed trajectories.  A record
is handed to training only once it is certain to fall inside that quota,
so every mode trains exactly the same samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Generator

import numpy as np

from .cluster_sim import Cluster, CostModel, LinkCost, PoolKind, ResourcePool, Signal, Simulator
from .config import PipelineMode, RunConfig
from .errors import GetTimeout, StallDetected, SyncTimeout
from .experience_store import ExperienceStore, SampleId
from .metrics import MetricsReport, StepMetrics
from .object_store import ObjectStore, object_key
from .rollout_engine import AgentWorkflow, RolloutEngine, RolloutParams
from .training_engine import TrainerConfig, TrainingEngine
from .workload import WorkloadTrace, gen_workload


@dataclass
class StepTimes:
    rollout_start: float = math.nan
    rollout_end: float = math.nan
    train_start: float = math.nan
    end: float = math.nan


@dataclass
class _StepState:
    step: int
    version: int
    admitted: list[str] = field(default_factory=list)
    eligible: dict[str, set] = field(default_factory=dict)
    consumed: dict[str, int] = field(default_factory=dict)
    rollout_active: bool = False
    rollout_complete: bool = False
    phase: str = "train"
    updated: set[str] = field(default_factory=set)
    holding: set[str] = field(default_factory=set)
    next_query: int = 0


@dataclass
class RunResult:
    report: MetricsReport
    orchestrator: Orchestrator

    @property
    def weights(self) -> dict[str, np.ndarray]:
        return {a: s.W.copy() for a, s in self.orchestrator.training.states.items()}


def build_cluster(config: RunConfig, sim: Simulator) -> Cluster:
    c = config.cluster
    cost = CostModel(
        d2d=LinkCost(c.latencies["d2d"], c.bandwidths["d2d"]),
        h2d=LinkCost(c.latencies["h2d"], c.bandwidths["h2d"]),
        d2h=LinkCost(c.latencies["d2h"], c.bandwidths["d2h"]),
        rdma=LinkCost(c.latencies["rdma"], c.bandwidths["rdma"]),
    )
    return Cluster(sim, c.nodes, c.devices_per_node, c.mem_bytes, c.host_mem_bytes, cost)


class Orchestrator:
    def __init__(self, config: RunConfig, mode: PipelineMode | str | None = None):
        self.config = config
        self.mode = PipelineMode.parse(mode.value if isinstance(mode, PipelineMode) else mode) if mode else config.mode
        p, r, t = config.pipeline, config.rollout, config.training
        self.G = p.global_batch
        self.M = p.micro_batch
        self.sim = Simulator()
        self.cluster = build_cluster(config, self.sim)
        self.store = ObjectStore(self.cluster)
        self.exp = ExperienceStore(self.store)
        self.workload: WorkloadTrace = gen_workload(config, p.seed)
        self.agents = list(config.workflow.agents)

        n_roll = len(self.agents) * r.instances_per_agent
        n_train = config.cluster.training_devices
        if self.mode is PipelineMode.COLOCATED_SYNC:
            shared = tuple(range(max(n_roll, n_train)))
            self.cluster.configure_pools(shared, shared)
            rollout_devs = shared[:n_roll]
            train_devs = shared[:n_train]
        else:
            rollout_devs = tuple(range(n_roll))
            train_devs = tuple(range(n_roll, n_roll + n_train))
            self.cluster.configure_pools(rollout_devs, train_devs)
        self.train_pool = ResourcePool(PoolKind.TRAINING, train_devs)

        self.rollout = RolloutEngine(
            self.cluster,
            self.store,
            self.exp,
            self.workload.latency,
            RolloutParams(r.concurrency, r.timeout_factor, r.retry_limit, p.max_tokens, p.delta, p.intra_query, p.seed),
        )
        self.rollout.register_workflow(AgentWorkflow(self.agents, [tuple(e) for e in config.workflow.edges], config.workflow.k))
        self.rollout.set_model_shapes({a: config.model_shape(a) for a in self.agents})
        for i, a in enumerate(self.agents):
            for d in rollout_devs[i * r.instances_per_agent : (i + 1) * r.instances_per_agent]:
                self.rollout.add_instance(a, d)

        self.max_staleness = 1 if self.mode is PipelineMode.ONE_STEP_ASYNC else 0
        self.training = TrainingEngine(
            self.cluster,
            self.store,
            self.train_pool,
            TrainerConfig(
                p.global_batch, t.group_size, t.train_s_per_sample, t.update_s, t.control_s, p.lr, self.max_staleness, p.seed
            ),
        )
        for a in self.agents:
            v, d = config.model_shape(a)
            self.training.register_agent(a, v, d)
        self.published: dict[str, set[int]] = {a: {0} for a in self.agents}

        self.steps: list[StepTimes] = [StepTimes() for _ in range(config.steps)]
        self.state: dict[int, _StepState] = {}
        self.rollout_done = [self.sim.signal(f"rollout{s}") for s in range(config.steps)]
        self.train_done = [self.sim.signal(f"train{s}") for s in range(config.steps)]
        self.version_ledger: list[dict] = []
        self.utilization_trace: list[tuple[float, float]] = []
        self._changed = self.sim.signal("changed")
        self.done = self.sim.signal("done")
        self.rollout.on_ready = lambda agent, version: self._notify()
        self.rollout.on_query_update = self._on_query_update

    # -- helpers -----------------------------------------------------------
    def gen_version(self, step: int) -> int:
        if self.mode is PipelineMode.ONE_STEP_ASYNC:
            return max(0, step - 1)
        return step

    def _notify(self) -> None:
        sig, self._changed = self._changed, self.sim.signal("changed")
        sig.succeed()

    def _wait(self) -> Signal:
        return self._changed

    @staticmethod
    def _after(signals: list[Signal]) -> Generator:
        for s in signals:
            if not s.triggered:
                yield s

    # -- admission and quota -----------------------------------------------
    def _query_counts(self, qid: str, agent: str, exact: bool) -> int:
        """Records of ``agent`` the query contributes (an upper bound unless complete)."""
        q = self.rollout.queries[qid]
        visits = q.spec.visits().get(agent, 0)
        if exact:
            return q.finished * visits
        return (q.k - q.dropped) * visits

    def _refresh_quota(self, st: _StepState) -> None:
        for agent in self.agents:
            eligible = st.eligible.setdefault(agent, set())
            cum = 0
            for qid in st.admitted:
                if cum >= self.G:
                    break
                q = self.rollout.queries[qid]
                if q.complete:
                    recs = sorted(
                        (sid for t in q.trajectories.values() if t.finished for sid in self._agent_sids(q, t, agent))
                    )
                    for rank, sid in enumerate(recs):
                        if cum + rank < self.G:
                            eligible.add((sid, st.version))
                    cum += len(recs)
                else:
                    cum += self._query_counts(qid, agent, exact=False)

    @staticmethod
    def _agent_sids(q, t, agent: str):
        for s in q.spec.stages:
            if s.agent == agent:
                yield SampleId(q.spec.query_id, s.turn, t.traj)

    def _admit(self, st: _StepState) -> None:
        if st.rollout_complete:
            return
        while True:
            in_flight = sum(1 for qid in st.admitted if not self.rollout.queries[qid].complete)
            if in_flight >= self.config.pipeline.inter_query:
                return
            short = False
            for agent in self.agents:
                bound = sum(
                    self._query_counts(qid, agent, exact=self.rollout.queries[qid].complete) for qid in st.admitted
                )
                if bound < self.G:
                    short = True
                    break
            if not short:
                return
            spec = self.workload.query(st.step, st.next_query)
            st.next_query += 1
            st.admitted.append(spec.query_id)
            self.rollout.submit_query(spec, version=st.version, step=st.step)

    def _on_query_update(self, q) -> None:
        st = self.state.get(q.step)
        if st is None:
            return
        self._refresh_quota(st)
        self._admit(st)
        if not st.rollout_complete and all(len(st.eligible.get(a, ())) >= self.G for a in self.agents):
            st.rollout_complete = True
            self._rollout_finished(st)
        self._notify()

    def _rollout_finished(self, st: _StepState) -> None:
        times = self.steps[st.step]
        times.rollout_end = self.sim.now
        st.rollout_active = False
        self.rollout.cancel_step(st.step)
        self.sim.record("rollout_end", step=st.step, version=st.version)
        self.rollout_done[st.step].succeed()

    # -- weight sync -------------------------------------------------------
    def sync_weights(self, version: int) -> Generator:
        """Land ``weights:{agent}:v{version}`` on every instance that lags behind."""
        procs = []
        budget = self.config.pipeline.stall_budget_s
        for a in self.agents:
            if all(i.weight_version == version for i in self.rollout.owned_instances(a)):
                continue
            key = object_key("weights", a, version)
            try:
                yield from self.store.wait_for(key, timeout=budget)
            except GetTimeout:
                raise SyncTimeout(f"{key} never published") from None
            procs.append(self.sim.process(self.rollout.sync_agent(a, version)))
        if procs:
            yield self.sim.all_of(procs)
        for a in self.agents:
            for entry in self.version_ledger:
                if entry["agent"] == a and entry["version"] == version and entry["sync_time"] is None:
                    entry["sync_time"] = self.sim.now
            for old in sorted(v for v in self.published[a] if v < version):
                self.store.delete(object_key("weights", a, old))
                self.published[a].discard(old)

    # -- rollout side ------------------------------------------------------
    def _rollout_proc(self, s: int) -> Generator:
        prereq = []
        if self.mode is PipelineMode.ONE_STEP_ASYNC:
            if s >= 1:
                prereq.append(self.rollout_done[s - 1])
            if s >= 2:
                prereq.append(self.train_done[s - 2])
        elif s >= 1:
            prereq.append(self.train_done[s - 1])
        yield from self._after(prereq)
        if self.mode is PipelineMode.COLOCATED_SYNC and s > 0:
            yield from self._switch("training", "rollout", s)
        while not self.rollout.migrations_idle():
            yield self._wait()
        version = self.gen_version(s)
        yield from self.sync_weights(version)
        st = self.state[s] = _StepState(s, version)
        st.rollout_active = True
        self.steps[s].rollout_start = self.sim.now
        self.sim.record("rollout_start", step=s, version=version)
        if self.config.rollout.rebalance and len(self.agents) > 1:
            self.sim.process(self._rebalance_proc(st))
        self._admit(st)

    def _rebalance_proc(self, st: _StepState) -> Generator:
        interval = self.config.rollout.rebalance_interval_s
        while True:
            yield interval
            if not st.rollout_active:
                return
            if self.rollout.rebalance():
                self._notify()

    def _switch(self, src: str, dst: str, step: int) -> Generator:
        self.sim.record("offload", step=step, side=src)
        self.sim.record("onload", step=step, side=dst)
        yield self.config.training.switch_s

    # -- training side -----------------------------------------------------
    def _has_work(self, st: _StepState, agent: str) -> bool:
        if agent in st.holding:
            return True
        if st.phase == "update":
            return agent not in st.updated
        eligible = st.eligible.get(agent, set())
        return self.exp.count_ready(agent, st.version, where=lambda r: r.key in eligible) >= self.M

    def _victim(self, st: _StepState) -> str | None:
        for a in self.agents:
            g = self.training.groups[a]
            if g.active and self.sim.now >= g.busy_until and not self._has_work(st, a):
                return a
        return None

    def acquire(self, st: _StepState, agent: str) -> Generator:
        """Ensure ``agent`` has an active process group, suspending an idle one if needed."""
        while True:
            group = self.training.groups[agent]
            if group.active:
                if self.sim.now < group.busy_until:
                    yield group.busy_until - self.sim.now
                return
            free = self.cluster.free_devices(self.train_pool)
            not_before = None
            if len(free) < self.config.training.group_size:
                victim = self._victim(st)
                if victim is None:
                    yield self._wait()
                    continue
                not_before = self.training.suspend(victim)
            group = self.training.activate(agent, not_before=not_before)
            if self.sim.now < group.busy_until:
                yield group.busy_until - self.sim.now
            self._notify()
            return

    def pump(self, st: _StepState, agent: str) -> Generator:
        """Train every micro batch of ``agent``'s quota as soon as it is ready."""
        while st.consumed[agent] < self.G:
            eligible = st.eligible.setdefault(agent, set())
            batch = self.exp.poll_micro_batch(agent, st.version, self.M, where=lambda r: r.key in eligible)
            if batch is None:
                yield self._wait()
                continue
            st.holding.add(agent)
            yield from self.acquire(st, agent)
            report = self.training.train_micro_batch(agent, batch, self.exp)
            yield report.end - self.sim.now
            self.exp.complete(agent, batch.samples)
            st.consumed[agent] += batch.size
            st.holding.discard(agent)
            self._notify()

    def _train_proc(self, s: int) -> Generator:
        prereq = [] if s == 0 else [self.train_done[s - 1]]
        if self.mode is not PipelineMode.MICRO_BATCH_ASYNC:
            prereq.append(self.rollout_done[s])
        yield from self._after(prereq)
        while s not in self.state:
            yield self._wait()
        st = self.state[s]
        if self.mode is PipelineMode.COLOCATED_SYNC:
            yield from self._switch("rollout", "training", s)
        self.steps[s].train_start = self.sim.now
        st.consumed = {a: 0 for a in self.agents}
        yield self.sim.all_of([self.sim.process(self.pump(st, a)) for a in self.agents])

        # lockstep update: active groups first to avoid needless swaps
        st.phase = "update"
        self._notify()
        order = sorted(self.agents, key=lambda a: (not self.training.groups[a].active, self.agents.index(a)))
        for a in order:
            yield from self.acquire(st, a)
            version = self.training.apply_global_update(a)
            self.published[a].add(version)
            self.version_ledger.append({"agent": a, "version": version, "update_time": self.sim.now, "sync_time": None})
            yield self.training.groups[a].busy_until - self.sim.now
            st.updated.add(a)
            self._notify()
        self.step_barrier(st)

    def step_barrier(self, st: _StepState) -> None:
        for a in self.agents:
            state = self.training.states[a]
            assert state.samples_accumulated == 0, f"{a} still holds cached gradients"
            if not self.config.pipeline.allow_stale_carryover:
                self.exp.purge_stale(a, state.version - self.max_staleness)
        times = self.steps[st.step]
        times.end = self.sim.now
        prev = self.steps[st.step - 1].end if st.step > 0 else 0.0
        if times.end > prev:
            self.utilization_trace.append((times.end, self.cluster.utilization(self.train_pool, prev, times.end)))
        self.sim.record("step_end", step=st.step, version=self.training.states[self.agents[0]].version)
        self.train_done[st.step].succeed()
        self._notify()
        if st.step == self.config.steps - 1:
            self.done.succeed()

    # -- driver ------------------------------------------------------------
    def _watchdog(self) -> Generator:
        budget = self.config.pipeline.stall_budget_s
        last = -1
        while not self.done.triggered:
            seen = len(self.sim.log)
            if seen == last:
                raise StallDetected(f"no progress for {budget} virtual seconds at t={self.sim.now}")
            last = seen
            yield self.sim.any_of(self.sim.timeout(budget), self.done)

    def run(self) -> RunResult:
        if self.config.training.allocation == "static":
            for a in self.agents:
                self.training.activate(a)
        for s in range(self.config.steps):
            self.sim.process(self._rollout_proc(s))
            self.sim.process(self._train_proc(s))
        self.sim.process(self._watchdog())
        self.sim.run(stop=self.done)
        if not self.done.triggered:
            raise StallDetected(f"event queue drained at t={self.sim.now} before all steps finished")
        return RunResult(self.report(), self)

    # -- metrics -----------------------------------------------------------
    def step_metrics(self) -> list[StepMetrics]:
        out = []
        prev = 0.0
        for s, t in enumerate(self.steps):
            e2e = t.end - prev
            lo = max(t.rollout_start, prev)
            rollout_s = max(0.0, t.rollout_end - lo)
            train_s = t.end - max(t.rollout_end, prev)
            other_s = e2e - rollout_s - train_s
            tokens = self.rollout.step_tokens.get(s, 0)
            out.append(StepMetrics(e2e, rollout_s, train_s, other_s, tokens, tokens / e2e if e2e > 0 else 0.0))
            prev = t.end
        return out

    def training_utilization(self) -> float:
        """Busy fraction of the training pool over the whole run."""
        return self.cluster.utilization(self.train_pool, 0.0, self.steps[-1].end)

    def report(self) -> MetricsReport:
        return MetricsReport(
            mode=self.mode.value,
            steps=self.step_metrics(),
            queue_traces={a: [(t, n) for t, n in tr] for a, tr in self.rollout.queue_traces.items()},
            utilization=list(self.utilization_trace),
            version_ledger=list(self.version_ledger),
        )


def run(config: RunConfig, mode: PipelineMode | str | None = None) -> RunResult:
    return Orchestrator(config, mode).run()
