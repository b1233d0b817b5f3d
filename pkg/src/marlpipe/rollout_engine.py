"""Dependency-driven multi-agent rollout with least-loaded dispatch.

Every query runs ``k`` trajectories through a DAG of agent stages.  A stage
request becomes dispatchable once all of its parent stages have responded.
Within an agent, requests go to the live instance with the smallest
in-service count (ties to the lowest instance id).  Across agents,
:meth:`RolloutEngine.rebalance` migrates instances from the least to the
most loaded agent once their queue lengths differ by more than ``delta``.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .cluster_sim import Cluster
from .errors import NoInstance, UnknownWorkflow, VersionMismatch
from .experience_store import ColumnType, ExperienceStore, SampleId, SampleRecord, TableSchema
from .object_store import ObjectLocation, ObjectStore, TransferRecord, object_key, pack_weights, unpack_weights
from .policy import PolicyModel, compute_reward, group_advantages, keyed_rng
from .workload import LatencyModel, QuerySpec, Stage, stage_dag

SAMPLE_COLUMNS = (
    ("prompt", ColumnType.LIST),
    ("response", ColumnType.LIST),
    ("logprobs", ColumnType.TENSOR),
    ("reward", ColumnType.FLOAT),
    ("advantage", ColumnType.FLOAT),
)


def sample_schema(agent_id: str) -> TableSchema:
    return TableSchema(agent_id, SAMPLE_COLUMNS)


@dataclass
class AgentWorkflow:
    agents: list[str]
    edges: list[tuple[str, str]]
    k: int = 16

    def __post_init__(self) -> None:
        if self.k < 1:
            raise UnknownWorkflow("k must be >= 1")
        self.stages, self.stage_edges = stage_dag(list(self.agents), [tuple(e) for e in self.edges])


@dataclass
class RolloutParams:
    concurrency: int = 16
    timeout_factor: float = 10.0
    retry_limit: int = 3
    max_tokens: int = 8192
    delta: int = 5
    intra_query: int = 16
    seed: int = 2048


@dataclass
class RolloutRequest:
    sample_id: SampleId
    agent_id: str
    prompt: list[int]
    enqueue_time: float
    version: int
    step: int
    stage: int
    attempt: int = 0
    deadline: float | None = None

    @property
    def query_id(self) -> str:
        return self.sample_id.input_id

    @property
    def trajectory(self) -> tuple[str, int]:
        return (self.sample_id.input_id, self.sample_id.trajectory_id)


@dataclass
class InferenceInstance:
    instance_id: int
    owner_agent: str
    device: int
    weight_version: int = -1
    W: np.ndarray | None = None
    pending: int = 0
    draining: bool = False
    migrate_to: str | None = None


@dataclass
class Migration:
    instance_id: int
    src_agent: str
    dst_agent: str
    key: str
    requested_at: float
    landed_at: float | None = None


class LoadHeap:
    """Indexed binary min-heap over ``(pending, instance_id)`` with in-place re-keying."""

    def __init__(self, items: Iterable[InferenceInstance] = ()):
        self._heap: list[InferenceInstance] = []
        self._pos: dict[int, int] = {}
        for inst in items:
            self.push(inst)

    @staticmethod
    def _key(inst: InferenceInstance) -> tuple[int, int]:
        return (inst.pending, inst.instance_id)

    def __len__(self) -> int:
        return len(self._heap)

    def __contains__(self, inst: InferenceInstance) -> bool:
        return inst.instance_id in self._pos

    def items(self) -> list[InferenceInstance]:
        return list(self._heap)

    def peek(self) -> InferenceInstance | None:
        return self._heap[0] if self._heap else None

    def _swap(self, i: int, j: int) -> None:
        h = self._heap
        h[i], h[j] = h[j], h[i]
        self._pos[h[i].instance_id] = i
        self._pos[h[j].instance_id] = j

    def _up(self, i: int) -> None:
        while i > 0:
            parent = (i - 1) // 2
            if self._key(self._heap[i]) < self._key(self._heap[parent]):
                self._swap(i, parent)
                i = parent
            else:
                return

    def _down(self, i: int) -> None:
        n = len(self._heap)
        while True:
            best = i
            for c in (2 * i + 1, 2 * i + 2):
                if c < n and self._key(self._heap[c]) < self._key(self._heap[best]):
                    best = c
            if best == i:
                return
            self._swap(i, best)
            i = best

    def push(self, inst: InferenceInstance) -> None:
        if inst.instance_id in self._pos:
            raise ValueError(f"instance {inst.instance_id} already in heap")
        self._heap.append(inst)
        self._pos[inst.instance_id] = len(self._heap) - 1
        self._up(len(self._heap) - 1)

    def update(self, inst: InferenceInstance) -> None:
        i = self._pos[inst.instance_id]
        self._up(i)
        self._down(self._pos[inst.instance_id])

    def remove(self, inst: InferenceInstance) -> None:
        i = self._pos.pop(inst.instance_id)
        last = self._heap.pop()
        if i < len(self._heap):
            self._heap[i] = last
            self._pos[last.instance_id] = i
            self._up(i)
            self._down(self._pos[last.instance_id])

    def check(self) -> bool:
        """Heap property and position index are consistent."""
        for i, inst in enumerate(self._heap):
            if self._pos[inst.instance_id] != i:
                return False
            for c in (2 * i + 1, 2 * i + 2):
                if c < len(self._heap) and self._key(self._heap[c]) < self._key(inst):
                    return False
        return len(self._pos) == len(self._heap)


@dataclass
class _Trajectory:
    query_id: str
    traj: int
    done: dict[int, list[int]] = field(default_factory=dict)
    started: set[int] = field(default_factory=set)
    finished: bool = False
    dropped: bool = False
    reward: float | None = None


@dataclass
class _Query:
    spec: QuerySpec
    step: int
    version: int
    k: int
    trajectories: dict[int, _Trajectory] = field(default_factory=dict)
    backlog: deque = field(default_factory=deque)
    running: int = 0
    finished: int = 0
    dropped: int = 0
    complete: bool = False
    cancelled: bool = False


class RolloutEngine:
    def __init__(
        self,
        cluster: Cluster,
        store: ObjectStore,
        exp: ExperienceStore,
        latency: LatencyModel,
        params: RolloutParams | None = None,
    ):
        self.cluster = cluster
        self.sim = cluster.sim
        self.store = store
        self.exp = exp
        self.latency = latency
        self.params = params or RolloutParams()
        self.timeout_s = self.params.timeout_factor * latency.median()
        self.workflow: AgentWorkflow | None = None
        self.agents: list[str] = []
        self.instances: dict[int, InferenceInstance] = {}
        self.heaps: dict[str, LoadHeap] = {}
        self.queues: dict[str, deque[RolloutRequest]] = {}
        self.paused: dict[str, bool] = {}
        self.queue_traces: dict[str, list[tuple[float, int]]] = {}
        self.queries: dict[str, _Query] = {}
        self.in_service: dict[tuple[SampleId, str], tuple[RolloutRequest, InferenceInstance, int]] = {}
        self.migrations: list[Migration] = []
        self._mig_ids = itertools.count()
        self._inflight_migrations = 0
        self._mig_pending_keys: dict[str, int] = {}
        self._mig_by_instance: dict[int, Migration] = {}
        self._shapes: dict[str, tuple[int, int]] = {}
        self.step_tokens: dict[int, int] = {}
        self.step_requests: dict[int, int] = {}
        self.generations: list[dict] = []
        # orchestrator hooks
        self.on_ready: Callable[[str, int], None] | None = None
        self.on_query_update: Callable[[_Query], None] | None = None
        self.on_change: Callable[[], None] | None = None

    # -- setup -------------------------------------------------------------
    def register_workflow(self, workflow: AgentWorkflow, create_tables: bool = True) -> None:
        self.workflow = workflow
        for a in workflow.agents:
            if a not in self.heaps:
                self.agents.append(a)
                self.heaps[a] = LoadHeap()
                self.queues[a] = deque()
                self.paused[a] = False
                self.queue_traces[a] = [(self.sim.now, 0)]
            if create_tables and a not in self.exp._tables:
                self.exp.create_table(sample_schema(a))

    def add_instance(self, agent_id: str, device: int) -> InferenceInstance:
        inst = InferenceInstance(len(self.instances), agent_id, device)
        self.instances[inst.instance_id] = inst
        self.heaps[agent_id].push(inst)
        return inst

    def live_instances(self, agent_id: str) -> list[InferenceInstance]:
        return sorted(self.heaps[agent_id].items(), key=lambda i: i.instance_id)

    def owned_instances(self, agent_id: str) -> list[InferenceInstance]:
        return [i for i in self.instances.values() if i.owner_agent == agent_id and i.migrate_to is None]

    # -- weights -----------------------------------------------------------
    def sync_agent(self, agent_id: str, version: int):
        """Process: pause dispatch, land ``weights:{agent}:v{version}`` on every instance, resume.

        Yields until the last instance get completes; returns the transfer records.
        """
        key = object_key("weights", agent_id, version)
        self.paused[agent_id] = True
        records: list[TransferRecord] = []
        landing = []
        for inst in self.owned_instances(agent_id):
            obj, rec = self.store.get(key, ObjectLocation.device(self.cluster, inst.device))
            records.append(rec)
            landing.append((inst, obj, rec))
        end = max((r.complete_at for r in records), default=self.sim.now)
        if end > self.sim.now:
            yield end - self.sim.now
        for inst, obj, _ in landing:
            (inst.W,) = unpack_weights(obj, [(0, self._shape(obj))])
            inst.weight_version = version
        self.paused[agent_id] = False
        self.sim.record("sync", agent=agent_id, version=version, instances=len(landing), key=key)
        self._try_dispatch(agent_id)
        return records

    def _shape(self, obj) -> tuple[int, int]:
        return self._shapes[obj.key.split(":")[1]]

    def set_model_shapes(self, shapes: dict[str, tuple[int, int]]) -> None:
        self._shapes = dict(shapes)

    def migrations_idle(self) -> bool:
        return self._inflight_migrations == 0

    # -- queries -----------------------------------------------------------
    def submit_query(
        self,
        query: QuerySpec | str,
        prompt: list[int] | None = None,
        version: int = 0,
        step: int = 0,
        target: list[int] | None = None,
    ) -> list[SampleId]:
        if self.workflow is None:
            raise UnknownWorkflow("no workflow registered")
        if isinstance(query, str):
            wf = self.workflow
            query = QuerySpec(
                query,
                list(prompt or []),
                list(target or []),
                [Stage(s.agent, s.turn) for s in wf.stages],
                list(wf.stage_edges),
            )
        for s in query.stages:
            if s.agent not in self.heaps:
                raise UnknownWorkflow(f"agent {s.agent} is not part of the registered workflow")
        k = self.workflow.k
        q = _Query(query, step, version, k)
        self.queries[query.query_id] = q
        roots = query.roots
        ids = []
        for traj in range(k):
            q.trajectories[traj] = _Trajectory(query.query_id, traj)
            for r in roots:
                st = query.stages[r]
                sid = SampleId(query.query_id, st.turn, traj)
                self._insert_record(st.agent, sid, version, list(query.prompt))
                ids.append(sid)
            q.backlog.append(traj)
        self.sim.record("submit_query", query=query.query_id, step=step, version=version, k=k)
        self._start_trajectories(q)
        return ids

    def _insert_record(self, agent: str, sid: SampleId, version: int, prompt: list[int]) -> None:
        self.exp.insert(agent, SampleRecord(version, sid))
        self.exp.set_cell(agent, sid, version, "prompt", prompt, node=0)

    def _start_trajectories(self, q: _Query) -> None:
        while q.backlog and q.running < self.params.intra_query and not q.cancelled:
            traj = q.backlog.popleft()
            q.running += 1
            for r in q.spec.roots:
                self._enqueue_stage(q, q.trajectories[traj], r, list(q.spec.prompt))

    def _enqueue_stage(self, q: _Query, t: _Trajectory, stage: int, prompt: list[int], attempt: int = 0) -> None:
        st = q.spec.stages[stage]
        t.started.add(stage)
        req = RolloutRequest(
            SampleId(q.spec.query_id, st.turn, t.traj), st.agent, prompt, self.sim.now, q.version, q.step, stage, attempt
        )
        self.queues[st.agent].append(req)
        self._trace(st.agent)
        self._try_dispatch(st.agent)

    # -- dispatch ----------------------------------------------------------
    def queue_length(self, agent_id: str) -> int:
        owned = sum(i.pending for i in self.instances.values() if i.owner_agent == agent_id)
        return len(self.queues[agent_id]) + owned

    def _trace(self, agent_id: str) -> None:
        n = self.queue_length(agent_id)
        trace = self.queue_traces[agent_id]
        if trace[-1][1] != n:
            if trace[-1][0] == self.sim.now:
                trace[-1] = (self.sim.now, n)
            else:
                trace.append((self.sim.now, n))

    def select_instance(self, agent_id: str) -> InferenceInstance:
        inst = self.heaps[agent_id].peek()
        if inst is None:
            raise NoInstance(agent_id)
        return inst

    def dispatch(self, request: RolloutRequest) -> int:
        """Assign ``request`` to the least-loaded live instance of its agent."""
        inst = self.select_instance(request.agent_id)
        self._start(request, inst)
        return inst.instance_id

    def _try_dispatch(self, agent_id: str) -> None:
        q = self.queues[agent_id]
        while q and not self.paused[agent_id]:
            inst = self.heaps[agent_id].peek()
            if inst is None or inst.pending >= self.params.concurrency:
                break
            self._start(q.popleft(), inst)
        self._trace(agent_id)

    def _start(self, req: RolloutRequest, inst: InferenceInstance) -> None:
        if inst.weight_version != req.version:
            raise VersionMismatch(
                f"instance {inst.instance_id} holds v{inst.weight_version}, request needs v{req.version}"
            )
        inst.pending += 1
        self.heaps[req.agent_id].update(inst)
        rng = keyed_rng(self.params.seed, "gen", req.agent_id, str(req.sample_id), req.version)
        gen = PolicyModel(inst.W).generate(req.prompt, rng, self.params.max_tokens)
        service = self.latency.draw(str(req.sample_id), req.agent_id, req.attempt)
        self.cluster.begin_busy(inst.device)
        self.sim.record(
            "dispatch",
            sample=str(req.sample_id),
            agent=req.agent_id,
            instance=inst.instance_id,
            version=req.version,
            instance_version=inst.weight_version,
            attempt=req.attempt,
        )
        if service > self.timeout_s:
            eid = self.sim.after(self.timeout_s, lambda: self._timeout(req, inst), kind="_timeout")
        else:
            eid = self.sim.after(service, lambda: self.on_complete(req, gen, inst), kind="_complete")
        self.in_service[(req.sample_id, req.agent_id)] = (req, inst, eid)

    def _release(self, req: RolloutRequest, inst: InferenceInstance) -> None:
        self.in_service.pop((req.sample_id, req.agent_id), None)
        inst.pending -= 1
        self.cluster.end_busy(inst.device)
        if inst in self.heaps[inst.owner_agent]:
            self.heaps[inst.owner_agent].update(inst)
        elif inst.draining and inst.pending == 0:
            self._migrate(inst)
        self._trace(inst.owner_agent)

    # -- completion --------------------------------------------------------
    def on_complete(self, req: RolloutRequest, gen, inst: InferenceInstance) -> None:
        self._release(req, inst)
        q = self.queries[req.query_id]
        t = q.trajectories[req.sample_id.trajectory_id]
        node = self.cluster.node_of(inst.device)
        self.exp.set_cell(req.agent_id, req.sample_id, req.version, "response", gen.tokens, node=node, source_dev=inst.device)
        self.exp.set_cell(
            req.agent_id, req.sample_id, req.version, "logprobs", np.asarray(gen.logprobs), node=node, source_dev=inst.device
        )
        self.step_tokens[req.step] = self.step_tokens.get(req.step, 0) + len(gen.tokens)
        self.step_requests[req.step] = self.step_requests.get(req.step, 0) + 1
        self.generations.append(
            {"sample": str(req.sample_id), "agent": req.agent_id, "version": req.version, "instance_version": inst.weight_version}
        )
        self.sim.record(
            "generate",
            sample=str(req.sample_id),
            agent=req.agent_id,
            instance=inst.instance_id,
            version=req.version,
            tokens=len(gen.tokens),
            start=req.enqueue_time,
        )
        t.done[req.stage] = gen.tokens
        spec = q.spec
        for child in spec.children(req.stage):
            parents = spec.parents(child)
            if child not in t.started and all(p in t.done for p in parents):
                prompt = list(spec.prompt)
                for p in sorted(parents):
                    prompt += t.done[p]
                cst = spec.stages[child]
                sid = SampleId(spec.query_id, cst.turn, t.traj)
                self._insert_record(cst.agent, sid, q.version, prompt)
                self._enqueue_stage(q, t, child, prompt)
        if all(leaf in t.done for leaf in spec.leaves):
            self._finish_trajectory(q, t)
        self._try_dispatch(req.agent_id)
        self._changed()

    def _timeout(self, req: RolloutRequest, inst: InferenceInstance) -> None:
        self._release(req, inst)
        q = self.queries[req.query_id]
        t = q.trajectories[req.sample_id.trajectory_id]
        self.sim.record("cancelled", sample=str(req.sample_id), agent=req.agent_id, attempt=req.attempt)
        if req.attempt >= self.params.retry_limit:
            self._drop_trajectory(q, t)
        else:
            retry = RolloutRequest(
                req.sample_id, req.agent_id, req.prompt, self.sim.now, req.version, req.step, req.stage, req.attempt + 1
            )
            self.queues[req.agent_id].append(retry)
            self._trace(req.agent_id)
        self._try_dispatch(req.agent_id)
        self._changed()

    def _records_of(self, q: _Query, t: _Trajectory) -> list[tuple[str, SampleId]]:
        out = []
        for i in sorted(t.started):
            st = q.spec.stages[i]
            out.append((st.agent, SampleId(q.spec.query_id, st.turn, t.traj)))
        return out

    def _finish_trajectory(self, q: _Query, t: _Trajectory) -> None:
        t.finished = True
        t.reward = compute_reward([t.done[leaf] for leaf in q.spec.leaves], q.spec.target)
        for agent, sid in self._records_of(q, t):
            self.exp.set_cell(agent, sid, q.version, "reward", t.reward)
        q.running -= 1
        q.finished += 1
        self._start_trajectories(q)
        self._maybe_complete(q)

    def _drop_trajectory(self, q: _Query, t: _Trajectory) -> None:
        t.dropped = True
        for key, (req, inst, eid) in list(self.in_service.items()):
            if req.trajectory == (q.spec.query_id, t.traj):
                self.sim.cancel(eid)
                self._release(req, inst)
        for agent in self.agents:
            self.queues[agent] = deque(r for r in self.queues[agent] if r.trajectory != (q.spec.query_id, t.traj))
            self._trace(agent)
        for agent, sid in self._records_of(q, t):
            self.exp.discard(agent, sid, q.version)
        q.running -= 1
        q.dropped += 1
        self.sim.record("dropped", query=q.spec.query_id, trajectory=t.traj)
        self._start_trajectories(q)
        if self.on_query_update:
            self.on_query_update(q)
        self._maybe_complete(q)

    def _maybe_complete(self, q: _Query) -> None:
        if q.complete or q.finished + q.dropped < q.k:
            return
        q.complete = True
        done = [t for t in q.trajectories.values() if t.finished]
        groups: dict[tuple[str, int], list[tuple[SampleId, float]]] = {}
        for t in done:
            for agent, sid in self._records_of(q, t):
                groups.setdefault((agent, sid.number_of_turns), []).append((sid, t.reward))
        for (agent, _), members in sorted(groups.items()):
            members.sort()
            adv = group_advantages([r for _, r in members])
            for (sid, _), a in zip(members, adv):
                self.exp.set_cell(agent, sid, q.version, "advantage", float(a))
        self.sim.record("query_complete", query=q.spec.query_id, finished=q.finished, dropped=q.dropped)
        if self.on_query_update:
            self.on_query_update(q)
        for agent in sorted({a for a, _ in groups}):
            if self.on_ready:
                self.on_ready(agent, q.version)

    def _changed(self) -> None:
        if self.on_change:
            self.on_change()

    def cancel_step(self, step: int) -> int:
        """Abandon every unfinished request of ``step``; returns how many were cancelled."""
        n = 0
        for key, (req, inst, eid) in list(self.in_service.items()):
            if req.step == step:
                self.sim.cancel(eid)
                self._release(req, inst)
                n += 1
        for agent in self.agents:
            before = len(self.queues[agent])
            self.queues[agent] = deque(r for r in self.queues[agent] if r.step != step)
            n += before - len(self.queues[agent])
            self._trace(agent)
        for q in self.queries.values():
            if q.step == step and not q.complete:
                q.cancelled = True
                q.backlog.clear()
        if n:
            self.sim.record("cancel_step", step=step, requests=n)
        return n

    def outstanding(self, step: int | None = None) -> int:
        waiting = sum(1 for a in self.agents for r in self.queues[a] if step is None or r.step == step)
        serving = sum(1 for req, _, _ in self.in_service.values() if step is None or req.step == step)
        return waiting + serving

    # -- load balancing ----------------------------------------------------
    def rebalance(self) -> list[Migration]:
        if len(self.agents) < 2:
            return []
        gauges = {a: self.queue_length(a) for a in self.agents}
        high = max(self.agents, key=lambda a: (gauges[a], -self.agents.index(a)))
        if not self.queues[high]:
            return []  # every request of the busiest agent is already in service
        # an agent down to its last instance cannot donate, so look past it
        able = [a for a in self.agents if a != high and len(self.live_instances(a)) > 1]
        if not able:
            return []
        low = min(able, key=lambda a: (gauges[a], self.agents.index(a)))
        diff = gauges[high] - gauges[low]
        if diff <= self.params.delta:
            return []
        donors = self.live_instances(low)
        m = min(diff, len(donors) - 1)
        if m <= 0:
            return []
        source = self.live_instances(high)
        if not source:
            return []
        src = source[0]
        key = object_key("weights", high, src.weight_version, f"mig{next(self._mig_ids)}")
        obj, _ = pack_weights([src.W], key=key)
        self.store.set(key, obj, ObjectLocation.device(self.cluster, src.device), source_dev=src.device)
        chosen = sorted(donors, key=lambda i: (i.pending, -i.instance_id))[:m]
        out = []
        self._mig_pending_keys[key] = len(chosen)
        for inst in chosen:
            self.heaps[low].remove(inst)
            inst.draining = True
            inst.migrate_to = high
            mig = Migration(inst.instance_id, low, high, key, self.sim.now)
            self._mig_by_instance[inst.instance_id] = mig
            self.migrations.append(mig)
            out.append(mig)
            self._inflight_migrations += 1
            self.sim.record("migrate", instance=inst.instance_id, src=low, dst=high, key=key, diff=diff)
            if inst.pending == 0:
                self._migrate(inst)
        return out

    def _migrate(self, inst: InferenceInstance) -> None:
        mig = self._mig_by_instance.pop(inst.instance_id)
        obj, rec = self.store.get(mig.key, ObjectLocation.device(self.cluster, inst.device))
        version = int(mig.key.split(":")[2][1:])

        def land() -> None:
            (inst.W,) = unpack_weights(obj, [(0, self._shape(obj))])
            inst.weight_version = version
            old = inst.owner_agent
            inst.owner_agent = mig.dst_agent
            inst.draining = False
            inst.migrate_to = None
            self.heaps[mig.dst_agent].push(inst)
            mig.landed_at = self.sim.now
            self._inflight_migrations -= 1
            left = self._mig_pending_keys[mig.key] - 1
            self._mig_pending_keys[mig.key] = left
            if left == 0:
                del self._mig_pending_keys[mig.key]
                self.store.delete(mig.key)
            self.sim.record("land", instance=inst.instance_id, agent=mig.dst_agent, version=version, path=[h.value for h in rec.path])
            self._trace(old)
            self._try_dispatch(mig.dst_agent)
            self._changed()

        self.sim.schedule(rec.complete_at, land, kind="_land")

    def heap_coherent(self) -> bool:
        for agent, heap in self.heaps.items():
            if not heap.check():
                return False
            live = {i.instance_id for i in self.instances.values() if i.owner_agent == agent and not i.draining}
            if {i.instance_id for i in heap.items()} != live:
                return False
        return True
