"""Agent-centric training: process groups, state swap and GRPO micro-batch steps.

Each agent owns a :class:`PolicyState`.  Training workers for an agent form
a :class:`ProcessGroup` that is either Active (devices bound, footprint
reserved) or Destroyed (nothing held).  Destroying a group checkpoints its
full state to host memory through the object store; activation restores it,
preferring the node the group last ran on.

Gradients are cached per sample and summed in canonical sample order at
update time, so the applied gradient does not depend on how the global
batch was split into micro batches or in which order they were trained.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .cluster_sim import Cluster, Hop, Reservation, ResourcePool
from .errors import BusyGroup, InactiveGroup, IncompleteBatch, VersionMismatch
from .experience_store import ExperienceStore, MicroBatch, SampleId
from .object_store import (
    HeterogeneousObject,
    ObjectLocation,
    ObjectStore,
    object_key,
    pack_weights,
    unpack_weights,
)
from .policy import AdamState, PolicyModel, group_advantages, init_weights, sample_grad

BYTES_PER_PARAM = 4
# weights, gradients and two optimizer moments
FOOTPRINT_COPIES = 4


@dataclass
class TrainerConfig:
    global_batch: int = 64
    group_size: int = 1
    train_s_per_sample: float = 0.75
    update_s: float = 1.0
    control_s: float = 0.5
    lr: float = 1e-6
    max_staleness: int = 0
    seed: int = 2048


@dataclass
class PolicyState:
    agent_id: str
    version: int
    W: np.ndarray
    opt: AdamState
    grad_cache: dict[tuple[SampleId, int], np.ndarray] = field(default_factory=dict)

    @property
    def samples_accumulated(self) -> int:
        return len(self.grad_cache)

    @property
    def n_params(self) -> int:
        return int(self.W.size)

    def accumulated_grad(self) -> np.ndarray:
        """Sum of cached contributions in canonical sample order."""
        total = np.zeros_like(self.W)
        for key in sorted(self.grad_cache):
            total += self.grad_cache[key]
        return total


class GroupState(str, Enum):
    ACTIVE = "active"
    DESTROYED = "destroyed"


@dataclass
class ProcessGroup:
    agent_id: str
    state: GroupState = GroupState.DESTROYED
    workers: list[str] = field(default_factory=list)
    devices: list[int] = field(default_factory=list)
    last_node: int | None = None
    reservations: list[Reservation] = field(default_factory=list)
    busy_until: float = 0.0

    @property
    def active(self) -> bool:
        return self.state is GroupState.ACTIVE


@dataclass
class GradReport:
    agent_id: str
    version: int
    batch_version: int
    samples: int
    grad_norm: float
    start: float
    end: float


@dataclass
class SwapReport:
    agent_id: str
    event: str
    version: int
    path: list[Hop]
    nbytes: int
    transfer_s: float
    control_s: float
    start: float
    end: float


def _ckpt_keys(agent_id: str, version: int) -> tuple[str, str, str]:
    return (
        object_key("weights", agent_id, version, "ckpt"),
        object_key("optstate", agent_id, version, "ckpt"),
        object_key("optstate", agent_id, version, "ckpt-meta"),
    )


class TrainingEngine:
    def __init__(
        self,
        cluster: Cluster,
        store: ObjectStore,
        pool: ResourcePool,
        config: TrainerConfig | None = None,
    ):
        self.cluster = cluster
        self.sim = cluster.sim
        self.store = store
        self.pool = pool
        self.config = config or TrainerConfig()
        self.states: dict[str, PolicyState] = {}
        self.groups: dict[str, ProcessGroup] = {}
        self._checkpoint: dict[str, int] = {}
        self.train_log: list[dict] = []
        self.last_swap: SwapReport | None = None

    # -- bookkeeping -------------------------------------------------------
    def _log(self, agent_id: str, event: str, version: int, grad_norm: float | None = None, **extra) -> None:
        entry = {"t": self.sim.now, "agent": agent_id, "event": event, "version": version, "grad_norm": grad_norm}
        self.train_log.append(entry)
        self.sim.record(event, agent=agent_id, version=version, grad_norm=grad_norm, **extra)

    def register_agent(self, agent_id: str, vocab: int = 32, dim: int = 16, publish_node: int = 0) -> PolicyState:
        """Create version 0 of an agent's policy and publish it to host memory."""
        W = init_weights(vocab, dim, self.config.seed, agent_id)
        state = PolicyState(agent_id, 0, W, AdamState.zeros_like(W, lr=self.config.lr))
        self.states[agent_id] = state
        self.groups[agent_id] = ProcessGroup(agent_id)
        obj, _ = pack_weights([W], key=object_key("weights", agent_id, 0))
        self.store.set(obj.key, obj, ObjectLocation.host(publish_node))
        return state

    def footprint(self, agent_id: str) -> int:
        return self.states[agent_id].n_params * BYTES_PER_PARAM * FOOTPRINT_COPIES

    def active_groups(self) -> list[str]:
        return [a for a, g in self.groups.items() if g.active]

    def model(self, agent_id: str) -> PolicyModel:
        return PolicyModel(self.states[agent_id].W)

    # -- lifecycle ---------------------------------------------------------
    def activate(self, agent_id: str, prefer_node: int | None = None, not_before: float | None = None) -> ProcessGroup:
        """Bind a gang of training devices and restore the agent's state.

        Raises InsufficientResources without binding anything if the pool
        cannot host the whole group.  ``not_before`` delays the restore, e.g.
        until a suspend that freed the devices has finished.
        """
        group = self.groups[agent_id]
        if group.active:
            return group
        node = prefer_node if prefer_node is not None else group.last_node
        devices = self.cluster.allocate_gang(self.pool, self.config.group_size, f"group:{agent_id}", node)
        nbytes = self.footprint(agent_id)
        reservations: list[Reservation] = []
        try:
            for d in devices:
                reservations.append(self.cluster.reserve_device_mem(d, nbytes, owner=f"group:{agent_id}"))
        except Exception:
            # gang semantics: never leave a partial binding behind
            for r in reservations:
                r.release()
            self.cluster.release_gang(devices)
            raise
        group.reservations = reservations
        group.devices = devices
        group.workers = [f"{agent_id}/w{i}" for i in range(len(devices))]
        group.state = GroupState.ACTIVE
        group.last_node = self.cluster.node_of(devices[0])

        start = max(self.sim.now, not_before if not_before is not None else self.sim.now)
        path: list[Hop] = []
        moved = 0
        transfer_end = start
        state = self.states[agent_id]
        if agent_id in self._checkpoint:
            version = self._checkpoint.pop(agent_id)
            dest = ObjectLocation.device(self.cluster, devices[0])
            wkey, okey, mkey = _ckpt_keys(agent_id, version)
            w_obj, w_rec = self.store.get(wkey, dest)
            o_obj, o_rec = self.store.get(okey, dest)
            meta_obj, m_rec = self.store.get(mkey, dest)
            path = list(w_rec.path)
            moved = w_rec.nbytes + o_rec.nbytes + m_rec.nbytes
            transfer_end = max(max(start, r.start) + r.sim_duration for r in (w_rec, o_rec, m_rec))
            self._restore(state, w_obj, o_obj, json.loads(meta_obj.value()))
            for key in (wkey, okey, mkey):
                self.store.delete(key)
        transfer_s = transfer_end - start
        end = transfer_end + self.config.control_s
        group.busy_until = end
        self._log(
            agent_id,
            "activate",
            state.version,
            devices=devices,
            node=group.last_node,
            path=[h.value for h in path],
            bytes=moved,
            transfer_s=transfer_s,
            control_s=self.config.control_s,
        )
        self.last_swap = SwapReport(agent_id, "activate", state.version, path, moved, transfer_s, self.config.control_s, start, end)
        return group

    def suspend(self, agent_id: str) -> float:
        """Checkpoint to host memory and release every device; returns the end time."""
        group = self.groups[agent_id]
        if not group.active:
            raise InactiveGroup(agent_id)
        if self.sim.now < group.busy_until:
            raise BusyGroup(f"{agent_id} busy until {group.busy_until}")
        state = self.states[agent_id]
        wkey, okey, mkey = _ckpt_keys(agent_id, state.version)
        w_obj, o_obj, meta = self._snapshot(state, wkey, okey)
        meta_obj = HeterogeneousObject.from_string(mkey, json.dumps(meta, sort_keys=True))
        host = ObjectLocation.host(group.last_node)
        src = group.devices[0]
        refs = [self.store.set(obj.key, obj, host, source_dev=src) for obj in (w_obj, o_obj, meta_obj)]
        node = group.last_node
        self._checkpoint[agent_id] = state.version
        start = self.sim.now
        transfer_end = max(r.ready_at for r in refs)
        moved = len(w_obj) + len(o_obj)
        for r in group.reservations:
            r.release()
        self.cluster.release_gang(group.devices)
        group.reservations = []
        group.devices = []
        group.workers = []
        group.state = GroupState.DESTROYED
        transfer_s = transfer_end - start
        end = transfer_end + self.config.control_s
        self._log(
            agent_id,
            "suspend",
            state.version,
            node=node,
            path=[Hop.D2H.value],
            bytes=moved,
            transfer_s=transfer_s,
            control_s=self.config.control_s,
        )
        self.last_swap = SwapReport(agent_id, "suspend", state.version, [Hop.D2H], moved, transfer_s, self.config.control_s, start, end)
        return end

    @staticmethod
    def _snapshot(state: PolicyState, wkey: str, okey: str) -> tuple[HeterogeneousObject, HeterogeneousObject, dict]:
        keys = sorted(state.grad_cache)
        w_obj, _ = pack_weights([state.W], key=wkey)
        o_obj, layout = pack_weights([state.opt.m, state.opt.v, *(state.grad_cache[k] for k in keys)], key=okey)
        meta = {
            "version": state.version,
            "step": state.opt.step,
            "lr": state.opt.lr,
            "beta1": state.opt.beta1,
            "beta2": state.opt.beta2,
            "eps": state.opt.eps,
            "shape": list(state.W.shape),
            "layout": [[off, list(shape)] for off, shape in layout],
            "grad_keys": [[str(sid), ver] for sid, ver in keys],
        }
        return w_obj, o_obj, meta

    @staticmethod
    def _restore(state: PolicyState, w_obj: HeterogeneousObject, o_obj: HeterogeneousObject, meta: dict) -> None:
        shape = tuple(meta["shape"])
        (W,) = unpack_weights(w_obj, [(0, shape)])
        layout = [(off, tuple(s)) for off, s in meta["layout"]]
        parts = unpack_weights(o_obj, layout)
        state.W = W
        state.version = meta["version"]
        state.opt = AdamState(parts[0], parts[1], meta["step"], meta["lr"], meta["beta1"], meta["beta2"], meta["eps"])
        state.grad_cache = {
            (SampleId.parse(sid), ver): g for (sid, ver), g in zip(meta["grad_keys"], parts[2:])
        }

    # -- training ----------------------------------------------------------
    def _check_ready(self, agent_id: str) -> ProcessGroup:
        group = self.groups[agent_id]
        if not group.active:
            raise InactiveGroup(agent_id)
        if self.sim.now < group.busy_until:
            raise BusyGroup(f"{agent_id} busy until {group.busy_until}")
        return group

    def batch_advantages(self, batch: MicroBatch, exp: ExperienceStore) -> list[float]:
        """Stored per-group advantages, or ones normalized within the batch's groups."""
        recs = batch.samples
        if recs and all(r.status.get("advantage") for r in recs):
            return [float(exp.read(r.data["advantage"])) for r in recs]
        groups: dict[tuple[str, int], list[int]] = {}
        for i, r in enumerate(recs):
            groups.setdefault((r.sample_id.input_id, r.sample_id.number_of_turns), []).append(i)
        adv = [0.0] * len(recs)
        for idx in groups.values():
            rewards = [float(exp.read(recs[i].data["reward"])) for i in idx]
            for i, a in zip(idx, group_advantages(rewards)):
                adv[i] = float(a)
        return adv

    def train_micro_batch(self, agent_id: str, batch: MicroBatch, exp: ExperienceStore) -> GradReport:
        group = self._check_ready(agent_id)
        state = self.states[agent_id]
        lag = state.version - batch.policy_version
        if not 0 <= lag <= self.config.max_staleness:
            raise VersionMismatch(
                f"{agent_id}: batch v{batch.policy_version} vs state v{state.version} "
                f"(max staleness {self.config.max_staleness})"
            )
        model = PolicyModel(state.W)
        advantages = self.batch_advantages(batch, exp)
        total = np.zeros_like(state.W)
        for rec, adv in zip(batch.samples, advantages):
            key = rec.key
            if key in state.grad_cache:
                raise ValueError(f"sample {rec.sample_id} already accumulated")
            prompt = exp.read(rec.data["prompt"])
            response = exp.read(rec.data["response"])
            g = sample_grad(model, prompt, response, adv, self.config.global_batch)
            state.grad_cache[key] = g
            total += g
        start = self.sim.now
        duration = self.config.train_s_per_sample * batch.size / max(len(group.devices), 1)
        end = self.cluster.occupy(group.devices, start, duration)
        group.busy_until = end
        norm = float(np.linalg.norm(total))
        self._log(
            agent_id,
            "micro_grad",
            state.version,
            norm,
            batch_version=batch.policy_version,
            samples=batch.size,
            sample_ids=[str(r.sample_id) for r in batch.samples],
            end=end,
        )
        return GradReport(agent_id, state.version, batch.policy_version, batch.size, norm, start, end)

    def apply_global_update(self, agent_id: str) -> int:
        group = self._check_ready(agent_id)
        state = self.states[agent_id]
        if state.samples_accumulated != self.config.global_batch:
            raise IncompleteBatch(
                f"{agent_id}: {state.samples_accumulated} of {self.config.global_batch} samples accumulated"
            )
        grad = state.accumulated_grad()
        state.W = state.opt.apply(state.W, grad)
        state.version += 1
        state.grad_cache = {}
        key = object_key("weights", agent_id, state.version)
        obj, _ = pack_weights([state.W], key=key)
        self.store.set(key, obj, ObjectLocation.device(self.cluster, group.devices[0]), source_dev=group.devices[0])
        end = self.cluster.occupy(group.devices, self.sim.now, self.config.update_s)
        group.busy_until = end
        self._log(agent_id, "update", state.version, float(np.linalg.norm(grad)), key=key, end=end)
        return state.version
