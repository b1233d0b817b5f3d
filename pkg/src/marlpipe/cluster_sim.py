"""Discrete-event model of a disaggregated accelerator cluster.

The :class:`Simulator` is a single-threaded event loop with a virtual clock
(the default) or a wall clock for demos.  Engines are written as generator
processes that ``yield`` either a delay in seconds or a :class:`Signal`.

The :class:`Cluster` owns nodes, devices, host arenas, the transfer cost
model, and per-device busy accounting used for utilization metrics.
"""

from __future__ import annotations

import heapq
import itertools
import json
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Generator, Iterable

from .errors import (
    DeviceOom,
    EmptyPool,
    HostOom,
    InsufficientResources,
    SchedulingInPast,
)


class ClockMode(str, Enum):
    VIRTUAL = "virtual"
    WALL = "wall"


class Signal:
    """One-shot condition that processes and callbacks can wait on."""

    def __init__(self, sim: Simulator, name: str = ""):
        self.sim = sim
        self.name = name
        self.triggered = False
        self.value: Any = None
        self._callbacks: list[Callable[[Any], None]] = []

    def succeed(self, value: Any = None) -> None:
        if self.triggered:
            return
        self.triggered = True
        self.value = value
        callbacks, self._callbacks = self._callbacks, []
        for cb in callbacks:
            self.sim.schedule(self.sim.now, lambda cb=cb: cb(value), kind="_resume")

    def add_callback(self, cb: Callable[[Any], None]) -> None:
        if self.triggered:
            self.sim.schedule(self.sim.now, lambda: cb(self.value), kind="_resume")
        else:
            self._callbacks.append(cb)


class Process(Signal):
    """Drives a generator; succeeds with the generator's return value."""

    def __init__(self, sim: Simulator, gen: Generator, name: str = ""):
        super().__init__(sim, name)
        self._gen = gen
        sim.schedule(sim.now, lambda: self._resume(None), kind="_resume")

    def _resume(self, value: Any) -> None:
        try:
            target = self._gen.send(value)
        except StopIteration as stop:
            self.succeed(stop.value)
            return
        if isinstance(target, Signal):
            target.add_callback(self._resume)
        elif isinstance(target, (int, float)):
            if target < 0:
                raise SchedulingInPast(f"negative delay {target}")
            self.sim.schedule(self.sim.now + target, lambda: self._resume(None), kind="_resume")
        else:
            raise TypeError(f"process yielded unsupported value {target!r}")


class Simulator:
    """Event loop with deterministic (time, event id) ordering."""

    def __init__(self, mode: ClockMode | str = ClockMode.VIRTUAL, time_scale: float = 1.0):
        self.mode = ClockMode(mode)
        self.time_scale = time_scale
        self.now = 0.0
        self._queue: list[tuple[float, int, str, Callable[[], None] | None, dict]] = []
        self._ids = itertools.count()
        self._cancelled: set[int] = set()
        self.log: list[dict] = []

    def schedule(
        self,
        at: float,
        callback: Callable[[], None] | None = None,
        kind: str = "event",
        **payload: Any,
    ) -> int:
        if at < self.now:
            raise SchedulingInPast(f"cannot schedule at {at} < now {self.now}")
        eid = next(self._ids)
        heapq.heappush(self._queue, (at, eid, kind, callback, payload))
        return eid

    def after(self, delay: float, callback: Callable[[], None] | None = None, kind: str = "event", **payload: Any) -> int:
        return self.schedule(self.now + delay, callback, kind, **payload)

    def cancel(self, eid: int) -> None:
        self._cancelled.add(eid)

    def record(self, kind: str, **payload: Any) -> None:
        self.log.append({"t": self.now, "event_kind": kind, "payload": payload})

    def process(self, gen: Generator, name: str = "") -> Process:
        return Process(self, gen, name)

    def signal(self, name: str = "") -> Signal:
        return Signal(self, name)

    def timeout(self, delay: float) -> Signal:
        sig = Signal(self, "timeout")
        self.after(delay, lambda: sig.succeed(None), kind="_resume")
        return sig

    def any_of(self, *signals: Signal) -> Signal:
        """Succeeds with ``(index, value)`` of the first child to fire."""
        out = Signal(self, "any_of")
        for i, s in enumerate(signals):
            s.add_callback(lambda v, i=i: out.succeed((i, v)))
        return out

    def all_of(self, signals: Iterable[Signal]) -> Signal:
        signals = list(signals)
        out = Signal(self, "all_of")
        remaining = [len(signals)]
        if not signals:
            out.succeed([])
            return out

        def done(_: Any) -> None:
            remaining[0] -= 1
            if remaining[0] == 0:
                out.succeed([s.value for s in signals])

        for s in signals:
            s.add_callback(done)
        return out

    @property
    def pending(self) -> int:
        return len(self._queue)

    def step(self) -> bool:
        while self._queue:
            at, eid, kind, callback, payload = heapq.heappop(self._queue)
            if eid in self._cancelled:
                self._cancelled.discard(eid)
                continue
            if self.mode is ClockMode.WALL and at > self.now:
                time.sleep((at - self.now) * self.time_scale)
            self.now = at
            if not kind.startswith("_"):
                self.log.append({"t": at, "event_kind": kind, "payload": payload})
            if callback is not None:
                callback()
            return True
        return False

    def run(self, until: float | None = None, stop: Signal | None = None) -> None:
        while self._queue:
            if stop is not None and stop.triggered:
                return
            if until is not None and self._queue[0][0] > until:
                self.now = until
                return
            self.step()

    def dump_log(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.log_ndjson())

    def log_ndjson(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.log)


# ---------------------------------------------------------------------------
# Hardware model
# ---------------------------------------------------------------------------


@dataclass
class Reservation:
    arena: Device | HostArena
    nbytes: int
    owner: str = ""
    released: bool = False

    def release(self) -> None:
        if not self.released:
            self.arena._free(self.nbytes)
            self.released = True


@dataclass
class Device:
    global_dev_id: int
    node_id: int
    mem_capacity: int
    mem_used: int = 0
    busy_until: float = 0.0
    busy_accum: float = 0.0
    busy_intervals: list[tuple[float, float]] = field(default_factory=list)
    bound_to: str | None = None
    _active: int = 0
    _busy_since: float = 0.0

    def reserve(self, nbytes: int, owner: str = "") -> Reservation:
        if nbytes <= 0:
            raise ValueError("reservation size must be positive")
        if self.mem_used + nbytes > self.mem_capacity:
            raise DeviceOom(
                f"device {self.global_dev_id}: {self.mem_used} + {nbytes} > {self.mem_capacity}"
            )
        self.mem_used += nbytes
        return Reservation(self, nbytes, owner)

    def _free(self, nbytes: int) -> None:
        self.mem_used -= nbytes

    @property
    def mem_free(self) -> int:
        return self.mem_capacity - self.mem_used


@dataclass
class HostArena:
    node_id: int
    capacity: int
    used: int = 0

    def reserve(self, nbytes: int, owner: str = "") -> Reservation:
        if nbytes <= 0:
            raise ValueError("reservation size must be positive")
        if self.used + nbytes > self.capacity:
            raise HostOom(f"host {self.node_id}: {self.used} + {nbytes} > {self.capacity}")
        self.used += nbytes
        return Reservation(self, nbytes, owner)

    def _free(self, nbytes: int) -> None:
        self.used -= nbytes


@dataclass
class Node:
    node_id: int
    devices: list[Device]
    host_mem: HostArena
    rdma_bw: float


class PoolKind(str, Enum):
    ROLLOUT = "rollout"
    TRAINING = "training"


@dataclass
class ResourcePool:
    kind: PoolKind
    devices: tuple[int, ...]


class Hop(str, Enum):
    SAME_DEVICE = "SameDevice"
    D2D = "D2D"
    D2H = "D2H"
    H2D = "H2D"
    RDMA = "RDMA"
    RH2D = "RH2D"


@dataclass(frozen=True)
class LinkCost:
    latency_s: float
    bandwidth: float  # bytes per second

    def duration(self, nbytes: int) -> float:
        return self.latency_s + nbytes / self.bandwidth


@dataclass
class CostModel:
    """Linear per-hop transfer cost: latency + bytes / bandwidth."""

    d2d: LinkCost = LinkCost(2e-5, 5.0e10)
    h2d: LinkCost = LinkCost(5e-5, 2.0e10)
    d2h: LinkCost = LinkCost(5e-5, 2.0e10)
    rdma: LinkCost = LinkCost(1e-4, 1.0e10)

    def hop_cost(self, hop: Hop, nbytes: int) -> float:
        if hop is Hop.SAME_DEVICE:
            return 0.0
        link = {
            Hop.D2D: self.d2d,
            Hop.H2D: self.h2d,
            Hop.RH2D: self.h2d,
            Hop.D2H: self.d2h,
            Hop.RDMA: self.rdma,
        }[hop]
        return link.duration(nbytes)

    def path_cost(self, path: Iterable[Hop], nbytes: int) -> float:
        return sum(self.hop_cost(h, nbytes) for h in path)


class Cluster:
    """Nodes, devices, resource pools and busy-time accounting."""

    def __init__(
        self,
        sim: Simulator,
        nodes: int,
        devices_per_node: int,
        mem_bytes: int,
        host_mem_bytes: int,
        cost: CostModel | None = None,
    ):
        if nodes < 1 or devices_per_node < 1:
            raise ValueError("cluster needs at least one node and one device per node")
        self.sim = sim
        self.cost = cost or CostModel()
        self.nodes: list[Node] = []
        self.devices: list[Device] = []
        for n in range(nodes):
            devs = []
            for local in range(devices_per_node):
                # bundle index == global device id: fixed bijection
                d = Device(n * devices_per_node + local, n, mem_bytes)
                devs.append(d)
                self.devices.append(d)
            self.nodes.append(Node(n, devs, HostArena(n, host_mem_bytes), self.cost.rdma.bandwidth))
        self.pools: dict[PoolKind, ResourcePool] = {}

    def configure_pools(self, rollout: Iterable[int], training: Iterable[int]) -> None:
        rollout, training = tuple(rollout), tuple(training)
        for d in rollout + training:
            if not 0 <= d < len(self.devices):
                raise ValueError(f"unknown device {d}")
        self.pools = {
            PoolKind.ROLLOUT: ResourcePool(PoolKind.ROLLOUT, rollout),
            PoolKind.TRAINING: ResourcePool(PoolKind.TRAINING, training),
        }

    def device(self, dev_id: int) -> Device:
        return self.devices[dev_id]

    def node_of(self, dev_id: int) -> int:
        return self.devices[dev_id].node_id

    # -- memory ---------------------------------------------------------
    def reserve_device_mem(self, dev_id: int, nbytes: int, owner: str = "") -> Reservation:
        return self.devices[dev_id].reserve(nbytes, owner)

    def reserve_host_mem(self, node_id: int, nbytes: int, owner: str = "") -> Reservation:
        return self.nodes[node_id].host_mem.reserve(nbytes, owner)

    # -- placement -------------------------------------------------------
    def allocate_gang(
        self, pool: ResourcePool, n: int, owner: str, prefer_node: int | None = None
    ) -> list[int]:
        """Bind ``n`` free pool devices to ``owner``, all-or-nothing.

        A single node is used whenever one has enough free devices; the
        preferred node is tried first, then nodes in id order.
        """
        free = [d for d in pool.devices if self.devices[d].bound_to is None]
        by_node: dict[int, list[int]] = {}
        for d in free:
            by_node.setdefault(self.devices[d].node_id, []).append(d)
        order = sorted(by_node)
        if prefer_node is not None and prefer_node in by_node:
            order.remove(prefer_node)
            order.insert(0, prefer_node)
        chosen: list[int] | None = None
        for node in order:
            if len(by_node[node]) >= n:
                chosen = by_node[node][:n]
                break
        if chosen is None:
            if len(free) < n:
                raise InsufficientResources(f"{owner} needs {n} devices, {len(free)} free")
            chosen = free[:n]
        for d in chosen:
            self.devices[d].bound_to = owner
        return chosen

    def release_gang(self, dev_ids: Iterable[int]) -> None:
        for d in dev_ids:
            self.devices[d].bound_to = None

    def free_devices(self, pool: ResourcePool) -> list[int]:
        return [d for d in pool.devices if self.devices[d].bound_to is None]

    # -- busy accounting -------------------------------------------------
    def begin_busy(self, dev_id: int) -> None:
        dev = self.devices[dev_id]
        if dev._active == 0:
            dev._busy_since = self.sim.now
        dev._active += 1

    def end_busy(self, dev_id: int) -> None:
        dev = self.devices[dev_id]
        dev._active -= 1
        if dev._active == 0:
            start, end = dev._busy_since, self.sim.now
            if end > start:
                dev.busy_intervals.append((start, end))
                dev.busy_accum += end - start
                self.sim.record("busy", dev=dev_id, start=start, end=end)

    def occupy(self, dev_ids: Iterable[int], start: float, duration: float) -> float:
        """Mark devices busy over ``[start, start + duration)``; returns the end time."""
        dev_ids = list(dev_ids)
        end = start + duration
        if duration <= 0:
            return end

        def begin() -> None:
            for d in dev_ids:
                self.begin_busy(d)

        def finish() -> None:
            for d in dev_ids:
                self.end_busy(d)

        self.sim.schedule(start, begin, kind="_busy")
        self.sim.schedule(end, finish, kind="_busy")
        for d in dev_ids:
            self.devices[d].busy_until = max(self.devices[d].busy_until, end)
        return end

    def busy_in_window(self, dev_id: int, t0: float, t1: float) -> float:
        dev = self.devices[dev_id]
        total = 0.0
        spans = list(dev.busy_intervals)
        if dev._active > 0:
            spans.append((dev._busy_since, self.sim.now))
        for s, e in spans:
            lo, hi = max(s, t0), min(e, t1)
            if hi > lo:
                total += hi - lo
        return total

    def utilization(self, pool: ResourcePool | Iterable[int], t0: float, t1: float) -> float:
        devs = list(pool.devices if isinstance(pool, ResourcePool) else pool)
        if not devs:
            raise EmptyPool("utilization of an empty pool")
        if t1 <= t0:
            raise ValueError("window must have t1 > t0")
        fracs = [self.busy_in_window(d, t0, t1) / (t1 - t0) for d in devs]
        return sum(fracs) / len(fracs)
