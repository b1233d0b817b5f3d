"""Location-agnostic Set/Get key-value store over device and host memory.

Every node runs a resident daemon holding the metadata of objects placed
on that node.  ``get`` resolves the shortest legal transfer path from the
object's tier to the destination device and reports it as a
:class:`TransferRecord` whose duration follows the cluster cost model.
"""

from __future__ import annotations

import itertools
import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Generator, Sequence

import numpy as np

from .cluster_sim import Cluster, Hop, Reservation, Signal
from .errors import DuplicateKey, EmptyList, GetTimeout, KeyNotFound, LayoutOutOfBounds


class Tier(str, Enum):
    DEVICE = "device"
    HOST = "host"


@dataclass(frozen=True)
class ObjectLocation:
    tier: Tier
    node_id: int
    dev_id: int | None = None
    offset: int = 0
    buffer_id: int = 0
    length: int = 0

    @classmethod
    def device(cls, cluster: Cluster, dev_id: int) -> ObjectLocation:
        return cls(Tier.DEVICE, cluster.node_of(dev_id), dev_id)

    @classmethod
    def host(cls, node_id: int) -> ObjectLocation:
        return cls(Tier.HOST, node_id)


class DType(str, Enum):
    BYTES = "bytes"
    F64 = "f64"
    STRING = "string"
    LIST = "list"


@dataclass(frozen=True)
class HeterogeneousObject:
    key: str
    payload: bytes
    dtype: DType = DType.BYTES
    shape: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.dtype is DType.F64:
            expected = 8 * int(np.prod(self.shape, dtype=np.int64))
            if len(self.payload) != expected:
                raise ValueError(f"f64 payload of {len(self.payload)} bytes does not match shape {self.shape}")

    @classmethod
    def from_array(cls, key: str, arr: np.ndarray) -> HeterogeneousObject:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        return cls(key, arr.tobytes(), DType.F64, tuple(arr.shape))

    @classmethod
    def from_string(cls, key: str, text: str) -> HeterogeneousObject:
        return cls(key, text.encode("utf-8"), DType.STRING)

    @classmethod
    def from_list(cls, key: str, items: Sequence) -> HeterogeneousObject:
        return cls(key, json.dumps(list(items)).encode("utf-8"), DType.LIST)

    def value(self):
        if self.dtype is DType.F64:
            return np.frombuffer(self.payload, dtype=np.float64).reshape(self.shape).copy()
        if self.dtype is DType.STRING:
            return self.payload.decode("utf-8")
        if self.dtype is DType.LIST:
            return json.loads(self.payload.decode("utf-8"))
        return self.payload

    def __len__(self) -> int:
        return len(self.payload)


@dataclass(frozen=True)
class ObjectRef:
    key: str
    location: ObjectLocation
    ready_at: float


@dataclass
class TransferRecord:
    key: str
    path: list[Hop]
    nbytes: int
    sim_duration: float
    start: float = 0.0

    @property
    def complete_at(self) -> float:
        return self.start + self.sim_duration


@dataclass
class _Entry:
    obj: HeterogeneousObject
    location: ObjectLocation
    reservation: Reservation
    ready_at: float


@dataclass
class DaemonRegistry:
    """Per-node metadata daemon."""

    node_id: int
    entries: dict[str, _Entry] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


def resolve_path(src: ObjectLocation, dest: ObjectLocation) -> list[Hop]:
    """Shortest legal path from a stored object to a destination device."""
    if dest.tier is not Tier.DEVICE:
        raise ValueError("get destinations must be device locations")
    if src.tier is Tier.DEVICE:
        return [Hop.SAME_DEVICE] if src.dev_id == dest.dev_id else [Hop.D2D]
    if src.node_id == dest.node_id:
        return [Hop.H2D]
    return [Hop.RDMA, Hop.RH2D]


class ObjectStore:
    def __init__(self, cluster: Cluster):
        self.cluster = cluster
        self.sim = cluster.sim
        self.daemons = [DaemonRegistry(n.node_id) for n in cluster.nodes]
        self._where: dict[str, int] = {}
        self._where_lock = threading.Lock()
        self._set_signals: dict[str, Signal] = {}
        self._buffer_ids = itertools.count()
        self._offsets: dict[int, int] = {}
        self.set_calls = 0
        self.get_calls = 0

    # -- Set ---------------------------------------------------------------
    def set(
        self,
        key: str,
        obj: HeterogeneousObject,
        location: ObjectLocation,
        source_dev: int | None = None,
    ) -> ObjectRef:
        if not key:
            raise ValueError("object keys must be non-empty")
        nbytes = max(len(obj), 1)
        with self._where_lock:
            if key in self._where:
                raise DuplicateKey(key)
            if location.tier is Tier.DEVICE:
                res = self.cluster.reserve_device_mem(location.dev_id, nbytes, owner=key)
                offset = self._offsets.get(location.dev_id, 0)
                self._offsets[location.dev_id] = offset + nbytes
                loc = ObjectLocation(Tier.DEVICE, location.node_id, location.dev_id, offset=offset, length=len(obj))
                path: list[Hop] = []
            else:
                res = self.cluster.reserve_host_mem(location.node_id, nbytes, owner=key)
                loc = ObjectLocation(Tier.HOST, location.node_id, buffer_id=next(self._buffer_ids), length=len(obj))
                path = [Hop.D2H]
            self._where[key] = loc.node_id
        duration = self.cluster.cost.path_cost(path, len(obj))
        ready_at = self.sim.now + duration
        # payload copy outside the registry critical section
        stored = HeterogeneousObject(key, bytes(obj.payload), obj.dtype, obj.shape)
        daemon = self.daemons[loc.node_id]
        with daemon.lock:
            daemon.entries[key] = _Entry(stored, loc, res, ready_at)
        self.set_calls += 1
        self.sim.record(
            "obj_set",
            key=key,
            tier=loc.tier.value,
            node=loc.node_id,
            dev=loc.dev_id,
            path=[h.value for h in path],
            bytes=len(obj),
            duration=duration,
            source_dev=source_dev,
        )
        sig = self._set_signals.pop(key, None)
        if sig is not None:
            sig.succeed(key)
        return ObjectRef(key, loc, ready_at)

    # -- Get ---------------------------------------------------------------
    def _entry(self, key: str) -> _Entry:
        node = self._where.get(key)
        if node is None:
            raise KeyNotFound(key)
        daemon = self.daemons[node]
        with daemon.lock:
            entry = daemon.entries.get(key)
        if entry is None:
            raise KeyNotFound(key)
        return entry

    def contains(self, key: str) -> bool:
        return key in self._where

    def location(self, key: str) -> ObjectLocation:
        return self._entry(key).location

    def peek(self, key: str) -> HeterogeneousObject:
        """Metadata-level read without a transfer (debugging and tests)."""
        return self._entry(key).obj

    def get(self, key: str, dest: ObjectLocation) -> tuple[HeterogeneousObject, TransferRecord]:
        """Copy ``key`` to ``dest``.

        The transfer starts once the object is readable (an in-flight D2H
        must land first) and its completion time is ``record.complete_at``.
        """
        entry = self._entry(key)
        path = resolve_path(entry.location, dest)
        duration = self.cluster.cost.path_cost(path, len(entry.obj))
        start = max(self.sim.now, entry.ready_at)
        rec = TransferRecord(key, path, len(entry.obj), duration, start)
        self.get_calls += 1
        self.sim.record(
            "obj_get",
            key=key,
            dest_dev=dest.dev_id,
            dest_node=dest.node_id,
            path=[h.value for h in path],
            bytes=len(entry.obj),
            duration=duration,
            start=start,
        )
        obj = entry.obj
        return HeterogeneousObject(obj.key, bytes(obj.payload), obj.dtype, obj.shape), rec

    def wait_for(self, key: str, timeout: float | None = None) -> Generator:
        """Process helper: block until ``key`` has been Set, without transferring it."""
        if self.contains(key):
            return
        sig = self._set_signals.get(key)
        if sig is None:
            sig = self._set_signals[key] = self.sim.signal(f"set:{key}")
        if timeout is None:
            yield sig
        else:
            which, _ = yield self.sim.any_of(sig, self.sim.timeout(timeout))
            if which == 1 and not self.contains(key):
                raise GetTimeout(key)

    def fetch(
        self, key: str, dest: ObjectLocation, timeout: float | None = None
    ) -> Generator:
        """Process helper: subscribe to ``key``, wait for the Set, then transfer.

        Use as ``obj, rec = yield from store.fetch(...)``.
        """
        yield from self.wait_for(key, timeout)
        obj, rec = self.get(key, dest)
        wait = rec.complete_at - self.sim.now
        if wait > 0:
            yield wait
        return obj, rec

    # -- Delete ------------------------------------------------------------
    def delete(self, key: str) -> None:
        with self._where_lock:
            node = self._where.pop(key, None)
        if node is None:
            raise KeyNotFound(key)
        daemon = self.daemons[node]
        with daemon.lock:
            entry = daemon.entries.pop(key)
        entry.reservation.release()
        self.sim.record("obj_delete", key=key, bytes=len(entry.obj))

    def keys(self) -> list[str]:
        return sorted(self._where)

    def registered_bytes(self, tier: Tier, ident: int) -> int:
        """Bytes reserved by the store in one device (tier=DEVICE) or host arena."""
        total = 0
        for daemon in self.daemons:
            for entry in daemon.entries.values():
                loc = entry.location
                if loc.tier is tier and (loc.dev_id if tier is Tier.DEVICE else loc.node_id) == ident:
                    total += entry.reservation.nbytes
        return total


# ---------------------------------------------------------------------------
# Contiguous weight packing
# ---------------------------------------------------------------------------

Layout = list[tuple[int, tuple[int, ...]]]


def pack_weights(tensors: Sequence[np.ndarray], key: str = "packed") -> tuple[HeterogeneousObject, Layout]:
    """Concatenate tensors into one contiguous f64 buffer."""
    if len(tensors) == 0:
        raise EmptyList("pack_weights needs at least one tensor")
    layout: Layout = []
    offset = 0
    flat = []
    for t in tensors:
        arr = np.ascontiguousarray(t, dtype=np.float64)
        layout.append((offset, tuple(arr.shape)))
        offset += arr.nbytes
        flat.append(arr.reshape(-1))
    buf = np.concatenate(flat)
    return HeterogeneousObject(key, buf.tobytes(), DType.F64, (buf.size,)), layout


def unpack_weights(buffer: HeterogeneousObject, layout: Layout) -> list[np.ndarray]:
    raw = buffer.payload
    out = []
    for offset, shape in layout:
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if offset < 0 or offset + n > len(raw):
            raise LayoutOutOfBounds(f"segment at {offset} of {n} bytes exceeds buffer of {len(raw)}")
        out.append(np.frombuffer(raw, dtype=np.float64, count=n // 8, offset=offset).reshape(shape).copy())
    return out


def object_key(kind: str, agent_id: str, version: int, *suffix: object) -> str:
    """Keys follow ``{kind}:{agent_id}:v{version}`` with optional ``:suffix`` parts."""
    return ":".join([kind, agent_id, f"v{version}", *map(str, suffix)])
