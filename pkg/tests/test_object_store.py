import threading
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from marlpipe.cluster_sim import Hop
from marlpipe.errors import DeviceOom, DuplicateKey, EmptyList, GetTimeout, KeyNotFound, LayoutOutOfBounds
from marlpipe.object_store import (
    HeterogeneousObject,
    ObjectLocation,
    ObjectStore,
    Tier,
    object_key,
    pack_weights,
    resolve_path,
    unpack_weights,
)

from conftest import make_cluster


def _tensor(key="w", n=5, seed=0):
    return HeterogeneousObject.from_array(key, np.random.default_rng(seed).normal(size=n))


def test_device_to_device_same_node(cluster, store):
    store.set("w", _tensor(), ObjectLocation.device(cluster, 0))
    _, rec = store.get("w", ObjectLocation.device(cluster, 1))
    assert rec.path == [Hop.D2D]


def test_same_device_is_zero_cost(cluster, store):
    store.set("w", _tensor(), ObjectLocation.device(cluster, 2))
    _, rec = store.get("w", ObjectLocation.device(cluster, 2))
    assert rec.path == [Hop.SAME_DEVICE]
    assert rec.sim_duration == 0.0


def test_local_host_to_device(cluster, store):
    store.set("w", _tensor(), ObjectLocation.host(0))
    _, rec = store.get("w", ObjectLocation.device(cluster, 3))
    assert rec.path == [Hop.H2D]


def test_remote_host_goes_over_rdma(cluster, store):
    store.set("w", _tensor(), ObjectLocation.host(1))
    _, rec = store.get("w", ObjectLocation.device(cluster, 0))
    assert rec.path == [Hop.RDMA, Hop.RH2D]


def test_host_set_records_d2h_and_delays_readability(cluster, store):
    obj = _tensor(n=1000)
    ref = store.set("w", obj, ObjectLocation.host(0))
    assert ref.ready_at == pytest.approx(cluster.cost.d2h.duration(len(obj)))
    _, rec = store.get("w", ObjectLocation.device(cluster, 0))
    assert rec.start == ref.ready_at
    assert cluster.sim.log[0]["payload"]["path"] == ["D2H"]


def test_duration_is_sum_of_hop_costs(cluster, store):
    obj = _tensor(n=4096)
    store.set("w", obj, ObjectLocation.host(1))
    _, rec = store.get("w", ObjectLocation.device(cluster, 0))
    expect = cluster.cost.rdma.duration(len(obj)) + cluster.cost.h2d.duration(len(obj))
    assert rec.sim_duration == pytest.approx(expect)


def _all_locations(cluster):
    locs = [ObjectLocation.device(cluster, d) for d in range(len(cluster.devices))]
    locs += [ObjectLocation.host(n) for n in range(len(cluster.nodes))]
    return locs


def _bfs_hops(cluster, src, dest):
    """Fewest legal hops from src to dest, found by breadth-first search."""

    def neighbours(loc):
        if loc.tier is Tier.DEVICE:
            for d in range(len(cluster.devices)):
                yield ("dev", d)
            yield ("host", loc.node_id)
        else:
            for d in range(len(cluster.devices)):
                if cluster.node_of(d) == loc.node_id:
                    yield ("dev", d)
            for n in range(len(cluster.nodes)):
                if n != loc.node_id:
                    yield ("host", n)

    def as_loc(node):
        kind, ident = node
        return ObjectLocation.device(cluster, ident) if kind == "dev" else ObjectLocation.host(ident)

    start = ("dev", src.dev_id) if src.tier is Tier.DEVICE else ("host", src.node_id)
    goal = ("dev", dest.dev_id)
    if start == goal:
        return 1  # the SameDevice pseudo-hop
    seen = {start: 0}
    frontier = deque([start])
    while frontier:
        cur = frontier.popleft()
        for nxt in neighbours(as_loc(cur)):
            if nxt not in seen:
                seen[nxt] = seen[cur] + 1
                if nxt == goal:
                    return seen[nxt]
                frontier.append(nxt)
    raise AssertionError("unreachable")


def test_path_is_minimal_for_every_pairing():
    c = make_cluster(nodes=3, devices_per_node=2)
    for src in _all_locations(c):
        for d in range(len(c.devices)):
            dest = ObjectLocation.device(c, d)
            path = resolve_path(src, dest)
            assert len(path) == _bfs_hops(c, src, dest), (src, dest, path)


@pytest.mark.parametrize("src", ["device", "local-host", "remote-host"])
def test_round_trip_identity_per_tier(cluster, store, src):
    arr = np.random.default_rng(7).normal(size=(3, 4))
    obj = HeterogeneousObject.from_array("t", arr)
    loc = {
        "device": ObjectLocation.device(cluster, 1),
        "local-host": ObjectLocation.host(0),
        "remote-host": ObjectLocation.host(1),
    }[src]
    store.set("t", obj, loc)
    got, _ = store.get("t", ObjectLocation.device(cluster, 0))
    assert got.payload == obj.payload
    assert np.array_equal(got.value(), arr)


def test_string_and_list_round_trip(cluster, store):
    store.set("s", HeterogeneousObject.from_string("s", "héllo"), ObjectLocation.host(0))
    store.set("l", HeterogeneousObject.from_list("l", [1, 2, 3]), ObjectLocation.host(1))
    assert store.get("s", ObjectLocation.device(cluster, 0))[0].value() == "héllo"
    assert store.get("l", ObjectLocation.device(cluster, 0))[0].value() == [1, 2, 3]


def test_duplicate_key_rejected(cluster, store):
    store.set("w", _tensor(), ObjectLocation.host(0))
    with pytest.raises(DuplicateKey):
        store.set("w", _tensor(), ObjectLocation.host(0))


def test_device_oom_on_set():
    c = make_cluster(mem=4)
    s = ObjectStore(c)
    with pytest.raises(DeviceOom):
        s.set("x", HeterogeneousObject("x", b"12345678"), ObjectLocation.device(c, 0))


def test_delete_then_get_fails(cluster, store):
    store.set("w", _tensor(), ObjectLocation.host(0))
    store.delete("w")
    with pytest.raises(KeyNotFound):
        store.get("w", ObjectLocation.device(cluster, 0))
    with pytest.raises(KeyNotFound):
        store.delete("w")


def test_delete_releases_exact_bytes(cluster, store):
    dev = cluster.device(0)
    before = dev.mem_used
    obj = _tensor(n=100)
    store.set("w", obj, ObjectLocation.device(cluster, 0))
    assert dev.mem_used - before == len(obj)
    assert store.registered_bytes(Tier.DEVICE, 0) == len(obj)
    store.delete("w")
    assert dev.mem_used == before


def test_registered_bytes_track_arena_usage(cluster, store):
    for i in range(5):
        store.set(f"h{i}", _tensor(n=10 + i), ObjectLocation.host(1))
    store.delete("h2")
    assert store.registered_bytes(Tier.HOST, 1) == cluster.nodes[1].host_mem.used


def test_wait_for_blocks_until_set(cluster, store):
    sim = cluster.sim
    got = []

    def reader():
        obj, rec = yield from store.fetch("late", ObjectLocation.device(cluster, 0))
        got.append((sim.now, obj.value()))

    sim.process(reader())
    sim.after(3.0, lambda: store.set("late", HeterogeneousObject.from_string("late", "x"), ObjectLocation.device(cluster, 0)))
    sim.run()
    assert got == [(3.0, "x")]


def test_wait_for_times_out(cluster, store):
    sim = cluster.sim
    errors = []

    def reader():
        try:
            yield from store.wait_for("never", timeout=2.0)
        except GetTimeout as exc:
            errors.append((sim.now, str(exc)))

    sim.process(reader())
    sim.run()
    assert errors and errors[0][0] == 2.0


def test_concurrent_sets_register_exactly_once(cluster, store):
    wins, losses = [], []
    barrier = threading.Barrier(16)

    def worker(i):
        barrier.wait()
        try:
            store.set("contended", HeterogeneousObject("contended", bytes([i])), ObjectLocation.host(0))
            wins.append(i)
        except DuplicateKey:
            losses.append(i)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(wins) == 1 and len(losses) == 15
    assert store.peek("contended").payload == bytes([wins[0]])


def test_concurrent_distinct_keys_all_land(cluster, store):
    def worker(i):
        for j in range(50):
            key = f"k{i}-{j}"
            store.set(key, HeterogeneousObject(key, b"x" * (j + 1)), ObjectLocation.host(i % 2))

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(store.keys()) == 400
    assert store.set_calls == 400


def test_pack_layout_example():
    buf, layout = pack_weights([np.zeros(3), np.ones(2)])
    assert len(buf) == 40
    assert layout == [(0, (3,)), (24, (2,))]


@settings(max_examples=60, deadline=None)
@given(st.lists(hnp.arrays(np.float64, hnp.array_shapes(max_dims=3, max_side=5)), min_size=1, max_size=5))
def test_pack_unpack_round_trip(tensors):
    buf, layout = pack_weights(tensors)
    assert len(buf) == sum(t.nbytes for t in tensors)
    out = unpack_weights(buf, layout)
    for a, b in zip(tensors, out):
        assert a.shape == b.shape
        assert a.tobytes() == b.tobytes()


def test_pack_empty_list_rejected():
    with pytest.raises(EmptyList):
        pack_weights([])


def test_unpack_out_of_bounds():
    buf, _ = pack_weights([np.zeros(2)])
    with pytest.raises(LayoutOutOfBounds):
        unpack_weights(buf, [(16, (1,))])
    assert unpack_weights(buf, []) == []


def test_f64_payload_must_match_shape():
    with pytest.raises(ValueError):
        HeterogeneousObject("x", b"1234", dtype=HeterogeneousObject.from_array("y", np.zeros(1)).dtype, shape=(1,))


def test_key_convention():
    assert object_key("weights", "coder", 3) == "weights:coder:v3"
    assert object_key("optstate", "coder", 3, "ckpt") == "optstate:coder:v3:ckpt"
