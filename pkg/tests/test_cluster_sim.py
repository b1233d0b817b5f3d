import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marlpipe.cluster_sim import Cluster, CostModel, Hop, LinkCost, PoolKind, ResourcePool, Simulator
from marlpipe.errors import DeviceOom, EmptyPool, HostOom, InsufficientResources, SchedulingInPast

from conftest import make_cluster


def test_events_fire_in_time_then_id_order():
    sim = Simulator()
    seen = []
    sim.schedule(2.0, lambda: seen.append("b"))
    sim.schedule(1.0, lambda: seen.append("a"))
    sim.schedule(2.0, lambda: seen.append("c"))
    sim.run()
    assert seen == ["a", "b", "c"]
    assert sim.now == 2.0


def test_schedule_in_past_rejected():
    sim = Simulator()
    sim.schedule(5.0, kind="tick")
    sim.run()
    with pytest.raises(SchedulingInPast):
        sim.schedule(1.0)


def test_cancelled_event_never_fires():
    sim = Simulator()
    seen = []
    eid = sim.after(1.0, lambda: seen.append(1))
    sim.cancel(eid)
    sim.run()
    assert seen == []


def test_log_skips_private_kinds():
    sim = Simulator()
    sim.after(1.0, kind="visible", x=1)
    sim.after(2.0, kind="_hidden")
    sim.run()
    assert [e["event_kind"] for e in sim.log] == ["visible"]
    assert sim.log[0] == {"t": 1.0, "event_kind": "visible", "payload": {"x": 1}}


def test_process_yields_delays_and_signals():
    sim = Simulator()
    gate = sim.signal()
    out = []

    def waiter():
        v = yield gate
        out.append((sim.now, v))
        yield 3.0
        out.append(sim.now)
        return "done"

    proc = sim.process(waiter())
    sim.after(2.0, lambda: gate.succeed("go"))
    sim.run()
    assert out == [(2.0, "go"), 5.0]
    assert proc.triggered and proc.value == "done"


def test_any_of_reports_first_child():
    sim = Simulator()
    got = []

    def proc():
        got.append((yield sim.any_of(sim.timeout(4.0), sim.timeout(1.5))))

    sim.process(proc())
    sim.run()
    assert got == [(1, None)]


def test_all_of_waits_for_every_child():
    sim = Simulator()
    got = []

    def proc():
        yield sim.all_of([sim.timeout(1.0), sim.timeout(3.0)])
        got.append(sim.now)

    sim.process(proc())
    sim.run()
    assert got == [3.0]


@given(st.lists(st.floats(min_value=0, max_value=100, allow_nan=False), min_size=1, max_size=40))
def test_clock_never_goes_backwards(times):
    sim = Simulator()
    stamps = []
    for t in times:
        sim.schedule(t, lambda: stamps.append(sim.now))
    sim.run()
    assert stamps == sorted(times)


def test_device_memory_accounting():
    c = make_cluster(mem=100)
    r = c.reserve_device_mem(0, 60)
    with pytest.raises(DeviceOom):
        c.reserve_device_mem(0, 41)
    r.release()
    c.reserve_device_mem(0, 100)


def test_host_memory_accounting():
    c = make_cluster(host=10)
    c.reserve_host_mem(1, 10)
    with pytest.raises(HostOom):
        c.reserve_host_mem(1, 1)


def test_device_ids_map_to_nodes():
    c = make_cluster(nodes=3, devices_per_node=2)
    assert [c.node_of(d) for d in range(6)] == [0, 0, 1, 1, 2, 2]


def test_gang_prefers_single_node():
    c = make_cluster(nodes=2, devices_per_node=4)
    pool = ResourcePool(PoolKind.TRAINING, (2, 3, 4, 5, 6))
    got = c.allocate_gang(pool, 3, "g")
    assert got == [4, 5, 6]
    assert all(c.device(d).bound_to == "g" for d in got)


def test_gang_is_all_or_nothing():
    c = make_cluster()
    pool = ResourcePool(PoolKind.TRAINING, (0, 1))
    c.allocate_gang(pool, 1, "a")
    with pytest.raises(InsufficientResources):
        c.allocate_gang(pool, 2, "b")
    assert c.free_devices(pool) == [1]


def test_gang_honours_preferred_node():
    c = make_cluster(nodes=2, devices_per_node=2)
    pool = ResourcePool(PoolKind.TRAINING, (0, 1, 2, 3))
    assert c.allocate_gang(pool, 1, "g", prefer_node=1) == [2]


def test_link_cost_is_affine_in_bytes():
    link = LinkCost(1e-3, 1e9)
    assert link.duration(0) == pytest.approx(1e-3)
    assert link.duration(2_000_000) - link.duration(1_000_000) == pytest.approx(1e-3)


def test_same_device_hop_is_free():
    assert CostModel().hop_cost(Hop.SAME_DEVICE, 10**9) == 0.0


def _utilization_oracle(log, devices, t0, t1):
    """Busy fraction rebuilt only from the logged busy intervals."""
    total = 0.0
    for e in log:
        if e["event_kind"] == "busy" and e["payload"]["dev"] in devices:
            lo, hi = max(e["payload"]["start"], t0), min(e["payload"]["end"], t1)
            total += max(0.0, hi - lo)
    return total / (len(devices) * (t1 - t0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.floats(0, 50), st.floats(0.1, 20)), min_size=1, max_size=25))
def test_utilization_matches_event_log(spans):
    c = make_cluster(nodes=1, devices_per_node=4)
    for dev, start, dur in spans:
        c.occupy([dev], start, dur)
    c.sim.run()
    end = max(s + d for _, s, d in spans)
    devs = [0, 1, 2, 3]
    assert c.utilization(devs, 0.0, end) == pytest.approx(_utilization_oracle(c.sim.log, devs, 0.0, end), abs=1e-12)
    assert 0.0 <= c.utilization(devs, 0.0, end) <= 1.0


def test_overlapping_busy_counts_once():
    c = make_cluster(nodes=1, devices_per_node=1)
    c.occupy([0], 0.0, 4.0)
    c.occupy([0], 2.0, 4.0)
    c.sim.run()
    assert c.utilization([0], 0.0, 8.0) == pytest.approx(0.75)


def test_empty_pool_utilization_raises():
    c = make_cluster()
    with pytest.raises(EmptyPool):
        c.utilization([], 0.0, 1.0)


def test_cluster_needs_devices():
    with pytest.raises(ValueError):
        Cluster(Simulator(), 0, 1, 1, 1)
