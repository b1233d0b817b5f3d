"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (visible even under output
capture) and then asserts, so a plain ``pytest tests/test_acceptance.py``
both reports and gates.  Runtime is a few minutes; most of it is the
20-seed pipeline sweeps.
"""

import random
import time
from collections import defaultdict
from functools import lru_cache

import numpy as np
import pytest

from marlpipe.cli import main as cli_main
from marlpipe.cluster_sim import Cluster, PoolKind, ResourcePool, Simulator
from marlpipe.config import RunConfig
from marlpipe.experience_store import ExperienceStore, SampleId, SampleRecord
from marlpipe.object_store import HeterogeneousObject, ObjectLocation, ObjectStore, pack_weights
from marlpipe.orchestrator import Orchestrator, run
from marlpipe.policy import PolicyModel, features, init_weights, keyed_rng, sample_grad, surrogate_loss
from marlpipe.rollout_engine import AgentWorkflow, InferenceInstance, LoadHeap, RolloutEngine, RolloutParams, sample_schema
from marlpipe.training_engine import TrainerConfig, TrainingEngine
from marlpipe.workload import LatencyModel

SEEDS = range(20)


@pytest.fixture
def verdict(capsys):
    def report(n: int, name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n:>2} {name}: {detail}")
        assert ok, detail

    return report


@lru_cache(maxsize=None)
def _run(seed: int, mode: str, steps: int = 5, skew: bool = False, rebalance: bool = True, static: bool = False, concurrency: int = 16):
    cfg = RunConfig().replace(
        steps=steps,
        pipeline={"seed": seed},
        skew={"enabled": skew},
        rollout={"rebalance": rebalance, "concurrency": concurrency},
    )
    if static:
        cfg = cfg.replace(cluster={"training_devices": 3}, training={"allocation": "static"})
    return run(cfg, mode)


def _trainer(slots=1, global_batch=64, mem=1 << 34):
    sim = Simulator()
    cluster = Cluster(sim, 2, 4, mem, 1 << 36)
    pool = ResourcePool(PoolKind.TRAINING, tuple(range(slots)))
    cluster.configure_pools((), pool.devices)
    store = ObjectStore(cluster)
    return TrainingEngine(cluster, store, pool, TrainerConfig(global_batch=global_batch)), ExperienceStore(store)


def _settle(eng):
    horizon = max([g.busy_until for g in eng.groups.values()] + [eng.sim.now])
    eng.sim.schedule(horizon, kind="_tick")
    eng.sim.run()


def _batch_gradient(W, samples, global_batch):
    """Whole-batch gradient in one vectorised pass over every token of every sample."""
    vocab, dim = W.shape
    phis, targets, weights = [], [], []
    for prompt, response, adv in samples:
        ctx = list(prompt)
        for tok in response:
            phis.append(features(ctx, dim))
            targets.append(tok)
            weights.append(adv / global_batch)
            ctx.append(tok)
    phi = np.array(phis)
    z = phi @ W.T
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(targets)), targets] -= 1.0
    return (p * np.array(weights)[:, None]).T @ phi


def test_c01_gradient_accumulation_equivalence(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(100):
        rng = keyed_rng(i, "ga")
        eng, exp = _trainer()
        eng.register_agent("a")
        eng.activate("a")
        _settle(eng)
        W = rng.normal(0, 0.3, size=(32, 16))
        eng.states["a"].W = W.copy()
        exp.create_table(sample_schema("a"))
        samples = []
        for j in range(64):
            sid = SampleId(f"q{j // 16}", 0, j % 16)
            prompt = [int(x) for x in rng.integers(1, 32, rng.integers(1, 6))]
            response = [int(x) for x in rng.integers(0, 32, rng.integers(1, 9))]
            adv = float(rng.normal())
            exp.insert("a", SampleRecord(0, sid))
            for col, val in (("prompt", prompt), ("response", response), ("logprobs", np.zeros(len(response))), ("reward", 0.0), ("advantage", adv)):
                exp.set_cell("a", sid, 0, col, val)
            samples.append((prompt, response, adv))
        for _ in range(4):
            eng.train_micro_batch("a", exp.poll_micro_batch("a", 0, 16), exp)
            _settle(eng)
        cached = eng.states["a"].accumulated_grad()
        full = _batch_gradient(W, samples, 64)
        worst = max(worst, np.linalg.norm(cached - full) / np.linalg.norm(full))
    elapsed = time.perf_counter() - t0
    verdict(1, "gradient accumulation", worst <= 1e-12 and elapsed < 10.0, f"max rel err {worst:.2e}, {elapsed:.2f}s")


def test_c02_sync_equivalence(verdict):
    t0 = time.perf_counter()
    a = _run(2048, "micro-batch-async")
    b = _run(2048, "disagg-sync")
    same = all(a.weights[k].tobytes() == b.weights[k].tobytes() for k in a.weights)
    agents = len(a.weights)
    versions = {s.version for s in a.orchestrator.training.states.values()}
    elapsed = time.perf_counter() - t0
    ok = same and agents == 3 and versions == {5} and elapsed < 60.0
    verdict(2, "sync equivalence", ok, f"bitwise={same}, agents={agents}, versions={sorted(versions)}, {elapsed:.1f}s")


def test_c03_tail_hiding(verdict):
    ratios, violations = [], 0
    for seed in SEEDS:
        mba = [s.e2e_s for s in _run(seed, "micro-batch-async").report.steps]
        dis = [s.e2e_s for s in _run(seed, "disagg-sync").report.steps]
        violations += sum(x > y for x, y in zip(mba, dis))
        ratios += [y / x for x, y in zip(mba, dis)]
    mean = float(np.mean(ratios))
    ok = violations == 0 and mean >= 1.3
    verdict(3, "tail hiding", ok, f"{violations} step violations, mean per-step speedup {mean:.3f}x (min {min(ratios):.3f}x)")


def _rollout_makespan(res) -> float:
    return sum(t.rollout_end - t.rollout_start for t in res.orchestrator.steps)


# Four slots per instance: 16 per agent against up to 64 trajectories in flight,
# so the core agent's queue actually backs up.  At the default 16 slots nothing
# ever waits and the rebalancer (rightly) never fires.
SKEW_CONCURRENCY = 4


def test_c04_load_balancing(verdict):
    worse = []
    gains = []
    migrations = 0
    for seed in SEEDS:
        with_rb = _run(seed, "disagg-sync", steps=2, skew=True, concurrency=SKEW_CONCURRENCY)
        migrations += sum(e["event_kind"] == "migrate" for e in with_rb.orchestrator.sim.log)
        on = _rollout_makespan(with_rb)
        off = _rollout_makespan(_run(seed, "disagg-sync", steps=2, skew=True, rebalance=False, concurrency=SKEW_CONCURRENCY))
        gains.append(off / on)
        if on > off:
            worse.append(seed)

    rng = random.Random(4)
    insts = [InferenceInstance(i, "a", i) for i in range(16)]
    heap = LoadHeap()
    live: list[InferenceInstance] = []
    states = mismatches = 0
    while states < 10_000:
        op = rng.random()
        if op < 0.15 and len(live) < len(insts):
            inst = rng.choice([i for i in insts if i not in live])
            heap.push(inst)
            live.append(inst)
        elif op < 0.25 and len(live) > 1:
            inst = rng.choice(live)
            heap.remove(inst)
            live.remove(inst)
        elif live:
            inst = rng.choice(live)
            inst.pending = max(0, inst.pending + rng.choice([-1, 1, 1, 3]))
            heap.update(inst)
        if live:
            states += 1
            mismatches += heap.peek() is not min(live, key=lambda i: (i.pending, i.instance_id))

    # and the live engine under the skewed workload
    cfg = RunConfig().replace(steps=2, skew={"enabled": True}, rollout={"concurrency": SKEW_CONCURRENCY})
    orch = Orchestrator(cfg, "disagg-sync")
    engine = orch.rollout
    original = engine._start
    tally = {"checks": 0, "bad": 0}

    def checked(req, inst):
        best = min(engine.live_instances(req.agent_id), key=lambda i: (i.pending, i.instance_id))
        tally["checks"] += 1
        tally["bad"] += inst is not best
        original(req, inst)

    engine._start = checked
    orch.run()
    engine_checks, engine_bad = tally["checks"], tally["bad"]
    ok = not worse and migrations > 0 and mismatches == 0 and engine_bad == 0 and engine_checks > 0
    detail = (
        f"rebalance worse on seeds {worse}, {migrations} migrations, mean gain {np.mean(gains):.3f}x; "
        f"heap oracle {mismatches}/{states} mismatches; engine {engine_bad}/{engine_checks} non-argmin dispatches"
    )
    verdict(4, "load balancing", ok, detail)


def test_c05_utilization_dominance(verdict):
    agent_centric, static, losses = [], [], []
    for seed in SEEDS:
        ac = _run(seed, "micro-batch-async").orchestrator.training_utilization()
        st = _run(seed, "micro-batch-async", static=True).orchestrator.training_utilization()
        agent_centric.append(ac)
        static.append(st)
        if ac < st:
            losses.append(seed)
    ok = not losses and max(static) <= 0.5
    detail = (
        f"agent-centric {min(agent_centric):.3f}..{max(agent_centric):.3f}, "
        f"static {min(static):.3f}..{max(static):.3f}, static wins on {losses}"
    )
    verdict(5, "utilization dominance", ok, detail)


def _state_bytes(state):
    parts = [state.W, state.opt.m, state.opt.v] + [state.grad_cache[k] for k in sorted(state.grad_cache)]
    return b"".join(p.tobytes() for p in parts), state.version, state.opt.step, sorted(state.grad_cache)


def test_c06_swap_fidelity_and_cost_shape(verdict):
    shapes = [(100, 10), (100, 100), (1000, 100), (1000, 1000)]
    identical = True
    transfer, control = [], set()
    for vocab, dim in shapes:
        eng, _ = _trainer(global_batch=4)
        eng.register_agent("a", vocab=vocab, dim=dim)
        state = eng.states["a"]
        rng = keyed_rng(vocab * dim, "swap")
        state.W = rng.normal(size=state.W.shape)
        state.opt.m = rng.normal(size=state.W.shape)
        state.opt.v = rng.random(state.W.shape)
        state.opt.step = 3
        state.grad_cache = {(SampleId("q", 0, 0), 0): rng.normal(size=state.W.shape)}
        eng.activate("a")
        _settle(eng)
        before = _state_bytes(state)
        eng.suspend("a")
        out = eng.last_swap
        _settle(eng)
        eng.activate("a")
        back = eng.last_swap
        identical &= _state_bytes(eng.states["a"]) == before
        transfer.append((out.transfer_s, back.transfer_s))
        control |= {out.control_s, back.control_s}
    size = np.array([v * d for v, d in shapes], dtype=float)
    linear = True
    for column in zip(*transfer):
        t = np.array(column)
        slope, icept = np.polyfit(size, t, 1)
        linear &= slope > 0 and np.allclose(t, slope * size + icept, rtol=1e-6)
    ok = identical and linear and len(control) == 1
    verdict(6, "swap fidelity", ok, f"bitwise={identical}, linear transfer={linear}, control costs={sorted(control)}")


def test_c07_object_store_laws(verdict):
    sim = Simulator()
    cluster = Cluster(sim, 2, 2, 1 << 30, 1 << 32)
    store = ObjectStore(cluster)
    places = [ObjectLocation.device(cluster, d) for d in range(4)] + [ObjectLocation.host(n) for n in range(2)]
    arr = np.arange(12.0).reshape(3, 4) / 7.0
    round_trips = bad = 0
    for i, src in enumerate(places):
        key = f"rt{i}"
        store.set(key, HeterogeneousObject.from_array(key, arr), src)
        for dest in places[:4]:
            got, _ = store.get(key, dest)
            round_trips += 1
            bad += not np.array_equal(got.value(), arr)

    calls = []
    shapes = [(100, 10), (100, 100), (1000, 100), (1000, 1000)]
    for vocab, dim in shapes:
        for n in (1, 4, 16):
            sim = Simulator()
            cl = Cluster(sim, 2, 8, 1 << 32, 1 << 34)
            st = ObjectStore(cl)
            eng = RolloutEngine(cl, st, ExperienceStore(st), LatencyModel.fixed(1.0), RolloutParams())
            eng.register_workflow(AgentWorkflow(["a"], [], 1))
            eng.set_model_shapes({"a": (vocab, dim)})
            for d in range(n):
                eng.add_instance("a", d)
            s0, g0 = st.set_calls, st.get_calls
            obj, _ = pack_weights([init_weights(vocab, dim, 0, "a")], key="weights:a:v1")
            st.set(obj.key, obj, ObjectLocation.host(0))
            sim.process(eng.sync_agent("a", 1))
            sim.run()
            synced = all(i.weight_version == 1 for i in eng.instances.values())
            calls.append((vocab * dim, n, st.set_calls - s0, st.get_calls - g0, synced))
    law = all(s == 1 and g == n and ok for _, n, s, g, ok in calls)
    ok = bad == 0 and law
    detail = f"{round_trips - bad}/{round_trips} round trips exact; sync calls " + ", ".join(
        f"{p:.0e}x{n}:{s}+{g}" for p, n, s, g, _ in calls
    )
    verdict(7, "object-store laws", ok, detail)


def test_c08_version_consistency(verdict):
    res = _run(2048, "micro-batch-async")
    gen_version: dict[tuple[str, str], int] = {}
    per_trajectory: dict[tuple[str, str], set] = defaultdict(set)
    mixed_instances = 0
    for e in res.orchestrator.sim.log:
        p = e["payload"]
        if e["event_kind"] == "dispatch":
            mixed_instances += p["version"] != p["instance_version"]
        elif e["event_kind"] == "generate":
            gen_version[(p["agent"], p["sample"])] = p["version"]
            q, _, traj = p["sample"].split("_")
            per_trajectory[(q, traj)].add(p["version"])
    trained = mismatched = 0
    for e in res.orchestrator.sim.log:
        if e["event_kind"] == "micro_grad":
            p = e["payload"]
            for sid in p["sample_ids"]:
                trained += 1
                mismatched += gen_version[(p["agent"], sid)] != p["version"]
    mixed = sum(len(v) > 1 for v in per_trajectory.values()) + mixed_instances

    one = _run(2048, "one-step-async")
    lags: dict[int, set] = defaultdict(set)
    for e in one.orchestrator.sim.log:
        if e["event_kind"] == "micro_grad":
            lags[e["payload"]["version"]].add(e["payload"]["version"] - e["payload"]["batch_version"])
    after_warmup = set().union(*(v for s, v in lags.items() if s >= 1))
    ok = trained > 0 and mismatched == 0 and mixed == 0 and after_warmup == {1} and lags[0] == {0}
    detail = (
        f"{mismatched}/{trained} trained off-version, {mixed} mixed-version generations; "
        f"one-step lag {sorted(after_warmup)} after warm-up step (step 0 lag {sorted(lags[0])})"
    )
    verdict(8, "version consistency", ok, detail)


def test_c09_finite_differences(verdict):
    h = 1e-5
    worst = 0.0
    for i in range(50):
        rng = keyed_rng(i, "fd")
        vocab, dim = int(rng.integers(3, 9)), int(rng.integers(2, 6))
        W = rng.normal(0, 0.5, size=(vocab, dim))
        samples = []
        for _ in range(int(rng.integers(1, 5))):
            prompt = [int(x) for x in rng.integers(1, vocab, rng.integers(1, 5))]
            response = [int(x) for x in rng.integers(0, vocab, rng.integers(1, 6))]
            samples.append((prompt, response, float(rng.normal())))
        model = PolicyModel(W)
        g = sum(sample_grad(model, p, r, a, len(samples)) for p, r, a in samples)
        fd = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            up, down = W.copy(), W.copy()
            up[idx] += h
            down[idx] -= h
            fd[idx] = (surrogate_loss(up, samples, len(samples)) - surrogate_loss(down, samples, len(samples))) / (2 * h)
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    verdict(9, "finite differences", worst <= 1e-6, f"max rel err {worst:.2e} over 50 instances")


def test_c10_determinism(verdict, tmp_path):
    outs = []
    for name in ("first", "second"):
        d = tmp_path / name
        assert cli_main(["compare", "--out-dir", str(d), "--trace"]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    same = outs[0] == outs[1]
    verdict(10, "determinism", same, f"{len(outs[0])} files, byte-identical={same}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
