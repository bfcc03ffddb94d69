import pytest
from hypothesis import given, settings, strategies as st

from memdos import reverse_map
from memdos.sim import Atomicity, MemOp
from memdos.topology import PublicGeometry, TopologyConfig
from memdos.workloads import (FLOOD_FACTOR, KINDS, EvictionBuffer, WorkloadEnv, WorkloadError,
                              WorkloadSpec, adaptive_llc_cleanse, adaptive_mem_flood,
                              atomic_lock_workload, build_threads, idle_workload,
                              llc_cleanse_workload, mem_flood_workload, phased_workload,
                              split_ranges, stream_workload)

from conftest import attach, make_sim

DESK = TopologyConfig.desk()
GEO = PublicGeometry.of(DESK)
BASE = 1 << 32


def env(vcpus=8, **kw):
    return WorkloadEnv(base=BASE, size=1 << 32, geometry=GEO, vcpus=vcpus, **kw)


def drive(gen, n, latency=4, max_steps=10**6):
    """Collect up to ``n`` memory ops of a workload thread within ``max_steps`` yields."""
    out = []
    item = next(gen)
    for _ in range(max_steps):
        if len(out) >= n:
            break
        if isinstance(item, MemOp):
            out.append(item)
            item = gen.send(latency)
        else:
            item = gen.send(None)
    return out


def buffer_for(slot=1, seed=0):
    return reverse_map.cached_eviction_buffer(DESK, seed, slot, None)


def test_stream_high_locality_is_sequential():
    inst = build_threads(stream_workload(10 << 20, "high"), env())
    ops = drive(inst.threads[0], 2000)
    reads = [op.address for op in ops if not op.write]
    writes = [op.address for op in ops if op.write]
    assert all(b - a == 64 for a, b in zip(reads, reads[1:]))
    assert all(b - a == 64 for a, b in zip(writes, writes[1:]))


def test_stream_low_locality_pass_is_a_permutation():
    footprint = 10 << 20
    lines = footprint // 64 // 2
    inst = build_threads(stream_workload(footprint, "low"), env())
    reads = [op.address for op in drive(inst.threads[0], 4 * lines) if not op.write]
    first, second = reads[:lines], reads[lines:]
    assert len(set(first)) == lines and sorted(first) == sorted(second)
    assert first != sorted(first)


def test_tiny_stream_is_a_two_line_loop():
    inst = build_threads(stream_workload(128), env())
    ops = drive(inst.threads[0], 10)
    assert len({op.address for op in ops}) == 2


def test_spec_validation():
    with pytest.raises(WorkloadError):
        stream_workload(64)
    with pytest.raises(WorkloadError):
        WorkloadSpec("stream", footprint=4096, threads=0).validate()
    with pytest.raises(WorkloadError):
        mem_flood_workload(1, "targeted", ())
    with pytest.raises(WorkloadError):
        WorkloadSpec("bogus").validate()
    with pytest.raises(WorkloadError):
        build_threads(llc_cleanse_workload(None, 1), env())
    with pytest.raises(WorkloadError):
        build_threads(stream_workload(4096, threads=4), env(vcpus=2))


def test_split_ranges_partition():
    for n, parts in ((64, 4), (10, 3), (5, 5)):
        ranges = split_ranges(n, parts)
        covered = [i for lo, hi in ranges for i in range(lo, hi)]
        assert covered == list(range(n))


def test_cleanse_single_thread_pass_covers_llc():
    buf = buffer_for()
    inst = build_threads(llc_cleanse_workload(buf, 1), env())
    ops = drive(inst.threads[0], DESK.llc_lines)
    assert len({op.address for op in ops}) == DESK.llc_slices * DESK.llc_ways * DESK.llc_sets_per_slice


def test_cleanse_threads_split_sets_disjointly():
    buf = buffer_for()
    topo = make_sim(DESK).topology
    inst = build_threads(llc_cleanse_workload(buf, 4), env())
    per_thread = DESK.llc_lines // 4
    sets = []
    for gen in inst.threads:
        ops = drive(gen, per_thread)
        sets.append({topo.resolve(op.address).set_index for op in ops})
    assert all(not (a & b) for i, a in enumerate(sets) for b in sets[i + 1:])
    assert set().union(*sets) == set(range(DESK.llc_sets_per_slice))


def test_cleanse_pass_evicts_idle_victim_lines():
    sim = make_sim(DESK)
    sim.add_vm("victim")
    vb, _ = sim.hugepage("victim")
    lines = [vb + i * 64 for i in range(512)]
    for a in lines:
        t = sim.submit("victim", 0, MemOp(a))
        while not t.done:
            sim.advance(500)
    victim_lines = {a >> 6 for a in lines}
    assert victim_lines <= sim.llc_contents(0)
    attach(sim, "attacker", llc_cleanse_workload(buffer_for(slot=1), 1), slot=1)
    sim.advance(DESK.llc_lines * (DESK.dram_buffer_miss + DESK.llc_hit) + 10_000)
    assert not victim_lines & sim.llc_contents(0)


def _adaptive_run(victim_spec):
    sim = make_sim(DESK)
    victim = attach(sim, "victim", victim_spec, seed=1) if victim_spec else None
    if victim is None:
        sim.add_vm("victim")
    sim.advance(200_000)
    inst = attach(sim, "attacker", adaptive_llc_cleanse(buffer_for(slot=1), threads=4), slot=1)
    while len(inst.state["victim_sets"]) < 4:
        sim.advance(50_000)
    buf = buffer_for(slot=1)
    found = set()
    for keys in inst.state["victim_sets"].values():
        for key in keys:
            p = sim.topology.resolve(buf.groups[key][0])
            found.add((p.set_index, p.slice_index))
    return sim, victim, found


def test_adaptive_discovery_idle_victim_is_empty():
    _, _, found = _adaptive_run(None)
    assert found == set()


def test_adaptive_discovery_covers_victim_sets():
    sim, victim, found = _adaptive_run(stream_workload(8 * 1024, "high"))
    occupied = set()
    for lo, n in victim.buffers:
        for a in range(lo, lo + n, 64):
            p = sim.topology.resolve(a)
            occupied.add((p.set_index, p.slice_index))
    assert occupied <= found
    assert len(found) <= 2 * len(occupied)


def test_atomic_lock_op_shapes():
    ops = drive(build_threads(atomic_lock_workload("unaligned"), env()).threads[0], 5)
    assert all(op.address % 64 == 63 and op.atomicity == Atomicity.UNALIGNED for op in ops)
    assert all(op.locks_bus for op in ops)
    ops = drive(build_threads(atomic_lock_workload("uncached"), env()).threads[0], 5)
    assert all(op.cacheability == "uncached" and op.atomicity == Atomicity.UNCACHED for op in ops)
    ops = drive(build_threads(atomic_lock_workload("aligned"), env()).threads[0], 5)
    assert not any(op.locks_bus for op in ops)


def test_full_flood_buffer_is_twenty_llcs():
    inst = build_threads(mem_flood_workload(1, "full"), env())
    assert inst.buffers == [(BASE, FLOOD_FACTOR * DESK.llc_bytes)]
    ops = drive(inst.threads[0], 1000)
    assert all(b.address - a.address == 64 for a, b in zip(ops, ops[1:]))


def test_targeted_flood_hits_only_its_channel():
    topo = make_sim(DESK).topology
    bits = reverse_map.cached_dram_bits(DESK, 0, 1).channel_bits
    e = env(channel_bits=tuple(sorted(bits)))
    for channel in (0, 3):
        inst = build_threads(mem_flood_workload(2, "targeted", {channel}), e)
        for gen in inst.threads:
            ops = drive(gen, 3000)
            assert all(op.uncached for op in ops)
            assert {topo.resolve(op.address).channel_index for op in ops} == {channel}


def test_targeted_flood_needs_discovered_bits():
    with pytest.raises(WorkloadError):
        build_threads(mem_flood_workload(1, "targeted", {0}), env())


@pytest.mark.parametrize("mode", ["full", "targeted"])
def test_flood_threads_scale(mode):
    issued = []
    for n in (1, 8):
        sim = make_sim(DESK)
        bits = tuple(sorted(DESK.channel_bit_positions))
        sim.add_vm("f", vcpus=n)
        base, _ = sim.hugepage("f")
        e = WorkloadEnv(base=base, size=sim.vms["f"].size, geometry=GEO, vcpus=n, channel_bits=bits)
        spec = mem_flood_workload(n, mode, set(range(8)) if mode == "targeted" else ())
        for t, gen in enumerate(build_threads(spec, e).threads):
            sim.bind("f", t, gen)
        sim.advance(1_000_000, collect=False)
        issued.append(sim.read_counters("f").issued_ops)
    assert 8 * 0.8 <= issued[1] / issued[0] <= 8 * 1.2


def _specs():
    buf = buffer_for()
    bits = reverse_map.cached_dram_bits(DESK, 0, 1).channel_bits
    return [
        (stream_workload(64 * 1024, "low", threads=2), None),
        (stream_workload(4096, "high"), None),
        (phased_workload(32 * 1024, think=50), None),
        (llc_cleanse_workload(buf, 4), None),
        (atomic_lock_workload("uncached", threads=2), None),
        (mem_flood_workload(4, "full"), None),
        (mem_flood_workload(2, "targeted", {1, 5}), bits),
        (adaptive_mem_flood(2), bits),
    ]


@settings(max_examples=30, deadline=None)
@given(which=st.integers(0, 7), n=st.integers(1, 3000), lat=st.integers(4, 400))
def test_addresses_stay_inside_declared_buffers(which, n, lat):
    spec, bits = _specs()[which]
    e = env(channel_bits=tuple(sorted(bits)) if bits else None)
    inst = build_threads(spec, e)
    for gen in inst.threads:
        # a waiting adaptive-flood thread yields only think cycles
        for op in drive(gen, n, lat, max_steps=4 * n + 1000):
            assert inst.contains(op.address)


def test_every_kind_builds():
    assert set(KINDS) >= {"idle", "stream", "llc_cleanse", "adaptive_llc_cleanse", "atomic_lock",
                          "mem_flood", "adaptive_mem_flood"}
    assert build_threads(idle_workload(), env()).threads == []


def test_eviction_buffer_validate():
    EvictionBuffer(1, 2, 2, {(0, 0): (0, 64), (0, 1): (128, 192)}).validate()
    with pytest.raises(WorkloadError):
        EvictionBuffer(1, 2, 2, {(0, 0): (0, 64), (0, 1): (64, 192)}).validate()
    with pytest.raises(WorkloadError):
        EvictionBuffer(1, 1, 2, {(0, 0): (0,)}).validate()
