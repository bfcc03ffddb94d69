"""Attacker-side recovery of the hidden LLC slice and DRAM bank/channel mappings.

Everything here runs as the attacker VM's controller.  It touches the
machine only through :class:`AccessInterface`, which issues operations from
the attacker's own vCPUs and hands back latencies.  Nothing in this module
reads the topology's hidden mappings.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from functools import lru_cache
from statistics import mean
from typing import Iterable, Sequence

from . import probes
from .sim import MemOp, Simulator
from .topology import HUGEPAGE_BITS, MemoryTopology, PublicGeometry, TopologyConfig
from .workloads import HOT_MARGIN, EvictionBuffer


class ProbeError(RuntimeError):
    """Discovery could not reach a confident answer."""


class ConvergenceError(ProbeError):
    """Slice mapping exhausted its candidate budget."""


class InconclusiveTiming(ProbeError):
    """Latency classes were not separated enough to classify."""


CANDIDATE_FACTOR = 16


class AccessInterface:
    """Runs attacker timing programs on the attacker VM's vCPUs."""

    def __init__(self, sim: Simulator, vm_id: str, chunk: int = 50_000):
        self._sim = sim
        self._vm_id = vm_id
        self._chunk = chunk
        self.geometry = PublicGeometry.of(sim.config)
        self.base, self.size = sim.hugepage(vm_id)
        self.vcpus = len(sim.vms[vm_id].vcpus)
        self.accesses = 0

    @property
    def now(self) -> int:
        return self._sim.now

    def run(self, program, background: Sequence = (), max_cycles: int = 10**10):
        """Run ``program`` on vCPU 0 (``background`` on vCPUs 1..) until it returns."""
        if len(background) + 1 > self.vcpus:
            raise ProbeError("not enough attacker vCPUs for the requested threads")
        box: list = []

        def main():
            box.append((yield from program))

        sim, vm = self._sim, self._vm_id
        before = sim.read_counters(vm).issued_ops
        sim.bind(vm, 0, main())
        for i, gen in enumerate(background, 1):
            sim.bind(vm, i, gen)
        spent = 0
        try:
            while not box:
                if spent >= max_cycles:
                    sim.unbind(vm, 0)
                    raise ProbeError(f"probe program still running after {spent} cycles")
                sim.advance(self._chunk, collect=False)
                spent += self._chunk
        finally:
            for i in range(1, len(background) + 1):
                sim.unbind(vm, i)
        self.accesses += sim.read_counters(vm).issued_ops - before
        return box[0]


@dataclass
class ProbeResult:
    bank_bits: frozenset[int] = frozenset()
    channel_bits: frozenset[int] = frozenset()
    slice_groups: EvictionBuffer | None = field(default=None, repr=False)
    hot_channels: frozenset[int] = frozenset()

    def validate(self) -> None:
        if not self.channel_bits <= self.bank_bits:
            raise ProbeError("channel bits must be a subset of bank bits")
        if self.slice_groups is not None:
            self.slice_groups.validate()

    def to_dict(self) -> dict:
        out = {
            "bank_bits": sorted(self.bank_bits),
            "channel_bits": sorted(self.channel_bits),
            "hot_channels": sorted(self.hot_channels),
        }
        if self.slice_groups is not None:
            out["slice_groups"] = len(self.slice_groups.groups)
        return out


# ------------------------------------------------------------- LLC slices

def _conflicts(ops: list[MemOp], hit: float, gap: float):
    """Warm ``ops`` then time one pass; True when at least one access misses."""
    for op in ops:
        yield op
    total = yield from probes.timed_pass(ops)
    return total > len(ops) * hit + gap / 2


def _calibrate_llc(geo: PublicGeometry, line_of):
    n = geo.private_ways + 4
    warm = [MemOp(line_of(k)) for k in range(n)]
    yield from probes.timed_pass(warm)
    hit = (yield from probes.timed_pass(warm)) / n
    cold = [MemOp(line_of(k)) for k in range(n, 2 * n)]
    miss = (yield from probes.timed_pass(cold)) / n
    return hit, miss


def _fill_set(geo: PublicGeometry, line_of, hit: float, gap: float):
    """Grow a conflict-free block list G until it holds slices x ways lines."""
    target = geo.llc_slices * geo.llc_ways
    budget = CANDIDATE_FACTOR * target
    group: list[MemOp] = []
    extras: list[MemOp] = []
    k = 0
    while len(group) < target:
        if k >= budget:
            raise ConvergenceError(f"no conflict-free fill after {budget} candidate blocks")
        cand = MemOp(line_of(k))
        k += 1
        yield cand
        total = yield from probes.timed_pass(group + [cand])
        if total > (len(group) + 1) * hit + gap / 2:
            extras.append(cand)
            # two passes push the rejected line out as least-recently used
            for _ in range(2):
                for op in group:
                    yield op
        else:
            group.append(cand)
    return group, extras, k


def _split_slices(geo: PublicGeometry, line_of, group: list[MemOp], extras: list[MemOp],
                  next_k: int, hit: float, gap: float):
    """Partition G into per-slice groups; returns (groups, one conflicting extra per group)."""
    remaining = list(group)
    found: list[list[MemOp]] = []
    witnesses: list[MemOp] = []
    pool = list(extras)
    budget = CANDIDATE_FACTOR * geo.llc_slices * geo.llc_ways
    while len(found) < geo.llc_slices:
        witness = None
        while witness is None:
            if pool:
                e = pool.pop(0)
            elif next_k < budget:
                e = MemOp(line_of(next_k))
                next_k += 1
            else:
                raise ConvergenceError("ran out of conflicting blocks while splitting slices")
            if (yield from _conflicts(remaining + [e], hit, gap)):
                witness = e
        if len(found) == geo.llc_slices - 1:
            members = remaining
        else:
            members = []
            for m in remaining:
                trial = [x for x in remaining if x is not m] + [witness]
                if not (yield from _conflicts(trial, hit, gap)):
                    members.append(m)
        if len(members) != geo.llc_ways:
            raise ConvergenceError(
                f"slice group of {len(members)} lines, expected {geo.llc_ways}")
        found.append(members)
        witnesses.append(witness)
        taken = set(id(m) for m in members)
        remaining = [m for m in remaining if id(m) not in taken]
    return found, witnesses


def _map_one_set(geo: PublicGeometry, line_of, hit: float, gap: float):
    group, extras, next_k = yield from _fill_set(geo, line_of, hit, gap)
    return (yield from _split_slices(geo, line_of, group, extras, next_k, hit, gap))


def _verify_template(ops_groups: list[list[MemOp]], witnesses: list[MemOp], hit: float, gap: float):
    for ops, w in zip(ops_groups, witnesses):
        if (yield from _conflicts(ops, hit, gap)):
            return False
        if not (yield from _conflicts(ops + [w], hit, gap)):
            return False
    return True


def map_llc_slices(ai: AccessInterface, verify_sets: int | None = None,
                   seed: int = 0) -> EvictionBuffer:
    """Build an eviction buffer: per set index, one group of ``ways`` lines per slice.

    Set 0 is mapped from scratch by growing a conflict-free block list and
    splitting it by slice with an extra conflicting block.  The slice choice
    of a block depends only on the address bits above the set index, so the
    set-0 grouping is carried over to the other sets by shifting each block
    by the set offset.  ``verify_sets`` sets (all when ``None``) are checked
    by timing; a set that fails the check is mapped from scratch.
    """
    geo = ai.geometry
    if ai.size < 2 * geo.llc_bytes:
        raise ProbeError("slice mapping needs an allocation of at least twice the LLC size")
    stride = geo.set_stride
    ls = geo.line_size

    def line_for(s):
        return lambda k: ai.base + k * stride + s * ls

    hit, miss = ai.run(_calibrate_llc(geo, line_for(0)))
    gap = miss - hit
    if gap < (geo.llc_hit + geo.dram_buffer_miss) / 4:
        raise InconclusiveTiming(f"LLC hit/miss separation too small ({hit:.0f} vs {miss:.0f})")

    groups0, witnesses0 = ai.run(_map_one_set(geo, line_for(0), hit, gap))
    template = [[(op.address - ai.base) // stride for op in g] for g in groups0]
    wit_k = [(w.address - ai.base) // stride for w in witnesses0]

    sets = geo.llc_sets_per_slice
    if verify_sets is None or verify_sets >= sets - 1:
        checked = set(range(1, sets))
    else:
        checked = set(random.Random(f"verify/{seed}").sample(range(1, sets), verify_sets))

    out: dict[tuple[int, int], tuple[int, ...]] = {}
    for g, ks in enumerate(template):
        out[(0, g)] = tuple(ai.base + k * stride for k in ks)
    for s in range(1, sets):
        off = ai.base + s * ls
        shifted = [[MemOp(off + k * stride) for k in ks] for ks in template]
        if s in checked:
            wits = [MemOp(off + k * stride) for k in wit_k]
            if not ai.run(_verify_template(shifted, wits, hit, gap)):
                shifted, _ = ai.run(_map_one_set(geo, line_for(s), hit, gap))
        for g, ops in enumerate(shifted):
            out[(s, g)] = tuple(op.address for op in ops)
    buf = EvictionBuffer(sets=sets, slices=geo.llc_slices, ways=geo.llc_ways, groups=out)
    buf.validate()
    return buf


# ---------------------------------------------------------------- DRAM bits

def _pair_latency(a: int, b: int, reps: int):
    ops = [MemOp(a, uncached=True), MemOp(b, uncached=True)] * reps
    lats = yield from probes.latencies(ops)
    return mean(lats[2:])


def _bank_probe(base: int, bits: list[int], reps: int):
    same = yield from _pair_latency(base, base, reps)
    single = {}
    for b in bits:
        single[b] = yield from _pair_latency(base, base ^ (1 << b), reps)
    return same, single


def _row_probe(base: int, bits: list[int], ref: int, reps: int):
    out = {}
    for b in bits:
        out[b] = yield from _pair_latency(base, base ^ (1 << b) ^ (1 << ref), reps)
    return out


def discover_bank_bits(ai: AccessInterface, reps: int = 16) -> frozenset[int]:
    """Bits whose flip moves an address to another DRAM bank.

    Alternating uncached accesses to a pair in the same bank but different
    rows miss the row buffer every time; a pair in different banks hits.
    A pair in the same row (differing only in a column bit) also hits, so
    each low-latency bit is re-tested together with a known row bit: only a
    bank bit keeps the latency low.
    """
    geo = ai.geometry
    bits = list(range(geo.line_bits, HUGEPAGE_BITS))
    t_hit, single = ai.run(_bank_probe(ai.base, bits, reps))
    t_miss = max(single.values())
    if t_miss - t_hit < (geo.dram_buffer_miss - geo.dram_buffer_hit) / 4:
        raise InconclusiveTiming(
            f"row-buffer hit/miss separation too small ({t_hit:.0f} vs {t_miss:.0f})")
    threshold = (t_hit + t_miss) / 2
    row_bits = [b for b in bits if single[b] > threshold]
    if not row_bits:
        raise InconclusiveTiming("no row-conflicting bit found inside the allocation")
    ref = max(row_bits)
    low = [b for b in bits if single[b] <= threshold]
    retest = ai.run(_row_probe(ai.base, low, ref, reps))
    return frozenset(b for b in low if retest[b] <= threshold)


def _channel_buffer(base: int, bank_bits: Iterable[int], bit: int | None, line_bits: int,
                    blocks: int, rng: random.Random) -> list[MemOp]:
    free = probes.free_bits(line_bits, list(bank_bits))
    fixed = (1 << bit) if bit is not None else 0
    picks = rng.sample(range(1 << min(len(free), 16)), blocks)
    return [MemOp(base | fixed | probes.scatter(k, free), uncached=True) for k in picks]


def discover_channel_bits(ai: AccessInterface, bank_bits: Iterable[int], passes: int = 100,
                          blocks: int = 32, margin: float = 0.005, max_gap: int = 64,
                          seed: int = 0) -> frozenset[int]:
    """Among the bank bits, find those that also select the memory channel.

    Thread A loops over a one-bank buffer (bit i = 0) while thread B times
    ``passes`` passes over a buffer in the bank that differs only in bit i.
    When bit i is a channel bit the two streams share nothing and thread B
    sees exactly its solo latency; otherwise they queue on one channel.
    Both loops carry a little irregular per-iteration overhead, without
    which two fixed-period streams settle into a collision-free rhythm.
    """
    bank_bits = sorted(bank_bits)
    if not bank_bits:
        raise ProbeError("channel discovery needs the bank bits first")
    if ai.vcpus < 2:
        raise ProbeError("channel discovery needs two attacker vCPUs")
    lb = ai.geometry.line_bits
    rng = random.Random(f"channel-probe/{seed}")
    free = probes.free_bits(lb, bank_bits)
    buf_a = [MemOp(ai.base | probes.scatter(k, free), uncached=True) for k in range(4 * blocks)]
    gaps_a = [rng.randrange(max_gap) for _ in buf_a]
    solo_ops = _channel_buffer(ai.base, bank_bits, bank_bits[0], lb, blocks, rng)
    gaps_b = [rng.randrange(max_gap) for _ in solo_ops]
    solo = ai.run(probes.gapped_passes(solo_ops, gaps_b, passes))
    threshold = solo * (1 + margin)
    found = set()
    for b in bank_bits:
        buf_b = [MemOp(op.address & ~(1 << bank_bits[0]) | (1 << b), uncached=True)
                 for op in solo_ops]
        total = ai.run(probes.gapped_passes(buf_b, gaps_b, passes),
                       background=[probes.gapped_passes(buf_a, gaps_a, None)])
        if total < threshold:
            found.add(b)
    return frozenset(found)


def discover_hot_channels(ai: AccessInterface, channel_bits: Iterable[int], accesses: int = 64,
                          rounds: int = 4, margin: float = HOT_MARGIN) -> frozenset[int]:
    """Channel groups (channel-bit patterns) that a co-tenant keeps busy."""
    bits = sorted(channel_bits)
    if not bits:
        return frozenset()
    totals = ai.run(probes.time_channel_groups(ai.base, ai.geometry.line_bits, bits, accesses, rounds))
    return frozenset(probes.pick_hot(totals, margin))


# ----------------------------------------------------------- offline probing

def probe_simulator(topology: MemoryTopology, slot: int, vcpus: int = 2) -> tuple[Simulator, AccessInterface]:
    """A quiescent machine where the attacker owns region ``slot``, as on the target host."""
    sim = Simulator(topology)
    sim.add_vm("attacker", vcpus=vcpus, slot=slot)
    return sim, AccessInterface(sim, "attacker")


@lru_cache(maxsize=32)
def cached_eviction_buffer(config: TopologyConfig, seed: int, slot: int,
                           verify_sets: int | None = None) -> EvictionBuffer:
    from .topology import build_topology

    _, ai = probe_simulator(build_topology(config, seed), slot, vcpus=1)
    return map_llc_slices(ai, verify_sets=verify_sets, seed=seed)


@lru_cache(maxsize=32)
def cached_dram_bits(config: TopologyConfig, seed: int, slot: int) -> ProbeResult:
    from .topology import build_topology

    _, ai = probe_simulator(build_topology(config, seed), slot, vcpus=2)
    bank = discover_bank_bits(ai)
    chan = discover_channel_bits(ai, bank, seed=seed)
    result = ProbeResult(bank_bits=bank, channel_bits=chan)
    result.validate()
    return result
