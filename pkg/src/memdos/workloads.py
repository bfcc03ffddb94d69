"""Per-vCPU memory-operation streams: benign programs and attack programs.

A :class:`WorkloadSpec` is a declarative description; :func:`build_threads`
turns it into one generator per thread for a concrete VM.  Attack programs
see only public geometry, their own allocation and the latencies returned
to them.  ``pin_channels`` on benign kinds is the one exception: it places a
victim's buffer on chosen channels through the hidden mapping, the way a
test harness pins a victim.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

from . import probes
from .sim import Atomicity, MemOp
from .topology import PublicGeometry

KINDS = (
    "idle",
    "stream",
    "phased",
    "llc_cleanse",
    "adaptive_llc_cleanse",
    "atomic_lock",
    "mem_flood",
    "adaptive_mem_flood",
)
ATTACK_KINDS = frozenset(KINDS[3:])
FLOOD_FACTOR = 20
WAIT_CYCLES = 1000
# a channel group is hot when its probe time exceeds the quietest group's by this fraction
HOT_MARGIN = 0.005
# DRAM row size assumed by the flood pattern (public knowledge of the DRAM part)
ROW_BYTES = 8192


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class EvictionBuffer:
    """Line addresses grouped per (set index, slice group); each group fills one slice-set."""

    sets: int
    slices: int
    ways: int
    groups: dict[tuple[int, int], tuple[int, ...]] = field(repr=False)

    @property
    def complete(self) -> bool:
        return len(self.groups) == self.sets * self.slices

    def group(self, set_index: int, slice_group: int) -> tuple[int, ...]:
        return self.groups[(set_index, slice_group)]

    def keys_for_sets(self, lo: int, hi: int) -> list[tuple[int, int]]:
        return [(s, g) for s in range(lo, hi) for g in range(self.slices) if (s, g) in self.groups]

    def lines(self) -> list[int]:
        return [a for key in sorted(self.groups) for a in self.groups[key]]

    def validate(self) -> None:
        seen: set[int] = set()
        for key, members in self.groups.items():
            if len(members) != self.ways:
                raise WorkloadError(f"group {key} has {len(members)} lines, expected {self.ways}")
            if seen.intersection(members):
                raise WorkloadError(f"group {key} overlaps another group")
            seen.update(members)


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str
    footprint: int = 0
    locality: str = "high"
    threads: int = 1
    think: int = 0
    burst: int = 8
    atomic: str = "unaligned"
    mode: str = "full"
    channels: frozenset[int] = frozenset()
    assoc: int | None = None
    rediscover_passes: int = 0
    probe_accesses: int = 64
    hot_margin: float = HOT_MARGIN
    pin_channels: frozenset[int] | None = None
    buffer: EvictionBuffer | None = field(default=None, compare=False, repr=False)

    def validate(self, line_size: int = 64) -> None:
        if self.kind not in KINDS:
            raise WorkloadError(f"unknown workload kind {self.kind!r}")
        if self.threads < 1:
            raise WorkloadError("threads must be >= 1")
        if self.locality not in ("high", "low"):
            raise WorkloadError(f"locality must be 'high' or 'low', got {self.locality!r}")
        if self.think < 0:
            raise WorkloadError("think must be >= 0")
        if self.kind == "stream" and self.footprint < 2 * line_size:
            raise WorkloadError("stream footprint must cover at least 2 lines")
        if self.kind == "phased" and self.footprint < line_size:
            raise WorkloadError("phased footprint must cover at least 1 line")
        if self.kind == "atomic_lock" and self.atomic not in ("unaligned", "uncached", "aligned"):
            raise WorkloadError(f"unknown atomic kind {self.atomic!r}")
        if self.kind == "mem_flood":
            if self.mode not in ("full", "targeted"):
                raise WorkloadError(f"unknown flood mode {self.mode!r}")
            if self.mode == "targeted" and not self.channels:
                raise WorkloadError("targeted flooding needs a non-empty channel set")
        if self.pin_channels is not None and self.kind not in ("stream", "phased"):
            raise WorkloadError("pin_channels only applies to benign stream/phased kinds")


def idle_workload() -> WorkloadSpec:
    return WorkloadSpec("idle")


def stream_workload(footprint: int, locality: str = "high", **kw) -> WorkloadSpec:
    spec = WorkloadSpec("stream", footprint=footprint, locality=locality, **kw)
    spec.validate()
    return spec


def phased_workload(footprint: int, think: int = 200, burst: int = 8, **kw) -> WorkloadSpec:
    spec = WorkloadSpec("phased", footprint=footprint, think=think, burst=burst, **kw)
    spec.validate()
    return spec


def llc_cleanse_workload(buffer: EvictionBuffer | None, threads: int = 1) -> WorkloadSpec:
    spec = WorkloadSpec("llc_cleanse", threads=threads, buffer=buffer)
    spec.validate()
    return spec


def adaptive_llc_cleanse(buffer: EvictionBuffer | None, assoc: int | None = None,
                         threads: int = 1, rediscover_passes: int = 0) -> WorkloadSpec:
    spec = WorkloadSpec("adaptive_llc_cleanse", threads=threads, buffer=buffer, assoc=assoc,
                        rediscover_passes=rediscover_passes)
    spec.validate()
    return spec


def atomic_lock_workload(kind: str = "unaligned", threads: int = 1) -> WorkloadSpec:
    spec = WorkloadSpec("atomic_lock", atomic=kind, threads=threads)
    spec.validate()
    return spec


def mem_flood_workload(threads: int = 1, mode: str = "full", channels=()) -> WorkloadSpec:
    spec = WorkloadSpec("mem_flood", threads=threads, mode=mode, channels=frozenset(channels))
    spec.validate()
    return spec


def adaptive_mem_flood(threads: int = 1, hot_margin: float = HOT_MARGIN,
                       probe_accesses: int = 64) -> WorkloadSpec:
    spec = WorkloadSpec("adaptive_mem_flood", threads=threads, hot_margin=hot_margin,
                        probe_accesses=probe_accesses)
    spec.validate()
    return spec


@dataclass
class WorkloadEnv:
    """Everything a workload may know about where it runs."""

    base: int
    size: int
    geometry: PublicGeometry
    seed: int = 0
    vcpus: int = 1
    channel_bits: tuple[int, ...] | None = None
    placement: Callable[[int], int] | None = None


@dataclass
class WorkloadInstance:
    threads: list
    buffers: list[tuple[int, int]]
    state: dict = field(default_factory=dict)

    def contains(self, address: int) -> bool:
        return any(lo <= address < lo + n for lo, n in self.buffers)


def build_threads(spec: WorkloadSpec, env: WorkloadEnv) -> WorkloadInstance:
    geo = env.geometry
    spec.validate(geo.line_size)
    if spec.kind != "idle" and spec.threads > env.vcpus:
        raise WorkloadError(f"{spec.threads} threads exceed the VM's {env.vcpus} vCPUs")
    builder = _BUILDERS[spec.kind]
    return builder(spec, env)


def _rng(env: WorkloadEnv, thread: int) -> random.Random:
    return random.Random(f"workload/{env.seed}/{env.base}/{thread}")


def _pinned_lines(env: WorkloadEnv, start: int, n: int, channels: frozenset[int]) -> list[int]:
    if env.placement is None:
        raise WorkloadError("pin_channels needs a placement oracle from the harness")
    ls = env.geometry.line_size
    out = []
    addr = start
    limit = env.base + env.size
    while len(out) < n:
        if addr >= limit:
            raise WorkloadError("VM region too small for the pinned footprint")
        if env.placement(addr) in channels:
            out.append(addr)
        addr += ls
    return out


def _buffer_lines(spec: WorkloadSpec, env: WorkloadEnv, start: int, n: int) -> list[int]:
    if spec.pin_channels is not None:
        return _pinned_lines(env, start, n, spec.pin_channels)
    ls = env.geometry.line_size
    return [start + i * ls for i in range(n)]


def _span(lines: list[int], ls: int) -> tuple[int, int]:
    return lines[0], lines[-1] + ls - lines[0]


# --------------------------------------------------------------- benign kinds

def _idle(spec, env):
    return WorkloadInstance(threads=[], buffers=[])


def _stream(spec: WorkloadSpec, env: WorkloadEnv) -> WorkloadInstance:
    ls = env.geometry.line_size
    per_thread = spec.footprint // spec.threads
    half = max(1, per_thread // ls // 2)
    threads, buffers = [], []
    cursor = env.base
    for t in range(spec.threads):
        src = _buffer_lines(spec, env, cursor, half)
        dst = _buffer_lines(spec, env, src[-1] + ls, half)
        cursor = dst[-1] + ls
        buffers += [_span(src, ls), _span(dst, ls)]
        order = list(range(half))
        if spec.locality == "low":
            _rng(env, t).shuffle(order)
        threads.append(_stream_loop(src, dst, order, spec.think))
    return WorkloadInstance(threads, buffers)


def _stream_loop(src: list[int], dst: list[int], order: list[int], think: int):
    pairs = [(MemOp(src[i]), MemOp(dst[i], write=True)) for i in order]
    while True:
        for rd, wr in pairs:
            yield rd
            yield wr
            if think:
                yield think


def _phased(spec: WorkloadSpec, env: WorkloadEnv) -> WorkloadInstance:
    ls = env.geometry.line_size
    per_thread = max(1, spec.footprint // spec.threads // ls)
    threads, buffers = [], []
    cursor = env.base
    for t in range(spec.threads):
        lines = _buffer_lines(spec, env, cursor, per_thread)
        cursor = lines[-1] + ls
        buffers.append(_span(lines, ls))
        threads.append(_phased_loop(lines, spec.burst, spec.think, _rng(env, t)))
    return WorkloadInstance(threads, buffers)


def _phased_loop(lines: list[int], burst: int, think: int, rng: random.Random):
    """Request/response server analog: bursts of random accesses separated by think time."""
    ops = [MemOp(a) for a in lines]
    n = len(ops)
    p = 1.0 / max(1, burst)
    rand = rng.random
    while True:
        yield ops[int(rand() * n)]
        while rand() > p:
            yield ops[int(rand() * n)]
        if think:
            yield 1 + int(rng.expovariate(1.0 / think))


# --------------------------------------------------------------- LLC attacks

def _need_buffer(spec: WorkloadSpec) -> EvictionBuffer:
    buf = spec.buffer
    if buf is None or not buf.complete:
        raise WorkloadError("cleansing needs an eviction buffer covering every (set, slice) group")
    return buf


def split_ranges(n_items: int, parts: int) -> list[tuple[int, int]]:
    """Split ``range(n_items)`` into ``parts`` contiguous, near-equal, disjoint ranges."""
    bounds = [n_items * i // parts for i in range(parts + 1)]
    return [(bounds[i], bounds[i + 1]) for i in range(parts)]


def _buffer_spans(buf: EvictionBuffer, ls: int) -> list[tuple[int, int]]:
    lines = sorted(buf.lines())
    return [(lines[0], lines[-1] + ls - lines[0])]


def _llc_cleanse(spec: WorkloadSpec, env: WorkloadEnv) -> WorkloadInstance:
    buf = _need_buffer(spec)
    threads = []
    for lo, hi in split_ranges(buf.sets, spec.threads):
        ops = [MemOp(a) for key in buf.keys_for_sets(lo, hi) for a in buf.groups[key]]
        threads.append(probes.forever(ops) if ops else _wait_forever())
    return WorkloadInstance(threads, _buffer_spans(buf, env.geometry.line_size))


def _adaptive_llc(spec: WorkloadSpec, env: WorkloadEnv) -> WorkloadInstance:
    buf = _need_buffer(spec)
    geo = env.geometry
    assoc = spec.assoc or geo.llc_ways
    inst = WorkloadInstance([], _buffer_spans(buf, geo.line_size), state={"victim_sets": {}})
    for t, (lo, hi) in enumerate(split_ranges(buf.sets, spec.threads)):
        keys = buf.keys_for_sets(lo, hi)
        inst.threads.append(_adaptive_llc_thread(
            buf, keys, assoc, geo.miss_threshold, spec.rediscover_passes, inst.state["victim_sets"], t))
    return inst


def discover_victim_sets(buf: EvictionBuffer, keys: Sequence[tuple[int, int]],
                         assoc: int, threshold: float):
    """Discover stage: count, per slice-set, how many own lines stay conflict-free.

    The whole range is primed, then each group is probed most-recent-first so
    a line evicted by the victim shows up as exactly one miss.  Groups where
    fewer than ``assoc`` lines survive are returned.
    """
    groups = [[MemOp(a) for a in buf.groups[key]] for key in keys]
    for ops in groups:
        for op in ops:
            yield op
    found = []
    for key, ops in zip(keys, groups):
        misses = 0
        for op in reversed(ops):
            if (yield op) > threshold:
                misses += 1
        if len(ops) - misses < assoc:
            found.append(key)
    return found


def _adaptive_llc_thread(buf, keys, assoc, threshold, rediscover, shared, t):
    while True:
        victim = yield from discover_victim_sets(buf, keys, assoc, threshold)
        shared[t] = victim
        ops = [MemOp(a) for key in victim for a in buf.groups[key][:assoc]]
        if not ops:
            if not rediscover:
                yield from _wait_forever()
            for _ in range(rediscover):
                yield WAIT_CYCLES
            continue
        passes = 0
        while not rediscover or passes < rediscover:
            for op in ops:
                yield op
            passes += 1


def _wait_forever():
    while True:
        yield WAIT_CYCLES


# ------------------------------------------------------------ bus locking

def _atomic_lock(spec: WorkloadSpec, env: WorkloadEnv) -> WorkloadInstance:
    ls = env.geometry.line_size
    threads = []
    for t in range(spec.threads):
        line = env.base + 2 * t * ls
        if spec.atomic == "unaligned":
            op = MemOp(line + ls - 1, write=True, atomicity=Atomicity.UNALIGNED)
        elif spec.atomic == "uncached":
            op = MemOp(line, write=True, uncached=True, atomicity=Atomicity.UNCACHED)
        else:
            op = MemOp(line, write=True, atomicity=Atomicity.ALIGNED)
        threads.append(probes.forever([op]))
    return WorkloadInstance(threads, [(env.base, 2 * spec.threads * ls)])


# ------------------------------------------------------------ memory flooding

def _mem_flood(spec: WorkloadSpec, env: WorkloadEnv) -> WorkloadInstance:
    geo = env.geometry
    if spec.mode == "full":
        size = FLOOD_FACTOR * geo.llc_bytes
        if size > env.size:
            raise WorkloadError("VM region smaller than the flood buffer")
        lines = size // geo.line_size
        threads = []
        row_lines = ROW_BYTES // geo.line_size
        for t, (lo, hi) in enumerate(split_ranges(lines, spec.threads)):
            # stagger starts by one row so threads do not march over the same
            # bank and channel in lockstep
            threads.append(_sequential_reads(env.base + lo * geo.line_size, hi - lo, geo.line_size,
                                             offset=(t * row_lines) % (hi - lo)))
        return WorkloadInstance(threads, [(env.base, size)])
    return _targeted_flood(spec.channels, spec.threads, env, spec.probe_accesses * 64)


def _sequential_reads(start: int, n: int, ls: int, offset: int = 0):
    i = offset
    while True:
        yield MemOp(start + i * ls)
        i += 1
        if i == n:
            i = 0


def _need_channel_bits(env: WorkloadEnv) -> tuple[int, ...]:
    if not env.channel_bits:
        raise WorkloadError("channel flooding needs discovered channel bits")
    return tuple(sorted(env.channel_bits))


def _flood_ops(env: WorkloadEnv, bits, groups, t: int, per_group: int) -> list[MemOp]:
    lb = env.geometry.line_bits
    order = sorted(groups)
    order = order[t % len(order):] + order[:t % len(order)]  # threads start on different groups
    out = []
    for g in order:
        for a in probes.group_addresses(env.base, lb, bits, g, per_group, start=(t + 1) * per_group):
            out.append(MemOp(a, uncached=True))
    return out


def _targeted_flood(groups, threads: int, env: WorkloadEnv, per_group: int) -> WorkloadInstance:
    bits = _need_channel_bits(env)
    n_groups = 1 << len(bits)
    if any(not 0 <= g < n_groups for g in groups):
        raise WorkloadError(f"channel groups must lie in [0, {n_groups})")
    gens = [probes.forever(_flood_ops(env, bits, groups, t, per_group)) for t in range(threads)]
    return WorkloadInstance(gens, [(env.base, 1 << 30)])


def _adaptive_flood(spec: WorkloadSpec, env: WorkloadEnv) -> WorkloadInstance:
    bits = _need_channel_bits(env)
    state: dict = {}
    per_group = spec.probe_accesses * 64
    gens = [_adaptive_flood_thread(spec, env, bits, state, t, per_group) for t in range(spec.threads)]
    return WorkloadInstance(gens, [(env.base, 1 << 30)], state=state)


def _adaptive_flood_thread(spec, env, bits, state, t, per_group):
    if t == 0:
        totals = yield from probes.time_channel_groups(
            env.base, env.geometry.line_bits, bits, spec.probe_accesses)
        hot = probes.pick_hot(totals, spec.hot_margin) or set(range(1 << len(bits)))
        state["totals"] = totals
        state["hot"] = hot
    while "hot" not in state:
        yield WAIT_CYCLES
    yield from probes.forever(_flood_ops(env, bits, state["hot"], t, per_group))


_BUILDERS = {
    "idle": _idle,
    "stream": _stream,
    "phased": _phased,
    "llc_cleanse": _llc_cleanse,
    "adaptive_llc_cleanse": _adaptive_llc,
    "atomic_lock": _atomic_lock,
    "mem_flood": _mem_flood,
    "adaptive_mem_flood": _adaptive_flood,
}
