"""Discrete-event model of one physical server's memory hierarchy.

Every vCPU has one memory operation outstanding at a time.  Operations flow
through a private cache, the package's inclusive sliced LLC, per-bank
FR-FCFS queues and an FCFS channel scheduler.  Exotic atomics take a global
bus lock that waits for in-flight LLC/DRAM traffic to drain and then blocks
all other LLC/DRAM traffic for ``lock_stall`` cycles.

Workloads are generators bound to vCPUs.  The simulator ``send()``s each
completed operation's latency back into the generator, so attacker code can
time its own accesses.  A generator yields either a :class:`MemOp` or a
plain ``int`` meaning that many cycles of non-memory work.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, fields
from enum import IntEnum
from fractions import Fraction
from typing import Iterable, NamedTuple

from .topology import HUGEPAGE_BITS, PHYS_BITS, MemoryTopology

OPERAND_SIZE = 4
VM_REGION_BITS = 32


class Atomicity(IntEnum):
    NONE = 0
    ALIGNED = 1
    UNALIGNED = 2
    UNCACHED = 3


class MemOp(NamedTuple):
    address: int
    write: bool = False
    uncached: bool = False
    atomicity: int = Atomicity.NONE

    @property
    def kind(self) -> str:
        return "write" if self.write else "read"

    @property
    def cacheability(self) -> str:
        return "uncached" if self.uncached else "cached"

    @property
    def locks_bus(self) -> bool:
        return self.atomicity >= Atomicity.UNALIGNED


class SimulationError(RuntimeError):
    pass


class Completion(NamedTuple):
    time: int
    vm_id: str
    vcpu_id: int
    latency: int


@dataclass(frozen=True)
class Counters:
    issued_ops: int = 0
    completed_ops: int = 0
    llc_accesses: int = 0
    llc_misses: int = 0
    dram_requests: int = 0
    bytes_transferred: int = 0

    def __sub__(self, other: "Counters") -> "Counters":
        return Counters(*(getattr(self, f.name) - getattr(other, f.name) for f in fields(self)))

    def get(self, metric: str) -> int:
        return getattr(self, metric)


class Ticket:
    __slots__ = ("op", "issued_at", "completed_at", "latency")

    def __init__(self, op: MemOp):
        self.op = op
        self.issued_at: int | None = None
        self.completed_at: int | None = None
        self.latency: int | None = None

    @property
    def done(self) -> bool:
        return self.latency is not None

    def __repr__(self) -> str:
        return f"Ticket({self.op!r}, latency={self.latency})"


# counter slots
ISSUED, COMPLETED, LLC_ACC, LLC_MISS, DRAM_REQ, BYTES = range(6)
# what an in-flight op touched
F_LLC, F_MISS, F_DRAM, F_INFLIGHT, F_PATH = 1, 2, 4, 8, 16
# event kinds
EV_DONE, EV_READY, EV_BANK, EV_LOCK_END = 0, 1, 2, 3


class VmState:
    __slots__ = ("vm_id", "index", "package", "vcpus", "base", "size",
                 "duty", "duty_next", "duty_switch_at", "c")

    def __init__(self, vm_id: str, index: int, package: int, base: int, size: int):
        self.vm_id = vm_id
        self.index = index
        self.package = package
        self.base = base
        self.size = size
        self.vcpus: list[Vcpu] = []
        self.duty = 16
        self.duty_next = 16
        self.duty_switch_at: int | None = None
        self.c = [0, 0, 0, 0, 0, 0]

    @property
    def duty_ratio(self) -> Fraction:
        return Fraction(self.duty_next if self.duty_switch_at is not None else self.duty, 16)

    @property
    def counters(self) -> Counters:
        return Counters(*self.c)


class Vcpu:
    __slots__ = ("gid", "bit", "vm", "vcpu_id", "psets", "llc", "gen", "queue",
                 "op", "ticket", "issue_t", "flags", "last_lat", "fresh", "waiting",
                 "row", "chan")

    def __init__(self, gid: int, vm: VmState, vcpu_id: int, psets: list, llc: list):
        self.gid = gid
        self.bit = 1 << gid
        self.vm = vm
        self.vcpu_id = vcpu_id
        self.psets = psets
        self.llc = llc
        self.gen = None
        self.queue: deque = deque()
        self.op: MemOp | None = None
        self.ticket: Ticket | None = None
        self.issue_t = 0
        self.flags = 0
        self.last_lat: int | None = None
        self.fresh = False
        self.waiting = False
        self.row = 0
        self.chan = 0


def _as_k(ratio) -> int:
    if isinstance(ratio, int) and not isinstance(ratio, bool):
        k = ratio
    else:
        frac = Fraction(ratio)
        k16 = frac * 16
        if k16.denominator != 1:
            raise ValueError(f"duty ratio {ratio} is not a multiple of 1/16")
        k = int(k16)
    if not 1 <= k <= 16:
        raise ValueError(f"duty ratio must be k/16 with k in [1, 16], got {ratio}")
    return k


class Simulator:
    """Single-owner, single-threaded simulation of one server."""

    def __init__(self, topology: MemoryTopology):
        self.topology = topology
        cfg = self.config = topology.config
        self.now = 0
        self.vms: dict[str, VmState] = {}
        self._vcpus: list[Vcpu] = []
        self._heap: list = []
        self._seq = 0
        n_llc = cfg.llc_slices * cfg.llc_sets_per_slice
        self._llc = [[{} for _ in range(n_llc)] for _ in range(cfg.packages)]
        self._llc_loc: dict[int, int] = {}
        self._dram_loc: dict[int, tuple[int, int, int]] = {}
        self._bank_open = [-1] * cfg.banks
        self._bank_cur: list[Vcpu | None] = [None] * cfg.banks
        self._bank_q: list[list[Vcpu]] = [[] for _ in range(cfg.banks)]
        self._chan_free = [0] * cfg.channels
        self._inflight = 0
        self._lock_owner: Vcpu | None = None
        self._lock_q: deque[Vcpu] = deque()
        self._blocked: list[Vcpu] = []
        self._collect: list | None = None
        self.lock_count = 0
        self._snap_every = 0
        self._next_snap = 0
        self.snapshots: list[tuple[int, tuple[int, ...]]] = []

    # ------------------------------------------------------------------ setup

    def add_vm(self, vm_id: str, vcpus: int = 1, package: int = 0,
               slot: int | None = None) -> VmState:
        """Create a VM owning the 4GB physical region number ``slot`` (default: next free)."""
        if vm_id in self.vms:
            raise ValueError(f"duplicate vm_id {vm_id!r}")
        if not 0 <= package < self.config.packages:
            raise ValueError(f"package {package} out of range")
        if vcpus < 1:
            raise ValueError("a VM needs at least one vCPU")
        index = len(self.vms)
        taken = {vm.index for vm in self.vms.values()}
        if slot is None:
            slot = index
            while slot in taken:
                slot += 1
        elif slot in taken:
            raise ValueError(f"region slot {slot} already in use")
        index = slot
        base = (index + 1) << VM_REGION_BITS
        if base + (1 << VM_REGION_BITS) > (1 << PHYS_BITS):
            raise SimulationError("physical address space exhausted")
        vm = VmState(vm_id, index, package, base, 1 << VM_REGION_BITS)
        psets_n = self.config.private_sets
        for i in range(vcpus):
            v = Vcpu(len(self._vcpus), vm, i, [{} for _ in range(psets_n)], self._llc[package])
            self._vcpus.append(v)
            vm.vcpus.append(v)
        self.vms[vm_id] = vm
        return vm

    def hugepage(self, vm_id: str) -> tuple[int, int]:
        """(base, size) of the VM's 1GB-aligned contiguous physical allocation."""
        vm = self._vm(vm_id)
        return vm.base, 1 << HUGEPAGE_BITS

    def _vm(self, vm_id: str) -> VmState:
        try:
            return self.vms[vm_id]
        except KeyError:
            raise KeyError(f"unknown vm {vm_id!r}") from None

    def _vcpu(self, vm_id: str, vcpu_id: int) -> Vcpu:
        vm = self._vm(vm_id)
        if not 0 <= vcpu_id < len(vm.vcpus):
            raise KeyError(f"unknown vcpu {vcpu_id} of vm {vm_id!r}")
        return vm.vcpus[vcpu_id]

    def _push(self, t: int, kind: int, obj) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, kind, obj))

    def bind(self, vm_id: str, vcpu_id: int, workload: Iterable, start: int | None = None) -> None:
        """Attach a workload generator to a vCPU, replacing any previous one."""
        v = self._vcpu(vm_id, vcpu_id)
        gen = workload if hasattr(workload, "send") else _wrap(workload)
        v.gen = gen
        v.last_lat = None
        v.fresh = True
        if not v.waiting:
            v.waiting = True
            self._push(max(self.now, start or 0), EV_READY, v)

    def unbind(self, vm_id: str, vcpu_id: int) -> None:
        """Detach the vCPU's workload; an op already in flight still completes."""
        v = self._vcpu(vm_id, vcpu_id)
        if v.gen is not None:
            v.gen.close()
        v.gen = None

    def submit(self, vm_id: str, vcpu_id: int, op: MemOp) -> Ticket:
        v = self._vcpu(vm_id, vcpu_id)
        _check_op(op, self.config.line_size)
        ticket = Ticket(op)
        v.queue.append(ticket)
        if not v.waiting:
            v.waiting = True
            self._push(self.now, EV_READY, v)
        return ticket

    # ------------------------------------------------------------ duty cycle

    def set_duty_cycle(self, vm_id: str, ratio) -> None:
        """Run the VM's vCPUs k of every 16 duty windows, from the next frame boundary."""
        vm = self._vm(vm_id)
        k = _as_k(ratio)
        frame = self.config.frame_cycles
        at = -(-self.now // frame) * frame
        self._apply_duty(vm, self.now)
        if at <= self.now:
            vm.duty = k
            vm.duty_switch_at = None
        else:
            vm.duty_next = k
            vm.duty_switch_at = at

    def duty_of(self, vm_id: str) -> Fraction:
        return self._vm(vm_id).duty_ratio

    @staticmethod
    def _apply_duty(vm: VmState, t: int) -> None:
        if vm.duty_switch_at is not None and t >= vm.duty_switch_at:
            vm.duty = vm.duty_next
            vm.duty_switch_at = None

    def _wake(self, vm: VmState, t: int) -> int:
        """Earliest time >= t at which the VM's vCPUs may execute."""
        if vm.duty_switch_at is not None and t >= vm.duty_switch_at:
            vm.duty = vm.duty_next
            vm.duty_switch_at = None
        k = vm.duty
        if k == 16:
            return t
        w = self.config.duty_window_cycles
        frame = 16 * w
        pos = t % frame
        if pos < k * w:
            return t
        return t - pos + frame

    def _compute_end(self, vm: VmState, t: int, cycles: int) -> int:
        """Completion time of ``cycles`` of work that only progresses in duty windows."""
        if vm.duty == 16 and vm.duty_switch_at is None:
            return t + cycles
        w = self.config.duty_window_cycles
        frame = 16 * w
        while True:
            t = self._wake(vm, t)
            if vm.duty == 16:
                if vm.duty_switch_at is None or t + cycles <= vm.duty_switch_at:
                    return t + cycles
                done = vm.duty_switch_at - t
                cycles -= done
                t = vm.duty_switch_at
                continue
            window_end = t - t % frame + vm.duty * w
            avail = window_end - t
            if vm.duty_switch_at is not None and window_end > vm.duty_switch_at:
                avail = vm.duty_switch_at - t
            if cycles <= avail:
                return t + cycles
            cycles -= avail
            t += avail

    # -------------------------------------------------------------- counters

    def read_counters(self, vm_id: str) -> Counters:
        return self._vm(vm_id).counters

    # ------------------------------------------------------------ event loop

    def run_until(self, t_end: int, collect: bool = False) -> list[Completion]:
        if t_end < self.now:
            raise ValueError("cannot run backwards")
        return self.advance(t_end - self.now, collect=collect) if t_end > self.now else []

    def record_every(self, cycles: int) -> None:
        """Snapshot every VM's completed-op count each ``cycles`` (0 disables)."""
        self._snap_every = cycles
        self._next_snap = self.now - self.now % cycles + cycles if cycles else 0
        if cycles and self.now % cycles == 0:
            self._snapshot(self.now)

    def _snapshot(self, t: int) -> None:
        self.snapshots.append((t, tuple(vm.c[COMPLETED] for vm in self.vms.values())))

    def advance(self, cycles: int, collect: bool = True) -> list[Completion]:
        """Advance the global clock by ``cycles``; returns completions when ``collect``."""
        if cycles <= 0:
            raise ValueError("advance() needs cycles > 0")
        end = self.now + cycles
        out: list[Completion] = []
        self._collect = out if collect else None
        while self._snap_every and self._next_snap <= end:
            self._run(self._next_snap)
            self._snapshot(self._next_snap)
            self._next_snap += self._snap_every
        self._run(end)
        self.now = end
        self._collect = None
        return out

    def _run(self, end: int) -> None:
        """Process every event strictly before ``end``."""
        heap = self._heap
        pop = heapq.heappop
        issue = self._issue
        finish = self._finish
        bank_done = self._bank_done
        while heap and heap[0][0] < end:
            t, _, kind, obj = pop(heap)
            self.now = t
            if kind == EV_DONE:
                finish(obj, t)
                issue(obj, t)
            elif kind == EV_READY:
                issue(obj, t)
            elif kind == EV_BANK:
                bank_done(obj, t)
            else:
                self._lock_end(obj, t)

    def _finish(self, v: Vcpu, t: int) -> None:
        vm = v.vm
        c = vm.c
        flags = v.flags
        lat = t - v.issue_t
        c[COMPLETED] += 1
        if flags:
            if flags & F_LLC:
                c[LLC_ACC] += 1
            if flags & F_MISS:
                c[LLC_MISS] += 1
            if flags & F_DRAM:
                c[DRAM_REQ] += 1
                c[BYTES] += self.config.line_size
            if flags & F_INFLIGHT:
                self._inflight -= 1
                if self._inflight == 0 and self._lock_owner is None and self._lock_q:
                    self._start_lock(self._lock_q.popleft(), t)
        if not v.fresh:
            v.last_lat = lat
        v.op = None
        tk = v.ticket
        if tk is not None:
            tk.latency = lat
            tk.completed_at = t
            v.ticket = None
        if self._collect is not None:
            self._collect.append(Completion(t, vm.vm_id, v.vcpu_id, lat))

    def _issue(self, v: Vcpu, t: int) -> None:
        vm = v.vm
        w = self._wake(vm, t)
        if w != t:
            self._push(w, EV_READY, v)
            return
        if v.gen is not None:
            try:
                op = v.gen.send(v.last_lat)
            except StopIteration:
                v.gen = None
                v.waiting = False
                return
            v.last_lat = None
            v.fresh = False
            if op.__class__ is int:
                v.last_lat = op
                self._push(self._compute_end(vm, t, op), EV_READY, v)
                return
        elif v.queue:
            tk = v.queue.popleft()
            tk.issued_at = t
            v.ticket = tk
            op = tk.op
        else:
            v.waiting = False
            return
        vm.c[ISSUED] += 1
        v.issue_t = t
        v.op = op
        cfg = self.config
        if op.atomicity >= 2:
            self.lock_count += 1
            v.flags = F_DRAM if op.uncached else F_LLC
            if self._lock_owner is None and not self._lock_q and self._inflight == 0:
                self._start_lock(v, t)
            else:
                self._lock_q.append(v)
            return
        if op.uncached:
            v.flags = F_DRAM | F_INFLIGHT
            if self._lock_owner is not None or self._lock_q:
                self._blocked.append(v)
            else:
                self._inflight += 1
                self._dram(v, t)
            return
        line = op.address >> 6 if cfg.line_size == 64 else op.address // cfg.line_size
        pset = v.psets[line & (len(v.psets) - 1)]
        if line in pset:
            del pset[line]
            pset[line] = None
            v.flags = 0
            self._push(t + cfg.private_hit, EV_DONE, v)
            return
        v.flags = F_LLC | F_INFLIGHT
        if self._lock_owner is not None or self._lock_q:
            self._blocked.append(v)
            return
        self._inflight += 1
        self._llc_access(v, t, line)

    def _llc_access(self, v: Vcpu, t: int, line: int) -> None:
        cfg = self.config
        loc = self._llc_loc.get(line)
        if loc is None:
            topo = self.topology
            loc = topo.slice_of_line(line) * cfg.llc_sets_per_slice + (line & topo.set_mask)
            self._llc_loc[line] = loc
        cset = v.llc[loc]
        pset = v.psets[line & (len(v.psets) - 1)]
        mask = cset.pop(line, None)
        if mask is not None:
            cset[line] = mask | v.bit
            pset[line] = None
            if len(pset) > cfg.private_ways:
                del pset[next(iter(pset))]
            self._push(t + cfg.llc_hit, EV_DONE, v)
            return
        if len(cset) >= cfg.llc_ways:
            old = next(iter(cset))
            sharers = cset.pop(old)
            vcpus = self._vcpus
            while sharers:
                low = sharers & -sharers
                ps = vcpus[low.bit_length() - 1].psets
                ps[old & (len(ps) - 1)].pop(old, None)
                sharers ^= low
        cset[line] = v.bit
        pset[line] = None
        if len(pset) > cfg.private_ways:
            del pset[next(iter(pset))]
        v.flags |= F_MISS | F_DRAM | F_PATH
        self._dram(v, t)

    def _dram(self, v: Vcpu, t: int) -> None:
        addr = v.op.address
        key = addr >> 6
        info = self._dram_loc.get(key)
        if info is None:
            topo = self.topology
            info = (topo.bank_of(addr), topo.channel_of(addr), topo.row_of(addr))
            self._dram_loc[key] = info
        bank, chan, row = info
        v.row = row
        v.chan = chan
        if self._bank_cur[bank] is None:
            self._bank_start(bank, v, t)
        else:
            self._bank_q[bank].append(v)

    def _bank_start(self, bank: int, v: Vcpu, t: int) -> None:
        cfg = self.config
        if self._bank_open[bank] == v.row:
            core = cfg.dram_buffer_hit - cfg.channel_service
        else:
            core = cfg.dram_buffer_miss - cfg.channel_service
            self._bank_open[bank] = v.row
        self._bank_cur[bank] = v
        self._push(t + core, EV_BANK, bank)

    def _bank_done(self, bank: int, t: int) -> None:
        cfg = self.config
        v = self._bank_cur[bank]
        chan = v.chan
        start = self._chan_free[chan]
        if start < t:
            start = t
        done = start + cfg.channel_service
        self._chan_free[chan] = done
        if v.flags & F_PATH:
            done += cfg.llc_hit
        self._push(done, EV_DONE, v)
        q = self._bank_q[bank]
        if not q:
            self._bank_cur[bank] = None
            return
        # FR-FCFS: oldest row-buffer hit first, else oldest request
        open_row = self._bank_open[bank]
        pick = 0
        for i, w in enumerate(q):
            if w.row == open_row:
                pick = i
                break
        nxt = q.pop(pick)
        self._bank_start(bank, nxt, t + cfg.sched_delay)

    def _start_lock(self, v: Vcpu, t: int) -> None:
        self._lock_owner = v
        self._push(t + self.config.lock_stall, EV_LOCK_END, v)

    def _lock_end(self, v: Vcpu, t: int) -> None:
        self._lock_owner = None
        blocked = self._blocked
        if blocked:
            self._blocked = []
            for b in blocked:
                self._inflight += 1
                if b.flags & F_LLC:
                    line = b.op.address // self.config.line_size
                    self._llc_access(b, t, line)
                else:
                    self._dram(b, t)
        self._finish(v, t)
        self._issue(v, t)
        if self._lock_owner is None and self._lock_q and self._inflight == 0:
            self._start_lock(self._lock_q.popleft(), t)

    # --------------------------------------------------------- oracle views

    def lock_held(self) -> bool:
        return self._lock_owner is not None

    def llc_contents(self, package: int = 0) -> set[int]:
        """Line numbers currently resident in a package's LLC (test oracle)."""
        return {line for s in self._llc[package] for line in s}

    def llc_set_contents(self, package: int, slice_index: int, set_index: int) -> list[int]:
        return list(self._llc[package][slice_index * self.config.llc_sets_per_slice + set_index])

    def private_contents(self, vm_id: str, vcpu_id: int) -> set[int]:
        v = self._vcpu(vm_id, vcpu_id)
        return {line for s in v.psets for line in s}

    def check_inclusive(self) -> bool:
        for v in self._vcpus:
            llc = self.llc_contents(v.vm.package)
            if not self.private_contents(v.vm.vm_id, v.vcpu_id) <= llc:
                return False
        return True


def _wrap(iterable: Iterable):
    for item in iterable:
        yield item


def _check_op(op: MemOp, line_size: int) -> None:
    if not 0 <= op.address < (1 << PHYS_BITS):
        raise ValueError(f"address {op.address:#x} out of range")
    if op.atomicity == Atomicity.UNALIGNED and not op.address % line_size > line_size - OPERAND_SIZE:
        raise ValueError("an unaligned atomic must straddle a cache-line boundary")
    if op.atomicity == Atomicity.UNCACHED and not op.uncached:
        raise ValueError("an uncached atomic must be issued uncached")
