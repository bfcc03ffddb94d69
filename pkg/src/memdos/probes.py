"""Small attacker-side timing programs shared by discovery and attack workloads.

Each program is a generator in the simulator's workload protocol: it yields
:class:`MemOp` items, receives the measured latency back, and ``return``s
its result, so it can be composed with ``yield from``.
"""

from __future__ import annotations

from typing import Sequence

from .sim import MemOp
from .topology import HUGEPAGE_BITS


def scatter(k: int, positions: Sequence[int]) -> int:
    """Place the low bits of ``k`` at the given address-bit positions."""
    out = 0
    i = 0
    while k:
        if k & 1:
            out |= 1 << positions[i]
        k >>= 1
        i += 1
    return out


def free_bits(line_bits: int, fixed: Sequence[int]) -> list[int]:
    """Hugepage-offset bits above the line offset that are not pinned."""
    pinned = set(fixed)
    return [b for b in range(line_bits, HUGEPAGE_BITS) if b not in pinned]


def group_addresses(base: int, line_bits: int, channel_bits: Sequence[int], pattern: int,
                    count: int, start: int = 0) -> list[int]:
    """``count`` line addresses whose channel bits (in sorted order) spell ``pattern``."""
    bits = sorted(channel_bits)
    fixed = scatter(pattern, bits)
    free = free_bits(line_bits, bits)
    if start + count > 1 << len(free):
        raise ValueError("not enough free address bits for the requested group size")
    return [base | fixed | scatter(k, free) for k in range(start, start + count)]


def timed_pass(ops: Sequence[MemOp]):
    """Issue ops back to back; return the summed latency."""
    total = 0
    for op in ops:
        total += yield op
    return total


def latencies(ops: Sequence[MemOp]):
    """Issue ops back to back; return the per-op latency list."""
    out = []
    for op in ops:
        out.append((yield op))
    return out


def repeat_pass(ops: Sequence[MemOp], passes: int):
    total = 0
    for _ in range(passes):
        for op in ops:
            total += yield op
    return total


def gapped_passes(ops: Sequence[MemOp], gaps: Sequence[int], passes: int | None):
    """Passes over ``ops`` with ``gaps[i]`` cycles of loop overhead after op i.

    Returns the summed memory latency only, so the overhead cancels out when
    two runs with the same gaps are compared.  ``passes=None`` loops forever.
    """
    total = 0
    done = 0
    items = list(zip(ops, gaps))
    while passes is None or done < passes:
        for op, gap in items:
            total += yield op
            if gap:
                yield gap
        done += 1
    return total


def forever(ops: Sequence[MemOp]):
    while True:
        for op in ops:
            yield op


def time_channel_groups(base: int, line_bits: int, channel_bits: Sequence[int],
                        accesses: int, rounds: int = 1):
    """Total uncached access time per channel-bit pattern, in pattern order."""
    n = 1 << len(channel_bits)
    ops = [
        [MemOp(a, uncached=True) for a in group_addresses(base, line_bits, channel_bits, g, accesses)]
        for g in range(n)
    ]
    totals = [0] * n
    for _ in range(rounds):
        for g in range(n):
            totals[g] += yield from timed_pass(ops[g])
    return totals


def pick_hot(totals: Sequence[int], margin: float) -> set[int]:
    """Groups whose time exceeds the quietest group's by more than ``margin``."""
    floor = min(totals)
    return {g for g, t in enumerate(totals) if t > floor * (1 + margin)}
