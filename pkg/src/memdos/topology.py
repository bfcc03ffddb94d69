"""Server geometry and the hidden address mappings of the simulated machine.

A :class:`MemoryTopology` owns the keyed slice hash and the DRAM bank/channel
bit positions.  Attacker-side code never sees these; it only observes access
latencies through :class:`memdos.reverse_map.AccessInterface`.  The
:meth:`MemoryTopology.resolve` oracle exists for tests and ``--oracle`` runs.
"""

from __future__ import annotations

import dataclasses
import random
from dataclasses import dataclass, field

MASK64 = (1 << 64) - 1
PHYS_BITS = 48
HUGEPAGE_BITS = 30
ROW_SHIFT = 13


class InvalidConfig(ValueError):
    """A configuration violates one of its invariants."""


@dataclass(frozen=True)
class TopologyConfig:
    line_size: int = 64
    llc_slices: int = 6
    llc_ways: int = 20
    llc_sets_per_slice: int = 2048
    private_cache_bytes: int = 256 * 1024
    private_ways: int = 8
    packages: int = 2
    channels: int = 8
    banks: int = 1024
    bank_bit_positions: tuple[int, ...] = tuple(range(13, 23))
    channel_bit_positions: tuple[int, ...] = (13, 14, 15)
    # latency table, cycles
    private_hit: int = 4
    llc_hit: int = 40
    dram_buffer_hit: int = 150
    dram_buffer_miss: int = 250
    lock_stall: int = 1000
    sched_delay: int = 5
    # scheduler service: cycles a channel is occupied per request
    channel_service: int = 50
    cycles_per_ms: int = 100_000
    duty_window_cycles: int = 1000

    @classmethod
    def desk(cls, **overrides) -> "TopologyConfig":
        """Scaled-down geometry used by scenarios and the acceptance suite."""
        base = dict(
            llc_slices=4,
            llc_ways=16,
            llc_sets_per_slice=64,
            private_cache_bytes=16 * 1024,
            private_ways=8,
            cycles_per_ms=200,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def llc_bytes(self) -> int:
        return self.llc_slices * self.llc_ways * self.llc_sets_per_slice * self.line_size

    @property
    def llc_lines(self) -> int:
        return self.llc_slices * self.llc_ways * self.llc_sets_per_slice

    @property
    def private_sets(self) -> int:
        return self.private_cache_bytes // (self.line_size * self.private_ways)

    @property
    def frame_cycles(self) -> int:
        return 16 * self.duty_window_cycles

    def replace(self, **changes) -> "TopologyConfig":
        return dataclasses.replace(self, **changes)

    def validate(self) -> None:
        def need(cond: bool, clause: str) -> None:
            if not cond:
                raise InvalidConfig(f"invalid topology: {clause}")

        for name in ("line_size", "llc_sets_per_slice", "channels", "banks"):
            v = getattr(self, name)
            need(v > 0 and v & (v - 1) == 0, f"{name} must be a power of two (got {v})")
        for name in ("llc_slices", "llc_ways", "private_ways", "packages",
                     "cycles_per_ms", "duty_window_cycles", "channel_service"):
            need(getattr(self, name) >= 1, f"{name} >= 1")
        need(self.sched_delay >= 0, "sched_delay >= 0")
        ps = self.private_cache_bytes // self.line_size
        need(self.private_cache_bytes % (self.line_size * self.private_ways) == 0
             and ps >= self.private_ways,
             "private_cache_bytes must hold a whole number of private_ways-sized sets")
        psets = self.private_sets
        need(psets & (psets - 1) == 0, "private cache set count must be a power of two")
        bank_bits = set(self.bank_bit_positions)
        chan_bits = set(self.channel_bit_positions)
        need(len(bank_bits) == len(self.bank_bit_positions), "bank_bit_positions must be distinct")
        need(chan_bits <= bank_bits, "channel_bit_positions ⊆ bank_bit_positions")
        need(2 ** len(bank_bits) == self.banks, "2^|bank_bit_positions| = banks")
        need(2 ** len(chan_bits) == self.channels, "2^|channel_bit_positions| = channels")
        line_bits = self.line_size.bit_length() - 1
        need(all(line_bits <= b < PHYS_BITS for b in bank_bits),
             "bank bits must lie between the line offset and the physical address width")
        need(all(b >= ROW_SHIFT for b in bank_bits),
             f"bank bits must lie above the DRAM column bits (>= {ROW_SHIFT})")
        need(self.private_hit < self.llc_hit < self.dram_buffer_hit < self.dram_buffer_miss,
             "private_hit < llc_hit < dram_buffer_hit < dram_buffer_miss")
        need(self.channel_service < self.dram_buffer_hit,
             "channel_service < dram_buffer_hit")
        need(self.lock_stall >= 1, "lock_stall >= 1")


@dataclass(frozen=True)
class PlacementInfo:
    set_index: int
    slice_index: int
    bank_index: int
    channel_index: int


def _extract(value: int, positions: tuple[int, ...]) -> int:
    out = 0
    for i, pos in enumerate(positions):
        out |= ((value >> pos) & 1) << i
    return out


@dataclass
class MemoryTopology:
    config: TopologyConfig
    seed: int
    _key: int = field(repr=False, default=0)

    def __post_init__(self) -> None:
        self._key = random.Random(f"slice-hash/{self.seed}").getrandbits(64)
        self.line_bits = self.config.line_size.bit_length() - 1
        self.set_bits = self.config.llc_sets_per_slice.bit_length() - 1
        self.set_mask = self.config.llc_sets_per_slice - 1
        self._bank_pos = tuple(sorted(self.config.bank_bit_positions))
        self._chan_pos = tuple(sorted(self.config.channel_bit_positions))
        bank_mask = 0
        for b in self._bank_pos:
            bank_mask |= 1 << b
        self._row_clear = ~(bank_mask >> ROW_SHIFT)

    # the hidden mappings; memsim-core is the only non-test caller

    def slice_of_line(self, line: int) -> int:
        """Keyed xor-fold of the line-address bits above the set index."""
        x = ((line >> self.set_bits) ^ self._key) & MASK64
        x = (x * 0x9E3779B97F4A7C15) & MASK64
        x ^= x >> 31
        x = (x * 0xBF58476D1CE4E5B9) & MASK64
        x ^= x >> 29
        x ^= x >> 32
        return ((x & 0xFFFFFFFF) * self.config.llc_slices) >> 32

    def bank_of(self, address: int) -> int:
        return _extract(address, self._bank_pos)

    def channel_of(self, address: int) -> int:
        return _extract(address, self._chan_pos)

    def row_of(self, address: int) -> int:
        # bank bits are cleared so the row id is shared by every bank
        return (address >> ROW_SHIFT) & self._row_clear

    def resolve(self, address: int) -> PlacementInfo:
        """Oracle: where ``address`` lands in the LLC and DRAM."""
        if not 0 <= address < (1 << PHYS_BITS):
            raise ValueError(f"address {address:#x} outside the simulated physical range")
        line = address >> self.line_bits
        return PlacementInfo(
            set_index=line & self.set_mask,
            slice_index=self.slice_of_line(line),
            bank_index=self.bank_of(address),
            channel_index=self.channel_of(address),
        )


def build_topology(config: TopologyConfig | None = None, seed: int = 0) -> MemoryTopology:
    config = config or TopologyConfig()
    config.validate()
    return MemoryTopology(config, seed)


def random_dram_bits(config: TopologyConfig, seed: int) -> TopologyConfig:
    """Draw per-seed bank/channel bit positions inside the attacker-visible page offset.

    Bit ``HUGEPAGE_BITS - 1`` is always left as a row bit.
    """
    rng = random.Random(f"dram-bits/{seed}")
    nbank = config.banks.bit_length() - 1
    nchan = config.channels.bit_length() - 1
    pool = list(range(ROW_SHIFT, HUGEPAGE_BITS - 1))
    bank = tuple(sorted(rng.sample(pool, nbank)))
    chan = tuple(sorted(rng.sample(bank, nchan)))
    return config.replace(bank_bit_positions=bank, channel_bit_positions=chan)


@dataclass(frozen=True)
class PublicGeometry:
    """What a tenant can learn from the CPU model: sizes and latencies, never mappings."""

    line_size: int
    llc_slices: int
    llc_ways: int
    llc_sets_per_slice: int
    private_cache_bytes: int
    private_ways: int
    channels: int
    banks: int
    private_hit: int
    llc_hit: int
    dram_buffer_hit: int
    dram_buffer_miss: int
    cycles_per_ms: int

    @classmethod
    def of(cls, config: TopologyConfig) -> "PublicGeometry":
        return cls(**{f.name: getattr(config, f.name) for f in dataclasses.fields(cls)})

    @property
    def llc_bytes(self) -> int:
        return self.llc_slices * self.llc_ways * self.llc_sets_per_slice * self.line_size

    @property
    def llc_lines(self) -> int:
        return self.llc_slices * self.llc_ways * self.llc_sets_per_slice

    @property
    def line_bits(self) -> int:
        return self.line_size.bit_length() - 1

    @property
    def set_stride(self) -> int:
        """Byte distance between consecutive lines of the same LLC set index."""
        return self.llc_sets_per_slice * self.line_size

    @property
    def miss_threshold(self) -> float:
        return (self.llc_hit + self.dram_buffer_miss) / 2
