import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memdos.topology import (InvalidConfig, PublicGeometry, TopologyConfig, build_topology,
                             random_dram_bits)


def test_default_geometry_matches_testbed():
    cfg = TopologyConfig()
    assert (cfg.llc_slices, cfg.llc_ways, cfg.llc_sets_per_slice) == (6, 20, 2048)
    assert cfg.llc_bytes == 15 * 1024 * 1024
    assert len(cfg.channel_bit_positions) == 3 and len(cfg.bank_bit_positions) == 10
    assert (cfg.channels, cfg.banks) == (8, 1024)


def test_desk_preset_is_valid():
    cfg = TopologyConfig.desk()
    cfg.validate()
    assert cfg.llc_bytes == 256 * 1024


@pytest.mark.parametrize("changes, clause", [
    ({"channel_bit_positions": (13, 14, 30)}, "channel_bit_positions"),
    ({"banks": 512}, "bank_bit_positions"),
    ({"channels": 4}, "channel_bit_positions"),
    ({"llc_hit": 200}, "private_hit < llc_hit"),
    ({"llc_sets_per_slice": 100}, "llc_sets_per_slice"),
])
def test_invalid_config_names_clause(changes, clause):
    with pytest.raises(InvalidConfig, match=clause):
        build_topology(TopologyConfig().replace(**changes), 0)


def test_resolve_is_deterministic_per_seed():
    cfg = TopologyConfig()
    a, b = build_topology(cfg, 7), build_topology(cfg, 7)
    rng = random.Random(0)
    addrs = [rng.randrange(1 << 40) for _ in range(10_000)]
    assert [a.resolve(x) for x in addrs] == [b.resolve(x) for x in addrs]
    c = build_topology(cfg, 8)
    assert [a.resolve(x).slice_index for x in addrs] != [c.resolve(x).slice_index for x in addrs]


def test_resolve_rejects_out_of_range():
    topo = build_topology(TopologyConfig(), 0)
    with pytest.raises(ValueError):
        topo.resolve(1 << 48)
    with pytest.raises(ValueError):
        topo.resolve(-1)


def test_set_index_ignores_bits_above_index():
    topo = build_topology(TopologyConfig(), 0)
    addr = 0x12345 << 6
    hi = addr | (1 << 40)
    assert topo.resolve(addr).set_index == topo.resolve(hi).set_index


def test_flipping_channel_bit_changes_channel_and_bank():
    topo = build_topology(TopologyConfig(), 0)
    addr = 0x3_0000_0000
    for bit in topo.config.channel_bit_positions:
        p, q = topo.resolve(addr), topo.resolve(addr ^ (1 << bit))
        assert p.channel_index != q.channel_index
        assert p.bank_index != q.bank_index


def test_slice_histogram_is_uniform():
    # chi-square goodness of fit against uniform over slices; the 1% critical
    # value for 5 degrees of freedom is 15.086
    topo = build_topology(TopologyConfig(), 3)
    rng = np.random.default_rng(0)
    lines = rng.integers(0, 1 << 36, size=100_000)
    counts = np.bincount([topo.slice_of_line(int(x)) for x in lines], minlength=6)
    expected = len(lines) / 6
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 15.086


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32), addr=st.integers(0, (1 << 48) - 1))
def test_placement_indices_in_range(seed, addr):
    topo = build_topology(TopologyConfig.desk(), seed)
    p = topo.resolve(addr)
    cfg = topo.config
    assert 0 <= p.set_index < cfg.llc_sets_per_slice
    assert 0 <= p.slice_index < cfg.llc_slices
    assert 0 <= p.bank_index < cfg.banks
    assert 0 <= p.channel_index < cfg.channels


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_random_dram_bits_keep_invariants(seed):
    cfg = random_dram_bits(TopologyConfig.desk(), seed)
    cfg.validate()
    assert set(cfg.channel_bit_positions) <= set(cfg.bank_bit_positions)
    assert random_dram_bits(TopologyConfig.desk(), seed) == cfg


def test_public_geometry_hides_mappings():
    geo = PublicGeometry.of(TopologyConfig())
    assert not hasattr(geo, "bank_bit_positions")
    assert not hasattr(geo, "channel_bit_positions")
    assert geo.miss_threshold == (40 + 250) / 2
