from fractions import Fraction
from pathlib import Path

import pytest

from memdos.scenario import ScenarioError, load_scenario, parse_size, scenario_from_dict

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def minimal(**top):
    return {"vm": [{"id": "v", "role": "protected", "workload": {"kind": "stream", "footprint": "8KB"}}], **top}


def test_minimal_scenario_defaults():
    cfg = scenario_from_dict(minimal())
    assert cfg.name == "scenario" and cfg.seed == 0 and cfg.duration_ms == 1000.0
    assert cfg.protected.vm_id == "v" and cfg.vms[0].workload.footprint == 8192
    assert not cfg.defense_enabled and cfg.baseline == "none"


@pytest.mark.parametrize("path", sorted(SCENARIOS.glob("*.toml")), ids=lambda p: p.stem)
def test_shipped_scenarios_load(path):
    cfg = load_scenario(path)
    assert cfg.defense_enabled and cfg.protected is not None
    assert len(cfg.vms) == 8


def test_defense_table():
    cfg = scenario_from_dict(minimal(defense={"start_ms": 500, "l_r": 10000,
                                              "mitigation_ratio": "2/16", "split_mode": "paired"}))
    assert cfg.defense_enabled and cfg.monitor_start_ms == 500
    assert cfg.defense.l_r == 10000 and cfg.defense.mitigation_ratio == Fraction(1, 8)
    assert cfg.defense.split_mode == "paired"


@pytest.mark.parametrize("size,expected", [(4096, 4096), ("4KB", 4096), ("1MiB", 1 << 20),
                                           ("0.5K", 512), ("2 gb", 2 << 30)])
def test_parse_size(size, expected):
    assert parse_size(size) == expected


@pytest.mark.parametrize("bad", ["12XB", "KB", True, "-1K"])
def test_parse_size_rejects(bad):
    with pytest.raises(ScenarioError):
        parse_size(bad)


def error_of(data):
    with pytest.raises(ScenarioError) as exc:
        scenario_from_dict(data)
    return str(exc.value)


def test_duplicate_vm_ids_named():
    data = minimal()
    data["vm"].append({"id": "v"})
    assert "vm_id" in error_of(data)


def test_missing_vm_id_named():
    assert "vm_id" in error_of({"vm": [{"role": "protected"}]})


def test_defense_needs_protected_vm():
    assert "protected" in error_of({"vm": [{"id": "a"}], "defense": {"enabled": True}})


def test_two_protected_vms():
    data = minimal()
    data["vm"].append({"id": "w", "role": "protected"})
    assert "protected" in error_of(data)


@pytest.mark.parametrize("data,needle", [
    (minimal(bogus=1), "bogus"),
    ({"vm": [{"id": "a", "workload": {"kind": "teleport"}}]}, "teleport"),
    ({"vm": [{"id": "a", "workload": {"footprint": "4KB"}}]}, "kind"),
    ({"vm": [{"id": "a", "workload": {"kind": "stream", "speed": 3}}]}, "speed"),
    ({"vm": [{"id": "a", "role": "judge"}]}, "role"),
    ({"vm": [{"id": "a", "vcpus": 1, "workload": {"kind": "llc_cleanse", "threads": 4}}]}, "threads"),
    ({"vm": [{"id": "a", "start_ms": 5000}], "duration_ms": 1000}, "start_ms"),
    ({"vm": [{"id": "a", "slot": 1}, {"id": "b", "slot": 1}]}, "slot"),
    ({"vm": [{"id": "a", "package": 7}]}, "package"),
    ({"vm": [{"id": "a"}], "topology": {"preset": "mainframe"}}, "preset"),
    ({"vm": [{"id": "a"}], "topology": {"llc_ways": 0}}, "topology"),
    (minimal(defense={"l_m": 10}), "defense"),
    (minimal(defense={"mitigation_ratio": "1/0"}), "ratio"),
    (minimal(baseline="yesterday"), "baseline"),
    ({"vm": []}, "VM"),
])
def test_invalid_scenarios(data, needle):
    assert needle in error_of(data)


def test_parse_error(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("name = \n")
    with pytest.raises(ScenarioError, match="parse error"):
        load_scenario(path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_scenario(tmp_path / "absent.toml")


def test_relative_baseline_path(tmp_path):
    (tmp_path / "s.toml").write_text('baseline = "other.toml"\n[[vm]]\nid = "a"\n')
    assert load_scenario(tmp_path / "s.toml").baseline == str(tmp_path / "other.toml")
