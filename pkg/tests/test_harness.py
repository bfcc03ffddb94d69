import math

import pytest

from memdos.harness import (
    baseline_config, export_trace, replay_ks, run_scenario, slowdown, sweep,
)
from memdos.scenario import scenario_from_dict
from memdos.trace import Trace, read_trace

VICTIM = {"kind": "phased", "footprint": "32KB", "think": 60, "burst": 8}


def config(attacker=None, attacker_package=0, defense=True, duration=9000, baseline="none", **top):
    vms = [{"id": "victim", "role": "protected", "workload": VICTIM},
           {"id": "web", "workload": {"kind": "phased", "footprint": "8KB", "think": 400}}]
    if attacker is not None:
        vms.insert(1, {"id": "attacker", "role": "attacker", "start_ms": 2000,
                       "package": attacker_package, "workload": attacker})
    data = {"name": "harness-unit", "seed": 3, "duration_ms": duration, "vm": vms,
            "baseline": baseline, **top}
    if defense:
        data["defense"] = {"start_ms": 500}
    return scenario_from_dict(data)


ATOMIC = {"kind": "atomic_lock", "atomic": "unaligned"}
CLEANSE = {"kind": "llc_cleanse", "threads": 4}


@pytest.fixture(scope="module")
def attacked():
    return run_scenario(config(ATOMIC), with_baseline=False)


def test_same_seed_same_trace(attacked):
    again = run_scenario(config(ATOMIC), with_baseline=False)
    assert again.trace.dumps() == attacked.trace.dumps()
    assert again.to_json() == attacked.to_json()


def test_other_seed_other_trace(attacked):
    other = run_scenario(config(ATOMIC).replace(seed=4), with_baseline=False)
    assert other.trace.dumps() != attacked.trace.dumps()


def test_trace_roundtrip_and_replay(attacked, tmp_path):
    path = tmp_path / "run.jsonl"
    export_trace(attacked, path)
    records = read_trace(path)
    assert records == attacked.trace.records
    pairs = replay_ks(records)
    assert pairs and all(logged == again for logged, again in pairs)


def test_trace_records_well_formed(attacked):
    times = [r["time_ms"] for r in attacked.trace.records]
    assert times == sorted(times)
    for r in attacked.trace.of_kind("ks_decision"):
        p = r["payload"]
        assert 0.0 <= p["D"] <= 1.0
        assert p["verdict"] == ("reject" if p["D"] > p["D_alpha"] else "accept")


def test_trace_rejects_bad_records(tmp_path):
    t = Trace()
    t.emit(5.0, "phase_change", {})
    with pytest.raises(ValueError):
        t.emit(4.0, "phase_change", {})
    with pytest.raises(ValueError):
        t.emit(6.0, "gossip", {})
    path = tmp_path / "bad.jsonl"
    path.write_text('{"kind": "gossip", "time_ms": 0, "payload": {}}\n')
    with pytest.raises(ValueError):
        read_trace(path)


def test_report_metrics(attacked):
    assert attacked.attackers == ["attacker"]
    assert attacked.correct_identification
    assert attacked.true_positives == ["attacker"]
    assert attacked.false_positives == [] and attacked.false_negatives == []
    v = attacked.vms["victim"]
    assert v.throughput == pytest.approx(v.completed_ops / attacked.duration_ms, rel=0.05)
    with pytest.raises(ValueError):
        attacked.throughput("victim", 5000, 5000)


def test_slowdown_definition():
    assert slowdown(10.0, 5.0) == 2.0
    assert slowdown(10.0, 0.0) == math.inf


def test_baseline_variants():
    cfg = config(ATOMIC, baseline="isolated")
    iso = baseline_config(cfg)
    assert [vm.vm_id for vm in iso.vms] == ["victim"] and not iso.defense_enabled
    quiet = baseline_config(cfg.replace(baseline="no_attack"))
    assert quiet.vm("attacker").workload.kind == "idle"
    # pinned slots keep every surviving VM at the address range it had
    assert [vm.slot for vm in quiet.vms] == [0, 1, 2]
    assert not baseline_config(cfg.replace(baseline="no_defense")).defense_enabled


def test_baseline_slowdowns_filled():
    report = run_scenario(config(ATOMIC, defense=False, duration=4000, baseline="no_attack",
                                 measure_start_ms=2000))
    assert report.vms["victim"].slowdown > 2.0
    assert report.vms["attacker"].slowdown is not None


def test_sweep_aggregates():
    result = sweep(config(None, duration=4000), [1, 2])
    assert result.seeds == [1, 2] and len(result.reports) == 2
    assert result.fp_rate == 0.0 and result.tp_rate == 0.0
    assert result.metric_stats([2.5, 2.5, 2.5]) == (2.5, 0.0)
    mean, std = result.slowdown_stats("victim")
    assert math.isnan(mean) and math.isnan(std)
    d = result.to_dict()
    assert len(d["per_seed"]) == 2 and d["scenario"] == "harness-unit"
    with pytest.raises(ValueError):
        sweep(config(None), [])


def test_oracle_checks():
    report = run_scenario(config(CLEANSE, defense=False, duration=3000, oracle_checks=True))
    assert report.oracle["inclusive"]
    assert report.oracle["attacker.slice_groups_pure"]


def victim_slowdown(attacker, package):
    report = run_scenario(config(attacker, attacker_package=package, defense=False,
                                 duration=6000, baseline="no_attack", measure_start_ms=3000))
    return report.vms["victim"].slowdown


def test_bus_lock_crosses_packages():
    assert victim_slowdown(ATOMIC, 1) > 2.0


def test_cleansing_stays_in_its_package():
    same, other = victim_slowdown(CLEANSE, 0), victim_slowdown(CLEANSE, 1)
    assert other < 1.05 < same
