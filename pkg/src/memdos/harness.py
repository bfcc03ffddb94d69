"""End-to-end scenario execution, paired-baseline metrics and reports."""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import reverse_map
from .defense import Defense
from .ks import ks_decide
from .scenario import ScenarioConfig, VmConfig, load_scenario
from .sim import Simulator
from .topology import PublicGeometry, build_topology, random_dram_bits
from .trace import Trace, write_trace
from .workloads import WorkloadEnv, WorkloadSpec, build_threads, idle_workload

# sets beyond this many are spot-checked rather than all verified during slice mapping
FULL_VERIFY_SETS = 256
SPOT_CHECK_SETS = 16


@dataclass
class VmReport:
    vm_id: str
    role: str
    completed_ops: int
    throughput: float
    counters: dict
    slowdown: float | None = None


@dataclass
class Report:
    scenario: str
    seed: int
    duration_ms: float
    measure_start_ms: float
    vms: dict[str, VmReport]
    attackers: list[str]
    identified: list[str] = field(default_factory=list)
    timeline: list[dict] = field(default_factory=list)
    ks_series: list[dict] = field(default_factory=list)
    monitor_tests: int = 0
    monitor_rejects: int = 0
    split_rounds: int = 0
    verify_rounds: int = 0
    samples: list[int] = field(default_factory=list)
    snapshots: list[tuple[float, tuple[int, ...]]] = field(default_factory=list)
    probe: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=dict)
    baseline: str = "none"
    trace: Trace = field(default_factory=Trace, repr=False)

    # ------------------------------------------------------ derived metrics

    @property
    def suspected(self) -> bool:
        return any(e["kind"] == "suspected" for e in self.timeline)

    @property
    def single_test_alarm(self) -> bool:
        return self.monitor_rejects > 0

    @property
    def true_positives(self) -> list[str]:
        return sorted(set(self.identified) & set(self.attackers))

    @property
    def false_positives(self) -> list[str]:
        return sorted(set(self.identified) - set(self.attackers))

    @property
    def false_negatives(self) -> list[str]:
        return sorted(set(self.attackers) - set(self.identified))

    @property
    def correct_identification(self) -> bool:
        return self.suspected and set(self.identified) == set(self.attackers)

    def first(self, kind: str) -> float | None:
        for e in self.timeline:
            if e["kind"] == kind:
                return e["time_ms"]
        return None

    def _count_at(self, vm_id: str, t_ms: float) -> int:
        idx = list(self.vms).index(vm_id)
        best = None
        for t, counts in self.snapshots:
            if t <= t_ms + 1e-9:
                best = counts[idx]
            else:
                break
        if best is None:
            raise ValueError(f"no snapshot at or before {t_ms} ms")
        return best

    def throughput(self, vm_id: str, start_ms: float | None = None, end_ms: float | None = None) -> float:
        """Completed ops per simulated ms over [start_ms, end_ms] (snapshot-aligned)."""
        a = self.measure_start_ms if start_ms is None else start_ms
        b = self.snapshots[-1][0] if end_ms is None else end_ms
        if b <= a:
            raise ValueError("empty throughput interval")
        return (self._count_at(vm_id, b) - self._count_at(vm_id, a)) / (b - a)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "duration_ms": self.duration_ms,
            "measure_start_ms": self.measure_start_ms,
            "baseline": self.baseline,
            "vms": {
                k: {"role": v.role, "completed_ops": v.completed_ops, "throughput": v.throughput,
                    "slowdown": v.slowdown, "counters": v.counters}
                for k, v in self.vms.items()
            },
            "attackers": self.attackers,
            "identified": self.identified,
            "true_positives": self.true_positives,
            "false_positives": self.false_positives,
            "false_negatives": self.false_negatives,
            "suspected": self.suspected,
            "correct_identification": self.correct_identification,
            "timeline": self.timeline,
            "monitor_tests": self.monitor_tests,
            "monitor_rejects": self.monitor_rejects,
            "split_rounds": self.split_rounds,
            "verify_rounds": self.verify_rounds,
            "ks_series": self.ks_series,
            "probe": self.probe,
            "oracle": self.oracle,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, default=_json_default)


def _json_default(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


def export_trace(report: Report, path: str | Path) -> None:
    write_trace(report.trace.records, path)


# ----------------------------------------------------------------- runner

def _slot(config: ScenarioConfig, i: int, vm: VmConfig) -> int:
    return vm.slot if vm.slot is not None else i


def _attacker_env(spec: WorkloadSpec, config, topo_cfg, topo_seed, slot, env, trace, vm_id):
    kind = spec.kind
    probe = {}
    if kind in ("llc_cleanse", "adaptive_llc_cleanse") and spec.buffer is None:
        sets = topo_cfg.llc_sets_per_slice
        verify = None if sets <= FULL_VERIFY_SETS else SPOT_CHECK_SETS
        buf = reverse_map.cached_eviction_buffer(topo_cfg, topo_seed, slot, verify)
        spec = _with_buffer(spec, buf)
        probe["slice_groups"] = len(buf.groups)
    needs_bits = kind == "adaptive_mem_flood" or (kind == "mem_flood" and spec.mode == "targeted")
    if needs_bits:
        found = reverse_map.cached_dram_bits(topo_cfg, topo_seed, slot)
        env.channel_bits = tuple(sorted(found.channel_bits))
        probe.update(found.to_dict())
    if probe:
        trace.emit(0.0, "probe_result", probe, vm_id=vm_id)
    return spec, probe


def _with_buffer(spec: WorkloadSpec, buf) -> WorkloadSpec:
    from dataclasses import replace

    return replace(spec, buffer=buf)


def run_scenario(config: ScenarioConfig, with_baseline: bool = True) -> Report:
    """Run one scenario (and its paired baseline, if configured)."""
    config.validate()
    topo_seed = config.topology_seed if config.topology_seed is not None else config.seed
    topo_cfg = config.topology
    if config.randomize_dram_bits:
        topo_cfg = random_dram_bits(topo_cfg, topo_seed)
    topology = build_topology(topo_cfg, topo_seed)
    sim = Simulator(topology)
    cpm = topo_cfg.cycles_per_ms
    snap_cycles = round(config.snapshot_ms * cpm)
    trace = Trace()
    geo = PublicGeometry.of(topo_cfg)
    probes_out: dict = {}
    instances = {}

    for i, vm in enumerate(config.vms):
        slot = _slot(config, i, vm)
        sim.add_vm(vm.vm_id, vcpus=vm.vcpus, package=vm.package, slot=slot)
    for i, vm in enumerate(config.vms):
        slot = _slot(config, i, vm)
        base, _ = sim.hugepage(vm.vm_id)
        env = WorkloadEnv(base=base, size=sim.vms[vm.vm_id].size, geometry=geo,
                          seed=config.seed * 1000 + slot, vcpus=vm.vcpus)
        spec = vm.workload
        if spec.pin_channels is not None:
            env.placement = topology.channel_of
        if spec.kind in ("llc_cleanse", "adaptive_llc_cleanse", "mem_flood", "adaptive_mem_flood"):
            spec, info = _attacker_env(spec, config, topo_cfg, topo_seed, slot, env, trace, vm.vm_id)
            if info:
                probes_out[vm.vm_id] = info
        inst = build_threads(spec, env)
        instances[vm.vm_id] = inst
        start = round(vm.start_ms * cpm)
        for t, gen in enumerate(inst.threads):
            sim.bind(vm.vm_id, t, gen, start=start)

    sim.record_every(snap_cycles)
    protected = config.protected
    defense = None
    samples: list[int] = []
    end = round(config.duration_ms * cpm)
    if config.defense_enabled:
        _advance_to(sim, round(config.monitor_start_ms * cpm))
        co = [vm.vm_id for vm in config.vms if vm is not protected]
        defense = Defense(sim, protected.vm_id, co, config.defense, trace, seed=config.seed)
        defense.run(config.duration_ms)
    elif protected is not None and config.sample_window:
        sub = round(config.defense.sub_window * cpm)
        _advance_to(sim, round(config.measure_start_ms * cpm))
        start_ms = sim.now / cpm
        metric = config.defense.metric
        prev = sim.read_counters(protected.vm_id).get(metric)
        while sim.now + sub <= end:
            sim.advance(sub, collect=False)
            cur = sim.read_counters(protected.vm_id).get(metric)
            samples.append(cur - prev)
            prev = cur
        trace.emit(start_ms, "counter_sample", {
            "window": 0, "window_kind": "monitored", "metric": metric,
            "sub_window_ms": config.defense.sub_window, "values": samples,
        }, vm_id=protected.vm_id)
    _advance_to(sim, end)

    duration = sim.now / cpm
    snapshots = [(t / cpm, counts) for t, counts in sim.snapshots]
    vms = {}
    for vm in config.vms:
        c = sim.read_counters(vm.vm_id)
        vms[vm.vm_id] = VmReport(vm.vm_id, vm.role, c.completed_ops, 0.0, _counter_dict(c))
    report = Report(
        scenario=config.name, seed=config.seed, duration_ms=duration,
        measure_start_ms=config.measure_start_ms, vms=vms, attackers=config.attackers,
        samples=samples, snapshots=snapshots, probe=probes_out, baseline=config.baseline, trace=trace,
    )
    for vm_id, vr in vms.items():
        vr.throughput = report.throughput(vm_id)
    if defense is not None:
        report.identified = list(defense.mitigated)
        report.timeline = [{"time_ms": e.time_ms, "kind": e.kind, "vm_ids": list(e.vm_ids)}
                           for e in defense.events]
        report.ks_series = [
            {"time_ms": r["time_ms"], "D": r["payload"]["D"], "verdict": r["payload"]["verdict"],
             "context": r["payload"]["context"]}
            for r in trace.of_kind("ks_decision")
        ]
        report.monitor_tests = defense.monitor_tests
        report.monitor_rejects = defense.monitor_rejects
        report.split_rounds = defense.split_rounds
        report.verify_rounds = defense.verify_rounds
    if config.oracle_checks:
        report.oracle = _oracle_checks(sim, topology, config, instances)
    if with_baseline and config.baseline != "none":
        base = run_scenario(baseline_config(config), with_baseline=False)
        for vm_id, vr in vms.items():
            if vm_id in base.vms:
                vr.slowdown = slowdown(base.vms[vm_id].throughput, vr.throughput)
    return report


def _advance_to(sim: Simulator, t: int) -> None:
    if t > sim.now:
        sim.advance(t - sim.now, collect=False)


def _counter_dict(c) -> dict:
    return {k: getattr(c, k) for k in ("issued_ops", "completed_ops", "llc_accesses", "llc_misses",
                                       "dram_requests", "bytes_transferred")}


def slowdown(baseline_tput: float, tput: float) -> float:
    """Baseline throughput over observed throughput (normalized execution time)."""
    if tput <= 0:
        return math.inf
    return baseline_tput / tput


def baseline_config(config: ScenarioConfig) -> ScenarioConfig:
    """The paired run a scenario's slowdowns are measured against (same seed)."""
    kind = config.baseline
    pinned = [vm if vm.slot is not None else _pin(vm, i) for i, vm in enumerate(config.vms)]
    if kind == "isolated":
        keep = [vm for vm in pinned if vm.role == "protected"]
        if not keep:
            raise ValueError("an isolated baseline needs a protected VM")
        return config.replace(vms=tuple(keep), defense_enabled=False, baseline="none")
    if kind == "no_attack":
        vms = [_pin(vm, vm.slot, idle_workload()) if vm.role == "attacker" else vm for vm in pinned]
        return config.replace(vms=tuple(vms), baseline="none")
    if kind == "no_defense":
        return config.replace(vms=tuple(pinned), defense_enabled=False, baseline="none")
    other = load_scenario(kind)
    return other.replace(seed=config.seed, baseline="none")


def _pin(vm: VmConfig, slot: int, workload: WorkloadSpec | None = None) -> VmConfig:
    from dataclasses import replace

    return replace(vm, slot=slot, workload=workload or vm.workload)


def _oracle_checks(sim: Simulator, topology, config: ScenarioConfig, instances) -> dict:
    out: dict = {"inclusive": sim.check_inclusive()}
    for vm in config.vms:
        inst = instances[vm.vm_id]
        spec = vm.workload
        if spec.kind in ("llc_cleanse", "adaptive_llc_cleanse"):
            buf = reverse_map.cached_eviction_buffer(
                topology.config, topology.seed, _slot(config, config.vms.index(vm), vm),
                None if topology.config.llc_sets_per_slice <= FULL_VERIFY_SETS else SPOT_CHECK_SETS)
            pure = all(len({(topology.resolve(a).set_index, topology.resolve(a).slice_index)
                            for a in g}) == 1 for g in buf.groups.values())
            out[f"{vm.vm_id}.slice_groups_pure"] = pure
        if "hot" in inst.state:
            out[f"{vm.vm_id}.hot_channels"] = sorted(inst.state["hot"])
    return out


# ------------------------------------------------------------------- sweep

@dataclass
class SweepReport:
    scenario: str
    seeds: list[int]
    reports: list[Report]

    def _rate(self, flags: Sequence[bool]) -> float:
        return sum(flags) / len(flags) if flags else 0.0

    @property
    def tp_rate(self) -> float:
        return self._rate([r.correct_identification for r in self.reports])

    @property
    def fp_rate(self) -> float:
        return self._rate([r.suspected for r in self.reports])

    @property
    def single_test_fp_rate(self) -> float:
        return self._rate([r.single_test_alarm for r in self.reports])

    def slowdown_stats(self, vm_id: str) -> tuple[float, float]:
        vals = [r.vms[vm_id].slowdown for r in self.reports if r.vms[vm_id].slowdown is not None]
        if not vals:
            return math.nan, math.nan
        return statistics.fmean(vals), statistics.pstdev(vals)

    def metric_stats(self, values: Sequence[float]) -> tuple[float, float]:
        return statistics.fmean(values), statistics.pstdev(values)

    def to_dict(self) -> dict:
        vm_ids = list(self.reports[0].vms) if self.reports else []
        return {
            "scenario": self.scenario,
            "seeds": self.seeds,
            "tp_rate": self.tp_rate,
            "fp_rate": self.fp_rate,
            "single_test_fp_rate": self.single_test_fp_rate,
            "slowdown": {vm: dict(zip(("mean", "stddev"), self.slowdown_stats(vm))) for vm in vm_ids},
            "per_seed": [r.to_dict() for r in self.reports],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, default=_json_default)


def sweep(config: ScenarioConfig, seeds: Sequence[int]) -> SweepReport:
    if not seeds:
        raise ValueError("sweep needs at least one seed")
    reports = [run_scenario(config.replace(seed=s)) for s in seeds]
    return SweepReport(config.name, list(seeds), reports)


def replay_ks(records: Sequence[dict]) -> list[tuple[float, float]]:
    """Recompute every logged KS decision from the logged counter windows.

    Returns (logged D, recomputed D) pairs.
    """
    windows = {}
    out = []
    for rec in records:
        if rec["kind"] == "counter_sample":
            windows[rec["payload"]["window"]] = rec["payload"]["values"]
        elif rec["kind"] == "ks_decision":
            p = rec["payload"]
            d = ks_decide(windows[p["monitored"]], windows[p["reference"]], p["alpha"])
            out.append((p["D"], d.statistic))
    return out
