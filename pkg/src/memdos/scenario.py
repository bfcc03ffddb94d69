"""Scenario files: TOML descriptions of a host, its tenants and the defense."""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .defense import MonitorSchedule
from .topology import InvalidConfig, TopologyConfig
from .workloads import KINDS, WorkloadError, WorkloadSpec

ROLES = ("protected", "benign", "attacker")
BASELINES = ("none", "isolated", "no_attack", "no_defense")


class ScenarioError(ValueError):
    """A scenario file is malformed or violates an invariant."""


@dataclass(frozen=True)
class VmConfig:
    vm_id: str
    workload: WorkloadSpec
    vcpus: int = 1
    start_ms: float = 0.0
    role: str = "benign"
    package: int = 0
    slot: int | None = None


@dataclass(frozen=True)
class ScenarioConfig:
    vms: tuple[VmConfig, ...]
    name: str = "scenario"
    seed: int = 0
    duration_ms: float = 1000.0
    topology: TopologyConfig = field(default_factory=TopologyConfig.desk)
    topology_seed: int | None = None
    randomize_dram_bits: bool = False
    defense: MonitorSchedule = field(default_factory=MonitorSchedule)
    defense_enabled: bool = False
    monitor_start_ms: float = 0.0
    measure_start_ms: float = 0.0
    snapshot_ms: float = 100.0
    sample_window: bool = True
    baseline: str = "none"
    oracle_checks: bool = False

    @property
    def protected(self) -> VmConfig | None:
        for vm in self.vms:
            if vm.role == "protected":
                return vm
        return None

    @property
    def attackers(self) -> list[str]:
        return [vm.vm_id for vm in self.vms if vm.role == "attacker"]

    def vm(self, vm_id: str) -> VmConfig:
        for vm in self.vms:
            if vm.vm_id == vm_id:
                return vm
        raise KeyError(vm_id)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def with_vms(self, vms) -> "ScenarioConfig":
        return dataclasses.replace(self, vms=tuple(vms))

    def validate(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ScenarioError(msg)

        try:
            self.topology.validate()
        except InvalidConfig as exc:
            raise ScenarioError(f"topology: {exc}") from None
        need(self.duration_ms > 0, "duration_ms must be > 0")
        need(len(self.vms) >= 1, "vms: at least one VM is required")
        ids = [vm.vm_id for vm in self.vms]
        dup = sorted({i for i in ids if ids.count(i) > 1})
        need(not dup, f"vm_id must be unique (duplicated: {', '.join(dup)})")
        for vm in self.vms:
            need(vm.role in ROLES, f"vm {vm.vm_id}: role must be one of {ROLES}")
            need(vm.vcpus >= 1, f"vm {vm.vm_id}: vcpus must be >= 1")
            need(0 <= vm.start_ms < self.duration_ms, f"vm {vm.vm_id}: start_ms must lie in [0, duration_ms)")
            need(0 <= vm.package < self.topology.packages, f"vm {vm.vm_id}: package out of range")
            try:
                vm.workload.validate(self.topology.line_size)
            except WorkloadError as exc:
                raise ScenarioError(f"vm {vm.vm_id}: workload: {exc}") from None
            need(vm.workload.kind == "idle" or vm.workload.threads <= vm.vcpus,
                 f"vm {vm.vm_id}: workload threads exceed vcpus")
        slots = [vm.slot if vm.slot is not None else i for i, vm in enumerate(self.vms)]
        need(len(set(slots)) == len(slots), "slot: VM region slots must be unique")
        n_protected = sum(vm.role == "protected" for vm in self.vms)
        need(n_protected <= 1, "role: at most one protected VM")
        if self.defense_enabled:
            need(n_protected == 1, "defense enabled: exactly one protected VM is required")
            try:
                self.defense.validate()
            except ValueError as exc:
                raise ScenarioError(f"defense: {exc}") from None
        need(self.baseline in BASELINES or self.baseline.endswith(".toml"),
             f"baseline must be one of {BASELINES} or a scenario path")
        need(self.snapshot_ms > 0, "snapshot_ms must be > 0")


_SIZE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([KMG]?)i?B?\s*$", re.IGNORECASE)
_UNITS = {"": 1, "K": 1 << 10, "M": 1 << 20, "G": 1 << 30}


def parse_size(value: Any) -> int:
    if isinstance(value, bool):
        raise ScenarioError(f"not a size: {value!r}")
    if isinstance(value, int):
        return value
    m = _SIZE.match(str(value))
    if not m:
        raise ScenarioError(f"not a size: {value!r}")
    return int(float(m.group(1)) * _UNITS[m.group(2).upper()])


def _fraction(value: Any, name: str) -> Fraction:
    try:
        return Fraction(str(value))
    except (ValueError, ZeroDivisionError):
        raise ScenarioError(f"{name}: not a ratio: {value!r}") from None


def _take(table: dict, known: set[str], where: str) -> None:
    extra = set(table) - known
    if extra:
        raise ScenarioError(f"{where}: unknown field(s) {', '.join(sorted(extra))}")


_WORKLOAD_FIELDS = {f.name for f in dataclasses.fields(WorkloadSpec)} - {"buffer"}


def workload_from_dict(d: dict, where: str = "workload") -> WorkloadSpec:
    if "kind" not in d:
        raise ScenarioError(f"{where}: missing field 'kind'")
    if d["kind"] not in KINDS:
        raise ScenarioError(f"{where}: unknown workload kind {d['kind']!r}")
    _take(d, _WORKLOAD_FIELDS, where)
    kw = dict(d)
    if "footprint" in kw:
        kw["footprint"] = parse_size(kw["footprint"])
    for key in ("channels", "pin_channels"):
        if key in kw:
            kw[key] = frozenset(int(c) for c in kw[key])
    try:
        return WorkloadSpec(**kw)
    except TypeError as exc:
        raise ScenarioError(f"{where}: {exc}") from None


_TOPO_FIELDS = {f.name for f in dataclasses.fields(TopologyConfig)}
_SCHED_FIELDS = {f.name for f in dataclasses.fields(MonitorSchedule)}


def topology_from_dict(d: dict) -> TopologyConfig:
    d = dict(d)
    preset = d.pop("preset", "desk")
    d.pop("seed", None)
    d.pop("randomize_dram_bits", None)
    _take(d, _TOPO_FIELDS, "topology")
    for key in ("bank_bit_positions", "channel_bit_positions"):
        if key in d:
            d[key] = tuple(int(b) for b in d[key])
    if "private_cache_bytes" in d:
        d["private_cache_bytes"] = parse_size(d["private_cache_bytes"])
    if preset == "desk":
        return TopologyConfig.desk(**d)
    if preset == "default":
        return TopologyConfig(**d)
    raise ScenarioError(f"topology: unknown preset {preset!r}")


def schedule_from_dict(d: dict) -> tuple[MonitorSchedule, bool, float]:
    d = dict(d)
    enabled = bool(d.pop("enabled", True))
    start = float(d.pop("start_ms", 0.0))
    _take(d, _SCHED_FIELDS, "defense")
    for key in ("reference_throttle_ratio", "mitigation_ratio"):
        if key in d:
            d[key] = _fraction(d[key], f"defense.{key}")
    return MonitorSchedule(**d), enabled, start


_TOP_FIELDS = {"name", "seed", "duration_ms", "topology", "defense", "vm", "measure_start_ms",
               "snapshot_ms", "sample_window", "baseline", "oracle_checks"}
_VM_FIELDS = {"id", "vcpus", "start_ms", "role", "package", "workload", "slot"}


def scenario_from_dict(data: dict, source: str = "<dict>") -> ScenarioConfig:
    _take(data, _TOP_FIELDS, source)
    topo_raw = data.get("topology", {})
    topology = topology_from_dict(topo_raw)
    vms = []
    for i, raw in enumerate(data.get("vm", [])):
        where = f"vm[{i}]"
        _take(raw, _VM_FIELDS, where)
        if "id" not in raw:
            raise ScenarioError(f"{where}: missing field 'vm_id' (key 'id')")
        wl = workload_from_dict(raw.get("workload", {"kind": "idle"}), f"{where}.workload")
        vms.append(VmConfig(
            vm_id=str(raw["id"]), workload=wl, vcpus=int(raw.get("vcpus", max(1, wl.threads))),
            start_ms=float(raw.get("start_ms", 0.0)), role=raw.get("role", "benign"),
            package=int(raw.get("package", 0)),
            slot=int(raw["slot"]) if "slot" in raw else None,
        ))
    kw: dict[str, Any] = {}
    if "defense" in data:
        sched, enabled, start = schedule_from_dict(data["defense"])
        kw.update(defense=sched, defense_enabled=enabled, monitor_start_ms=start)
    for key in ("name", "baseline"):
        if key in data:
            kw[key] = str(data[key])
    for key in ("seed",):
        if key in data:
            kw[key] = int(data[key])
    for key in ("duration_ms", "measure_start_ms", "snapshot_ms"):
        if key in data:
            kw[key] = float(data[key])
    for key in ("sample_window", "oracle_checks"):
        if key in data:
            kw[key] = bool(data[key])
    if "seed" in topo_raw:
        kw["topology_seed"] = int(topo_raw["seed"])
    if "randomize_dram_bits" in topo_raw:
        kw["randomize_dram_bits"] = bool(topo_raw["randomize_dram_bits"])
    try:
        cfg = ScenarioConfig(vms=tuple(vms), topology=topology, **kw)
    except TypeError as exc:
        raise ScenarioError(f"{source}: {exc}") from None
    cfg.validate()
    return cfg


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{path}: parse error: {exc}") from None
    cfg = scenario_from_dict(data, str(path))
    if cfg.baseline.endswith(".toml") and not Path(cfg.baseline).is_absolute():
        cfg = cfg.replace(baseline=str(path.parent / cfg.baseline))
    return cfg
