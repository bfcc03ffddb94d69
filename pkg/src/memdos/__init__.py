"""Simulated memory denial-of-service attacks on shared cloud servers and a
KS-test based detection and throttling defense."""

from .defense import Defense, MonitorSchedule, run_monitor
from .harness import Report, SweepReport, export_trace, run_scenario, sweep
from .ks import KsDecision, SampleWindow, ks_critical, ks_decide, ks_statistic
from .scenario import ScenarioConfig, ScenarioError, VmConfig, load_scenario
from .sim import Atomicity, MemOp, Simulator
from .topology import InvalidConfig, MemoryTopology, TopologyConfig, build_topology

__all__ = [
    "Atomicity", "Defense", "InvalidConfig", "KsDecision", "MemOp", "MemoryTopology",
    "MonitorSchedule", "Report", "SampleWindow", "ScenarioConfig", "ScenarioError",
    "Simulator", "SweepReport", "TopologyConfig", "VmConfig", "build_topology",
    "export_trace", "ks_critical", "ks_decide", "ks_statistic", "load_scenario",
    "run_monitor", "run_scenario", "sweep",
]
__version__ = "0.1.0"
