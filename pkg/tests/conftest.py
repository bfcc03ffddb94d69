import time

import pytest

from memdos.sim import Simulator
from memdos.topology import PublicGeometry, TopologyConfig, build_topology
from memdos.workloads import WorkloadEnv, build_threads


def make_sim(config=None, seed=0):
    return Simulator(build_topology(config or TopologyConfig.desk(), seed))


def attach(sim, vm_id, spec, vcpus=None, seed=0, start=0, slot=None, pinned=False):
    """Add a VM running ``spec`` and return its workload instance."""
    vcpus = vcpus or max(1, spec.threads)
    sim.add_vm(vm_id, vcpus=vcpus, slot=slot)
    base, _ = sim.hugepage(vm_id)
    env = WorkloadEnv(base=base, size=sim.vms[vm_id].size, geometry=PublicGeometry.of(sim.config),
                      seed=seed, vcpus=vcpus)
    if pinned:
        env.placement = sim.topology.channel_of
    inst = build_threads(spec, env)
    for t, gen in enumerate(inst.threads):
        sim.bind(vm_id, t, gen, start=start)
    return inst


@pytest.fixture
def desk():
    return TopologyConfig.desk()


# ------------------------------------------------------------ acceptance

SESSION_START = time.perf_counter()
ACCEPTANCE: dict[str, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Log one acceptance line (shown in the terminal summary) and assert it."""
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[f"{criterion:02d}:{detail}"] = line
    print(line)
    assert ok, line


def pytest_collection_modifyitems(config, items):
    # acceptance runs last so the suite-time check sees every other test
    items.sort(key=lambda item: item.module.__name__ == "test_acceptance")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
