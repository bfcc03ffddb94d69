"""Runtime detection, identification and throttling of memory DoS attackers.

The :class:`Defense` controller shares the simulator's timeline.  It
periodically collects a reference window from the protected VM while every
co-located VM is throttled (a pseudo-isolated baseline), collects monitored
windows in between, and KS-tests each monitored window against the latest
reference.  ``consecutive_k`` rejections in a row trigger a fresh reference
and a re-test; a deviation that survives the re-test starts a binary search
over the co-located VMs by selective throttling, and the VMs found are kept
throttled.
"""

from __future__ import annotations

import math
import random
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple, Sequence

from .ks import KsDecision, SampleWindow, ks_decide
from .sim import Simulator
from .trace import Trace

PHASES = ("normal", "suspected", "identifying", "mitigated")
_ALLOWED = {
    ("normal", "suspected"),
    ("suspected", "normal"),
    ("suspected", "identifying"),
    ("identifying", "mitigated"),
    ("mitigated", "suspected"),
    ("suspected", "mitigated"),
}
METRICS = ("llc_accesses", "bytes_transferred")


# "monitored": throttle one half for a reference window, then compare it with an
# unthrottled monitored window.  "paired": sample with each half throttled and
# follow the half whose window sits closest to the fully isolated reference.
SPLIT_MODES = ("monitored", "paired")


class IdentificationError(RuntimeError):
    """Selective-throttling outcomes contradicted each other twice."""


@dataclass(frozen=True)
class MonitorSchedule:
    w_r: float = 1000.0
    w_m: float = 1000.0
    l_m: float = 2000.0
    l_r: float = 30000.0
    jitter_fraction: float = 0.0
    samples: int = 100
    sub_window: float = 10.0
    alpha: float = 0.001
    consecutive_k: int = 4
    reference_throttle_ratio: Fraction = Fraction(1, 16)
    mitigation_ratio: Fraction = Fraction(1, 16)
    metric: str = "llc_accesses"
    settle_ms: float = 1000.0
    split_mode: str = "monitored"

    def validate(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ValueError(f"invalid monitor schedule: {msg}")

        need(self.samples >= 2, "samples >= 2")
        need(self.sub_window > 0, "sub_window > 0")
        need(math.isclose(self.w_r, self.samples * self.sub_window), "w_r = samples x sub_window")
        need(math.isclose(self.w_m, self.samples * self.sub_window), "w_m = samples x sub_window")
        need(self.l_m >= self.w_m, "l_m >= w_m")
        need(self.l_r >= self.l_m, "l_r >= l_m")
        need(0 <= self.jitter_fraction < 1, "0 <= jitter_fraction < 1")
        need(0 < self.alpha < 1, "0 < alpha < 1")
        need(self.consecutive_k >= 1, "consecutive_k >= 1")
        need(self.settle_ms >= 0, "settle_ms >= 0")
        need(self.metric in METRICS, f"metric must be one of {METRICS}")
        need(self.split_mode in SPLIT_MODES, f"split_mode must be one of {SPLIT_MODES}")
        for name in ("reference_throttle_ratio", "mitigation_ratio"):
            r = Fraction(getattr(self, name))
            need((r * 16).denominator == 1 and 1 <= r * 16 <= 16, f"{name} must be k/16")


class DetectionEvent(NamedTuple):
    time_ms: float
    kind: str
    vm_ids: tuple[str, ...] = ()


@dataclass
class DetectionState:
    reference: SampleWindow | None = None
    decisions: deque = field(default_factory=lambda: deque(maxlen=32))
    consecutive: int = 0
    phase: str = "normal"


class Defense:
    def __init__(self, sim: Simulator, protected: str, co_vms: Sequence[str],
                 schedule: MonitorSchedule | None = None, trace: Trace | None = None,
                 seed: int = 0):
        if protected not in sim.vms:
            raise KeyError(f"protected VM {protected!r} absent")
        for vm in co_vms:
            if vm not in sim.vms:
                raise KeyError(f"unknown co-located VM {vm!r}")
        self.sim = sim
        self.protected = protected
        self.co_vms = [vm for vm in co_vms if vm != protected]
        self.schedule = schedule or MonitorSchedule()
        self.schedule.validate()
        self.trace = trace if trace is not None else Trace()
        self.state = DetectionState()
        self.events: list[DetectionEvent] = []
        self.mitigated: list[str] = []
        self._rng = random.Random(f"defense/{seed}")
        self._window_id = 0
        self._ids: dict[int, int] = {}
        self._reidentified = False
        self.monitor_tests = 0
        self.monitor_rejects = 0
        self.split_rounds = 0
        self.verify_rounds = 0
        cfg = sim.config
        self._cpm = cfg.cycles_per_ms
        self._sub_cycles = round(self.schedule.sub_window * cfg.cycles_per_ms)
        if self._sub_cycles < 1:
            raise ValueError("sub_window shorter than one cycle")

    # --------------------------------------------------------------- timing

    @property
    def now_ms(self) -> float:
        return self.sim.now / self._cpm

    def _advance_to_ms(self, t_ms: float) -> None:
        target = math.ceil(t_ms * self._cpm)
        if target > self.sim.now:
            self.sim.advance(target - self.sim.now, collect=False)

    def _settle(self) -> None:
        """Let the protected VM's cache state recover after a throttling decision."""
        if self.schedule.settle_ms:
            self._advance_to_ms(self.now_ms + self.schedule.settle_ms)

    def _interval(self, base: float) -> float:
        j = self.schedule.jitter_fraction
        if not j:
            return base
        return base * (1 + self._rng.uniform(-j, j))

    # -------------------------------------------------------------- actions

    def _set_duty(self, vm_id: str, ratio) -> None:
        ratio = Fraction(ratio)
        if self.sim.duty_of(vm_id) == ratio:
            return
        self.sim.set_duty_cycle(vm_id, ratio)
        self.trace.emit(self.now_ms, "duty_change", {"ratio": str(ratio)}, vm_id=vm_id)

    def _phase(self, to: str, reason: str) -> None:
        frm = self.state.phase
        if (frm, to) not in _ALLOWED:
            raise RuntimeError(f"illegal phase change {frm} -> {to}")
        self.state.phase = to
        self.trace.emit(self.now_ms, "phase_change", {"from": frm, "to": to, "reason": reason},
                        vm_id=self.protected)

    def _event(self, kind: str, vm_ids=()) -> None:
        self.events.append(DetectionEvent(self.now_ms, kind, tuple(vm_ids)))

    def _window(self, kind: str) -> SampleWindow:
        sim = self.sim
        frame = sim.config.frame_cycles
        if sim.now % frame:
            sim.advance(frame - sim.now % frame, collect=False)
        metric = self.schedule.metric
        start_ms = self.now_ms
        values = []
        prev = sim.read_counters(self.protected).get(metric)
        for _ in range(self.schedule.samples):
            sim.advance(self._sub_cycles, collect=False)
            cur = sim.read_counters(self.protected).get(metric)
            values.append(cur - prev)
            prev = cur
        self._window_id += 1
        self.trace.emit(start_ms, "counter_sample", {
            "window": self._window_id, "window_kind": kind, "metric": metric,
            "sub_window_ms": self.schedule.sub_window, "values": values,
        }, vm_id=self.protected)
        window = SampleWindow(tuple(values), kind=kind, time_ms=start_ms)
        self._ids[id(window)] = self._window_id
        return window

    def collect_reference(self, throttle: Sequence[str] | None = None) -> SampleWindow:
        """Sample the protected VM while ``throttle`` (default: all co-VMs) run throttled."""
        vms = self.co_vms if throttle is None else list(throttle)
        prior = {vm: self.sim.duty_of(vm) for vm in vms}
        ratio = Fraction(self.schedule.reference_throttle_ratio)
        for vm in vms:
            if prior[vm] > ratio:
                self._set_duty(vm, ratio)
        window = self._window("reference")
        for vm in vms:
            self._set_duty(vm, prior[vm])
        return window

    def collect_monitored(self) -> SampleWindow:
        return self._window("monitored")

    def _test(self, monitored: SampleWindow, reference: SampleWindow, context: str,
              **extra) -> KsDecision:
        d = ks_decide(monitored, reference, self.schedule.alpha)
        self.state.decisions.append(d)
        self.trace.emit(self.now_ms, "ks_decision", {
            "D": d.statistic, "D_alpha": d.critical, "alpha": d.alpha, "verdict": d.verdict,
            "monitored": self._ids[id(monitored)], "reference": self._ids[id(reference)],
            "context": context, **extra,
        }, vm_id=self.protected)
        return d

    # ------------------------------------------------------ identification

    def identify_attackers(self, candidates: Sequence[str] | None = None) -> list[str]:
        """Binary search by selective throttling; repeats until a pass accepts."""
        remaining = list(self.co_vms if candidates is None else candidates)
        remaining = [vm for vm in remaining if vm not in self.mitigated]
        found: list[str] = []
        retries = 0
        ratio = Fraction(self.schedule.mitigation_ratio)
        if self.schedule.split_mode == "paired" and self.state.reference is None:
            self.state.reference = self.collect_reference()
        while remaining:
            clean = self.state.reference
            sub = list(remaining)
            implicated = False
            while len(sub) > 1:
                # the first ceil((n - 1) / 2) VMs form the throttled half
                mid = math.ceil((len(sub) - 1) / 2)
                left, right = sub[:mid], sub[mid:]
                if self.schedule.split_mode == "paired":
                    toward, d = self._paired_split(left, right, clean)
                else:
                    ref = self.collect_reference(throttle=left)
                    d = self._test(self.collect_monitored(), ref, "split")
                    toward = "left" if d.rejected else "right"
                self.split_rounds += 1
                implicated = implicated or d.rejected
                sub = left if toward == "left" else right
            suspect = sub[0]
            found.append(suspect)
            remaining.remove(suspect)
            self._set_duty(suspect, ratio)
            self._event("identified", [suspect])
            if not remaining:
                break
            self._settle()
            ref = self.collect_reference(throttle=remaining)
            d = self._test(self.collect_monitored(), ref, "verify")
            self.verify_rounds += 1
            if not d.rejected:
                break
            if not implicated:
                # the suspect was reached only through accepted halves; check it alone
                self._set_duty(suspect, 1)
                ref = self.collect_reference(throttle=[suspect])
                d = self._test(self.collect_monitored(), ref, "confirm")
                self._set_duty(suspect, ratio)
                if not d.rejected:
                    found.remove(suspect)
                    remaining.append(suspect)
                    self._set_duty(suspect, 1)
                    retries += 1
                    if retries > 1:
                        raise IdentificationError(
                            "deviation persists but no throttled half explains it")
        return found

    def _paired_split(self, left, right, clean: SampleWindow) -> tuple[str, KsDecision]:
        ref_l = self.collect_reference(throttle=left)
        ref_r = self.collect_reference(throttle=right)
        alpha = self.schedule.alpha
        d_l = ks_decide(ref_l, clean, alpha).statistic
        d_r = ks_decide(ref_r, clean, alpha).statistic
        toward = "left" if d_l <= d_r else "right"
        return toward, self._test(ref_r, ref_l, "split", toward=toward)

    def mitigate(self, vm_ids: Sequence[str]) -> None:
        for vm in vm_ids:
            if vm not in self.sim.vms:
                raise KeyError(f"unknown VM {vm!r}")
        for vm in vm_ids:
            self._set_duty(vm, self.schedule.mitigation_ratio)
            if vm not in self.mitigated:
                self.mitigated.append(vm)
        if vm_ids:
            self._event("mitigated", vm_ids)

    # ------------------------------------------------------------ main loop

    def _escalate(self) -> None:
        st = self.state
        back_to = st.phase
        self._phase("suspected", f"{self.schedule.consecutive_k} consecutive rejections")
        ref_start = self.now_ms
        st.reference = self.collect_reference()
        self._last_ref = ref_start
        d = self._test(self.collect_monitored(), st.reference, "double_check")
        st.consecutive = 0
        if not d.rejected:
            self._phase(back_to, "refreshed reference accepted")
            return
        if back_to == "mitigated" and self._reidentified:
            self._phase("mitigated", "deviation persists; holding current mitigation")
            return
        if back_to == "mitigated":
            self._reidentified = True
        self._event("suspected")
        self._phase("identifying", "deviation persists after refreshed reference")
        try:
            found = self.identify_attackers()
        except IdentificationError:
            self._event("identification_failed")
            found = []
        self.mitigate(found)
        self._phase("mitigated", "attackers throttled" if found else "no attacker isolated")
        self._settle()
        self._last_ref = self.now_ms
        st.reference = self.collect_reference()

    def run(self, until_ms: float) -> list[DetectionEvent]:
        """Monitor the protected VM until ``until_ms``; returns the detection events."""
        sch = self.schedule
        st = self.state
        next_ref = self.now_ms
        self._last_ref = next_ref
        next_mon = None
        while True:
            t = self.now_ms
            if st.reference is None or t >= next_ref:
                if t + sch.w_r > until_ms:
                    break
                st.reference = self.collect_reference()
                self._last_ref = t
                next_ref = t + self._interval(sch.l_r)
                if next_mon is None:
                    next_mon = self.now_ms
                continue
            if t >= next_mon:
                if t + sch.w_m > until_ms:
                    break
                d = self._test(self.collect_monitored(), st.reference, "monitor")
                next_mon = t + self._interval(sch.l_m)
                self.monitor_tests += 1
                if d.rejected:
                    self.monitor_rejects += 1
                    st.consecutive += 1
                else:
                    st.consecutive = 0
                if st.consecutive >= sch.consecutive_k:
                    self._escalate()
                    next_ref = self._last_ref + self._interval(sch.l_r)
                    next_mon = max(next_mon, self.now_ms)
                continue
            target = min(next_ref, next_mon)
            if target >= until_ms:
                break
            self._advance_to_ms(target)
        self._advance_to_ms(until_ms)
        return list(self.events)


def run_monitor(sim: Simulator, protected: str, co_vms: Sequence[str],
                schedule: MonitorSchedule | None = None, until_ms: float = 0.0,
                trace: Trace | None = None, seed: int = 0) -> Defense:
    defense = Defense(sim, protected, co_vms, schedule, trace, seed)
    defense.run(until_ms)
    return defense
