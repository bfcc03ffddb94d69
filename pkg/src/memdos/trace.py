"""Line-delimited JSON trace records: ``{time_ms, kind, vm_id?, payload}``."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

TRACE_KINDS = ("counter_sample", "ks_decision", "phase_change", "duty_change", "probe_result")


class Trace:
    def __init__(self) -> None:
        self.records: list[dict] = []

    def emit(self, time_ms: float, kind: str, payload: dict, vm_id: str | None = None) -> dict:
        if kind not in TRACE_KINDS:
            raise ValueError(f"unknown trace kind {kind!r}")
        if self.records and time_ms < self.records[-1]["time_ms"]:
            raise ValueError("trace timestamps must be non-decreasing")
        rec = {"time_ms": time_ms, "kind": kind}
        if vm_id is not None:
            rec["vm_id"] = vm_id
        rec["payload"] = payload
        self.records.append(rec)
        return rec

    def of_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["kind"] == kind]

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in self.records)


def write_trace(records: Iterable[dict], path: str | Path) -> None:
    text = "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in records)
    Path(path).write_text(text)


def read_trace(path: str | Path) -> list[dict]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("kind") not in TRACE_KINDS or "time_ms" not in rec or "payload" not in rec:
                raise ValueError(f"{path}:{n}: malformed trace record")
            out.append(rec)
    return out
