"""Two-sample Kolmogorov-Smirnov test on counter sample windows."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class SampleWindow:
    values: tuple[float, ...]
    kind: str = "monitored"
    time_ms: float = 0.0

    def __post_init__(self) -> None:
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if len(vals) < 2:
            raise ValueError("a sample window needs at least 2 values")
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("sample values must be finite and non-negative")
        if self.kind not in ("reference", "monitored"):
            raise ValueError(f"unknown window kind {self.kind!r}")

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class KsDecision:
    statistic: float
    critical: float
    alpha: float
    verdict: str = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "verdict", "reject" if self.statistic > self.critical else "accept")

    @property
    def rejected(self) -> bool:
        return self.verdict == "reject"


class Ecdf:
    """Right-continuous empirical distribution function of a sample."""

    def __init__(self, values: Sequence[float]):
        arr = np.sort(np.asarray(values, dtype=float))
        if arr.size == 0:
            raise ValueError("ecdf of an empty sample")
        self.sorted = arr
        self.n = arr.size

    def __call__(self, x):
        return np.searchsorted(self.sorted, x, side="right") / self.n

    def left(self, x):
        """Left limit F(x-)."""
        return np.searchsorted(self.sorted, x, side="left") / self.n


def ecdf(values: Sequence[float]) -> Ecdf:
    return Ecdf(values)


def _values(w) -> Sequence[float]:
    vals = w.values if isinstance(w, SampleWindow) else w
    if len(vals) == 0:
        raise ValueError("empty sample window")
    return vals


def ks_statistic(monitored, reference) -> float:
    """sup_x |F_M(x) - F_R(x)|, checking both F and its left limit at every sample point."""
    fm, fr = Ecdf(_values(monitored)), Ecdf(_values(reference))
    pts = np.union1d(fm.sorted, fr.sorted)
    right = np.abs(fm(pts) - fr(pts))
    left = np.abs(fm.left(pts) - fr.left(pts))
    return float(max(right.max(), left.max()))


def ks_critical(n_m: int, n_r: int, alpha: float) -> float:
    if n_m < 1 or n_r < 1:
        raise ValueError("sample sizes must be >= 1")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return math.sqrt((n_m + n_r) / (n_m * n_r)) * math.sqrt(-0.5 * math.log(alpha / 2))


def ks_decide(monitored, reference, alpha: float = 0.001) -> KsDecision:
    m, r = _values(monitored), _values(reference)
    return KsDecision(ks_statistic(m, r), ks_critical(len(m), len(r), alpha), alpha)
