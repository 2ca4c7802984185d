"""Normalized indicators, the weighted objective, and trigger statistics.

Four indicators feed one scalar cost J:
  f  sigmoid-normalized per-region flood depth, averaged over regions
  t  sigmoid-normalized per-region car density, averaged over regions
  c  cancelled trips / spawned trips
  r  on-time arrivals / spawned trips  (enters J as 1 - r)

All mean/stddev/variance here are population statistics. When every region
is identical (sigma = 0) the sigmoid indices are defined as 0.5, the
sigmoid's center, which keeps f and t continuous as variance shrinks.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    InsufficientRuns,
    InvalidWeights,
    MetricSetMismatch,
    UndefinedRates,
)
from .world import WorldState, region_means

TRIGGER_FLOOR = 0.015
DEFAULT_WEIGHTS = (0.3, 0.3, 0.2, 0.2)
METRIC_NAMES = ("f", "t", "c", "r")


@dataclass(frozen=True)
class MetricsSnapshot:
    f: float
    t: float
    c: float
    r: float
    j: float
    step: int

    def as_map(self) -> dict[str, float]:
        return {"f": self.f, "t": self.t, "c": self.c, "r": self.r}


@dataclass(frozen=True)
class WeightVector:
    """Convex weights over (f, t, c, 1 - r)."""

    w1: float = DEFAULT_WEIGHTS[0]
    w2: float = DEFAULT_WEIGHTS[1]
    w3: float = DEFAULT_WEIGHTS[2]
    w4: float = DEFAULT_WEIGHTS[3]

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.w1, self.w2, self.w3, self.w4)

    def validate(self) -> None:
        ws = self.as_tuple()
        if any(w < 0 for w in ws):
            raise InvalidWeights(f"negative weight in {ws}")
        if abs(sum(ws) - 1.0) > 1e-9:
            raise InvalidWeights(f"weights sum to {sum(ws)!r}, expected 1")


def _sigmoid_scores(values: np.ndarray) -> np.ndarray:
    """sigmoid((x - mu) / sigma) per entry; all 0.5 when sigma = 0."""
    mu = float(np.mean(values))
    sigma = float(np.std(values))
    if sigma == 0.0:
        return np.full_like(values, 0.5, dtype=np.float64)
    z = (values - mu) / sigma
    return 1.0 / (1.0 + np.exp(-z))


def flood_scores(world: WorldState) -> np.ndarray:
    """Per-region sigmoid flood index over mean region water depth."""
    return _sigmoid_scores(region_means(world.water_depth, world.region_id, world.n_regions))


def congestion_scores(world: WorldState) -> np.ndarray:
    """Per-region sigmoid congestion index over mean region car density."""
    return _sigmoid_scores(region_means(world.car_density, world.region_id, world.n_regions))


def flood_index(world: WorldState) -> float:
    return float(np.mean(flood_scores(world)))


def congestion_index(world: WorldState) -> float:
    return float(np.mean(congestion_scores(world)))


def trip_rates(cancelled: int, on_time_arrived: int, spawned: int) -> tuple[float, float]:
    """(cancellation rate, on-time arrival rate) over all spawned trips."""
    if spawned <= 0:
        raise UndefinedRates("no trips spawned")
    return cancelled / spawned, on_time_arrived / spawned


def objective_j(f: float, t: float, c: float, r: float, weights: WeightVector | None = None) -> float:
    """Weighted cost w1*f + w2*t + w3*c + w4*(1 - r); lower is better."""
    weights = weights or WeightVector()
    weights.validate()
    w1, w2, w3, w4 = weights.as_tuple()
    return w1 * f + w2 * t + w3 * c + w4 * (1.0 - r)


def objective_gap(history: Sequence[float], j_now: float) -> float:
    """j_now minus the historical best; 0 on an empty history so the first
    cycle can never trigger. Negative when j_now is a new best."""
    if not history:
        return 0.0
    return j_now - min(history)


def adaptive_threshold(window_values: Sequence[float], lam_thr: float, floor: float = TRIGGER_FLOOR) -> float:
    """mu + lam_thr * sigma over the recent window, floored.

    With fewer than two entries there is no spread to estimate and the
    static floor is returned.
    """
    if len(window_values) < 2:
        return floor
    arr = np.asarray(window_values, dtype=np.float64)
    return max(float(np.mean(arr) + lam_thr * np.std(arr)), floor)


def execution_deviation(planned: Mapping[str, float], executed: Mapping[str, float]) -> float:
    """Root-mean-square gap between executed and planned metric values."""
    if set(planned) != set(executed):
        raise MetricSetMismatch(f"planned keys {sorted(planned)} != executed keys {sorted(executed)}")
    keys = sorted(planned)
    diffs = np.array([executed[k] - planned[k] for k in keys], dtype=np.float64)
    return float(np.sqrt(np.mean(diffs**2)))


def run_stability(runs: Sequence[Mapping[str, Sequence[float]]]) -> dict[str, float]:
    """Population variance of each run-mean metric across runs."""
    if len(runs) < 2:
        raise InsufficientRuns(f"need >= 2 runs, got {len(runs)}")
    keys = sorted(runs[0])
    out = {}
    for key in keys:
        means = np.array([np.mean(np.asarray(run[key], dtype=np.float64)) for run in runs])
        out[key] = float(np.var(means))
    return out


class FeedbackWindow:
    """Ring buffer of the last L snapshots plus the all-time best J.

    The best tracks the full history, not just the window, so the
    objective gap always compares against the global minimum.
    """

    def __init__(self, length: int = 10):
        self.length = length
        self.snapshots: deque[MetricsSnapshot] = deque(maxlen=length)
        self.gaps: deque[float] = deque(maxlen=length)
        self.best_j: float | None = None
        self.history_js: list[float] = []

    def __len__(self) -> int:
        return len(self.snapshots)

    def gap_for(self, j_now: float) -> float:
        if self.best_j is None:
            return 0.0
        return j_now - self.best_j

    def push(self, snapshot: MetricsSnapshot, gap: float) -> None:
        self.snapshots.append(snapshot)
        self.gaps.append(gap)
        self.history_js.append(snapshot.j)
        if self.best_j is None or snapshot.j < self.best_j:
            self.best_j = snapshot.j

    def threshold_series(self, stat: str) -> list[float]:
        """Window series for the adaptive threshold: recent gaps (default,
        scale-consistent with what the trigger compares) or recent raw J."""
        if stat == "j":
            return [s.j for s in self.snapshots]
        return list(self.gaps)
