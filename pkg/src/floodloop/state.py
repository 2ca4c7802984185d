"""Structured per-cycle state summary shared by retrieval and backends."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import congestion_scores, flood_scores
from .world import WorldState, region_means

SEED_SCORE_THRESHOLD = 0.7


@dataclass(frozen=True)
class StateSummary:
    """Snapshot of what the dispatcher can observe at a cycle boundary."""

    step: int
    scenario_kind: str
    intensity: float
    region_flood: tuple[float, ...]
    region_congestion: tuple[float, ...]
    region_max_depth: tuple[float, ...]
    region_blocked_roads: tuple[int, ...]
    blocking_depth: float
    flooded_regions: tuple[int, ...]
    congested_regions: tuple[int, ...]
    targeted_regions: tuple[int, ...]
    spawned: int
    arrived: int
    cancelled: int
    enroute: int

    def seed_region_ids(self) -> list[str]:
        """Graph node ids for regions worth retrieving context about."""
        regions = sorted(set(self.flooded_regions) | set(self.congested_regions) | set(self.targeted_regions))
        return [f"region:{r}" for r in regions]

    def text(self) -> str:
        """Canonical rendering used for embedding and the prompt STATE block."""
        lines = [
            f"step: {self.step}",
            f"scenario: {self.scenario_kind}",
            f"rain_intensity: {self.intensity:.4f}",
            f"flooded_regions: {_fmt_ids(self.flooded_regions)}",
            f"congested_regions: {_fmt_ids(self.congested_regions)}",
            f"targeted_regions: {_fmt_ids(self.targeted_regions)}",
            f"max_region_depth: {max(self.region_max_depth):.4f}",
            f"blocked_road_cells: {sum(self.region_blocked_roads)}",
            f"trips: spawned={self.spawned} arrived={self.arrived} cancelled={self.cancelled} enroute={self.enroute}",
        ]
        return "\n".join(lines)


def _fmt_ids(ids: tuple[int, ...]) -> str:
    return " ".join(f"region {i}" for i in ids) if ids else "(none)"


def summarize_world(
    world: WorldState,
    scenario_kind: str,
    intensity: float,
    blocking_depth: float,
    targeted_regions: tuple[int, ...],
    trip_counts: tuple[int, int, int, int],
    score_threshold: float = SEED_SCORE_THRESHOLD,
) -> StateSummary:
    f_scores = flood_scores(world)
    t_scores = congestion_scores(world)
    max_depth = _region_max(world.water_depth, world.region_id, world.n_regions)
    blocked = world.is_road & (world.water_depth >= blocking_depth)
    blocked_counts = np.bincount(world.region_id[blocked], minlength=world.n_regions)
    spawned, arrived, cancelled, enroute = trip_counts
    return StateSummary(
        step=world.step,
        scenario_kind=scenario_kind,
        intensity=float(intensity),
        region_flood=tuple(float(v) for v in f_scores),
        region_congestion=tuple(float(v) for v in t_scores),
        region_max_depth=tuple(float(v) for v in max_depth),
        region_blocked_roads=tuple(int(v) for v in blocked_counts),
        blocking_depth=float(blocking_depth),
        flooded_regions=tuple(int(i) for i in np.nonzero(f_scores > score_threshold)[0]),
        congested_regions=tuple(int(i) for i in np.nonzero(t_scores > score_threshold)[0]),
        targeted_regions=targeted_regions,
        spawned=spawned,
        arrived=arrived,
        cancelled=cancelled,
        enroute=enroute,
    )


def _region_max(values: np.ndarray, region_id: np.ndarray, n_regions: int) -> np.ndarray:
    out = np.zeros(n_regions)
    np.maximum.at(out, region_id.ravel(), values.ravel())
    return out
