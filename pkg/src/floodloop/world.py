"""Rainfall scenarios and the grid environment they drive.

The world is a rectangular grid of cells (water depth, car density,
elevation, road flag, region id) plus a step clock. Rain falls on road
cells (impervious runoff collectors), drains everywhere at a per-step
rate, and relaxes downhill toward lower-elevation neighbors without
losing mass.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import InvalidHorizon, InvalidPartition
from .rng import substream

NOISE_AMPLITUDE = 0.05


class ScenarioKind(str, Enum):
    EXTREME = "extreme"
    INTERMITTENT = "intermittent"
    LIGHT = "light"


@dataclass(frozen=True)
class RainfallScenario:
    """A per-step intensity curve in [0, 1], reproducible from its seed."""

    kind: ScenarioKind
    curve: tuple[float, ...]
    seed: int

    @property
    def steps(self) -> int:
        return len(self.curve)

    def to_record(self) -> dict:
        return {
            "kind": self.kind.value,
            "steps": self.steps,
            "seed": self.seed,
            "curve": list(self.curve),
        }

    @staticmethod
    def from_record(record: dict) -> "RainfallScenario":
        return RainfallScenario(
            kind=ScenarioKind(record["kind"]),
            curve=tuple(float(v) for v in record["curve"]),
            seed=int(record["seed"]),
        )


def save_scenario(path: str | Path, scenario: RainfallScenario) -> None:
    Path(path).write_text(json.dumps(scenario.to_record(), indent=2))


def load_scenario(path: str | Path) -> RainfallScenario:
    return RainfallScenario.from_record(json.loads(Path(path).read_text()))


def generate_scenario(kind: ScenarioKind, steps: int, seed: int) -> RainfallScenario:
    """Build one of the three canonical intensity curves.

    extreme      sharp onset, sustained plateau >= 0.8 over >= 25% of steps,
                 peak forced to exactly 1.0
    intermittent >= 2 pulses peaking >= 0.8 with troughs < 0.1 between them
    light        long low drizzle, max <= 0.35, nonzero on >= 80% of steps
    """
    if steps < 10:
        raise InvalidHorizon(f"need at least 10 steps, got {steps}")
    kind = ScenarioKind(kind)
    rng = substream(seed, "scenario", kind.value, steps)
    template = np.zeros(steps, dtype=np.float64)

    if kind is ScenarioKind.EXTREME:
        onset = max(2, steps // 10)
        plateau_len = max(int(math.ceil(0.35 * steps)) + 2, 4)
        plateau_start = onset
        plateau_end = min(steps, plateau_start + plateau_len)
        template[:onset] = np.linspace(0.05, 0.9, onset, endpoint=False)
        template[plateau_start:plateau_end] = 0.95
        tail = steps - plateau_end
        if tail > 0:
            template[plateau_end:] = np.linspace(0.5, 0.05, tail)
        noise_floor = 0.0
    elif kind is ScenarioKind.INTERMITTENT:
        n_pulses = 3 if steps >= 30 else 2
        pulse_len = max(2, steps // 12)
        template[:] = 0.03
        centers = np.linspace(pulse_len, steps - pulse_len - 1, n_pulses)
        jitter = rng.integers(-1, 2, size=n_pulses)
        for c, j in zip(centers, jitter):
            lo = int(max(0, round(c) + int(j) - pulse_len // 2))
            template[lo : lo + pulse_len] = 0.92
        noise_floor = 0.0
    else:
        phase = rng.uniform(0, 2 * math.pi)
        wave = 0.06 * np.sin(np.linspace(0, 4 * math.pi, steps) + phase)
        template[:] = 0.18 + wave
        noise_floor = 0.02  # keep the drizzle strictly nonzero

    noise = rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=steps)
    curve = np.clip(template + noise, noise_floor if kind is ScenarioKind.LIGHT else 0.0, 1.0)
    if kind is ScenarioKind.EXTREME:
        peak = plateau_start + (plateau_end - plateau_start) // 2
        curve[peak] = 1.0
    return RainfallScenario(kind=kind, curve=tuple(float(v) for v in curve), seed=seed)


@dataclass(frozen=True)
class HydrologyParams:
    """Per-step fractions; clamped into [0, 1] at construction."""

    inflow_coeff: float = 0.01
    drainage_rate: float = 0.05
    diffusion_rate: float = 0.2

    def __post_init__(self):
        for name in ("inflow_coeff", "drainage_rate", "diffusion_rate"):
            v = getattr(self, name)
            object.__setattr__(self, name, float(min(max(v, 0.0), 1.0)))


def partition_regions(width: int, height: int, n_regions: int) -> np.ndarray:
    """Tile the grid into a sqrt(n) x sqrt(n) checkerboard of region ids.

    The last row/column of tiles absorbs the remainder when the grid does
    not divide evenly.
    """
    if n_regions < 1:
        raise InvalidPartition(f"need at least one region, got {n_regions}")
    side = math.isqrt(n_regions)
    if side * side != n_regions:
        raise InvalidPartition(f"{n_regions} is not a perfect square")
    tile_h = math.ceil(height / side)
    tile_w = math.ceil(width / side)
    rows = np.minimum(np.arange(height) // tile_h, side - 1)
    cols = np.minimum(np.arange(width) // tile_w, side - 1)
    return (rows[:, None] * side + cols[None, :]).astype(np.int64)


def synth_elevation(width: int, height: int, seed: int, relief: float = 5.0, smoothing_passes: int = 2) -> np.ndarray:
    """Smooth seeded noise field in meters; only the ordering matters to flow."""
    rng = substream(seed, "elevation")
    z = rng.standard_normal((height, width))
    for _ in range(smoothing_passes):
        z = uniform_filter(z, size=5, mode="nearest")
    z = z - z.min()
    span = float(z.max()) or 1.0
    return (z / span) * relief


def _shifted(a: np.ndarray, dr: int, dc: int, fill: float) -> np.ndarray:
    """a shifted so out[r, c] = a[r + dr, c + dc], padded with fill."""
    out = np.full_like(a, fill)
    h, w = a.shape
    rs_src = slice(max(dr, 0), h + min(dr, 0))
    cs_src = slice(max(dc, 0), w + min(dc, 0))
    rs_dst = slice(max(-dr, 0), h + min(-dr, 0))
    cs_dst = slice(max(-dc, 0), w + min(-dc, 0))
    out[rs_dst, cs_dst] = a[rs_src, cs_src]
    return out


_DIRECTIONS = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass
class WorldState:
    """One immutable-per-step snapshot of the grid environment."""

    width: int
    height: int
    elevation: np.ndarray
    is_road: np.ndarray
    region_id: np.ndarray
    water_depth: np.ndarray
    car_density: np.ndarray
    step: int
    n_regions: int
    params: HydrologyParams
    downhill_masks: tuple[np.ndarray, ...] = field(repr=False, default=())
    downhill_counts: np.ndarray | None = field(repr=False, default=None)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def road_cells(self) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(self.is_road)
        return list(zip(rows.tolist(), cols.tolist()))

    def region_of(self, cell: tuple[int, int]) -> int:
        return int(self.region_id[cell])

    def in_bounds(self, cell: tuple[int, int]) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width


def _downhill_structure(elevation: np.ndarray):
    masks = []
    for dr, dc in _DIRECTIONS:
        neighbor = _shifted(elevation, dr, dc, fill=np.inf)
        masks.append(neighbor < elevation)
    counts = np.sum(masks, axis=0)
    return tuple(masks), counts


def build_world(
    width: int = 64,
    height: int = 64,
    seed: int = 0,
    n_regions: int = 64,
    params: HydrologyParams | None = None,
    road_spacing: int = 4,
    elevation_relief: float = 12.0,
    elevation_smoothing: int = 1,
    road_depression: float = 1.5,
) -> WorldState:
    params = params or HydrologyParams()
    elevation = synth_elevation(width, height, seed, elevation_relief, elevation_smoothing)
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    is_road = np.broadcast_to((rows % road_spacing == 0) | (cols % road_spacing == 0), (height, width)).copy()
    # streets run below the surrounding terrain so they collect and channel
    # runoff; ponds then form on the road network at its low points
    elevation = elevation - road_depression * is_road
    region_id = partition_regions(width, height, n_regions)
    masks, counts = _downhill_structure(elevation)
    return WorldState(
        width=width,
        height=height,
        elevation=elevation,
        is_road=is_road,
        region_id=region_id,
        water_depth=np.zeros((height, width), dtype=np.float64),
        car_density=np.zeros((height, width), dtype=np.float64),
        step=0,
        n_regions=n_regions,
        params=params,
        downhill_masks=masks,
        downhill_counts=counts,
    )


def _diffuse(depth: np.ndarray, elevation: np.ndarray, masks, counts, rate: float) -> np.ndarray:
    """Move `rate` of each cell's water-surface excess over its
    downhill-neighbor mean surface, capped at the water present.

    Flow is driven by the free surface (elevation + depth) so water runs
    into basins and ponds there instead of merely smoothing the depth
    field. All transfers are computed from the pre-step field and applied
    at once; every unit leaving a cell lands in a neighbor, so the total
    is conserved exactly.
    """
    if rate <= 0:
        return depth
    surface = elevation + depth
    neighbor_sum = np.zeros_like(depth)
    for (dr, dc), mask in zip(_DIRECTIONS, masks):
        neighbor_sum += _shifted(surface, dr, dc, 0.0) * mask
    safe_counts = np.maximum(counts, 1)
    neighbor_mean = neighbor_sum / safe_counts
    excess = np.where(counts > 0, np.maximum(surface - neighbor_mean, 0.0), 0.0)
    outflow = np.minimum(rate * excess, depth)
    share = outflow / safe_counts
    new_depth = depth - outflow
    for (dr, dc), mask in zip(_DIRECTIONS, masks):
        # flow from each cell to its downhill neighbor in (dr, dc): the
        # neighbor at offset (dr, dc) receives it, so shift back by (-dr, -dc)
        new_depth += _shifted(share * mask, -dr, -dc, 0.0)
    return new_depth


def step_hydrology(
    world: WorldState,
    intensity: float,
    drain_multiplier: np.ndarray | None = None,
) -> WorldState:
    """Advance the water field one step: drain, rain onto roads, diffuse.

    Mass balance: total' = total + intensity * inflow_coeff * n_road_cells
    - sum(d_cell * depth_cell), with drainage applied to the pre-step field
    and diffusion conserving the total exactly.
    """
    p = world.params
    depth = world.water_depth
    d = np.full(world.shape, p.drainage_rate)
    if drain_multiplier is not None:
        d = np.clip(d * drain_multiplier[world.region_id], 0.0, 1.0)
    depth = depth * (1.0 - d)
    if intensity > 0 and p.inflow_coeff > 0:
        depth = depth + np.where(world.is_road, intensity * p.inflow_coeff, 0.0)
    depth = _diffuse(depth, world.elevation, world.downhill_masks, world.downhill_counts, p.diffusion_rate)
    return replace(world, water_depth=depth, step=world.step + 1)


def region_means(values: np.ndarray, region_id: np.ndarray, n_regions: int) -> np.ndarray:
    """Per-region mean of a cell field; empty regions read as 0."""
    flat = values.ravel()
    ids = region_id.ravel()
    sums = np.bincount(ids, weights=flat, minlength=n_regions)
    counts = np.bincount(ids, minlength=n_regions)
    return sums / np.maximum(counts, 1)


def water_depth_stats(world: WorldState) -> tuple[float, float]:
    """Population mean and stddev of per-region mean water depths."""
    means = region_means(world.water_depth, world.region_id, world.n_regions)
    return float(np.mean(means)), float(np.std(means))
