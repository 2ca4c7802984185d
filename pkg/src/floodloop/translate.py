"""Turning regional plans into executable, feasibility-checked instructions.

Directives map one-to-one onto typed instructions; an accuracy pass snaps
cell anchors onto road cells, clips execution windows to the horizon, and
rejects undeployable commands (the rejection reasons feed the next
cycle's failure feedback). Dispatched instructions live on a board whose
effects are queried per step, so everything reverts automatically when a
window closes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import UnknownDirective
from .policy import Directive, RegionalPlan
from .world import WorldState

log = logging.getLogger(__name__)

DEFAULT_RELIEF_MULTIPLIER = 3.0
DEFAULT_ROUTING_PENALTY = 4.0


class Tag(str, Enum):
    ROUTING = "routing"
    OBSTACLE = "obstacle"
    STOP = "stop"
    RELIEF = "relief"
    NOOP = "noop"


@dataclass(frozen=True)
class Instruction:
    tag: Tag
    region: int
    cell: tuple[int, int] | None
    params: tuple[tuple[str, float], ...]
    window: tuple[int, int]

    def param(self, key: str, default: float) -> float:
        for k, v in self.params:
            if k == key:
                return v
        return default


@dataclass(frozen=True)
class Rejection:
    instruction: Instruction
    reason: str


# directive kind -> (tag, window shrink factor)
_DIRECTIVE_TABLE: dict[str, tuple[Tag, float]] = {
    "avoid_region": (Tag.ROUTING, 1.0),
    "avoid_region_strong": (Tag.ROUTING, 1.0),
    "close_cell": (Tag.OBSTACLE, 1.0),
    "close_cell_brief": (Tag.OBSTACLE, 0.5),
    "hold_buses": (Tag.STOP, 1.0),
    "hold_buses_brief": (Tag.STOP, 0.5),
    "deploy_pumps": (Tag.RELIEF, 1.0),
    "deploy_pumps_surge": (Tag.RELIEF, 0.5),
    "noop": (Tag.NOOP, 1.0),
}

_KEYWORD_TABLE: tuple[tuple[Tag, tuple[str, ...]], ...] = (
    (Tag.ROUTING, ("reroute", "detour", "avoid", "redirect", "divert")),
    (Tag.OBSTACLE, ("close", "block", "obstacle", "barricade", "shut")),
    (Tag.STOP, ("stop", "suspend", "hold", "halt", "pause")),
    (Tag.RELIEF, ("relief", "pump", "drain", "dispatch")),
)


def classify_command(text: str) -> Tag:
    """Keyword rule table standing in for a zero-shot tagger; unmatched
    text degrades to NoOp with a logged warning."""
    if not text or not text.strip():
        raise ValueError("cannot classify empty command text")
    lowered = text.lower()
    for tag, keywords in _KEYWORD_TABLE:
        if any(kw in lowered for kw in keywords):
            return tag
    log.warning("unclassifiable command %r, tagging as noop", text)
    return Tag.NOOP


def translate(plan: RegionalPlan) -> list[Instruction]:
    """Map each directive to exactly one instruction, order preserved."""
    out = []
    start, end = plan.window
    for directive in plan.directives:
        entry = _DIRECTIVE_TABLE.get(directive.kind)
        if entry is None:
            raise UnknownDirective(directive.kind)
        tag, shrink = entry
        span = end - start
        window = (start, start + max(0, int(round(span * shrink))))
        out.append(
            Instruction(
                tag=tag,
                region=directive.region,
                cell=directive.cell,
                params=directive.params,
                window=window,
            )
        )
    return out


def _region_road_cells(world: WorldState, region: int) -> list[tuple[int, int]]:
    mask = (world.region_id == region) & world.is_road
    rows, cols = np.nonzero(mask)
    return list(zip(rows.tolist(), cols.tolist()))  # nonzero scans row-major


def snap_to_road(world: WorldState, region: int, cell: tuple[int, int]) -> tuple[int, int] | None:
    """Nearest road cell within the region by Manhattan distance; ties
    resolve in row-major scan order."""
    road_cells = _region_road_cells(world, region)
    if not road_cells:
        return None
    best = None
    best_d = None
    for rc in road_cells:
        d = abs(rc[0] - cell[0]) + abs(rc[1] - cell[1])
        if best_d is None or d < best_d:
            best, best_d = rc, d
    return best


def wrap_accuracy(
    instr: Instruction,
    world: WorldState,
    horizon: int,
    resident_block_depth: float = 0.3,
) -> Instruction | Rejection:
    """Feasibility pass: snap anchors, clip windows, reject undeployables."""
    start, end = instr.window
    start = max(0, min(start, horizon - 1))
    end = max(start, min(end, horizon - 1))
    out = replace(instr, window=(start, end))

    if instr.tag in (Tag.OBSTACLE,) or (instr.cell is not None and instr.tag is not Tag.NOOP):
        anchor = instr.cell
        if anchor is None or not world.in_bounds(anchor):
            anchor = _region_centroid(world, instr.region)
        if not world.is_road[anchor] or world.region_of(anchor) != instr.region:
            snapped = snap_to_road(world, instr.region, anchor)
            if snapped is None:
                return Rejection(out, f"no road cell in region {instr.region} to anchor {instr.tag.value}")
            anchor = snapped
        out = replace(out, cell=anchor)

    if instr.tag is Tag.ROUTING:
        road_cells = _region_road_cells(world, instr.region)
        if not road_cells:
            return Rejection(out, f"routing infeasible: region {instr.region} has no road cells")
        depths = [world.water_depth[c] for c in road_cells]
        if all(d >= resident_block_depth for d in depths):
            return Rejection(out, f"routing infeasible: region {instr.region} fully flooded")
    return out


def _region_centroid(world: WorldState, region: int) -> tuple[int, int]:
    rows, cols = np.nonzero(world.region_id == region)
    if len(rows) == 0:
        return (0, 0)
    return (int(round(float(rows.mean()))), int(round(float(cols.mean()))))


class InstructionBoard:
    """Active instruction effects, queried per step.

    Effects are pure functions of (instruction windows, step): once a
    window ends the effect vanishes, so the post-window world parameters
    equal the pre-window ones absent other causes.
    """

    def __init__(self, n_regions: int, routing_penalty: float = DEFAULT_ROUTING_PENALTY):
        self.n_regions = n_regions
        self.routing_penalty = routing_penalty
        self.obstacles: list[Instruction] = []
        self.routings: list[Instruction] = []
        self.stops: list[Instruction] = []
        self.reliefs: list[Instruction] = []
        self.noops: list[Instruction] = []

    def dispatch(self, instructions: list[Instruction]) -> None:
        for instr in instructions:
            if instr.tag is Tag.OBSTACLE:
                self.obstacles.append(instr)
            elif instr.tag is Tag.ROUTING:
                self.routings.append(instr)
            elif instr.tag is Tag.STOP:
                self.stops.append(instr)
            elif instr.tag is Tag.RELIEF:
                self.reliefs.append(instr)
            else:
                self.noops.append(instr)

    @staticmethod
    def _active(instr: Instruction, step: int) -> bool:
        return instr.window[0] <= step <= instr.window[1]

    def closed_cells(self, step: int) -> set[tuple[int, int]]:
        return {i.cell for i in self.obstacles if i.cell is not None and self._active(i, step)}

    def region_penalties(self, step: int) -> dict[int, float]:
        out: dict[int, float] = {}
        for i in self.routings:
            if self._active(i, step):
                penalty = i.param("penalty", self.routing_penalty)
                out[i.region] = max(out.get(i.region, 0.0), penalty)
        return out

    def bus_held(self, region: int, step: int) -> bool:
        return any(i.region == region and self._active(i, step) for i in self.stops)

    def drain_multipliers(self, step: int) -> np.ndarray:
        mult = np.ones(self.n_regions)
        for i in self.reliefs:
            if self._active(i, step):
                mult[i.region] = max(mult[i.region], i.param("multiplier", DEFAULT_RELIEF_MULTIPLIER))
        return mult

    def active_regions(self, step: int) -> tuple[int, ...]:
        regions = set()
        for group in (self.obstacles, self.routings, self.stops, self.reliefs):
            for i in group:
                if self._active(i, step):
                    regions.add(i.region)
        return tuple(sorted(regions))
