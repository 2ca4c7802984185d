"""Resident and transit agents: perception, A* routing, trip lifecycle.

Agents realize a 4-tuple of local observation, feasible action set,
deterministic transition, and an action distribution. Movement is
4-connected over road cells; a cell is passable while its water depth
stays under the role's blocking threshold and no obstacle instruction
closes it. Blocked agents flip a seeded coin between waiting and
replanning around the blockage; running out of patience cancels the trip.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NoDemandSource
from .rng import pystream
from .world import WorldState

Cell = tuple[int, int]

RESIDENT_BLOCK_DEPTH = 0.3
BUS_BLOCK_DEPTH = 0.25
WAIT_PROBABILITY = 0.2
PATIENCE_FACTOR = 2.0
PATIENCE_CAP = 50
ON_TIME_FACTOR = 3.0
PERCEPTION_RADIUS = 3


class Role(str, Enum):
    RESIDENT = "resident"
    BUS = "bus"


class Status(str, Enum):
    WAITING = "waiting"
    ENROUTE = "enroute"
    ARRIVED = "arrived"
    CANCELLED = "cancelled"

    @property
    def terminal(self) -> bool:
        return self in (Status.ARRIVED, Status.CANCELLED)


@dataclass
class AgentRecord:
    id: int
    role: Role
    origin: Cell
    destination: Cell
    pos: Cell
    path: list[Cell] = field(default_factory=list)
    path_index: int = 0
    status: Status = Status.WAITING
    patience: int = PATIENCE_CAP
    departure_step: int = 0
    arrival_step: int | None = None
    planned_steps: int = 1
    travel_steps: int = 0
    stops: list[Cell] = field(default_factory=list)
    stop_index: int = 0
    perception_radius: int = PERCEPTION_RADIUS

    def observe(self, world: WorldState) -> dict[str, np.ndarray]:
        """Local window of depth and density within the perception radius."""
        r, c = self.pos
        k = self.perception_radius
        rs = slice(max(0, r - k), min(world.height, r + k + 1))
        cs = slice(max(0, c - k), min(world.width, c + k + 1))
        return {
            "water_depth": world.water_depth[rs, cs].copy(),
            "car_density": world.car_density[rs, cs].copy(),
        }

    def action_distribution(self, blocked: bool, wait_probability: float = WAIT_PROBABILITY) -> dict[str, float]:
        """Probabilities over the feasible actions in the current situation."""
        if self.status.terminal:
            return {}
        if self.status is Status.WAITING:
            return {"depart": 1.0}
        if blocked:
            return {"replan": 1.0 - wait_probability, "wait": wait_probability}
        return {"advance": 1.0}

    @property
    def remaining_stops(self) -> list[Cell]:
        return self.stops[self.stop_index :]


@dataclass(frozen=True)
class TripRecord:
    agent_id: int
    role: Role
    departure_step: int
    outcome: Status
    travel_steps: int
    planned_steps: int

    @property
    def on_time(self) -> bool:
        return self.outcome is Status.ARRIVED and self.travel_steps <= ON_TIME_FACTOR * self.planned_steps


class TripLog:
    """Terminal trip outcomes plus live counts for the rate metrics."""

    def __init__(self):
        self.records: list[TripRecord] = []
        self.spawned = 0

    def note_spawn(self, n: int = 1) -> None:
        self.spawned += n

    def close(self, agent: AgentRecord) -> None:
        self.records.append(
            TripRecord(
                agent_id=agent.id,
                role=agent.role,
                departure_step=agent.departure_step,
                outcome=agent.status,
                travel_steps=agent.travel_steps,
                planned_steps=agent.planned_steps,
            )
        )

    @property
    def cancelled(self) -> int:
        return sum(1 for r in self.records if r.outcome is Status.CANCELLED)

    @property
    def arrived_on_time(self) -> int:
        return sum(1 for r in self.records if r.on_time)

    @property
    def arrived(self) -> int:
        return sum(1 for r in self.records if r.outcome is Status.ARRIVED)


def plan_path(
    origin: Cell,
    destination: Cell,
    passable: Callable[[Cell], bool],
    shape: tuple[int, int],
    step_cost: Callable[[Cell], float] | None = None,
) -> list[Cell] | None:
    """A*, 4-connected, Manhattan heuristic, unit base cost.

    Expansion ties break on (f, row, col) so equal-cost routes are
    reproducible. Returns the full cell sequence including origin and
    destination, or None when unreachable. Extra per-cell costs from
    `step_cost` must be >= 1 to keep the heuristic admissible.
    """
    if origin == destination:
        return [origin]
    h_rows, h_cols = shape

    def heuristic(cell: Cell) -> int:
        return abs(cell[0] - destination[0]) + abs(cell[1] - destination[1])

    g_score: dict[Cell, float] = {origin: 0.0}
    came_from: dict[Cell, Cell] = {}
    open_heap: list[tuple[float, int, int]] = [(float(heuristic(origin)), origin[0], origin[1])]
    closed: set[Cell] = set()

    while open_heap:
        _, r, c = heapq.heappop(open_heap)
        current = (r, c)
        if current in closed:
            continue
        closed.add(current)
        if current == destination:
            path = [current]
            while current in came_from:
                current = came_from[current]
                path.append(current)
            path.reverse()
            return path
        base_g = g_score[current]
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nb = (r + dr, c + dc)
            if not (0 <= nb[0] < h_rows and 0 <= nb[1] < h_cols):
                continue
            if nb in closed or not passable(nb):
                continue
            cost = 1.0 if step_cost is None else step_cost(nb)
            tentative = base_g + cost
            if tentative < g_score.get(nb, float("inf")):
                g_score[nb] = tentative
                came_from[nb] = current
                heapq.heappush(open_heap, (tentative + heuristic(nb), nb[0], nb[1]))
    return None


def path_steps(path: Sequence[Cell]) -> int:
    return max(len(path) - 1, 0)


@dataclass(frozen=True)
class Poi:
    cell: Cell
    weight: float


def default_pois(world: WorldState, n_pois: int, seed: int, cluster_size: int = 4, cluster_radius: int = 4) -> list[Poi]:
    """Seeded POIs on road cells, grouped into neighborhood clusters.

    Clustering makes a sizable share of trips short-range, which is what
    urban demand looks like and what makes street-level flooding bite.
    """
    rng = pystream(seed, "pois")
    road = world.road_cells()
    if not road:
        return []
    n = min(n_pois, len(road))
    n_clusters = max(1, n // cluster_size)
    centers = rng.sample(road, n_clusters)
    cells: set[Cell] = set()
    for center in centers:
        nearby = [c for c in road if abs(c[0] - center[0]) + abs(c[1] - center[1]) <= cluster_radius]
        take = min(cluster_size, len(nearby))
        for c in rng.sample(nearby, take):
            cells.add(c)
    while len(cells) < n:
        cells.add(rng.choice(road))
    return [Poi(cell=c, weight=float(rng.randint(1, 5))) for c in sorted(cells)]


def _patience_for(planned: int, factor: float = PATIENCE_FACTOR, cap: int = PATIENCE_CAP) -> int:
    return max(2, min(int(round(factor * planned)), cap))


def spawn_demand(
    poi_set: Sequence[Poi],
    rate: int,
    seed: int,
    step: int,
    passable: Callable[[Cell], bool],
    shape: tuple[int, int],
    id_start: int,
    stagger: int = 0,
) -> list[AgentRecord]:
    """Sample `rate` resident trips from the weighted POI set.

    Origin and destination are distinct draws; the initial route is planned
    immediately so planned_steps and patience are fixed at spawn. With
    `stagger`, departures spread uniformly over the next `stagger` steps
    instead of all leaving at once. Fully deterministic given (seed, step).
    """
    if not poi_set:
        raise NoDemandSource("POI set is empty")
    rng = pystream(seed, "demand", step)
    agents = []
    cells = [p.cell for p in poi_set]
    weights = [p.weight for p in poi_set]
    for i in range(rate):
        origin = rng.choices(cells, weights=weights, k=1)[0]
        destination = origin
        for _ in range(16):
            destination = rng.choices(cells, weights=weights, k=1)[0]
            if destination != origin:
                break
        if destination == origin:
            continue
        path = plan_path(origin, destination, passable, shape)
        manhattan = abs(origin[0] - destination[0]) + abs(origin[1] - destination[1])
        planned = path_steps(path) if path else manhattan
        departure = step
        if stagger > 0:
            # commute wave: an early surge, then a long tail of departures
            head = max(1, stagger // 8)
            if rng.random() < 0.4:
                departure = step + rng.randrange(head)
            else:
                departure = step + head + rng.randrange(max(1, stagger - head))
        agents.append(
            AgentRecord(
                id=id_start + i,
                role=Role.RESIDENT,
                origin=origin,
                destination=destination,
                pos=origin,
                path=path or [origin],
                status=Status.WAITING,
                patience=_patience_for(planned),
                departure_step=departure,
                planned_steps=max(planned, 1),
            )
        )
    return agents


def make_bus(
    bus_id: int,
    stops: Sequence[Cell],
    step: int,
    passable: Callable[[Cell], bool],
    shape: tuple[int, int],
) -> AgentRecord:
    """Bus visiting its stops in order; the first leg is planned at spawn."""
    stops = list(stops)
    legs = []
    total = 0
    ok = True
    for a, b in zip(stops, stops[1:]):
        leg = plan_path(a, b, passable, shape)
        if leg is None:
            ok = False
            total += abs(a[0] - b[0]) + abs(a[1] - b[1])
        else:
            total += path_steps(leg)
            legs.append(leg)
    first_leg = legs[0] if (ok and legs) else plan_path(stops[0], stops[1], passable, shape) or [stops[0]]
    return AgentRecord(
        id=bus_id,
        role=Role.BUS,
        origin=stops[0],
        destination=stops[-1],
        pos=stops[0],
        path=first_leg,
        status=Status.WAITING,
        patience=_patience_for(total),
        departure_step=step,
        planned_steps=max(total, 1),
        stops=stops,
        stop_index=0,
    )


def reroute_bus(
    bus: AgentRecord,
    passable: Callable[[Cell], bool],
    shape: tuple[int, int],
    step_cost: Callable[[Cell], float] | None = None,
) -> tuple[AgentRecord, list[Cell]]:
    """Recompute the bus route over its remaining stops.

    Unreachable stops are skipped and returned for logging; the bus is
    cancelled only when no remaining stop can be reached.
    """
    targets = [s for s in bus.stops[bus.stop_index :] if s != bus.pos]
    skipped: list[Cell] = []
    current = bus.pos
    kept: list[Cell] = []
    first_leg: list[Cell] | None = None
    for stop in targets:
        leg = plan_path(current, stop, passable, shape, step_cost)
        if leg is None:
            skipped.append(stop)
            continue
        kept.append(stop)
        if first_leg is None:
            first_leg = leg
        current = stop
    if first_leg is None:
        bus.status = Status.CANCELLED
        return bus, skipped
    bus.stops = [bus.pos] + kept
    bus.stop_index = 0
    bus.destination = kept[-1]
    bus.path = first_leg
    bus.path_index = 0
    return bus, skipped


@dataclass
class StepEvent:
    """Feedback item an agent reports after acting."""

    kind: str  # advanced | waited | replanned | blocked | arrived | cancelled | held
    agent_id: int
    region: int
    local_max_depth: float


def step_agent(
    agent: AgentRecord,
    world: WorldState,
    passable: Callable[[Cell], bool],
    step_cost: Callable[[Cell], float] | None,
    bus_held: Callable[[int], bool],
    rng,
    step: int,
    trip_log: TripLog,
    wait_probability: float = WAIT_PROBABILITY,
    reachable: Callable[[Cell, Cell], bool] | None = None,
) -> list[StepEvent]:
    """Advance one non-terminal agent by one step.

    The transition is deterministic given the chosen action; the only coin
    is the wait-vs-replan choice when blocked. Patience burns on every
    non-advancing step (waits, failed replans); at zero the trip cancels.
    Held buses neither move nor lose patience.
    """
    if agent.status.terminal:
        return []
    events: list[StepEvent] = []
    region = world.region_of(agent.pos)
    obs = agent.observe(world)
    local_max = float(obs["water_depth"].max()) if obs["water_depth"].size else 0.0

    if agent.status is Status.WAITING:
        if step < agent.departure_step:
            return []
        agent.status = Status.ENROUTE

    if agent.role is Role.BUS and bus_held(region):
        agent.travel_steps += 1
        events.append(StepEvent("held", agent.id, region, local_max))
        return events

    agent.travel_steps += 1

    if agent.pos == agent.destination:
        _arrive(agent, step, trip_log)
        events.append(StepEvent("arrived", agent.id, region, local_max))
        return events

    if agent.role is Role.BUS and agent.path_index + 1 >= len(agent.path):
        # at an intermediate stop with the leg exhausted: open the next leg
        _advance_bus_leg(agent, passable, step_cost, world.shape)

    nxt = agent.path[agent.path_index + 1] if agent.path_index + 1 < len(agent.path) else None
    advanced = False
    if nxt is not None and passable(nxt):
        agent.pos = nxt
        agent.path_index += 1
        advanced = True
        events.append(StepEvent("advanced", agent.id, region, local_max))
    else:
        blocked_cell = nxt
        dist = agent.action_distribution(blocked=True, wait_probability=wait_probability)
        action = "wait" if rng.random() < dist.get("wait", 0.0) else "replan"
        if action == "replan":
            replanned = _replan(agent, passable, step_cost, world.shape, blocked_cell, reachable)
            if agent.status is Status.CANCELLED:
                # bus rerouting found every remaining stop unreachable
                trip_log.close(agent)
                events.append(StepEvent("cancelled", agent.id, region, local_max))
                return events
            if replanned:
                events.append(StepEvent("replanned", agent.id, region, local_max))
                nxt2 = agent.path[agent.path_index + 1] if agent.path_index + 1 < len(agent.path) else None
                if nxt2 is not None and passable(nxt2):
                    agent.pos = nxt2
                    agent.path_index += 1
                    advanced = True
            else:
                events.append(StepEvent("blocked", agent.id, region, local_max))
        else:
            events.append(StepEvent("waited", agent.id, region, local_max))

    if agent.pos == agent.destination:
        _arrive(agent, step, trip_log)
        events.append(StepEvent("arrived", agent.id, region, local_max))
        return events

    if not advanced:
        agent.patience -= 1
        if agent.patience <= 0:
            agent.status = Status.CANCELLED
            trip_log.close(agent)
            events.append(StepEvent("cancelled", agent.id, region, local_max))
    return events


def _arrive(agent: AgentRecord, step: int, trip_log: TripLog) -> None:
    agent.status = Status.ARRIVED
    agent.arrival_step = step
    trip_log.close(agent)


def _advance_bus_leg(agent: AgentRecord, passable, step_cost, shape) -> bool:
    """Open the leg to the next stop once the current one is exhausted.

    stop_index tracks the stop the bus most recently reached; the active
    path always runs stops[stop_index] -> stops[stop_index + 1].
    """
    if agent.stop_index + 1 >= len(agent.stops):
        return False
    if agent.pos == agent.stops[agent.stop_index + 1]:
        agent.stop_index += 1
    if agent.stop_index + 1 >= len(agent.stops):
        return False
    nxt_leg = plan_path(agent.pos, agent.stops[agent.stop_index + 1], passable, shape, step_cost)
    if nxt_leg is None:
        return False
    agent.path = nxt_leg
    agent.path_index = 0
    return True


def _replan(
    agent: AgentRecord,
    passable: Callable[[Cell], bool],
    step_cost: Callable[[Cell], float] | None,
    shape: tuple[int, int],
    blocked_cell: Cell | None,
    reachable: Callable[[Cell, Cell], bool] | None,
) -> bool:
    def patched(cell: Cell) -> bool:
        if blocked_cell is not None and cell == blocked_cell:
            return False
        return passable(cell)

    if agent.role is Role.BUS and len(agent.remaining_stops) >= 2:
        bus, _ = reroute_bus(agent, patched, shape, step_cost)
        return bus.status is not Status.CANCELLED
    if reachable is not None and not reachable(agent.pos, agent.destination):
        return False
    path = plan_path(agent.pos, agent.destination, patched, shape, step_cost)
    if path is None:
        return False
    agent.path = path
    agent.path_index = 0
    return True


def aggregate_flows(agents: Iterable[AgentRecord], world: WorldState) -> np.ndarray:
    """Per-cell count of enroute agents this step."""
    density = np.zeros(world.shape, dtype=np.float64)
    for agent in agents:
        if agent.status is Status.ENROUTE:
            density[agent.pos] += 1.0
    return density
