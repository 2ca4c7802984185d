"""Per-step simulation engine tying world, agents, and the instruction board.

Step order: rain/drain/diffuse the water field, step every non-terminal
agent against the fresh snapshot (ids ascending), write the aggregated
car density back, then spawn new demand (newly spawned agents wait until
the next step). Passability and connected components are recomputed once
per step since they only depend on depth and closures.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .config import RunConfig
from .metrics import MetricsSnapshot, WeightVector, congestion_index, flood_index, objective_j, trip_rates
from .mobility import (
    AgentRecord,
    Poi,
    Role,
    Status,
    TripLog,
    aggregate_flows,
    default_pois,
    make_bus,
    spawn_demand,
    step_agent,
)
from .rng import pystream
from .translate import InstructionBoard
from .world import RainfallScenario, WorldState, build_world, step_hydrology


@dataclass
class StepRecord:
    step: int
    snapshot: MetricsSnapshot
    events: dict[str, int]


class SimulationEngine:
    def __init__(self, config: RunConfig, scenario: RainfallScenario):
        self.config = config
        self.scenario = scenario
        self.weights = WeightVector(*config.feedback.weights)
        wc = config.world
        self.world = build_world(
            width=wc.width,
            height=wc.height,
            seed=config.seed,
            n_regions=wc.n_regions,
            params=self._hydrology_params(),
            road_spacing=wc.road_spacing,
            elevation_relief=wc.elevation_relief,
            elevation_smoothing=wc.elevation_smoothing,
            road_depression=wc.road_depression,
        )
        self.board = InstructionBoard(wc.n_regions, routing_penalty=config.policy.routing_penalty)
        self.trip_log = TripLog()
        self.agents: list[AgentRecord] = []
        self._next_id = 0
        self._detour_rng = pystream(config.seed, "detour-coins")
        self.pois: list[Poi] = default_pois(self.world, config.mobility.n_pois, config.seed)
        self.step_records: list[StepRecord] = []
        self.density_dumps: dict[int, np.ndarray] = {}
        self._spawn_initial()

    def _hydrology_params(self):
        from .world import HydrologyParams

        wc = self.config.world
        return HydrologyParams(
            inflow_coeff=wc.inflow_coeff,
            drainage_rate=wc.drainage_rate,
            diffusion_rate=wc.diffusion_rate,
        )

    # --- passability -----------------------------------------------------

    def _passable_fn(self, role: Role):
        mc = self.config.mobility
        depth_limit = mc.resident_block_depth if role is Role.RESIDENT else mc.bus_block_depth
        world = self.world
        closed = self.board.closed_cells(world.step)

        def passable(cell) -> bool:
            return bool(world.is_road[cell]) and world.water_depth[cell] < depth_limit and cell not in closed

        return passable

    def _step_cost_fn(self):
        penalties = self.board.region_penalties(self.world.step)
        if not penalties:
            return None
        region_id = self.world.region_id

        def cost(cell) -> float:
            return 1.0 + penalties.get(int(region_id[cell]), 0.0)

        return cost

    def _component_labels(self, role: Role):
        mc = self.config.mobility
        depth_limit = mc.resident_block_depth if role is Role.RESIDENT else mc.bus_block_depth
        mask = self.world.is_road & (self.world.water_depth < depth_limit)
        closed = self.board.closed_cells(self.world.step)
        if closed:
            mask = mask.copy()
            for cell in closed:
                mask[cell] = False
        labels, _ = ndimage.label(mask, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]))
        return labels

    # --- population ------------------------------------------------------

    def _spawn_initial(self) -> None:
        mc = self.config.mobility
        passable = self._passable_fn(Role.RESIDENT)
        if self.pois and mc.initial_population > 0:
            agents = spawn_demand(
                self.pois,
                mc.initial_population,
                self.config.seed,
                step=0,
                passable=passable,
                shape=self.world.shape,
                id_start=self._next_id,
                stagger=mc.initial_stagger,
            )
            self._next_id += mc.initial_population
            self.agents.extend(agents)
            self.trip_log.note_spawn(len(agents))
        bus_rng = pystream(self.config.seed, "bus-lines")
        road = self.world.road_cells()
        bus_passable = self._passable_fn(Role.BUS)
        for b in range(mc.n_buses):
            if len(road) < mc.bus_stops:
                break
            stops = bus_rng.sample(road, mc.bus_stops)
            bus = make_bus(self._next_id, stops, 0, bus_passable, self.world.shape)
            self._next_id += 1
            self.agents.append(bus)
            self.trip_log.note_spawn(1)

    def trip_counts(self) -> tuple[int, int, int, int]:
        enroute = sum(1 for a in self.agents if a.status is Status.ENROUTE)
        return (self.trip_log.spawned, self.trip_log.arrived, self.trip_log.cancelled, enroute)

    # --- stepping ---------------------------------------------------------

    def run_steps(self, n: int) -> list[StepRecord]:
        return [self.step() for _ in range(n)]

    def step(self) -> StepRecord:
        step_idx = self.world.step
        intensity = self.scenario.curve[step_idx] if step_idx < len(self.scenario.curve) else 0.0
        drain_mult = self.board.drain_multipliers(step_idx)
        if np.all(drain_mult == 1.0):
            drain_mult = None
        self.world = step_hydrology(self.world, intensity, drain_mult)

        now = self.world.step  # post-hydrology step index
        passable_res = self._passable_fn(Role.RESIDENT)
        passable_bus = self._passable_fn(Role.BUS)
        cost = self._step_cost_fn()
        labels_res = self._component_labels(Role.RESIDENT)
        labels_bus = self._component_labels(Role.BUS)

        def reachable_factory(labels):
            def reachable(a, b) -> bool:
                return labels[a] != 0 and labels[a] == labels[b]

            return reachable

        reach_res = reachable_factory(labels_res)
        reach_bus = reachable_factory(labels_bus)
        held = lambda region: self.board.bus_held(region, now)

        event_counts: dict[str, int] = {}
        for agent in self.agents:
            if agent.status.terminal:
                continue
            if agent.role is Role.BUS:
                events = step_agent(
                    agent, self.world, passable_bus, cost, held, self._detour_rng, now, self.trip_log,
                    wait_probability=self.config.mobility.wait_probability, reachable=reach_bus,
                )
            else:
                events = step_agent(
                    agent, self.world, passable_res, cost, lambda _r: False, self._detour_rng, now, self.trip_log,
                    wait_probability=self.config.mobility.wait_probability, reachable=reach_res,
                )
            for ev in events:
                event_counts[ev.kind] = event_counts.get(ev.kind, 0) + 1

        density = aggregate_flows(self.agents, self.world)
        self.world = replace(self.world, car_density=density)

        mc = self.config.mobility
        if mc.spawn_rate > 0 and self.pois:
            new_agents = spawn_demand(
                self.pois,
                mc.spawn_rate,
                self.config.seed,
                step=now,
                passable=passable_res,
                shape=self.world.shape,
                id_start=self._next_id,
            )
            self._next_id += mc.spawn_rate
            self.agents.extend(new_agents)
            self.trip_log.note_spawn(len(new_agents))

        snapshot = self.metrics_snapshot()
        record = StepRecord(step=now, snapshot=snapshot, events=event_counts)
        self.step_records.append(record)
        if now in self.config.heatmap_steps:
            self.density_dumps[now] = density.copy()
        return record

    def metrics_snapshot(self) -> MetricsSnapshot:
        f = flood_index(self.world)
        t = congestion_index(self.world)
        spawned, arrived_any, cancelled, _ = self.trip_counts()
        c, r = trip_rates(cancelled, self.trip_log.arrived_on_time, spawned) if spawned else (0.0, 0.0)
        j = objective_j(f, t, c, r, self.weights)
        return MetricsSnapshot(f=f, t=t, c=c, r=r, j=j, step=self.world.step)

    def current_intensity(self) -> float:
        idx = min(self.world.step, len(self.scenario.curve) - 1)
        return float(self.scenario.curve[idx])
