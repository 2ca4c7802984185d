"""The closed decision loop: retrieve, generate, translate, execute,
evaluate, and replan when the objective degrades.

One cycle spans a fixed number of simulation steps. After execution the
scalar cost J is compared against the historical best; when the gap
crosses the adaptive threshold, the next cycle's prompt carries symbolic
failure feedback (deviation magnitude, degraded metrics, rejected
instructions) and badly flooded regions are written into the knowledge
graph as flood-spot nodes. Replanning always lands at the next cycle
boundary, never mid-cycle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backends import BackendProposal, StrategyBackend
from .config import RunConfig
from .engine import SimulationEngine
from .errors import BackendUnavailable, EmptySeed, NotTriggered
from .knowledge import (
    Edge,
    EdgeType,
    FeedbackNote,
    HashingEmbedder,
    HybridPrompt,
    KnowledgeGraph,
    Node,
    NodeType,
    SegmentStore,
    build_prompt,
    embed_state,
    extract_subgraph,
    retrieve_topk,
    update_graph,
)
from .metrics import (
    FeedbackWindow,
    MetricsSnapshot,
    adaptive_threshold,
    execution_deviation,
    flood_scores,
)
from .mobility import StepEvent
from .policy import (
    EntropyController,
    RegionalObservation,
    RegionalPlan,
    conditional_entropy,
    generate_global,
    generate_regional,
    local_distribution_for,
)
from .rng import pystream
from .semeval import ResponseSet
from .state import StateSummary, summarize_world
from .translate import Instruction, Rejection, translate, wrap_accuracy
from .world import RainfallScenario, generate_scenario

TASK_DIRECTIVE = (
    "Coordinate flood dispatch for the coming cycle: lower flood exposure and "
    "congestion, avoid trip cancellations, and keep arrivals on time."
)

FLOOD_SPOT_SCORE = 0.9
DEGRADED_EPS = 0.01
CONSISTENCY_PROBES = 3


@dataclass(frozen=True)
class CycleAccumulator:
    """Order-insensitive fold of agent feedback items."""

    counts: tuple[tuple[str, int], ...] = ()
    max_local_depth: float = 0.0

    def count_map(self) -> dict[str, int]:
        return dict(self.counts)


def aggregate(acc: CycleAccumulator, item: StepEvent) -> CycleAccumulator:
    """Fold one agent feedback item into the accumulator; commutative."""
    counts = acc.count_map()
    counts[item.kind] = counts.get(item.kind, 0) + 1
    return CycleAccumulator(
        counts=tuple(sorted(counts.items())),
        max_local_depth=max(acc.max_local_depth, item.local_max_depth),
    )


def should_replan(
    window: FeedbackWindow,
    j_now: float,
    lam_thr: float,
    stat: str = "gap",
    floor: float = 0.015,
) -> tuple[float, float, bool]:
    """(gap, threshold, triggered) for the current cycle.

    The threshold statistics run over the window as it stood before this
    cycle, so the first cycle always sees the static floor and an empty
    history never triggers.
    """
    gap = window.gap_for(j_now)
    series = window.threshold_series(stat)
    delta = adaptive_threshold(series, lam_thr, floor)
    return gap, delta, gap >= delta


@dataclass
class CycleReport:
    cycle: int
    snapshot: MetricsSnapshot
    gap: float
    delta: float
    triggered: bool
    delta_e: float
    planned: dict[str, float]
    executed: dict[str, float]
    rejected_reasons: tuple[str, ...]
    backend_used: str
    fallback_used: bool
    h_raw: float
    h_projected: float
    h_conditional: float
    lam: float
    n_instructions: int
    n_rejected: int
    accumulator: CycleAccumulator
    region_flood_end: tuple[float, ...]


def trigger_replanning(
    report: CycleReport,
    graph: KnowledgeGraph,
    embedder: HashingEmbedder,
) -> tuple[FeedbackNote, KnowledgeGraph]:
    """Build the failure feedback for the next prompt and persist flood
    spots for badly flooded regions into the graph (idempotent)."""
    if not report.triggered:
        raise NotTriggered(f"cycle {report.cycle} did not cross its threshold")
    deltas = []
    degraded = []
    for name in ("f", "t", "c", "r"):
        d = report.executed[name] - report.planned[name]
        deltas.append((name, d))
        if name == "r":
            if d < -DEGRADED_EPS:
                degraded.append(name)
        elif d > DEGRADED_EPS:
            degraded.append(name)
    note = FeedbackNote(
        deviation_rms=report.delta_e,
        metric_deltas=tuple(deltas),
        degraded_metrics=tuple(degraded),
        rejected_reasons=report.rejected_reasons,
    )
    new_nodes = []
    new_edges = []
    for region, score in enumerate(report.region_flood_end):
        if score > FLOOD_SPOT_SCORE and f"region:{region}" in graph:
            spot_id = f"floodspot:{region}"
            text = f"flood spot region {region} severe waterlogging"
            new_nodes.append(
                Node(
                    id=spot_id,
                    type=NodeType.FLOOD_SPOT,
                    attrs=(("region", str(region)),),
                    feature=tuple(embedder.embed(text)),
                )
            )
            new_edges.append(Edge(src=spot_id, dst=f"region:{region}", type=EdgeType.RISKS))
    return note, update_graph(graph, new_nodes, new_edges)


# --- knowledge bootstrap ----------------------------------------------------

_SEGMENT_TEMPLATES = (
    "region {r} reported severe waterlogging near the junction during a past storm",
    "drainage crews deployed pumps in region {r} after standing water lingered",
    "bus services through region {r} were suspended when water depth rose",
    "residents detoured around flooded roads in region {r} during heavy rain",
)


@dataclass
class KnowledgeContext:
    graph: KnowledgeGraph
    store: SegmentStore
    embedder: HashingEmbedder


def build_knowledge_context(engine: SimulationEngine, config: RunConfig) -> KnowledgeContext:
    """Region/road graph plus a seeded store of historical log segments."""
    from .knowledge import load_graph, load_segments

    embedder = HashingEmbedder(config.knowledge.embed_dim)
    kc = config.knowledge
    if kc.graph_file:
        graph = load_graph(kc.graph_file)
    else:
        graph = _default_graph(engine, embedder)
    if kc.segments_file:
        store = load_segments(kc.segments_file, embedder)
    else:
        store = _default_segments(engine, embedder, config.seed)
    return KnowledgeContext(graph=graph, store=store, embedder=embedder)


def _default_graph(engine: SimulationEngine, embedder: HashingEmbedder) -> KnowledgeGraph:
    world = engine.world
    side = math.isqrt(world.n_regions)
    graph = KnowledgeGraph()
    road_counts = np.bincount(
        world.region_id[world.is_road].ravel(), minlength=world.n_regions
    )
    for region in range(world.n_regions):
        text = f"region {region} roads {int(road_counts[region])}"
        graph.add_node(
            Node(
                id=f"region:{region}",
                type=NodeType.REGION,
                attrs=(("road_cells", str(int(road_counts[region]))),),
                feature=tuple(embedder.embed(text)),
            )
        )
    for region in range(world.n_regions):
        row, col = divmod(region, side)
        for dr, dc in ((0, 1), (1, 0)):
            nr, nc = row + dr, col + dc
            if nr < side and nc < side:
                other = nr * side + nc
                graph.add_edge(Edge(f"region:{region}", f"region:{other}", EdgeType.ADJACENT))
    spacing = engine.config.world.road_spacing
    for kind, extent in (("row", world.height), ("col", world.width)):
        for idx in range(0, extent, spacing):
            road_id = f"road:{kind}:{idx}"
            graph.add_node(
                Node(
                    id=road_id,
                    type=NodeType.ROAD,
                    attrs=((kind, str(idx)),),
                    feature=tuple(embedder.embed(f"road {kind} {idx}")),
                )
            )
            touched = (
                np.unique(world.region_id[idx, :]) if kind == "row" else np.unique(world.region_id[:, idx])
            )
            for region in touched:
                graph.add_edge(Edge(f"region:{int(region)}", road_id, EdgeType.CONTAINS))
    return graph


def _default_segments(engine: SimulationEngine, embedder: HashingEmbedder, seed: int) -> SegmentStore:
    store = SegmentStore(embedder)
    rng = pystream(seed, "segments")
    for region in range(engine.world.n_regions):
        template = rng.choice(_SEGMENT_TEMPLATES)
        store.add(f"seg:{region:03d}", template.format(r=region))
    return store


# --- the loop ---------------------------------------------------------------

class DecisionLoop:
    """Owns one run: engine, controller, window, knowledge, and backends."""

    def __init__(
        self,
        config: RunConfig,
        backend: StrategyBackend,
        fallback: StrategyBackend,
        scenario: RainfallScenario | None = None,
    ):
        config.validate()
        self.config = config
        if scenario is None:
            from .world import ScenarioKind

            scenario = generate_scenario(ScenarioKind(config.scenario), config.steps, config.seed)
        self.scenario = scenario
        self.engine = SimulationEngine(config, scenario)
        self.backend = backend
        self.fallback = fallback
        self.controller = EntropyController(
            tau=config.policy.tau, lam=config.policy.lambda_init, alpha=config.policy.alpha
        )
        self.window = FeedbackWindow(config.feedback.window_length)
        self.knowledge = build_knowledge_context(self.engine, config)
        self.pending_feedback: FeedbackNote | None = None
        self.reports: list[CycleReport] = []
        self.prompt_log: list[tuple[int, str]] = []
        self.instruction_rows: list[dict] = []
        self.consistency_sets: list[ResponseSet] = []
        self.diversity_sets: list[ResponseSet] = []
        self._prev_snapshot = self.engine.metrics_snapshot()

    @property
    def n_cycles(self) -> int:
        return self.config.steps // self.config.feedback.cycle_len

    def ablated(self, name: str) -> bool:
        return name in self.config.ablations

    def run(self) -> list[CycleReport]:
        for cycle in range(self.n_cycles):
            self.run_cycle(cycle)
        return self.reports

    # one full pass: retrieval -> generation -> translation -> execution
    # -> evaluation -> (conditional) replanning
    def run_cycle(self, cycle: int) -> CycleReport:
        cfg = self.config
        eng = self.engine
        start = eng.world.step
        end = min(start + cfg.feedback.cycle_len - 1, cfg.steps - 1)
        summary = self._summarize(start)
        prompt = self._build_prompt(summary)
        self.prompt_log.append((cycle, prompt.text))

        proposal, backend_used, fallback_used = self._propose(prompt, cycle)
        self._probe_consistency(prompt, cycle, proposal)

        entropy_on = not self.ablated("entropy_control")
        plan = generate_global(
            proposal.distribution,
            self.controller,
            cfg.seed,
            cycle,
            cfg.world.n_regions,
            entropy_control=entropy_on,
            planned_metrics=proposal.planned_metrics,
        )
        cap = min(plan.h_projected, self.controller.tau)
        observations = {r: self._observe_region(summary, r) for r in range(cfg.world.n_regions)}
        plans: list[RegionalPlan] = []
        for region in range(cfg.world.n_regions):
            plans.append(
                generate_regional(
                    plan.sampled[region],
                    observations[region],
                    self.controller,
                    cfg.seed,
                    cycle,
                    cap,
                    window=(start, end),
                    n_regions=cfg.world.n_regions,
                    entropy_control=entropy_on,
                )
            )
        locals_map = {
            action: local_distribution_for(
                action, observations[action.region], self.controller, cap, entropy_control=entropy_on
            )
            for action, p in zip(plan.projected.support, plan.projected.probs)
            if p > 0
        }
        h_cond = conditional_entropy(
            {a: _probs_as_dist(ps) for a, ps in locals_map.items()}, plan.projected
        )
        self._probe_diversity(cycle, plans)

        instructions: list[Instruction] = []
        rejections: list[Rejection] = []
        for rp in plans:
            for instr in translate(rp):
                wrapped = wrap_accuracy(
                    instr, eng.world, cfg.steps, resident_block_depth=cfg.mobility.resident_block_depth
                )
                if isinstance(wrapped, Rejection):
                    rejections.append(wrapped)
                    self._log_instruction(cycle, wrapped.instruction, "rejected", wrapped.reason)
                else:
                    instructions.append(wrapped)
                    self._log_instruction(cycle, wrapped, "accepted", "")
        eng.board.dispatch(instructions)

        steps_left = min(cfg.feedback.cycle_len, cfg.steps - start)
        records = eng.run_steps(steps_left)
        executed = records[-1].snapshot if records else eng.metrics_snapshot()

        planned = dict(proposal.planned_metrics) if proposal.planned_metrics else self._prev_snapshot.as_map()
        delta_e = execution_deviation(planned, executed.as_map())

        feedback_on = not self.ablated("feedback_loop")
        gap, delta, crossed = should_replan(
            self.window,
            executed.j,
            cfg.feedback.lambda_thr,
            stat=cfg.feedback.threshold_stat,
            floor=cfg.feedback.trigger_floor,
        )
        triggered = bool(feedback_on and crossed)
        self.window.push(executed, gap)

        acc = CycleAccumulator()
        for record in records:
            for kind, count in sorted(record.events.items()):
                for _ in range(count):
                    acc = aggregate(acc, StepEvent(kind, -1, -1, 0.0))

        report = CycleReport(
            cycle=cycle,
            snapshot=executed,
            gap=gap,
            delta=delta,
            triggered=triggered,
            delta_e=delta_e,
            planned=planned,
            executed=executed.as_map(),
            rejected_reasons=tuple(r.reason for r in rejections),
            backend_used=backend_used,
            fallback_used=fallback_used,
            h_raw=plan.h_raw,
            h_projected=plan.h_projected,
            h_conditional=h_cond,
            lam=self.controller.lam,
            n_instructions=len(instructions),
            n_rejected=len(rejections),
            accumulator=acc,
            region_flood_end=tuple(float(v) for v in flood_scores(eng.world)),
        )
        self.reports.append(report)
        self._prev_snapshot = executed
        if triggered:
            note, new_graph = trigger_replanning(report, self.knowledge.graph, self.knowledge.embedder)
            self.knowledge.graph = new_graph
            self.pending_feedback = note
        else:
            self.pending_feedback = None
        return report

    # --- helpers -----------------------------------------------------------

    def _summarize(self, step: int) -> StateSummary:
        eng = self.engine
        return summarize_world(
            eng.world,
            self.config.scenario,
            eng.current_intensity(),
            self.config.mobility.resident_block_depth,
            eng.board.active_regions(step),
            eng.trip_counts(),
            score_threshold=self.config.policy.score_threshold,
        )

    def _build_prompt(self, summary: StateSummary) -> HybridPrompt:
        feedback_note = self.pending_feedback if not self.ablated("feedback_loop") else None
        if self.ablated("dual_indexing"):
            return build_prompt(summary.text(), None, [], TASK_DIRECTIVE, feedback_note, summary=summary)
        query = embed_state(summary.text(), self.knowledge.embedder)
        segments = retrieve_topk(query, self.knowledge.store, self.config.knowledge.top_k)
        seeds = summary.seed_region_ids()
        subgraph = None
        if seeds:
            try:
                subgraph = extract_subgraph(self.knowledge.graph, seeds, self.config.knowledge.subgraph_hops)
            except EmptySeed:
                subgraph = None
        return build_prompt(summary.text(), subgraph, segments, TASK_DIRECTIVE, feedback_note, summary=summary)

    def _propose(self, prompt: HybridPrompt, cycle: int) -> tuple[BackendProposal, str, bool]:
        cfg = self.config
        try:
            proposal = self.backend.propose(prompt, cfg.world.n_regions, self.controller.tau, cycle)
            return proposal, self.backend.name, False
        except BackendUnavailable:
            proposal = self.fallback.propose(prompt, cfg.world.n_regions, self.controller.tau, cycle)
            return proposal, self.fallback.name, True

    def _probe_consistency(self, prompt: HybridPrompt, cycle: int, first: BackendProposal) -> None:
        """Query the backend repeatedly with the identical prompt and embed
        the serialized proposals; identical answers give consistency 1."""
        proposals = [first]
        for _ in range(CONSISTENCY_PROBES - 1):
            try:
                proposals.append(
                    self.backend.propose(prompt, self.config.world.n_regions, self.controller.tau, cycle)
                )
            except BackendUnavailable:
                proposals.append(first)
        embeddings = tuple(
            tuple(self.knowledge.embedder.embed(_proposal_text(p))) for p in proposals
        )
        self.consistency_sets.append(
            ResponseSet(
                prompt_id=f"cycle:{cycle}",
                producers=tuple(str(i) for i in range(len(proposals))),
                embeddings=embeddings,
            )
        )

    def _probe_diversity(self, cycle: int, plans: list[RegionalPlan]) -> None:
        texts = []
        for rp in plans:
            if rp.directives:
                texts.append(" ".join(d.text() for d in rp.directives))
            else:
                texts.append(f"noop region={rp.region}")
        self.diversity_sets.append(
            ResponseSet(
                prompt_id=f"cycle:{cycle}",
                producers=tuple(str(rp.region) for rp in plans),
                embeddings=tuple(tuple(self.knowledge.embedder.embed(t)) for t in texts),
            )
        )

    def _observe_region(self, summary: StateSummary, region: int) -> RegionalObservation:
        world = self.engine.world
        mask = (world.region_id == region) & world.is_road
        rows, cols = np.nonzero(mask)
        worst = None
        if len(rows):
            depths = world.water_depth[rows, cols]
            best_idx = int(np.argmax(depths))  # ties resolve row-major via nonzero order
            worst = (int(rows[best_idx]), int(cols[best_idx]))
        return RegionalObservation(
            region=region,
            flood_score=summary.region_flood[region],
            congestion_score=summary.region_congestion[region],
            max_depth=summary.region_max_depth[region],
            blocked_roads=summary.region_blocked_roads[region],
            worst_road_cell=worst,
            has_roads=worst is not None,
        )

    def _log_instruction(self, cycle: int, instr: Instruction, status: str, reason: str) -> None:
        self.instruction_rows.append(
            {
                "cycle": cycle,
                "region": instr.region,
                "tag": instr.tag.value,
                "anchor": "" if instr.cell is None else f"{instr.cell[0]}:{instr.cell[1]}",
                "window_start": instr.window[0],
                "window_end": instr.window[1],
                "status": status,
                "reason": reason,
            }
        )


def _probs_as_dist(probs: tuple[float, ...]):
    from .policy import HighLevelAction, PolicyDistribution, Verb

    support = tuple(HighLevelAction(Verb.NOOP, i) for i in range(len(probs)))
    return PolicyDistribution(support=support, probs=probs)


def _proposal_text(proposal: BackendProposal) -> str:
    """Serialize a proposal for embedding: top actions with probabilities."""
    pairs = sorted(
        zip(proposal.distribution.support, proposal.distribution.probs),
        key=lambda ap: (-ap[1], ap[0].verb.value, ap[0].region),
    )[:16]
    return " ".join(f"{a.key()} p={p:.4f}" for a, p in pairs)
