"""Experiment harness: single runs, the strategy x scenario matrix,
ablation diffs, and report emission.

Every run writes the same artifact set into its own directory: per-step
metrics CSV, cycle log, trip log, instruction log, prompt log, scenario
record, density dumps with SVG heatmaps, and a JSON summary. Runs are
fully determined by their config, so equal configs produce byte-identical
CSVs.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backends import StrategyBackend, make_backend
from .config import RunConfig, config_from_dict
from .feedback import DecisionLoop
from .heatmap import save_density_dump, write_heatmap
from .mobility import Status
from .semeval import SemanticRow, scs, sds, stability_report, write_semantic_table
from .world import RainfallScenario, load_scenario, save_scenario

METRICS_HEADER = ("step", "f", "t", "c", "r", "J", "gap", "delta", "triggered")
CYCLE_HEADER = (
    "cycle",
    "start_step",
    "end_step",
    "backend",
    "fallback_used",
    "h_raw",
    "h_projected",
    "h_conditional",
    "lambda",
    "f",
    "t",
    "c",
    "r",
    "J",
    "gap",
    "delta",
    "triggered",
    "delta_e",
    "n_instructions",
    "n_rejected",
)
TRIP_HEADER = ("id", "role", "departure_step", "outcome", "travel_steps", "planned_steps")
INSTRUCTION_HEADER = ("cycle", "region", "tag", "anchor", "window_start", "window_end", "status", "reason")


@dataclass
class RunArtifacts:
    out_dir: Path
    summary: dict
    loop: DecisionLoop | None = None


def _make_backends(config: RunConfig) -> tuple[StrategyBackend, StrategyBackend]:
    backend = make_backend(
        config.strategy,
        endpoint=config.resolved_endpoint(),
        timeout=config.external_timeout,
        n_regions=config.world.n_regions,
        score_threshold=config.policy.score_threshold,
    )
    fallback = make_backend(config.fallback_strategy, score_threshold=config.policy.score_threshold)
    return backend, fallback


def run(config: RunConfig, keep_loop: bool = False) -> RunArtifacts:
    """Execute one full run and write its artifact set."""
    config.validate()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenario = load_scenario(config.scenario_file) if config.scenario_file else None
    backend, fallback = _make_backends(config)
    loop = DecisionLoop(config, backend, fallback, scenario=scenario)
    loop.run()

    save_scenario(out / "scenario.json", loop.scenario)
    _write_metrics_csv(out / "metrics.csv", loop)
    _write_cycle_csv(out / "cycles.csv", loop)
    _write_trip_csv(out / "trips.csv", loop)
    _write_instruction_csv(out / "instructions.csv", loop)
    _write_prompt_log(out / "prompts.jsonl", loop)
    for step, dump in sorted(loop.engine.density_dumps.items()):
        save_density_dump(out / f"density_step{step:03d}.csv", dump)
        write_heatmap(out / f"density_step{step:03d}.svg", dump, "density")

    summary = _summarize_run(config, loop)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "config.json").write_text(config.to_json() + "\n")
    return RunArtifacts(out_dir=out, summary=summary, loop=loop if keep_loop else None)


def _write_metrics_csv(path: Path, loop: DecisionLoop) -> None:
    cycle_len = loop.config.feedback.cycle_len
    by_cycle = {r.cycle: r for r in loop.reports}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for rec in loop.engine.step_records:
            cycle = (rec.step - 1) // cycle_len
            report = by_cycle.get(cycle)
            is_boundary = report is not None and rec.step == report.snapshot.step
            gap = repr(report.gap) if is_boundary else ""
            delta = repr(report.delta) if is_boundary else ""
            trig = str(int(report.triggered)) if is_boundary else ""
            s = rec.snapshot
            writer.writerow(
                [rec.step, repr(s.f), repr(s.t), repr(s.c), repr(s.r), repr(s.j), gap, delta, trig]
            )


def _write_cycle_csv(path: Path, loop: DecisionLoop) -> None:
    cycle_len = loop.config.feedback.cycle_len
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CYCLE_HEADER)
        for r in loop.reports:
            writer.writerow(
                [
                    r.cycle,
                    r.cycle * cycle_len,
                    r.snapshot.step,
                    r.backend_used,
                    int(r.fallback_used),
                    repr(r.h_raw),
                    repr(r.h_projected),
                    repr(r.h_conditional),
                    repr(r.lam),
                    repr(r.snapshot.f),
                    repr(r.snapshot.t),
                    repr(r.snapshot.c),
                    repr(r.snapshot.r),
                    repr(r.snapshot.j),
                    repr(r.gap),
                    repr(r.delta),
                    int(r.triggered),
                    repr(r.delta_e),
                    r.n_instructions,
                    r.n_rejected,
                ]
            )


def _write_trip_csv(path: Path, loop: DecisionLoop) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRIP_HEADER)
        for rec in loop.engine.trip_log.records:
            writer.writerow(
                [rec.agent_id, rec.role.value, rec.departure_step, rec.outcome.value, rec.travel_steps, rec.planned_steps]
            )


def _write_instruction_csv(path: Path, loop: DecisionLoop) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(INSTRUCTION_HEADER)
        for row in loop.instruction_rows:
            writer.writerow([row[k] for k in INSTRUCTION_HEADER])


def _write_prompt_log(path: Path, loop: DecisionLoop) -> None:
    with open(path, "w") as fh:
        for cycle, text in loop.prompt_log:
            fh.write(json.dumps({"cycle": cycle, "text": text}) + "\n")


def _summarize_run(config: RunConfig, loop: DecisionLoop) -> dict:
    js = [r.snapshot.j for r in loop.reports]
    summary = {
        "scenario": config.scenario,
        "strategy": config.strategy,
        "seed": config.seed,
        "steps": config.steps,
        "horizon_note": f"{config.steps} steps in {loop.n_cycles} cycles of {config.feedback.cycle_len}",
        "ablations": sorted(config.ablations),
        "cycles": loop.n_cycles,
        "triggers": sum(1 for r in loop.reports if r.triggered),
        "fallbacks": sum(1 for r in loop.reports if r.fallback_used),
        "rejected_instructions": sum(r.n_rejected for r in loop.reports),
        "mean": {
            name: float(np.mean([getattr(r.snapshot, attr) for r in loop.reports]))
            for name, attr in (("f", "f"), ("t", "t"), ("c", "c"), ("r", "r"), ("J", "j"))
        },
        "variance": {
            name: float(np.var([getattr(r.snapshot, attr) for r in loop.reports]))
            for name, attr in (("f", "f"), ("t", "t"), ("c", "c"), ("r", "r"), ("J", "j"))
        },
        "final_j": js[-1] if js else None,
        "trips": {
            "spawned": loop.engine.trip_log.spawned,
            "arrived": loop.engine.trip_log.arrived,
            "on_time": loop.engine.trip_log.arrived_on_time,
            "cancelled": loop.engine.trip_log.cancelled,
            "enroute": sum(1 for a in loop.engine.agents if a.status is Status.ENROUTE),
            "waiting": sum(1 for a in loop.engine.agents if a.status is Status.WAITING),
        },
        "scs": scs(loop.consistency_sets) if loop.consistency_sets else None,
        "sds": sds(loop.diversity_sets) if loop.diversity_sets else None,
    }
    return summary


# --- matrix -----------------------------------------------------------------

def _run_cell(args: tuple[dict, str, str, int, str]) -> dict:
    """One matrix cell run in a worker process; returns its summary."""
    base, strategy, scenario, seed, out_dir = args
    config = config_from_dict(base)
    config.strategy = strategy
    config.scenario = scenario
    config.seed = seed
    config.out_dir = out_dir
    return run(config).summary


def run_matrix(
    config: RunConfig,
    strategies: list[str],
    scenarios: list[str],
    repeats: int,
    base_seed: int | None = None,
) -> dict:
    """strategies x scenarios x repeats runs; seeds base..base+repeats-1.

    Writes per-combination mean/variance of (J, f, t, c, r), the run-level
    stability table, and semantic scores.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    base_seed = config.seed if base_seed is None else base_seed
    out_root = Path(config.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    base = dataclasses.asdict(config)

    jobs = []
    for strategy in strategies:
        for scenario in scenarios:
            for rep in range(repeats):
                seed = base_seed + rep
                cell_dir = out_root / f"{strategy}_{scenario}_seed{seed}"
                jobs.append((base, strategy, scenario, seed, str(cell_dir)))

    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            summaries = list(pool.map(_run_cell, jobs))
    else:
        summaries = [_run_cell(job) for job in jobs]

    table_rows = []
    stability_settings: dict[str, list] = {}
    scs_scores: dict[str, float] = {}
    sds_scores: dict[str, float] = {}
    for strategy in strategies:
        for scenario in scenarios:
            cell = [
                s for s in summaries if s["strategy"] == strategy and s["scenario"] == scenario
            ]
            label = f"{strategy}/{scenario}"
            row = {"strategy": strategy, "scenario": scenario, "repeats": len(cell)}
            for metric in ("J", "f", "t", "c", "r"):
                values = [s["mean"][metric] for s in cell]
                row[f"mean_{metric}"] = float(np.mean(values))
                row[f"var_{metric}"] = float(np.var(values))
            row["triggers_mean"] = float(np.mean([s["triggers"] for s in cell]))
            table_rows.append(row)
            if len(cell) >= 2:
                stability_settings[label] = [
                    {m: [s["mean"][m]] for m in ("f", "t", "c", "r")} for s in cell
                ]
                cell_scs = [s["scs"] for s in cell if s["scs"] is not None]
                cell_sds = [s["sds"] for s in cell if s["sds"] is not None]
                if cell_scs:
                    scs_scores[label] = float(np.mean(cell_scs))
                if cell_sds:
                    sds_scores[label] = float(np.mean(cell_sds))

    _write_comparison_csv(out_root / "comparison.csv", table_rows)
    if stability_settings:
        rows = stability_report(stability_settings, scs_scores, sds_scores)
        write_semantic_table(out_root / "semantic.csv", rows)
    result = {"rows": table_rows, "runs": len(jobs), "out_dir": str(out_root)}
    (out_root / "matrix.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


COMPARISON_HEADER = (
    "strategy",
    "scenario",
    "repeats",
    "mean_J",
    "var_J",
    "mean_f",
    "var_f",
    "mean_t",
    "var_t",
    "mean_c",
    "var_c",
    "mean_r",
    "var_r",
    "triggers_mean",
)


def _write_comparison_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(COMPARISON_HEADER)
        for row in rows:
            writer.writerow([row["strategy"], row["scenario"], row["repeats"]] + [
                repr(row[k]) for k in COMPARISON_HEADER[3:-1]
            ] + [repr(row["triggers_mean"])])


# --- ablation diffs ----------------------------------------------------------

DIFFABLE_FILES = ("metrics.csv", "cycles.csv", "trips.csv", "instructions.csv", "prompts.jsonl")


def run_ablation_suite(config: RunConfig) -> dict:
    """Full run plus one run per single ablation, then a file-level diff."""
    out_root = Path(config.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    base = dataclasses.asdict(config)

    variants = {"full": ()} | {ab: (ab,) for ab in ("dual_indexing", "entropy_control", "feedback_loop")}
    dirs = {}
    for label, ablations in variants.items():
        cfg = config_from_dict(base)
        cfg.ablations = tuple(ablations)
        cfg.out_dir = str(out_root / label)
        run(cfg)
        dirs[label] = Path(cfg.out_dir)

    diff = {}
    for label in variants:
        if label == "full":
            continue
        changed = []
        for name in DIFFABLE_FILES:
            if (dirs["full"] / name).read_bytes() != (dirs[label] / name).read_bytes():
                changed.append(name)
        diff[label] = changed
    report = {"changed_files": diff, "out_dir": str(out_root)}
    (out_root / "ablation_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def write_report(matrix_dir: str | Path, out_path: str | Path | None = None) -> str:
    """Markdown comparison digest assembled from a matrix output directory."""
    matrix_dir = Path(matrix_dir)
    data = json.loads((matrix_dir / "matrix.json").read_text())
    lines = ["# Comparison report", ""]
    header = "| strategy | scenario | mean J | var J | mean c | mean r | triggers |"
    lines += [header, "|" + "---|" * 7]
    for row in data["rows"]:
        lines.append(
            f"| {row['strategy']} | {row['scenario']} | {row['mean_J']:.4f} | {row['var_J']:.6f} "
            f"| {row['mean_c']:.4f} | {row['mean_r']:.4f} | {row['triggers_mean']:.1f} |"
        )
    text = "\n".join(lines) + "\n"
    out_path = Path(out_path) if out_path else matrix_dir / "report.md"
    out_path.write_text(text)
    return text
