"""Semantic-level evaluation of strategy outputs.

Consistency is the mean pairwise cosine similarity of responses to one
prompt; diversity is the mean pairwise cosine distance across agents for
one prompt. Both average over the prompt corpus, which here is the set of
cycle prompts of a run. Scores are computed from the sum-of-embeddings
identity rather than an explicit O(n^2) pair loop; for unit vectors,
mean pairwise cosine = (|sum e|^2 - n) / (n (n - 1)).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InsufficientResponses
from .metrics import run_stability


@dataclass(frozen=True)
class ResponseSet:
    """Responses gathered for one prompt."""

    prompt_id: str
    producers: tuple[str, ...]
    embeddings: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if len(self.producers) != len(self.embeddings):
            raise ValueError("producers and embeddings must align")


def _unit_rows(embeddings: Sequence[Sequence[float]]) -> np.ndarray:
    arr = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return arr / norms


def _mean_pairwise_cosine(embeddings: Sequence[Sequence[float]]) -> float:
    n = len(embeddings)
    if n < 2:
        raise InsufficientResponses(f"need >= 2 responses, got {n}")
    unit = _unit_rows(embeddings)
    total = unit.sum(axis=0)
    return float((np.dot(total, total) - n) / (n * (n - 1)))


def scs(sets: Sequence[ResponseSet]) -> float:
    """Mean over prompts of mean pairwise cosine similarity; in [-1, 1]."""
    if not sets:
        raise InsufficientResponses("no response sets")
    return float(np.mean([_mean_pairwise_cosine(s.embeddings) for s in sets]))


def sds(sets: Sequence[ResponseSet]) -> float:
    """Mean over prompts of mean pairwise (1 - cosine); in [0, 2]."""
    if not sets:
        raise InsufficientResponses("no response sets")
    return float(np.mean([1.0 - _mean_pairwise_cosine(s.embeddings) for s in sets]))


@dataclass(frozen=True)
class SemanticRow:
    setting: str
    stability: float
    per_metric_variance: tuple[tuple[str, float], ...]
    scs: float | None
    sds: float | None


def stability_report(
    settings: Mapping[str, Sequence[Mapping[str, Sequence[float]]]],
    scs_scores: Mapping[str, float] | None = None,
    sds_scores: Mapping[str, float] | None = None,
) -> list[SemanticRow]:
    """One row per module setting: stability (mean of the per-metric
    cross-run variances), SCS, SDS."""
    scs_scores = scs_scores or {}
    sds_scores = sds_scores or {}
    rows = []
    for setting, runs in settings.items():
        variances = run_stability(runs)
        items = tuple(sorted(variances.items()))
        rows.append(
            SemanticRow(
                setting=setting,
                stability=float(np.mean([v for _, v in items])),
                per_metric_variance=items,
                scs=scs_scores.get(setting),
                sds=sds_scores.get(setting),
            )
        )
    return rows


SEMANTIC_TABLE_HEADER = ("module_setting", "stability", "scs", "sds")


def write_semantic_table(path: str | Path, rows: Sequence[SemanticRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SEMANTIC_TABLE_HEADER)
        for row in rows:
            writer.writerow(
                [
                    row.setting,
                    repr(row.stability),
                    "" if row.scs is None else repr(row.scs),
                    "" if row.sds is None else repr(row.sds),
                ]
            )


def read_semantic_table(path: str | Path) -> list[dict[str, float | str | None]]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append(
                {
                    "module_setting": rec["module_setting"],
                    "stability": float(rec["stability"]),
                    "scs": float(rec["scs"]) if rec["scs"] else None,
                    "sds": float(rec["sds"]) if rec["sds"] else None,
                }
            )
    return out
