"""Strategy backends: where the global action distribution comes from.

Four interchangeable sources sit behind one interface: Empty (do nothing),
Ruled (threshold rule table over the current state summary), Scripted
(replays recorded distributions, for tests and ablation diffs), and
External (an HTTP endpoint speaking the wire protocol below). Any failure
of the external endpoint raises BackendUnavailable; the decision loop
falls back to a local backend and logs the event.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import requests

from .errors import BackendUnavailable
from .knowledge import HybridPrompt
from .policy import HighLevelAction, PolicyDistribution, Verb, action_vocabulary
from .state import StateSummary


@dataclass(frozen=True)
class BackendProposal:
    distribution: PolicyDistribution
    planned_metrics: dict[str, float] | None = None


class StrategyBackend:
    name = "base"

    def propose(self, prompt: HybridPrompt, n_regions: int, tau: float, cycle: int) -> BackendProposal:
        raise NotImplementedError


class EmptyBackend(StrategyBackend):
    """No planning at all: a point mass on NoOp, entropy zero."""

    name = "empty"

    def propose(self, prompt, n_regions, tau, cycle):
        dist = PolicyDistribution.onehot(HighLevelAction(Verb.NOOP, 0))
        return BackendProposal(distribution=dist)


class RuledBackend(StrategyBackend):
    """Static threshold rules over the structured state summary.

    Regions whose relative flood score crosses `score_threshold` attract
    reroute/close mass; regions with actually blocked roads or depths near
    the blocking threshold also attract relief and transit holds. When the
    prompt carries failure feedback from a triggered cycle, intervention
    weights escalate and the wetness bar drops, widening the response.
    """

    name = "ruled"

    def __init__(self, score_threshold: float = 0.7, preempt_fraction: float = 0.5, calm_blocked_limit: int = 40):
        self.score_threshold = score_threshold
        self.preempt_fraction = preempt_fraction
        self.calm_blocked_limit = calm_blocked_limit

    def propose(self, prompt, n_regions, tau, cycle):
        summary = prompt.summary
        if not isinstance(summary, StateSummary):
            raise BackendUnavailable("ruled backend needs a structured state summary")
        boost = 1.0
        preempt_bar = self.preempt_fraction * summary.blocking_depth
        degraded: tuple[str, ...] = ()
        if prompt.feedback is not None:
            boost = 1.0 + min(2.0, 10.0 * prompt.feedback.deviation_rms)
            degraded = prompt.feedback.degraded_metrics
            preempt_bar *= 0.75
            if "c" in degraded or "r" in degraded:
                boost *= 1.5
                preempt_bar *= 0.75
        calm_map = sum(summary.region_blocked_roads) <= self.calm_blocked_limit
        scores: dict[HighLevelAction, float] = {HighLevelAction(Verb.NOOP, 0): 0.5}
        for r in range(n_regions):
            f_a = summary.region_flood[r]
            t_a = summary.region_congestion[r]
            depth = summary.region_max_depth[r]
            blocked = summary.region_blocked_roads[r]
            # relative hot spots only matter when they are wet in absolute
            # terms; otherwise detour/closure would punish mild weather
            wetness = min(1.0, depth / summary.blocking_depth) if summary.blocking_depth > 0 else 0.0
            if f_a > self.score_threshold and wetness >= 0.85:
                scores[HighLevelAction(Verb.CLOSE_ROAD, r)] = 0.4 * f_a * wetness
                scores[HighLevelAction(Verb.REROUTE_REGION, r)] = f_a * wetness
            if blocked > 0:
                relief = (1.0 + f_a) * boost
                if "c" in degraded or "r" in degraded:
                    relief *= 2.0
                scores[HighLevelAction(Verb.DISPATCH_RELIEF, r)] = scores.get(
                    HighLevelAction(Verb.DISPATCH_RELIEF, r), 0.0
                ) + relief
                scores[HighLevelAction(Verb.REROUTE_REGION, r)] = scores.get(
                    HighLevelAction(Verb.REROUTE_REGION, r), 0.0
                ) + 0.6 * boost
                if blocked >= 3:
                    scores[HighLevelAction(Verb.HOLD_TRANSIT, r)] = 0.5 * boost
            elif depth >= preempt_bar and (calm_map or prompt.feedback is not None):
                # preventive pumping on wet-but-open regions: routine
                # maintenance while the map is calm, or escalated coverage
                # after a triggered cycle; deliberately lighter than the
                # reactive response
                scores[HighLevelAction(Verb.DISPATCH_RELIEF, r)] = scores.get(
                    HighLevelAction(Verb.DISPATCH_RELIEF, r), 0.0
                ) + 0.5 * boost
            if t_a > self.score_threshold:
                extra = 0.8 * t_a * (1.5 if "t" in degraded else 1.0)
                scores[HighLevelAction(Verb.REROUTE_REGION, r)] = scores.get(
                    HighLevelAction(Verb.REROUTE_REGION, r), 0.0
                ) + extra
        actions = sorted(scores, key=lambda a: (VERB_INDEX[a.verb], a.region))
        weights = np.array([scores[a] for a in actions], dtype=np.float64)
        probs = weights / weights.sum()
        dist = PolicyDistribution(support=tuple(actions), probs=tuple(float(p) for p in probs))
        return BackendProposal(distribution=dist)


VERB_INDEX = {verb: i for i, verb in enumerate(Verb)}


class ScriptedBackend(StrategyBackend):
    """Replays a fixed per-cycle list of proposals; cycles wrap around.

    Indexed by cycle number, not call count, so repeated queries within one
    cycle return the identical proposal.
    """

    name = "scripted"

    def __init__(self, script: Sequence[BackendProposal]):
        if not script:
            raise ValueError("scripted backend needs at least one proposal")
        self.script = list(script)

    def propose(self, prompt, n_regions, tau, cycle):
        return self.script[cycle % len(self.script)]


def default_script(n_regions: int) -> list[BackendProposal]:
    """Benign built-in script: moderate-entropy mixture of gentle actions."""
    support = (
        HighLevelAction(Verb.NOOP, 0),
        HighLevelAction(Verb.DISPATCH_RELIEF, 0),
        HighLevelAction(Verb.REROUTE_REGION, min(1, n_regions - 1)),
    )
    return [BackendProposal(distribution=PolicyDistribution(support, (0.5, 0.25, 0.25)))]


class ExternalBackend(StrategyBackend):
    """HTTP wire protocol for out-of-process strategy generators.

    Request JSON: {"prompt": str, "vocabulary": [action keys], "tau": float,
    "cycle": int}. Response JSON carries either "probabilities" (one float
    per vocabulary entry) or "ranking" (action keys, best first, converted
    to a distribution by softmax over negative ranks), plus an optional
    "planned" map of expected f/t/c/r.
    """

    name = "external"

    def __init__(self, endpoint: str, timeout: float = 5.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def propose(self, prompt, n_regions, tau, cycle):
        vocab = action_vocabulary(n_regions)
        payload = {
            "prompt": prompt.text,
            "vocabulary": [a.key() for a in vocab],
            "tau": tau,
            "cycle": cycle,
        }
        try:
            resp = requests.post(self.endpoint, json=payload, timeout=self.timeout)
            resp.raise_for_status()
            body = resp.json()
        except Exception as exc:
            raise BackendUnavailable(f"external backend failed: {exc}") from exc
        planned = body.get("planned") if isinstance(body, dict) else None
        if planned is not None:
            try:
                planned = {k: float(planned[k]) for k in ("f", "t", "c", "r")}
            except (KeyError, TypeError, ValueError) as exc:
                raise BackendUnavailable(f"malformed planned metrics: {exc}") from exc
        try:
            if "probabilities" in body:
                probs = [float(p) for p in body["probabilities"]]
                if len(probs) != len(vocab):
                    raise ValueError(f"expected {len(vocab)} probabilities, got {len(probs)}")
                support, kept = [], []
                for action, p in zip(vocab, probs):
                    if p > 0:
                        support.append(action)
                        kept.append(p)
                total = sum(kept)
                if total <= 0:
                    raise ValueError("all probabilities are zero")
                dist = PolicyDistribution(tuple(support), tuple(p / total for p in kept))
            elif "ranking" in body:
                dist = ranking_to_distribution([str(k) for k in body["ranking"]])
            else:
                raise ValueError("response carries neither probabilities nor ranking")
            dist.validate()
        except BackendUnavailable:
            raise
        except Exception as exc:
            raise BackendUnavailable(f"unusable external response: {exc}") from exc
        return BackendProposal(distribution=dist, planned_metrics=planned)


def ranking_to_distribution(ranked_keys: Sequence[str]) -> PolicyDistribution:
    """Softmax over negative ranks: p_i proportional to exp(-i)."""
    if not ranked_keys:
        raise ValueError("empty ranking")
    actions = tuple(HighLevelAction.parse(k) for k in ranked_keys)
    weights = np.exp(-np.arange(len(actions), dtype=np.float64))
    probs = weights / weights.sum()
    return PolicyDistribution(support=actions, probs=tuple(float(p) for p in probs))


def make_backend(
    strategy: str,
    endpoint: str | None = None,
    timeout: float = 5.0,
    script: Sequence[BackendProposal] | None = None,
    n_regions: int = 64,
    score_threshold: float = 0.7,
) -> StrategyBackend:
    strategy = strategy.lower()
    if strategy == "empty":
        return EmptyBackend()
    if strategy == "ruled":
        return RuledBackend(score_threshold=score_threshold)
    if strategy == "scripted":
        return ScriptedBackend(script or default_script(n_regions))
    if strategy == "external":
        if not endpoint:
            raise ValueError("external strategy requires an endpoint")
        return ExternalBackend(endpoint, timeout)
    raise ValueError(f"unknown strategy {strategy!r}")
