"""Hierarchical strategy generation under an entropy budget.

A global distribution over (verb, region) actions is projected so its
Shannon entropy never exceeds the threshold tau, then one action is
sampled per region and refined into region-local directives whose
conditional entropy is capped by the global entropy. The penalty
coefficient lambda tracks how far raw generation sits from tau.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    InvalidDistribution,
    MissingLocalPolicy,
    UnknownRegion,
)
from .rng import pystream

PROJECTION_BAND = 1e-4


class Verb(str, Enum):
    REROUTE_REGION = "reroute_region"
    CLOSE_ROAD = "close_road"
    HOLD_TRANSIT = "hold_transit"
    DISPATCH_RELIEF = "dispatch_relief"
    NOOP = "noop"


VERB_ORDER = tuple(Verb)


@dataclass(frozen=True, order=True)
class HighLevelAction:
    verb: Verb
    region: int

    def key(self) -> str:
        return f"{self.verb.value}@{self.region}"

    @staticmethod
    def parse(key: str) -> "HighLevelAction":
        verb, _, region = key.partition("@")
        return HighLevelAction(Verb(verb), int(region))


def action_vocabulary(n_regions: int) -> tuple[HighLevelAction, ...]:
    """Verb-major canonical ordering; index 0 is the first verb at region 0."""
    return tuple(HighLevelAction(verb, region) for verb in VERB_ORDER for region in range(n_regions))


@dataclass(frozen=True)
class PolicyDistribution:
    """Probability vector over a duplicate-free list of actions."""

    support: tuple[HighLevelAction, ...]
    probs: tuple[float, ...]

    def validate(self) -> None:
        if not self.support:
            raise InvalidDistribution("empty support")
        if len(self.support) != len(self.probs):
            raise InvalidDistribution("support/probs length mismatch")
        if len(set(self.support)) != len(self.support):
            raise InvalidDistribution("duplicate actions in support")
        arr = np.asarray(self.probs, dtype=np.float64)
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise InvalidDistribution("probabilities must be finite and non-negative")
        if abs(float(arr.sum()) - 1.0) > 1e-9:
            raise InvalidDistribution(f"probabilities sum to {float(arr.sum())!r}")

    @property
    def entropy(self) -> float:
        return entropy_of(self.probs)

    def argmax(self) -> HighLevelAction:
        return self.support[int(np.argmax(self.probs))]

    def prob_of(self, action: HighLevelAction) -> float:
        for a, p in zip(self.support, self.probs):
            if a == action:
                return p
        return 0.0

    @staticmethod
    def onehot(action: HighLevelAction) -> "PolicyDistribution":
        return PolicyDistribution(support=(action,), probs=(1.0,))

    @staticmethod
    def uniform(support: Sequence[HighLevelAction]) -> "PolicyDistribution":
        n = len(support)
        return PolicyDistribution(support=tuple(support), probs=tuple([1.0 / n] * n))


def entropy_of(probs: Sequence[float]) -> float:
    """Shannon entropy in nats with the 0*ln(0) = 0 convention."""
    arr = np.asarray(probs, dtype=np.float64)
    nz = arr[arr > 0]
    return float(-np.sum(nz * np.log(nz)))


def entropy(dist: PolicyDistribution) -> float:
    dist.validate()
    return entropy_of(dist.probs)


def conditional_entropy(
    locals_map: Mapping[HighLevelAction, "PolicyDistribution | Sequence[float]"],
    global_dist: PolicyDistribution,
) -> float:
    """Expected local entropy under the global distribution."""
    global_dist.validate()
    total = 0.0
    for action, p in zip(global_dist.support, global_dist.probs):
        if p <= 0:
            continue
        if action not in locals_map:
            raise MissingLocalPolicy(f"no local distribution for {action.key()}")
        local = locals_map[action]
        h = local.entropy if isinstance(local, PolicyDistribution) else entropy_of(local)
        total += p * h
    return total


def _mix_toward_argmax(probs: np.ndarray, beta: float) -> np.ndarray:
    onehot = np.zeros_like(probs)
    onehot[int(np.argmax(probs))] = 1.0
    return (1.0 - beta) * probs + beta * onehot


def project_entropy(dist: PolicyDistribution, tau: float) -> PolicyDistribution:
    """Cap the distribution's entropy at tau while preserving its argmax.

    Returns the input unchanged when already within budget; otherwise mixes
    toward the one-hot argmax, with the mixing weight found by bisection so
    the result lands in [tau - 1e-4, tau]. Mixing only ever adds mass to
    the argmax, so the mode never moves. A convex mix is used instead of
    temperature scaling because temperature cannot lower the entropy of a
    uniform distribution.
    """
    dist.validate()
    h = entropy_of(dist.probs)
    if h <= tau:
        return dist
    probs = np.asarray(dist.probs, dtype=np.float64)
    if tau <= PROJECTION_BAND:
        out = _mix_toward_argmax(probs, 1.0)
        return PolicyDistribution(support=dist.support, probs=tuple(out))
    lo, hi = 0.0, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if entropy_of(_mix_toward_argmax(probs, mid)) > tau:
            lo = mid
        else:
            hi = mid
        if entropy_of(_mix_toward_argmax(probs, hi)) >= tau - PROJECTION_BAND:
            break
    out = _mix_toward_argmax(probs, hi)
    return PolicyDistribution(support=dist.support, probs=tuple(out))


def entropy_loss(avg_log_prob: float, h: float, tau: float, lam: float) -> float:
    """Log-likelihood term minus lambda times the absolute entropy gap.

    Exposed for external trainers; local backends only use it for
    diagnostics, no gradients are taken here.
    """
    return avg_log_prob - lam * abs(h - tau)


def update_lambda(lam: float, alpha: float, h: float, tau: float) -> float:
    """lambda' = max(0, lambda + alpha * (H - tau)).

    The raw update can go negative, which would reward entropy deviation,
    so the coefficient is clamped at zero.
    """
    return max(0.0, lam + alpha * (h - tau))


@dataclass
class EntropyController:
    """Mutable entropy budget state: threshold tau, penalty lambda, rate alpha."""

    tau: float = 1.2
    lam: float = 1.0
    alpha: float = 0.05

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must be in (0, 1)")

    def observe(self, h: float) -> float:
        self.lam = update_lambda(self.lam, self.alpha, h, self.tau)
        return self.lam


# --- regional refinement ---------------------------------------------------

@dataclass(frozen=True)
class RegionalObservation:
    """What a region's local agent sees when refining a global action."""

    region: int
    flood_score: float
    congestion_score: float
    max_depth: float
    blocked_roads: int
    worst_road_cell: tuple[int, int] | None
    has_roads: bool


@dataclass(frozen=True)
class Directive:
    """One region-local executable intent produced by refinement."""

    kind: str
    region: int
    cell: tuple[int, int] | None = None
    params: tuple[tuple[str, float], ...] = ()

    def text(self) -> str:
        cell = f" cell=({self.cell[0]},{self.cell[1]})" if self.cell else ""
        params = " ".join(f"{k}={v:g}" for k, v in self.params)
        return f"{self.kind} region={self.region}{cell}" + (f" {params}" if params else "")


@dataclass(frozen=True)
class RegionalPlan:
    region: int
    directive_kinds: tuple[str, ...]
    directive_probs: tuple[float, ...]
    directives: tuple[Directive, ...]
    provenance: HighLevelAction
    window: tuple[int, int]

    @property
    def local_entropy(self) -> float:
        return entropy_of(self.directive_probs)


def _candidate_directives(action: HighLevelAction, obs: RegionalObservation) -> list[tuple[str, float, Directive]]:
    """Refinement table: (kind, weight, directive) candidates per verb.

    Weights lean on the local observation so wetter or more congested
    regions prefer the stronger variant.
    """
    r = action.region
    cell = obs.worst_road_cell
    if action.verb is Verb.REROUTE_REGION:
        return [
            ("avoid_region", 1.0 + obs.congestion_score, Directive("avoid_region", r, params=(("penalty", 4.0),))),
            ("avoid_region_strong", 0.5 + obs.flood_score, Directive("avoid_region_strong", r, params=(("penalty", 8.0),))),
        ]
    if action.verb is Verb.CLOSE_ROAD:
        return [
            ("close_cell", 1.0 + obs.flood_score, Directive("close_cell", r, cell=cell)),
            ("close_cell_brief", 0.5, Directive("close_cell_brief", r, cell=cell)),
        ]
    if action.verb is Verb.HOLD_TRANSIT:
        return [
            ("hold_buses", 1.0 + obs.flood_score, Directive("hold_buses", r)),
            ("hold_buses_brief", 0.75, Directive("hold_buses_brief", r)),
        ]
    if action.verb is Verb.DISPATCH_RELIEF:
        surge_w = 0.25 + obs.flood_score + (1.0 if obs.blocked_roads >= 3 else 0.0)
        return [
            ("deploy_pumps", 1.0, Directive("deploy_pumps", r, params=(("multiplier", 1.5),))),
            ("deploy_pumps_surge", surge_w, Directive("deploy_pumps_surge", r, params=(("multiplier", 5.0),))),
        ]
    return []


def generate_regional(
    action: HighLevelAction,
    obs: RegionalObservation,
    controller: EntropyController,
    seed: int,
    cycle: int,
    entropy_cap: float,
    window: tuple[int, int],
    n_regions: int,
    entropy_control: bool = True,
) -> RegionalPlan:
    """Refine one sampled global action into local directives.

    The local distribution is capped at min(global entropy, tau) so
    uncertainty never grows while descending the hierarchy; a deterministic
    parent therefore forces a deterministic child.
    """
    if not (0 <= action.region < n_regions):
        raise UnknownRegion(f"region {action.region} outside [0, {n_regions})")
    candidates = _candidate_directives(action, obs)
    if not candidates:
        return RegionalPlan(
            region=action.region,
            directive_kinds=("noop",),
            directive_probs=(1.0,),
            directives=(),
            provenance=action,
            window=window,
        )
    kinds = tuple(kind for kind, _, _ in candidates)
    weights = np.array([w for _, w, _ in candidates], dtype=np.float64)
    probs = weights / weights.sum()
    if entropy_control:
        cap = min(entropy_cap, controller.tau)
        if cap <= PROJECTION_BAND:
            onehot = np.zeros_like(probs)
            onehot[int(np.argmax(probs))] = 1.0
            probs = onehot
        elif entropy_of(probs) > cap:
            fake_support = tuple(HighLevelAction(Verb.NOOP, i) for i in range(len(probs)))
            projected = project_entropy(PolicyDistribution(fake_support, tuple(probs)), cap)
            probs = np.asarray(projected.probs)
    rng = pystream(seed, "regional", cycle, action.region)
    pick = rng.choices(range(len(kinds)), weights=probs.tolist(), k=1)[0]
    directive = candidates[pick][2]
    return RegionalPlan(
        region=action.region,
        directive_kinds=kinds,
        directive_probs=tuple(float(p) for p in probs),
        directives=(directive,),
        provenance=action,
        window=window,
    )


def local_distribution_for(
    action: HighLevelAction,
    obs: RegionalObservation,
    controller: EntropyController,
    entropy_cap: float,
    entropy_control: bool = True,
) -> tuple[float, ...]:
    """Capped local directive probabilities for one action, without sampling.

    Used to evaluate the conditional entropy of the full hierarchy.
    """
    candidates = _candidate_directives(action, obs)
    if not candidates:
        return (1.0,)
    weights = np.array([w for _, w, _ in candidates], dtype=np.float64)
    probs = weights / weights.sum()
    if entropy_control:
        cap = min(entropy_cap, controller.tau)
        if cap <= PROJECTION_BAND:
            onehot = np.zeros_like(probs)
            onehot[int(np.argmax(probs))] = 1.0
            return tuple(onehot)
        if entropy_of(probs) > cap:
            fake_support = tuple(HighLevelAction(Verb.NOOP, i) for i in range(len(probs)))
            projected = project_entropy(PolicyDistribution(fake_support, tuple(probs)), cap)
            return tuple(projected.probs)
    return tuple(float(p) for p in probs)


# --- global generation ------------------------------------------------------

@dataclass
class GlobalPlan:
    """Outcome of one global generation pass."""

    raw: PolicyDistribution
    projected: PolicyDistribution
    sampled: dict[int, HighLevelAction]
    h_raw: float
    h_projected: float
    lam_after: float
    planned_metrics: dict[str, float] | None


def sample_per_region(
    dist: PolicyDistribution,
    n_regions: int,
    seed: int,
    cycle: int,
) -> dict[int, HighLevelAction]:
    """Up to one action per region: the distribution restricted to a region
    is renormalized and sampled; regions carrying no mass fall back to NoOp."""
    by_region: dict[int, list[tuple[HighLevelAction, float]]] = {}
    for action, p in zip(dist.support, dist.probs):
        if p > 0:
            by_region.setdefault(action.region, []).append((action, p))
    sampled: dict[int, HighLevelAction] = {}
    rng = pystream(seed, "policy-sample", cycle)
    for region in range(n_regions):
        entries = by_region.get(region)
        if not entries:
            sampled[region] = HighLevelAction(Verb.NOOP, region)
            continue
        actions = [a for a, _ in entries]
        weights = [p for _, p in entries]
        sampled[region] = rng.choices(actions, weights=weights, k=1)[0]
    return sampled


def generate_global(
    proposal_dist: PolicyDistribution,
    controller: EntropyController,
    seed: int,
    cycle: int,
    n_regions: int,
    entropy_control: bool = True,
    planned_metrics: dict[str, float] | None = None,
) -> GlobalPlan:
    """Project a backend's raw distribution, sample actions, update lambda.

    Lambda is updated from the pre-projection entropy: the budget controller
    reacts to how uncertain generation was before enforcement.
    """
    proposal_dist.validate()
    h_raw = entropy_of(proposal_dist.probs)
    if entropy_control:
        projected = project_entropy(proposal_dist, controller.tau)
        lam_after = controller.observe(h_raw)
    else:
        projected = proposal_dist
        lam_after = controller.lam
    sampled = sample_per_region(projected, n_regions, seed, cycle)
    return GlobalPlan(
        raw=proposal_dist,
        projected=projected,
        sampled=sampled,
        h_raw=h_raw,
        h_projected=entropy_of(projected.probs),
        lam_after=lam_after,
        planned_metrics=planned_metrics,
    )
