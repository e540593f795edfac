"""Discrete if-then rules, boolean grounding and exact hard-model likelihoods.

A rule fires at time t when every body predicate has occurred strictly
before t and every declared pairwise temporal relation holds at the
grounding times.  Grounding always uses the *last* occurrence before t,
so a rule can both latch on and un-latch as new body events arrive.

The target intensity is a mixture: component 0 is a constant base rate,
component h >= 1 contributes ``rule_weights[h-1]`` while rule h's body
condition is grounded true, and zero otherwise.  All intensities are
piecewise constant in t, which lets the survival integral of the
likelihood be computed exactly from segment decompositions.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .events import EventSequence, last_occurrence_before


class Relation(enum.Enum):
    BEFORE = "Before"
    EQUAL = "Equal"
    AFTER = "After"
    NONE = "None"


_FLIP = {
    Relation.BEFORE: Relation.AFTER,
    Relation.AFTER: Relation.BEFORE,
    Relation.EQUAL: Relation.EQUAL,
    Relation.NONE: Relation.NONE,
}


def ground_relation(kind: Relation, t_u: float, t_v: float, tolerance: float) -> bool:
    """Evaluate one temporal relation at two grounding times.

    Before:  t_u - t_v < -tolerance
    Equal:   |t_u - t_v| <= tolerance
    After:   t_u - t_v > tolerance
    None:    always true
    """
    if tolerance < 0:
        raise ValidationError("tolerance must be non-negative")
    d = t_u - t_v
    if kind is Relation.BEFORE:
        return d < -tolerance
    if kind is Relation.EQUAL:
        return abs(d) <= tolerance
    if kind is Relation.AFTER:
        return d > tolerance
    return True


@dataclass(frozen=True)
class Rule:
    """Conjunctive body of predicate indices plus pairwise temporal relations.

    ``relations`` maps canonically ordered pairs (u, v) with u < v to a
    Relation; pairs that are absent carry no constraint (None).  An
    empty body is permitted but degenerate: its feature is vacuously
    true, and hardening reports such rules.
    """

    body: tuple
    relations: dict = field(default_factory=dict)

    def __post_init__(self):
        body = tuple(sorted(set(int(p) for p in self.body)))
        object.__setattr__(self, "body", body)
        canon = {}
        for (u, v), rel in self.relations.items():
            u, v = int(u), int(v)
            if u == v:
                raise ValidationError("relation pair must use two distinct predicates")
            if u not in body or v not in body:
                raise ValidationError(f"relation pair ({u}, {v}) outside rule body")
            if not isinstance(rel, Relation):
                rel = Relation(rel)
            if u > v:
                u, v, rel = v, u, _FLIP[rel]
            if canon.get((u, v), rel) is not rel:
                raise ValidationError(f"conflicting relations for pair ({u}, {v})")
            if rel is not Relation.NONE:
                canon[(u, v)] = rel
        object.__setattr__(self, "relations", canon)

    def relation_items(self):
        return sorted(self.relations.items())

    def __hash__(self):
        return hash((self.body, tuple(self.relation_items())))

    def __eq__(self, other):
        if not isinstance(other, Rule):
            return NotImplemented
        return self.body == other.body and self.relations == other.relations

    def describe(self, catalog) -> str:
        if not self.body:
            return "(empty rule)"
        parts = [catalog.names[p] for p in self.body]
        text = " and ".join(parts)
        for (u, v), rel in self.relation_items():
            text += f", {catalog.names[u]} {rel.value} {catalog.names[v]}"
        return text


@dataclass(frozen=True)
class RuleSet:
    rules: tuple

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))

    def __len__(self):
        return len(self.rules)

    def __iter__(self):
        return iter(self.rules)

    def __getitem__(self, h):
        return self.rules[h]


@dataclass
class HardParams:
    """Continuous parameters of the hard mixture model.

    prior[0] is the spontaneous component; prior[h] pairs with
    rule_weights[h-1].
    """

    base_rate: float
    rule_weights: np.ndarray
    prior: np.ndarray

    def __post_init__(self):
        self.rule_weights = np.asarray(self.rule_weights, dtype=np.float64)
        self.prior = np.asarray(self.prior, dtype=np.float64)
        self.validate()

    def validate(self):
        if not self.base_rate > 0:
            raise ValidationError("base rate must be positive")
        if np.any(self.rule_weights <= 0):
            raise ValidationError("rule weights must be positive")
        if self.prior.shape != (self.rule_weights.size + 1,):
            raise ValidationError("prior length must be number of rules + 1")
        if np.any(self.prior < 0) or np.any(self.prior > 1):
            raise ValidationError("prior entries must lie in [0, 1]")
        if abs(float(self.prior.sum()) - 1.0) > 1e-12:
            raise ValidationError("prior must sum to 1")

    @property
    def num_rules(self) -> int:
        return int(self.rule_weights.size)


def ground_feature(rule: Rule, seq: EventSequence, t: float, tolerance: float) -> bool:
    """Boolean rule feature at time t under the last-occurrence convention."""
    grounding = {}
    for pred in rule.body:
        occ = last_occurrence_before(seq, pred, t)
        if occ is None:
            return False
        grounding[pred] = occ
    for (u, v), rel in rule.relations.items():
        if not ground_relation(rel, grounding[u], grounding[v], tolerance):
            return False
    return True


def hard_intensity(
    params: HardParams,
    rules: RuleSet,
    seq: EventSequence,
    t: float,
    component: int,
    tolerance: float,
) -> float:
    """Intensity of one mixture component at time t (may be zero)."""
    if not 0 <= component <= len(rules):
        raise ValidationError(f"component {component} outside 0..{len(rules)}")
    if component == 0:
        return params.base_rate
    rule = rules[component - 1]
    if ground_feature(rule, seq, t, tolerance):
        return float(params.rule_weights[component - 1])
    return 0.0


def feature_change_points(
    rule: Rule, seq: EventSequence, t_a: float, t_b: float, tolerance: float
) -> np.ndarray:
    """All times in (t_a, t_b] where the rule feature can switch value.

    The feature is a function of the body predicates' last occurrences,
    so it is constant between consecutive body event times; between two
    returned points (and at the right endpoint) it holds one value.
    """
    if not t_a < t_b:
        raise ValidationError("window must satisfy t_a < t_b")
    cuts = [np.empty(0)]
    for pred in rule.body:
        times = seq.times_for(pred)
        lo = np.searchsorted(times, t_a, side="right")
        hi = np.searchsorted(times, t_b, side="right")
        cuts.append(times[lo:hi])
    return np.unique(np.concatenate(cuts))


def _segment_feature_integral(rule, seq, t_a, t_b, tolerance):
    """Exact integral of the 0/1 feature over (t_a, t_b]."""
    points = feature_change_points(rule, seq, t_a, t_b, tolerance)
    rights = np.append(points[points < t_b], t_b)
    lefts = np.concatenate(([t_a], rights[:-1]))
    total = 0.0
    for left, right in zip(lefts, rights):
        if ground_feature(rule, seq, right, tolerance):
            total += right - left
    return total


def component_event_likelihood(
    params: HardParams,
    rules: RuleSet,
    seq: EventSequence,
    event_index: int,
    component: int,
    tolerance: float,
) -> float:
    """Density of target event ``event_index`` (0-based) under one component.

    The survival integral over (t_{i-1}, t_i] (with t_{-1} = 0) is a
    finite sum over the piecewise-constant segments of the component
    intensity.  A return of 0.0 means the component cannot produce the
    event.
    """
    tt = seq.target_times
    if not 0 <= event_index < tt.size:
        raise ValidationError(f"event index {event_index} out of range")
    t_i = float(tt[event_index])
    t_prev = float(tt[event_index - 1]) if event_index > 0 else 0.0
    if component == 0:
        rate = params.base_rate
        return rate * math.exp(-rate * (t_i - t_prev))
    rate_at_event = hard_intensity(params, rules, seq, t_i, component, tolerance)
    if rate_at_event == 0.0:
        return 0.0
    weight = float(params.rule_weights[component - 1])
    occupied = _segment_feature_integral(rules[component - 1], seq, t_prev, t_i, tolerance)
    return rate_at_event * math.exp(-weight * occupied)


def sequence_log_likelihood(
    params: HardParams, rules: RuleSet, seq: EventSequence, tolerance: float
) -> float:
    """Marginal log-likelihood of one sequence's target events.

    Returns -inf when some event has zero density under every component
    (the model cannot explain the data); this cannot happen while both
    prior[0] and the base rate are positive.
    """
    total = 0.0
    for i in range(seq.num_target_events):
        mix = 0.0
        for z in range(len(rules) + 1):
            p = float(params.prior[z])
            if p > 0.0:
                mix += p * component_event_likelihood(params, rules, seq, i, z, tolerance)
        if mix <= 0.0:
            return -np.inf
        total += math.log(mix)
    return total


# --- serialization ------------------------------------------------------

def rule_to_dict(rule: Rule, catalog) -> dict:
    return {
        "body": [catalog.names[p] for p in rule.body],
        "relations": [
            {"pair": [catalog.names[u], catalog.names[v]], "type": rel.value}
            for (u, v), rel in rule.relation_items()
        ],
    }


def rule_from_dict(obj: dict, catalog) -> Rule:
    body = tuple(catalog.index_of(n) for n in obj.get("body", []))
    if catalog.target_index in body:
        raise ValidationError("rule body may not contain the target predicate")
    relations = {}
    for item in obj.get("relations", []):
        u, v = (catalog.index_of(n) for n in item["pair"])
        relations[(u, v)] = Relation(item["type"])
    return Rule(body=body, relations=relations)


def rules_to_json(rules: RuleSet, catalog) -> str:
    return json.dumps([rule_to_dict(r, catalog) for r in rules], indent=2)


def rules_from_json(text: str, catalog) -> RuleSet:
    return RuleSet(tuple(rule_from_dict(obj, catalog) for obj in json.loads(text)))
