"""Recovery and prediction metrics.

Rules are compared exactly: a learned rule counts only when both its
body set and its relation map match the truth.  Parameter errors follow
the harsh convention that an unrecovered true rule contributes its full
weight / prior magnitude.  Event-time prediction uses the expectation
of the learned mixture density with the feature state frozen at the
prefix end (future body events are unknown to the predictor).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .rules import HardParams, Relation, Rule, RuleSet, ground_relation

_FLIP = {
    Relation.BEFORE: Relation.AFTER,
    Relation.AFTER: Relation.BEFORE,
    Relation.EQUAL: Relation.EQUAL,
}
_TYPE_SLOT = {Relation.BEFORE: 0, Relation.EQUAL: 1, Relation.AFTER: 2}


def rule_equal(a: Rule, b: Rule) -> bool:
    """Exact rule identity: equal body sets and equal relation maps."""
    return a == b


def encode_rule_vector(rule: Rule | None, catalog) -> np.ndarray:
    """Binary encoding: predicate block then ordered-pair relation block.

    The relation block has one slot per ordered predicate pair and
    relation type in {Before, Equal, After}; a None relation leaves its
    pair all-zero.  The spontaneous component encodes as the zero
    vector.
    """
    n = catalog.size
    pair_base = {}
    k = 0
    for u in range(n):
        for v in range(n):
            if u != v:
                pair_base[(u, v)] = n + 3 * k
                k += 1
    vec = np.zeros(n + 3 * k)
    if rule is None:
        return vec
    for p in rule.body:
        vec[p] = 1.0
    for (u, v), rel in rule.relations.items():
        vec[pair_base[(u, v)] + _TYPE_SLOT[rel]] = 1.0
        vec[pair_base[(v, u)] + _TYPE_SLOT[_FLIP[rel]]] = 1.0
    return vec


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def jaccard(learned: RuleSet, truth: RuleSet) -> float:
    """|intersection| / |union| of the collapsed rule sets."""
    a, b = set(learned), set(truth)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def assignment_cosine(inferred, true_labels, learned_rules: RuleSet,
                      true_rules: RuleSet, catalog):
    """Mean (over sequences, then events) cosine between the encoded
    inferred rule and the encoded true rule of each event.

    ``inferred`` and ``true_labels`` hold one component id per event,
    grouped per sequence; component 0 means spontaneous.
    Returns (overall_mean, per_sequence_means).
    """
    if len(inferred) != len(true_labels):
        raise ValidationError("inferred and true label groups differ in length")
    learned_vecs = [encode_rule_vector(r, catalog) for r in learned_rules]
    true_vecs = [encode_rule_vector(r, catalog) for r in true_rules]
    zero = encode_rule_vector(None, catalog)
    per_seq = []
    for guess_row, truth_row in zip(inferred, true_labels):
        if len(guess_row) != len(truth_row):
            raise ValidationError("event counts differ between inference and labels")
        vals = []
        for g, z in zip(guess_row, truth_row):
            f = learned_vecs[g - 1] if g >= 1 else zero
            f_true = true_vecs[z - 1] if z >= 1 else zero
            vals.append(_cosine(f, f_true))
        per_seq.append(float(np.mean(vals)))
    return float(np.mean(per_seq)), per_seq


def _collapse_learned(learned_rules: RuleSet, learned_params: HardParams):
    """Group learned rules by identity; fold empty rules into spontaneous.

    Duplicate rules split responsibility symmetrically under EM, so
    their priors are summed (weights averaged with prior weighting) to
    give each distinct rule content one prior mass and one weight.
    """
    spont_prior = float(learned_params.prior[0])
    groups = {}
    for h, rule in enumerate(learned_rules):
        prior_h = float(learned_params.prior[h + 1])
        weight_h = float(learned_params.rule_weights[h])
        if not rule.body:
            spont_prior += prior_h
            continue
        entry = groups.setdefault(rule, {"prior": 0.0, "weighted": 0.0, "weights": []})
        entry["prior"] += prior_h
        entry["weighted"] += prior_h * weight_h
        entry["weights"].append(weight_h)
    collapsed = {}
    for rule, entry in groups.items():
        if entry["prior"] > 0:
            weight = entry["weighted"] / entry["prior"]
        else:
            weight = float(np.mean(entry["weights"]))
        collapsed[rule] = (weight, entry["prior"])
    return collapsed, spont_prior


def parameter_mae(learned_rules: RuleSet, learned_params: HardParams,
                  true_rules: RuleSet, true_params: HardParams):
    """(weight_mae, prior_mae) under exact matching.

    A true rule with no exactly-equal learned rule contributes its full
    weight, and its full prior, to the respective error vectors.
    """
    collapsed, spont_prior = _collapse_learned(learned_rules, learned_params)
    weight_errors = []
    prior_errors = [abs(spont_prior - float(true_params.prior[0]))]
    for h, rule in enumerate(true_rules):
        true_w = float(true_params.rule_weights[h])
        true_p = float(true_params.prior[h + 1])
        match = collapsed.get(rule)
        if match is None:
            weight_errors.append(true_w)
            prior_errors.append(true_p)
        else:
            weight_errors.append(abs(match[0] - true_w))
            prior_errors.append(abs(match[1] - true_p))
    weight_mae = float(np.mean(weight_errors)) if weight_errors else 0.0
    return weight_mae, float(np.mean(prior_errors))


# --- event-time prediction -------------------------------------------------

def _frozen_component_rates(params: HardParams, rules: RuleSet, seq,
                            prefix_end: float, tolerance: float) -> np.ndarray:
    """Constant component rates with grounding frozen just after the prefix.

    Occurrences at exactly ``prefix_end`` are part of the known prefix,
    so grounding uses 'time <= prefix_end'.
    """
    rates = np.empty(len(rules) + 1)
    rates[0] = params.base_rate
    for h, rule in enumerate(rules, start=1):
        grounding = {}
        fired = True
        for pred in rule.body:
            times = seq.times_for(pred)
            pos = int(np.searchsorted(times, prefix_end, side="right"))
            if pos == 0:
                fired = False
                break
            grounding[pred] = float(times[pos - 1])
        if fired:
            for (u, v), rel in rule.relations.items():
                if not ground_relation(rel, grounding[u], grounding[v], tolerance):
                    fired = False
                    break
        rates[h] = params.rule_weights[h - 1] if fired else 0.0
    return rates


def predict_next_event_time(params: HardParams, rules: RuleSet, seq,
                            prefix_end: float, tolerance: float, cap: float,
                            quad_tol: float = 1e-4) -> float:
    """Expected next arrival under the frozen-state mixture density.

    Integrates t * p(t) numerically on [0, cap] (halving the step until
    the value moves by less than ``quad_tol``) and folds the tail mass
    in at the cap.
    """
    if cap <= 0:
        raise ValidationError("integration cap must be positive")
    rates = _frozen_component_rates(params, rules, seq, prefix_end, tolerance)
    prior = params.prior

    def density(t):
        return np.sum(prior[None, :] * rates[None, :] * np.exp(-np.outer(t, rates)), axis=1)

    def survival(t):
        return float(np.sum(prior * np.exp(-rates * t)))

    n = 256
    previous = None
    while True:
        t = np.linspace(0.0, cap, n + 1)
        estimate = float(np.trapz(t * density(t), t))
        if previous is not None and abs(estimate - previous) < quad_tol:
            break
        if n >= 2 ** 20:
            break
        previous = estimate
        n *= 2
    return float(prefix_end + estimate + cap * survival(cap))


def event_time_mae(params: HardParams, rules: RuleSet, sequences,
                   tolerance: float, cap: float, quad_tol: float = 1e-4):
    """Mean absolute error of the expectation predictor over all events."""
    errors = []
    for seq in sequences:
        prev = 0.0
        for t in seq.target_times:
            predicted = predict_next_event_time(
                params, rules, seq, prev, tolerance, cap, quad_tol
            )
            errors.append(abs(predicted - float(t)))
            prev = float(t)
    return float(np.mean(errors))


def baseline_event_time_mae(sequences, mean_interarrival: float) -> float:
    """MAE of the constant mean-interarrival predictor on the same events."""
    errors = []
    for seq in sequences:
        prev = 0.0
        for t in seq.target_times:
            errors.append(abs(prev + mean_interarrival - float(t)))
            prev = float(t)
    return float(np.mean(errors))


@dataclass
class EvalReport:
    """Bundle of all metrics; entries are None when inputs were absent."""

    jaccard: float | None = None
    weight_mae: float | None = None
    prior_mae: float | None = None
    assignment_cosine: float | None = None
    event_time_mae: float | None = None
    baseline_event_time_mae: float | None = None
    details: dict = field(default_factory=dict)

    def validate(self):
        if self.jaccard is not None and not 0.0 <= self.jaccard <= 1.0:
            raise ValidationError("jaccard outside [0, 1]")
        if self.assignment_cosine is not None and not 0.0 <= self.assignment_cosine <= 1.0 + 1e-12:
            raise ValidationError("assignment cosine outside [0, 1]")
        for name in ("weight_mae", "prior_mae", "event_time_mae"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValidationError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return {
            "jaccard": self.jaccard,
            "weight_mae": self.weight_mae,
            "prior_mae": self.prior_mae,
            "assignment_cosine": self.assignment_cosine,
            "event_time_mae": self.event_time_mae,
            "baseline_event_time_mae": self.baseline_event_time_mae,
            "details": self.details,
        }

    CSV_FIELDS = (
        "tag", "seed", "jaccard", "weight_mae", "prior_mae",
        "assignment_cosine", "event_time_mae", "baseline_event_time_mae",
    )

    def to_csv_row(self, tag="", seed="") -> dict:
        row = {"tag": tag, "seed": seed}
        for name in self.CSV_FIELDS[2:]:
            value = getattr(self, name)
            row[name] = "" if value is None else repr(float(value))
        return row
