"""Ground-truth generator for recovery experiments.

Body predicates are independent homogeneous Poisson processes.  Target
events are produced sequentially: each next event draws a component
from the prior and then samples the arrival from that component's
intensity, which is piecewise constant given the body events, so the
exponential survival can be inverted exactly segment by segment.  The
drawn components are kept as hidden labels in a sidecar, readable only
by the evaluator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import CorpusFormatError, ValidationError
from .events import EventSequence, PredicateCatalog
from .rules import (
    HardParams,
    Rule,
    RuleSet,
    feature_change_points,
    ground_feature,
    rule_from_dict,
    rule_to_dict,
)


@dataclass(frozen=True)
class GroundTruth:
    """A fully specified generating model."""

    catalog: PredicateCatalog
    rule_set: RuleSet
    params: HardParams
    body_rates: np.ndarray  # aligned with catalog.body_indices
    horizon: float
    time_tolerance: float = 0.0

    def __post_init__(self):
        object.__setattr__(
            self, "body_rates", np.asarray(self.body_rates, dtype=np.float64)
        )
        if self.body_rates.shape != (len(self.catalog.body_indices),):
            raise ValidationError("need one body rate per non-target predicate")
        if np.any(self.body_rates <= 0):
            raise ValidationError("body rates must be positive")
        if self.horizon <= 0:
            raise ValidationError("horizon must be positive")
        if len(self.rule_set) != self.params.num_rules:
            raise ValidationError("rule set size must match the number of rule weights")


class _BodyView:
    """Duck-typed stand-in for EventSequence while targets are unknown."""

    def __init__(self, body_events, num_predicates, target_index):
        self.body_events = body_events
        self.num_predicates = num_predicates
        self.target_index = target_index

    def times_for(self, predicate):
        if not 0 <= predicate < self.num_predicates or predicate == self.target_index:
            raise ValidationError(f"unknown predicate index {predicate}")
        return self.body_events.get(predicate, _EMPTY)


_EMPTY = np.empty(0)


def first_arrival_exact(rule: Rule, weight: float, body, t_start: float,
                        horizon: float, tolerance: float, rng) -> float | None:
    """Exact first arrival of a rule component after ``t_start``.

    Walks the piecewise-constant feature segments and inverts the
    exponential survival within the segment that absorbs the drawn unit
    exponential.  Returns None when the accumulated intensity up to the
    horizon is insufficient.
    """
    if t_start >= horizon:
        return None
    points = feature_change_points(rule, body, t_start, horizon, tolerance)
    rights = np.append(points[points < horizon], horizon)
    lefts = np.concatenate(([t_start], rights[:-1]))
    budget = rng.exponential(1.0)
    used = 0.0
    for left, right in zip(lefts, rights):
        if ground_feature(rule, body, right, tolerance):
            mass = (right - left) * weight
            if used + mass >= budget:
                return float(left + (budget - used) / weight)
            used += mass
    return None


def simulate_sequence(gt: GroundTruth, rng: np.random.Generator):
    """One sequence plus the hidden component label of each target event."""
    body = {}
    for pos, cat in enumerate(gt.catalog.body_indices):
        n = rng.poisson(gt.body_rates[pos] * gt.horizon)
        if n:
            times = np.unique(rng.uniform(0.0, gt.horizon, size=n))
            if times.size:
                body[cat] = times
    view = _BodyView(body, gt.catalog.size, gt.catalog.target_index)
    t = 0.0
    targets, labels = [], []
    num_components = gt.params.num_rules + 1
    while True:
        z = int(rng.choice(num_components, p=gt.params.prior))
        if z == 0:
            arrival = t + rng.exponential(1.0) / gt.params.base_rate
            if arrival > gt.horizon:
                arrival = None
        else:
            arrival = first_arrival_exact(
                gt.rule_set[z - 1], float(gt.params.rule_weights[z - 1]),
                view, t, gt.horizon, gt.time_tolerance, rng,
            )
        if arrival is None:
            break
        targets.append(arrival)
        labels.append(z)
        t = arrival
    if not targets:
        return None, []
    seq = EventSequence(
        body_events=body,
        target_times=np.asarray(targets),
        horizon=gt.horizon,
        num_predicates=gt.catalog.size,
        target_index=gt.catalog.target_index,
    )
    return seq, labels


def simulate_corpus(gt: GroundTruth, count: int, seed, max_retries: int = 1000):
    """Independent sequences with per-index child generators.

    Sequences that end with no target event are resampled (within the
    retry budget) to honour the ingestion contract.  Returns
    (sequences, labels, resample_count).
    """
    if count < 1:
        raise ValidationError("count must be >= 1")
    if isinstance(seed, np.random.Generator):
        children = seed.spawn(count)
    else:
        children = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]
    sequences, labels = [], []
    resamples = 0
    for i in range(count):
        rng = children[i] if isinstance(children[i], np.random.Generator) else np.random.default_rng(children[i])
        for _attempt in range(max_retries):
            seq, lab = simulate_sequence(gt, rng)
            if seq is not None:
                break
            resamples += 1
        else:
            raise ValidationError(
                f"sequence {i}: retry budget exhausted; ground truth too sparse"
            )
        sequences.append(seq)
        labels.append(lab)
    return sequences, labels, resamples


# --- sidecar and config IO -------------------------------------------------

def save_labels(path, labels):
    with open(path, "w") as fh:
        for i, lab in enumerate(labels):
            fh.write(json.dumps({"seq": i, "z": list(map(int, lab))}))
            fh.write("\n")


def load_labels(path):
    out = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise CorpusFormatError(str(exc), path=str(path)) from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out[int(obj["seq"])] = [int(z) for z in obj["z"]]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusFormatError(f"malformed label record: {exc}", line=lineno) from exc
    return [out[i] for i in sorted(out)]


def ground_truth_to_dict(gt: GroundTruth) -> dict:
    return {
        "catalog": gt.catalog.to_dict(),
        "rules": [rule_to_dict(r, gt.catalog) for r in gt.rule_set],
        "params": {
            "base_rate": float(gt.params.base_rate),
            "rule_weights": [float(w) for w in gt.params.rule_weights],
            "prior": [float(p) for p in gt.params.prior],
        },
        "body_rates": {
            gt.catalog.names[cat]: float(gt.body_rates[pos])
            for pos, cat in enumerate(gt.catalog.body_indices)
        },
        "horizon": float(gt.horizon),
        "time_tolerance": float(gt.time_tolerance),
    }


def ground_truth_from_dict(obj: dict) -> GroundTruth:
    catalog = PredicateCatalog.from_dict(obj["catalog"])
    rule_set = RuleSet(tuple(rule_from_dict(r, catalog) for r in obj.get("rules", [])))
    p = obj["params"]
    params = HardParams(
        base_rate=float(p["base_rate"]),
        rule_weights=np.asarray(p.get("rule_weights", []), dtype=np.float64),
        prior=np.asarray(p["prior"], dtype=np.float64),
    )
    raw_rates = obj.get("body_rates", 0.5)
    body_cols = catalog.body_indices
    if isinstance(raw_rates, dict):
        rates = np.array([float(raw_rates[catalog.names[c]]) for c in body_cols])
    else:
        rates = np.full(len(body_cols), float(raw_rates))
    return GroundTruth(
        catalog=catalog,
        rule_set=rule_set,
        params=params,
        body_rates=rates,
        horizon=float(obj["horizon"]),
        time_tolerance=float(obj.get("time_tolerance", 0.0)),
    )
