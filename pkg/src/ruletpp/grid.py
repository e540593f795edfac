"""Vectorized corpus representation for exact piecewise-constant integration.

Every per-sequence likelihood window (t_{i-1}, t_i] is cut at the body
event times inside it.  On each resulting segment all boolean features,
grounding times and therefore all intensities are constant and equal to
their value at the segment's right endpoint (grounding uses strict
"< t", so nothing changes until just after an occurrence).  Segments of
all sequences are concatenated into flat arrays so that likelihoods,
posteriors and objective gradients reduce to a few matrix operations
over the whole corpus.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericsError, ValidationError
from .rules import HardParams, Relation, Rule, RuleSet


class CorpusGrid:
    """Flattened segment decomposition of a corpus.

    Column order is ``catalog.body_indices`` (catalog order minus the
    target), matching the selection-matrix columns used elsewhere.
    """

    def __init__(self, sequences, catalog):
        if not sequences:
            raise ValidationError("corpus is empty")
        self.catalog = catalog
        self.body_cols = list(catalog.body_indices)
        self.col_of = {cat: pos for pos, cat in enumerate(self.body_cols)}
        self.num_columns = len(self.body_cols)
        self.sequences = list(sequences)

        seg_rights, seg_lens, seg_event = [], [], []
        occ_blocks, ground_blocks = [], []
        event_t, event_dt, event_seq, event_segment = [], [], [], []
        offsets = [0]
        seg_base = 0
        for s, seq in enumerate(self.sequences):
            rights, lens, ev_local, at_seg, occ, ground = self._build_one(seq)
            n_local = seq.num_target_events
            seg_rights.append(rights)
            seg_lens.append(lens)
            seg_event.append(ev_local + offsets[-1])
            occ_blocks.append(occ)
            ground_blocks.append(ground)
            tt = seq.target_times
            event_t.append(tt)
            event_dt.append(np.diff(tt, prepend=0.0))
            event_seq.append(np.full(n_local, s, dtype=np.int64))
            event_segment.append(at_seg + seg_base)
            seg_base += rights.size
            offsets.append(offsets[-1] + n_local)

        self.seg_rights = np.concatenate(seg_rights)
        self.seg_lens = np.concatenate(seg_lens)
        self.seg_event = np.concatenate(seg_event)
        self.occurred = np.concatenate(occ_blocks, axis=0)
        self.groundings = np.concatenate(ground_blocks, axis=0)
        self.event_t = np.concatenate(event_t)
        self.event_dt = np.concatenate(event_dt)
        self.event_seq = np.concatenate(event_seq)
        self.event_segment = np.concatenate(event_segment)
        self.event_offsets = np.asarray(offsets, dtype=np.int64)
        self.n_events = int(self.event_t.size)
        self.n_segments = int(self.seg_rights.size)

    def _build_one(self, seq):
        tt = seq.target_times
        t_last = float(tt[-1])
        cuts = [tt]
        for cat in self.body_cols:
            times = seq.body_events.get(cat)
            if times is not None and times.size:
                cuts.append(times[(times > 0.0) & (times <= t_last)])
        rights = np.unique(np.concatenate(cuts))
        lefts = np.concatenate(([0.0], rights[:-1]))
        lens = rights - lefts
        ev_local = np.searchsorted(tt, rights, side="left")
        at_seg = np.flatnonzero(rights == tt[ev_local])
        occ = np.zeros((rights.size, self.num_columns))
        ground = np.full((rights.size, self.num_columns), np.nan)
        for pos, cat in enumerate(self.body_cols):
            times = seq.body_events.get(cat)
            if times is None or times.size == 0:
                continue
            count = np.searchsorted(times, rights, side="left")
            has = count > 0
            occ[has, pos] = 1.0
            ground[has, pos] = times[count[has] - 1]
        return rights, lens, ev_local, at_seg, occ, ground

    # --- hard model -------------------------------------------------

    def feature_segments(self, rule: Rule, tolerance: float) -> np.ndarray:
        """0/1 value of the rule feature on every segment."""
        if not rule.body:
            return np.ones(self.n_segments)
        cols = [self.col_of[p] for p in rule.body]
        phi = np.all(self.occurred[:, cols] > 0.5, axis=1)
        for (u, v), rel in rule.relation_items():
            d = self.groundings[:, self.col_of[u]] - self.groundings[:, self.col_of[v]]
            with np.errstate(invalid="ignore"):
                if rel is Relation.BEFORE:
                    ok = d < -tolerance
                elif rel is Relation.EQUAL:
                    ok = np.abs(d) <= tolerance
                elif rel is Relation.AFTER:
                    ok = d > tolerance
                else:
                    continue
            phi &= ok & ~np.isnan(d)
        return phi.astype(np.float64)

    def occupied_lengths(self, phi: np.ndarray) -> np.ndarray:
        """Per-event integral of a piecewise-constant 0/1 feature."""
        return np.bincount(
            self.seg_event, weights=self.seg_lens * phi, minlength=self.n_events
        )

    def hard_log_densities(
        self, params: HardParams, rules: RuleSet, tolerance: float
    ) -> np.ndarray:
        """Log density of each event under each component; -inf when a
        component's rule is ungrounded at the event time."""
        out = np.empty((self.n_events, len(rules) + 1))
        out[:, 0] = np.log(params.base_rate) - params.base_rate * self.event_dt
        for h, rule in enumerate(rules, start=1):
            weight = float(params.rule_weights[h - 1])
            phi = self.feature_segments(rule, tolerance)
            occupied = self.occupied_lengths(phi)
            fired = phi[self.event_segment] > 0.0
            col = np.full(self.n_events, -np.inf)
            col[fired] = np.log(weight) - weight * occupied[fired]
            out[:, h] = col
        return out

    def log_joint(self, params: HardParams, rules: RuleSet, tolerance: float) -> np.ndarray:
        with np.errstate(divide="ignore"):
            log_prior = np.log(params.prior)
        return log_prior[None, :] + self.hard_log_densities(params, rules, tolerance)

    def posterior(self, params: HardParams, rules: RuleSet, tolerance: float) -> np.ndarray:
        """Exact per-event responsibilities over {spontaneous, rules}."""
        lj = self.log_joint(params, rules, tolerance)
        top = lj.max(axis=1)
        dead = ~np.isfinite(top)
        if np.any(dead):
            raise NumericsError(
                f"event {int(np.flatnonzero(dead)[0])}: zero density under every component"
            )
        q = np.exp(lj - top[:, None])
        q /= q.sum(axis=1, keepdims=True)
        return q

    def observed_log_likelihood(
        self, params: HardParams, rules: RuleSet, tolerance: float
    ) -> float:
        lj = self.log_joint(params, rules, tolerance)
        top = lj.max(axis=1)
        if not np.all(np.isfinite(top)):
            return -np.inf
        return float(np.sum(top + np.log(np.exp(lj - top[:, None]).sum(axis=1))))

    def evidence_lower_bound(
        self, params: HardParams, rules: RuleSet, q: np.ndarray, tolerance: float
    ) -> float:
        """Expected complete-data log-likelihood plus entropy of q."""
        lj = self.log_joint(params, rules, tolerance)
        mask = q > 0.0
        return float(np.sum(q[mask] * (lj[mask] - np.log(q[mask]))))

    def events_of_sequence(self, s: int) -> slice:
        return slice(int(self.event_offsets[s]), int(self.event_offsets[s + 1]))
