"""Continuous relaxation of rule learning and its exact gradients.

The discrete rule set is relaxed in three layers:

* predicate selection: each rule row holds positive weights over the
  real predicate columns plus "empty" dummy columns; Gumbel-perturbed
  keys are pushed through a successive-softmax relaxed top-K, giving a
  row that sums to the subset size;
* the boolean "all selected predicates grounded" test becomes a Laplace
  kernel centred at the subset size (dummies count as always grounded);
* each pairwise temporal relation becomes a softmax-weighted score over
  the four relation branches, and scores within a rule are aggregated
  with a weighted softmin.

Gradients of the expected complete-data log-likelihood are derived in
closed form (reverse accumulation by hand); their only contract is
agreement with central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericsError, ValidationError
from .events import last_occurrence_before
from .grid import CorpusGrid

_CLAMP_EPS = 1e-12


@dataclass
class SoftContext:
    """Shape parameters of the relaxation."""

    kernel_bandwidth: float = 2.0
    softmin_sharpness: float = 10.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.kernel_bandwidth <= 0 or self.softmin_sharpness <= 0 or self.temperature <= 0:
            raise ValidationError("soft context parameters must be positive")


# --- Gumbel keys and relaxed top-K ---------------------------------------

def gumbel_from_uniforms(u: np.ndarray) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gumbel_keys_from_uniforms(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Perturbed keys: Gumbel noise from uniform draws plus log-weights."""
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights <= 0):
        raise ValidationError("selection weights must be strictly positive")
    return gumbel_from_uniforms(u) + np.log(weights)


def gumbel_keys(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return gumbel_keys_from_uniforms(weights, rng.random(np.shape(weights)))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


def relaxed_top_k(keys: np.ndarray, k: int, temperature: float) -> np.ndarray:
    """Differentiable K-hot relaxation by successive softmax rounds.

    Each round adds a softmax of the running scores and suppresses the
    mass it consumed via ``scores += log(1 - p)`` (clamped at log eps).
    The output always sums to exactly k and approaches the hard top-k
    indicator as temperature -> 0.
    """
    keys = np.asarray(keys, dtype=np.float64)
    if not np.all(np.isfinite(keys)):
        raise NumericsError("relaxed_top_k received non-finite keys")
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    if not 0 < k <= keys.size:
        raise ValidationError(f"subset size {k} invalid for {keys.size} keys")
    scores = keys.copy()
    out = np.zeros_like(scores)
    for _ in range(k):
        p = _softmax(scores / temperature)
        out += p
        scores = scores + np.log(np.clip(1.0 - p, _CLAMP_EPS, None))
    return out


def relaxed_top_k_with_jacobian(keys: np.ndarray, k: int, temperature: float):
    """Relaxed top-K output together with its Jacobian d out / d keys."""
    keys = np.asarray(keys, dtype=np.float64)
    n = keys.size
    scores = keys.copy()
    score_jac = np.eye(n)
    out = np.zeros(n)
    out_jac = np.zeros((n, n))
    for _ in range(k):
        p = _softmax(scores / temperature)
        dp = (np.diag(p) - np.outer(p, p)) @ score_jac / temperature
        out += p
        out_jac += dp
        remain = 1.0 - p
        clamped = remain < _CLAMP_EPS
        scores = scores + np.log(np.clip(remain, _CLAMP_EPS, None))
        scale = np.where(clamped, 0.0, -1.0 / np.clip(remain, _CLAMP_EPS, None))
        score_jac = score_jac + scale[:, None] * dp
    return out, out_jac


def hard_top_k_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries; ties go to the lower index."""
    order = np.argsort(-np.asarray(values), kind="stable")
    return np.sort(order[:k])


# --- soft features --------------------------------------------------------

def laplace_kernel(total: np.ndarray, center: float, bandwidth: float):
    return np.exp(-bandwidth * np.abs(total - center))


def soft_static_feature(selection_row, seq, t, ctx: SoftContext, subset_size, catalog):
    """Laplace-kernel test that the selected mass is grounded at time t.

    ``selection_row`` spans the real predicate columns (catalog order
    minus the target) followed by dummy columns, which count as always
    grounded.
    """
    selection_row = np.asarray(selection_row, dtype=np.float64)
    body_cols = catalog.body_indices
    total = float(selection_row[len(body_cols):].sum())
    for pos, cat in enumerate(body_cols):
        if last_occurrence_before(seq, cat, t) is not None:
            total += float(selection_row[pos])
    return float(laplace_kernel(total, subset_size, ctx.kernel_bandwidth))


def _relation_indicators(t_u, t_v, tolerance):
    if t_u is None or t_v is None:
        return 0.0, 0.0, 0.0
    d = t_u - t_v
    return (
        1.0 if d < -tolerance else 0.0,
        1.0 if abs(d) <= tolerance else 0.0,
        1.0 if d > tolerance else 0.0,
    )


def soft_relation(alpha, t_u, t_v, tolerance: float) -> float:
    """Softmax-weighted relation score for one predicate pair.

    The four branch scores are the simplex entries gated by the
    grounded indicators (the None branch scores the leftover mass);
    the result is the softmax of those scores dotted with them.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    rb, re, ra = _relation_indicators(t_u, t_v, tolerance)
    v = np.array(
        [
            alpha[0] * rb,
            alpha[1] * re,
            alpha[2] * ra,
            alpha[3] * (1.0 - alpha[0] * rb - alpha[1] * re - alpha[2] * ra),
        ]
    )
    w = _softmax(v)
    return float(w @ v)


def weighted_softmin(values: np.ndarray, sharpness: float) -> float:
    """Smooth minimum: sum x_i e^{-s x_i} / sum e^{-s x_i}."""
    values = np.asarray(values, dtype=np.float64)
    z = -sharpness * (values - values.min())
    w = np.exp(z)
    return float((values * w).sum() / w.sum())


def soft_temporal_factor(pair_alphas, grounding_times, ctx: SoftContext, tolerance) -> float:
    """Softmin aggregation of the rule's pairwise relation scores.

    ``pair_alphas`` maps predicate pairs to their 4-entry simplices;
    rules with fewer than two effective predicates (no pairs) score 1.
    """
    scores = [
        soft_relation(alpha, grounding_times.get(u), grounding_times.get(v), tolerance)
        for (u, v), alpha in sorted(pair_alphas.items())
    ]
    if not scores:
        return 1.0
    return weighted_softmin(np.asarray(scores), ctx.softmin_sharpness)


def soft_intensity(
    params,
    selection,
    pair_alphas_per_rule,
    seq,
    t,
    component,
    ctx: SoftContext,
    subset_size,
    catalog,
    tolerance,
) -> float:
    """Relaxed component intensity; the base rate enters every component."""
    if component == 0:
        return float(params.base_rate)
    h = component - 1
    coverage = soft_static_feature(selection[h], seq, t, ctx, subset_size, catalog)
    pair_alphas = pair_alphas_per_rule[h]
    grounding = {
        p: last_occurrence_before(seq, p, t)
        for pair in pair_alphas for p in pair
    }
    factor = soft_temporal_factor(pair_alphas, grounding, ctx, tolerance)
    return float(params.base_rate + params.rule_weights[h] * coverage * factor)


# --- batched objective with closed-form gradients -------------------------

class SoftObjective:
    """Expected complete-data log-likelihood of the relaxed model.

    Works on a CorpusGrid so that both the value and all parameter
    gradients are a handful of vectorized passes over the segment
    arrays.  Pairs are indexed in column space (positions into the
    grid's real columns); relation indicators per pair are cached.
    """

    def __init__(self, grid: CorpusGrid, responsibilities, prior, subset_size,
                 num_dummies, ctx: SoftContext, tolerance):
        self.grid = grid
        self.q = np.asarray(responsibilities, dtype=np.float64)
        self.prior = np.asarray(prior, dtype=np.float64)
        self.subset_size = int(subset_size)
        self.num_dummies = int(num_dummies)
        self.ctx = ctx
        self.tolerance = float(tolerance)
        self._indicator_cache = {}
        if self.q.shape[0] != grid.n_events:
            raise ValidationError("responsibility rows must match event count")

    def _indicators(self, pair):
        """(3, S) stack of Before/Equal/After indicators for a column pair."""
        cached = self._indicator_cache.get(pair)
        if cached is not None:
            return cached
        cu, cv = pair
        d = self.grid.groundings[:, cu] - self.grid.groundings[:, cv]
        valid = ~np.isnan(d)
        with np.errstate(invalid="ignore"):
            rb = np.where(valid & (d < -self.tolerance), 1.0, 0.0)
            re = np.where(valid & (np.abs(d) <= self.tolerance), 1.0, 0.0)
            ra = np.where(valid & (d > self.tolerance), 1.0, 0.0)
        stack = np.stack([rb, re, ra])
        self._indicator_cache[pair] = stack
        return stack

    def _pair_scores(self, pair, alpha, want_grads):
        """Score per segment for one pair, optionally with d score / d alpha."""
        rb, re, ra = self._indicators(pair)
        v = np.empty((4, rb.size))
        v[0] = alpha[0] * rb
        v[1] = alpha[1] * re
        v[2] = alpha[2] * ra
        consumed = v[0] + v[1] + v[2]
        v[3] = alpha[3] * (1.0 - consumed)
        z = v - v.max(axis=0, keepdims=True)
        w = np.exp(z)
        w /= w.sum(axis=0, keepdims=True)
        score = (w * v).sum(axis=0)
        if not want_grads:
            return score, None
        # d score / d v_k = w_k (1 + v_k - score)
        gv = w * (1.0 + v - score[None, :])
        dalpha = np.empty((4, rb.size))
        dalpha[0] = gv[0] * rb - gv[3] * alpha[3] * rb
        dalpha[1] = gv[1] * re - gv[3] * alpha[3] * re
        dalpha[2] = gv[2] * ra - gv[3] * alpha[3] * ra
        dalpha[3] = gv[3] * (1.0 - consumed)
        return score, dalpha

    def _temporal_factor(self, pairs, alphas_h, want_grads):
        """Softmin over pair scores; returns (T, per-pair score grads, softmin grads)."""
        n_seg = self.grid.n_segments
        if not pairs:
            return np.ones(n_seg), None, None
        scores = np.empty((len(pairs), n_seg))
        dalpha = [] if want_grads else None
        for row, pair_pos in enumerate(pairs):
            score, grad = self._pair_scores(pair_pos[1], alphas_h[pair_pos[0]], want_grads)
            scores[row] = score
            if want_grads:
                dalpha.append(grad)
        s = self.ctx.softmin_sharpness
        z = -s * (scores - scores.min(axis=0, keepdims=True))
        w = np.exp(z)
        denom = w.sum(axis=0)
        factor = (scores * w).sum(axis=0) / denom
        if not want_grads:
            return factor, None, None
        # d softmin / d x_i = (w_i / sum w) (1 - s (x_i - softmin))
        dfactor = (w / denom[None, :]) * (1.0 - s * (scores - factor[None, :]))
        return factor, dalpha, dfactor

    def evaluate(self, selection, alphas, pairs_per_rule, base_rate, rule_weights,
                 want_grads=False, relations_active=True):
        """Objective value and (optionally) gradients.

        selection       : (H, P + M) relaxed K-hot rows
        alphas          : (H, n_pairs, 4) simplices over all real pairs
        pairs_per_rule  : per rule, list of (pair_index, (col_u, col_v))
        Gradients for base_rate / rule_weights are in natural
        parameterization.
        """
        grid = self.grid
        q = self.q
        num_rules = selection.shape[0]
        n_real = grid.num_columns
        sel_real = selection[:, :n_real]
        dummy_mass = selection[:, n_real:].sum(axis=1)
        dt = grid.event_dt

        with np.errstate(divide="ignore"):
            log_prior = np.log(self.prior)
        prior_term = float(np.sum(np.where(q > 0, q * log_prior[None, :], 0.0)))

        value = prior_term
        value += float(np.sum(q[:, 0] * (np.log(base_rate) - base_rate * dt)))

        if want_grads:
            g_sel = np.zeros_like(selection)
            g_alpha = np.zeros_like(alphas)
            g_weights = np.zeros(num_rules)
            g_base = float(np.sum(q[:, 0] * (1.0 / base_rate - dt)))

        totals = grid.occurred @ sel_real.T + dummy_mass[None, :]  # (S, H)
        beta = self.ctx.kernel_bandwidth
        for h in range(num_rules):
            total_h = totals[:, h]
            coverage = np.exp(-beta * np.abs(total_h - self.subset_size))
            pairs = pairs_per_rule[h] if relations_active else []
            factor, pair_grads, dfactor = self._temporal_factor(pairs, alphas[h], want_grads)
            feat = coverage * factor
            lam = base_rate + rule_weights[h] * feat
            integral = np.bincount(
                grid.seg_event, weights=grid.seg_lens * lam, minlength=grid.n_events
            )
            lam_at = lam[grid.event_segment]
            qh = q[:, h + 1]
            value += float(np.sum(qh * (np.log(lam_at) - integral)))
            if not want_grads:
                continue
            # d value / d lam per segment: survival everywhere, event bump at
            # the segment ending at each event time
            glam = -(qh[grid.seg_event] * grid.seg_lens)
            np.add.at(glam, grid.event_segment, qh / lam_at)
            g_base += float(glam.sum())
            g_weights[h] = float(np.dot(glam, feat))
            gfeat = glam * rule_weights[h]
            gcov = gfeat * factor
            gtot = gcov * (-beta * np.sign(total_h - self.subset_size)) * coverage
            g_sel[h, :n_real] = grid.occurred.T @ gtot
            g_sel[h, n_real:] = gtot.sum()
            if pairs:
                gfactor = gfeat * coverage
                for row, (pair_idx, _pos) in enumerate(pairs):
                    gscore = gfactor * dfactor[row]
                    g_alpha[h, pair_idx] = pair_grads[row] @ gscore
        if not want_grads:
            return value, None
        return value, {
            "selection": g_sel,
            "alphas": g_alpha,
            "base_rate": g_base,
            "rule_weights": g_weights,
        }


def all_real_pairs(num_columns: int):
    """Canonical (u < v) column pairs with their flat index."""
    pairs = []
    index = {}
    for u in range(num_columns):
        for v in range(u + 1, num_columns):
            index[(u, v)] = len(pairs)
            pairs.append((u, v))
    return pairs, index


def expected_complete_loglik(
    sequences,
    catalog,
    responsibilities,
    params,
    selection,
    alphas,
    pairs_per_rule,
    ctx: SoftContext,
    subset_size,
    tolerance,
    relations_active=True,
) -> float:
    """Convenience scalar entry point over raw sequences."""
    grid = CorpusGrid(sequences, catalog)
    num_dummies = selection.shape[1] - grid.num_columns
    objective = SoftObjective(
        grid, responsibilities, params.prior, subset_size, num_dummies, ctx, tolerance
    )
    value, _ = objective.evaluate(
        np.asarray(selection, dtype=np.float64),
        np.asarray(alphas, dtype=np.float64),
        pairs_per_rule,
        float(params.base_rate),
        np.asarray(params.rule_weights, dtype=np.float64),
        want_grads=False,
        relations_active=relations_active,
    )
    return value


def objective_gradients(
    sequences,
    catalog,
    responsibilities,
    params,
    weights,
    alphas,
    pairs_per_rule,
    uniforms,
    ctx: SoftContext,
    subset_size,
    tolerance,
    relations_active=True,
):
    """Value plus gradients for {selection weights, alphas, base rate, rule weights}.

    The Gumbel draws enter through ``uniforms`` (held fixed as common
    random numbers) so the weight gradient flows through the sampled
    relaxed top-K via its Jacobian.
    """
    weights = np.asarray(weights, dtype=np.float64)
    grid = CorpusGrid(sequences, catalog)
    num_dummies = weights.shape[1] - grid.num_columns
    objective = SoftObjective(
        grid, responsibilities, params.prior, subset_size, num_dummies, ctx, tolerance
    )
    selection = np.empty_like(weights)
    jacobians = []
    for h in range(weights.shape[0]):
        keys = gumbel_keys_from_uniforms(weights[h], uniforms[h])
        row, jac = relaxed_top_k_with_jacobian(keys, subset_size, ctx.temperature)
        selection[h] = row
        jacobians.append(jac)
    value, grads = objective.evaluate(
        selection,
        np.asarray(alphas, dtype=np.float64),
        pairs_per_rule,
        float(params.base_rate),
        np.asarray(params.rule_weights, dtype=np.float64),
        want_grads=True,
        relations_active=relations_active,
    )
    g_weights = np.empty_like(weights)
    for h in range(weights.shape[0]):
        g_keys = grads["selection"][h] @ jacobians[h]
        g_weights[h] = g_keys / weights[h]
    for name, g in (("weights", g_weights), ("alphas", grads["alphas"]),
                    ("base_rate", grads["base_rate"]),
                    ("rule_weights", grads["rule_weights"])):
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter block {name!r}")
    return value, {
        "weights": g_weights,
        "alphas": grads["alphas"],
        "base_rate": grads["base_rate"],
        "rule_weights": grads["rule_weights"],
        "selection_sample": selection,
    }


def dump_soft_state(selection, alphas) -> dict:
    """JSON-ready diagnostic dump of the relaxed selection and simplices."""
    return {
        "selection": np.asarray(selection).tolist(),
        "relation_simplices": np.asarray(alphas).tolist(),
    }
