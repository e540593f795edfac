"""EM loop: closed-form E-step, alternating M-step, and rule hardening.

The E-step and the convergence trace always use the *hard* model with
the currently hardened rules, so responsibilities keep their exact-zero
semantics and the trace is insulated from Gumbel noise.  The relaxation
lives inside the rule M-step: the selection weights are updated first
with temporal relations ignored, then frozen while the relation
simplices are updated with projected gradient steps.

The rule-structure learning rates apply to the raw summed-over-events
gradient, so their effective step grows with corpus size; the
base-rate / rule-weight updates are curvature-normalized and
data-size-free.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError, ValidationError
from .events import PredicateCatalog
from .grid import CorpusGrid
from .relaxation import (
    SoftContext,
    SoftObjective,
    all_real_pairs,
    gumbel_keys_from_uniforms,
    hard_top_k_indices,
    relaxed_top_k,
    relaxed_top_k_with_jacobian,
)
from .rules import HardParams, Relation, Rule, RuleSet

log = logging.getLogger(__name__)

_WEIGHT_FLOOR = 1e-8
_RELATION_ORDER = (Relation.BEFORE, Relation.EQUAL, Relation.AFTER, Relation.NONE)


@dataclass
class TrainConfig:
    """All tunables of one training run."""

    num_rules: int
    max_rule_length: int
    num_dummies: int | None = None
    time_tolerance: float = 0.0
    lr_selection: float = 0.0001
    lr_relations: float = 0.0035
    lr_params: float = 0.5
    tau_max: float = 1.0
    tau_min: float = 0.05
    em_max_iters: int = 30
    elbo_tol: float = 1e-6
    seed: int = 0
    w_phase_steps: int = 50
    alpha_phase_steps: int = 50
    param_steps: int = 30
    gumbel_samples: int = 1
    kernel_bandwidth: float = 2.0
    softmin_sharpness: float = 10.0
    init_jitter: float = 0.01
    deterministic_relaxation: bool = False
    freeze_rules: bool = False

    def __post_init__(self):
        if self.num_dummies is None:
            self.num_dummies = self.max_rule_length
        if self.num_rules < 0:
            raise ValidationError("num_rules must be >= 0")
        if self.max_rule_length < 1:
            raise ValidationError("max_rule_length must be >= 1")
        if self.num_dummies < 1:
            raise ValidationError("num_dummies must be >= 1")
        if min(self.lr_selection, self.lr_relations, self.lr_params) <= 0:
            raise ValidationError("learning rates must be positive")
        if not self.tau_max > self.tau_min > 0:
            raise ValidationError("need tau_max > tau_min > 0")
        if self.time_tolerance < 0:
            raise ValidationError("time tolerance must be >= 0")
        if self.gumbel_samples < 1:
            raise ValidationError("gumbel_samples must be >= 1")

    def soft_context(self, temperature=None) -> SoftContext:
        return SoftContext(
            kernel_bandwidth=self.kernel_bandwidth,
            softmin_sharpness=self.softmin_sharpness,
            temperature=self.tau_max if temperature is None else temperature,
        )


@dataclass
class Posterior:
    """Per-target-event responsibilities over {spontaneous, rule 1..H}."""

    q: np.ndarray
    event_offsets: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        if np.any(self.q < 0):
            raise ValidationError("responsibilities must be non-negative")
        if np.any(np.abs(self.q.sum(axis=1) - 1.0) > 1e-10):
            raise ValidationError("responsibility rows must sum to 1")

    def rows_for_sequence(self, s: int) -> np.ndarray:
        return self.q[self.event_offsets[s]:self.event_offsets[s + 1]]


@dataclass
class FitResult:
    params: HardParams
    rule_set: RuleSet
    posteriors: Posterior
    elbo_trace: list
    diagnostics: dict
    selection_weights: np.ndarray
    relation_simplices: np.ndarray
    catalog: PredicateCatalog
    config: TrainConfig


def responsibilities_from_densities(prior, densities) -> np.ndarray:
    """Posterior rows from component priors and per-event densities.

    Computed in the log domain with max subtraction; components with
    zero joint mass get exactly zero responsibility.
    """
    prior = np.asarray(prior, dtype=np.float64)
    densities = np.atleast_2d(np.asarray(densities, dtype=np.float64))
    with np.errstate(divide="ignore"):
        lj = np.log(prior)[None, :] + np.log(densities)
    top = lj.max(axis=1)
    if not np.all(np.isfinite(top)):
        bad = int(np.flatnonzero(~np.isfinite(top))[0])
        raise NumericsError(f"event {bad}: zero density under every component")
    q = np.exp(lj - top[:, None])
    q /= q.sum(axis=1, keepdims=True)
    return q


def e_step(grid: CorpusGrid, params: HardParams, rules: RuleSet, tolerance: float) -> Posterior:
    """Exact posterior responsibilities under the hard model."""
    q = grid.posterior(params, rules, tolerance)
    return Posterior(q=q, event_offsets=grid.event_offsets)


def m_step_pi(posterior: Posterior) -> np.ndarray:
    """Closed-form prior update: column means of the responsibilities."""
    return posterior.q.mean(axis=0)


def m_step_continuous(grid, posterior, rules, base_rate, rule_weights, cfg):
    """Ascend the expected complete-data log-likelihood in log-parameters.

    Component densities here are the hard ones that produced the
    E-step, so together with the closed-form prior update the EM bound
    cannot decrease.  Steps that would lower the objective are halved
    (up to a few times) and a non-finite objective aborts with the last
    finite iterate.
    """
    q = posterior.q
    n0 = float(q[:, 0].sum())
    sum0 = float((q[:, 0] * grid.event_dt).sum())
    nh = q[:, 1:].sum(axis=0)
    occ = np.empty((grid.n_events, len(rules)))
    for h, rule in enumerate(rules):
        phi = grid.feature_segments(rule, cfg.time_tolerance)
        occ[:, h] = grid.occupied_lengths(phi)
    sh = (q[:, 1:] * occ).sum(axis=0)

    def objective(b, g):
        val = n0 * np.log(b) - b * sum0
        active = nh > 0
        val += float(np.sum(nh[active] * np.log(g[active]) - g[active] * sh[active]))
        return val

    b = float(base_rate)
    g = np.asarray(rule_weights, dtype=np.float64).copy()
    trace = [objective(b, g)]
    for _ in range(cfg.param_steps):
        grad_b = (n0 - b * sum0) / max(n0, 1e-12)
        grad_g = np.where(nh > 0, (nh - g * sh) / np.maximum(nh, 1e-12), 0.0)
        step = cfg.lr_params
        for _attempt in range(8):
            b_new = b * np.exp(step * grad_b)
            g_new = g * np.exp(step * grad_g)
            val = objective(b_new, g_new)
            if np.isfinite(val) and val >= trace[-1] - 1e-12:
                b, g = b_new, g_new
                trace.append(val)
                break
            step *= 0.5
        else:
            log.warning("continuous M-step: no ascent step found, keeping last iterate")
            break
    return b, g, trace


def anneal_tau(cfg: TrainConfig, inner_step: int, num_steps: int | None = None) -> float:
    """Geometric temperature schedule from tau_max down to tau_min.

    Spans one phase budget and restarts from tau_max on the next EM
    iteration.
    """
    if num_steps is None:
        num_steps = cfg.w_phase_steps
    if inner_step < 0 or inner_step >= num_steps:
        raise ValidationError("annealing step outside the phase budget")
    if num_steps == 1:
        return cfg.tau_min
    frac = inner_step / (num_steps - 1)
    return float(cfg.tau_max ** (1.0 - frac) * cfg.tau_min ** frac)


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of the trailing axis onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    d = v.shape[-1]
    u = -np.sort(-v, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    scale = np.arange(1, d + 1, dtype=np.float64)
    cond = u - css / scale > 0
    rho = d - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1)
    return np.maximum(v - theta, 0.0)


def _effective_pairs(weights_row, cfg, num_real, pair_index):
    cols = hard_top_k_indices(weights_row, cfg.max_rule_length)
    real = [int(c) for c in cols if c < num_real]
    pairs = []
    for i, u in enumerate(real):
        for v in real[i + 1:]:
            a, b = (u, v) if u < v else (v, u)
            pairs.append((pair_index[(a, b)], (a, b)))
    return pairs


def m_step_rules(grid, posterior, params, weights, alphas, cfg, rng, pair_index):
    """Two-phase stochastic update of the rule structure.

    Phase 1 updates the selection weights with temporal relations
    forced inactive, sampling a fresh relaxed top-K per step at the
    annealed temperature.  Phase 2 freezes the selection and ascends
    the relation simplices with projection back onto the simplex.
    """
    num_rules, num_cols = weights.shape
    num_real = grid.num_columns
    objective = SoftObjective(
        grid, posterior.q, params.prior, cfg.max_rule_length, cfg.num_dummies,
        cfg.soft_context(), cfg.time_tolerance,
    )
    base_rate = float(params.base_rate)
    rule_weights = np.asarray(params.rule_weights, dtype=np.float64)
    no_pairs = [[] for _ in range(num_rules)]
    grad_norm_w = 0.0
    for step in range(cfg.w_phase_steps):
        tau = anneal_tau(cfg, step, cfg.w_phase_steps)
        grad_w = np.zeros_like(weights)
        for _draw in range(cfg.gumbel_samples):
            selection = np.empty_like(weights)
            jacobians = []
            for h in range(num_rules):
                if cfg.deterministic_relaxation:
                    keys = np.log(weights[h])
                else:
                    keys = gumbel_keys_from_uniforms(weights[h], rng.random(num_cols))
                row, jac = relaxed_top_k_with_jacobian(keys, cfg.max_rule_length, tau)
                selection[h] = row
                jacobians.append(jac)
            _, grads = objective.evaluate(
                selection, alphas, no_pairs, base_rate, rule_weights,
                want_grads=True, relations_active=False,
            )
            for h in range(num_rules):
                grad_w[h] += (grads["selection"][h] @ jacobians[h]) / weights[h]
        grad_w /= cfg.gumbel_samples
        if not np.all(np.isfinite(grad_w)):
            raise NumericsError("non-finite gradient for selection weights")
        weights = np.maximum(weights + cfg.lr_selection * grad_w, _WEIGHT_FLOOR)
        grad_norm_w = float(np.linalg.norm(grad_w))

    pairs_per_rule = [
        _effective_pairs(weights[h], cfg, num_real, pair_index) for h in range(num_rules)
    ]
    selection = np.empty_like(weights)
    for h in range(num_rules):
        selection[h] = relaxed_top_k(np.log(weights[h]), cfg.max_rule_length, cfg.tau_min)
    grad_norm_a = 0.0
    for _step in range(cfg.alpha_phase_steps):
        _, grads = objective.evaluate(
            selection, alphas, pairs_per_rule, base_rate, rule_weights,
            want_grads=True, relations_active=True,
        )
        grad_a = grads["alphas"]
        if not np.all(np.isfinite(grad_a)):
            raise NumericsError("non-finite gradient for relation simplices")
        alphas = project_to_simplex(alphas + cfg.lr_relations * grad_a)
        grad_norm_a = float(np.linalg.norm(grad_a))
    return weights, alphas, selection, {
        "selection_grad_norm": grad_norm_w,
        "relation_grad_norm": grad_norm_a,
    }


def harden(weights, alphas, catalog: PredicateCatalog, cfg: TrainConfig,
           pair_index=None) -> RuleSet:
    """Extract a discrete rule set from trained weights and simplices.

    Per rule: keep the K largest selection weights (ties break toward
    the lower column index), drop selected dummy columns, and emit the
    argmax relation for each surviving pair unless it is None.  A rule
    whose top-K is all dummies comes out empty (degenerate).
    """
    body_cols = catalog.body_indices
    num_real = len(body_cols)
    if pair_index is None:
        _, pair_index = all_real_pairs(num_real)
    out = []
    for h in range(weights.shape[0]):
        cols = hard_top_k_indices(weights[h], cfg.max_rule_length)
        real = [int(c) for c in cols if c < num_real]
        relations = {}
        for i, u in enumerate(real):
            for v in real[i + 1:]:
                a, b = (u, v) if u < v else (v, u)
                rel = _RELATION_ORDER[int(np.argmax(alphas[h, pair_index[(a, b)]]))]
                if rel is not Relation.NONE:
                    relations[(body_cols[a], body_cols[b])] = rel
        out.append(Rule(body=tuple(body_cols[c] for c in real), relations=relations))
    return RuleSet(tuple(out))


def hardening_report(rule_set: RuleSet) -> dict:
    """Degenerate (empty) rules and exact duplicates, for diagnostics."""
    degenerate = [h for h, rule in enumerate(rule_set) if not rule.body]
    seen = {}
    duplicates = []
    for h, rule in enumerate(rule_set):
        if rule in seen:
            duplicates.append((seen[rule], h))
        else:
            seen[rule] = h
    return {"degenerate": degenerate, "duplicates": duplicates}


def initial_params(grid: CorpusGrid, num_rules: int) -> HardParams:
    """Spontaneous-fit base rate, equal rule weights, uniform prior."""
    base = grid.n_events / float(grid.event_dt.sum())
    return HardParams(
        base_rate=base,
        rule_weights=np.full(num_rules, base),
        prior=np.full(num_rules + 1, 1.0 / (num_rules + 1)),
    )


def fit(sequences, catalog: PredicateCatalog, cfg: TrainConfig,
        rng: np.random.Generator | None = None,
        initial_rules: RuleSet | None = None) -> FitResult:
    """Run the full EM loop on a corpus.

    Deterministic given ``cfg.seed`` (or a caller-supplied generator).
    Convergence is declared when the observed-data log-likelihood under
    the hardened rules changes by less than ``elbo_tol`` between
    iterations; running out of iterations is flagged, not an error.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    grid = CorpusGrid(sequences, catalog)
    num_real = grid.num_columns
    if cfg.max_rule_length > num_real + cfg.num_dummies:
        raise ValidationError("max_rule_length exceeds the number of selection columns")
    num_cols = num_real + cfg.num_dummies
    _, pair_index = all_real_pairs(num_real)
    n_pairs = max(len(pair_index), 1)

    params = initial_params(grid, cfg.num_rules)
    weights = np.ones((cfg.num_rules, num_cols)) + rng.uniform(
        0.0, cfg.init_jitter, size=(cfg.num_rules, num_cols)
    )
    alphas = np.full((cfg.num_rules, n_pairs, 4), 0.25)
    if initial_rules is not None:
        if len(initial_rules) != cfg.num_rules:
            raise ValidationError("initial rule set length must equal num_rules")
        rules = initial_rules
    else:
        rules = harden(weights, alphas, catalog, cfg, pair_index)

    trace = []
    per_iter = []
    converged = False
    posterior = None
    for iteration in range(cfg.em_max_iters):
        posterior = e_step(grid, params, rules, cfg.time_tolerance)
        prior = m_step_pi(posterior)
        base, gamma, param_trace = m_step_continuous(
            grid, posterior, rules, params.base_rate, params.rule_weights, cfg
        )
        params = HardParams(base_rate=base, rule_weights=gamma, prior=prior)
        info = {"iteration": iteration, "param_objective": param_trace[-1]}
        if cfg.num_rules > 0 and not cfg.freeze_rules and initial_rules is None:
            weights, alphas, _, rule_info = m_step_rules(
                grid, posterior, params, weights, alphas, cfg, rng, pair_index
            )
            rules = harden(weights, alphas, catalog, cfg, pair_index)
            info.update(rule_info)
        info["tau_range"] = (cfg.tau_max, cfg.tau_min)
        loglik = grid.observed_log_likelihood(params, rules, cfg.time_tolerance)
        trace.append(loglik)
        info["log_likelihood"] = loglik
        per_iter.append(info)
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) < cfg.elbo_tol:
            converged = True
            break

    posterior = e_step(grid, params, rules, cfg.time_tolerance)
    report = hardening_report(rules)
    diagnostics = {
        "converged": converged,
        "iterations": len(trace),
        "per_iteration": per_iter,
        "degenerate_rules": report["degenerate"],
        "duplicate_rules": report["duplicates"],
        "n_events": grid.n_events,
        "sum_interarrival": float(grid.event_dt.sum()),
        "mean_interarrival": float(grid.event_dt.mean()),
    }
    if not converged:
        log.info("EM stopped at the iteration cap without meeting elbo_tol")
    return FitResult(
        params=params,
        rule_set=rules,
        posteriors=posterior,
        elbo_trace=trace,
        diagnostics=diagnostics,
        selection_weights=weights,
        relation_simplices=alphas,
        catalog=catalog,
        config=cfg,
    )


def ranked_component_posteriors(seq, params, rules, catalog, tolerance) -> list:
    """Per-event (component, probability) lists sorted by probability.

    Component 0 is "spontaneous"; component h >= 1 refers to rule h.
    Equal probabilities break toward the lower component index.
    """
    grid = CorpusGrid([seq], catalog)
    q = grid.posterior(params, rules, tolerance)
    ranked = []
    for row in q:
        order = sorted(range(row.size), key=lambda z: (-row[z], z))
        ranked.append([(z, float(row[z])) for z in order])
    return ranked


def explain(seq, fit_result: FitResult, tolerance: float | None = None) -> list:
    """Ranked component posteriors per target event of one sequence."""
    if tolerance is None:
        tolerance = fit_result.config.time_tolerance
    return ranked_component_posteriors(
        seq, fit_result.params, fit_result.rule_set, fit_result.catalog, tolerance
    )
