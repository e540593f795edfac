"""Latent temporal-logic rule discovery with mixture temporal point processes."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    CorpusFormatError,
    NumericsError,
    RuleTppError,
    ValidationError,
)
from .events import (
    EventSequence,
    PredicateCatalog,
    last_occurrence_before,
    load_catalog,
    load_sequences,
    save_sequences,
)
from .grid import CorpusGrid
from .metrics import (
    EvalReport,
    assignment_cosine,
    baseline_event_time_mae,
    encode_rule_vector,
    event_time_mae,
    jaccard,
    parameter_mae,
    predict_next_event_time,
    rule_equal,
)
from .relaxation import (
    SoftContext,
    SoftObjective,
    expected_complete_loglik,
    gumbel_keys,
    gumbel_keys_from_uniforms,
    objective_gradients,
    relaxed_top_k,
    soft_intensity,
    soft_relation,
    soft_static_feature,
    soft_temporal_factor,
)
from .rules import (
    HardParams,
    Relation,
    Rule,
    RuleSet,
    component_event_likelihood,
    feature_change_points,
    ground_feature,
    ground_relation,
    hard_intensity,
    rules_from_json,
    rules_to_json,
    sequence_log_likelihood,
)
from .simulate import (
    GroundTruth,
    first_arrival_exact,
    load_labels,
    save_labels,
    simulate_corpus,
    simulate_sequence,
)
from .trainer import (
    FitResult,
    Posterior,
    TrainConfig,
    anneal_tau,
    e_step,
    explain,
    fit,
    harden,
    hardening_report,
    m_step_continuous,
    m_step_pi,
    m_step_rules,
    project_to_simplex,
    responsibilities_from_densities,
)
