"""Optimal early-stopping and restart policies learned from observation curves."""

from .curves import (
    SUCCESS,
    Curve,
    CurveDataError,
    CurveDataset,
    DiscretizedRun,
    QuantileDiscretizer,
    SuccessSpec,
    SyntheticFamily,
    discretize,
    fit_discretizer,
    generate_synthetic,
    load_curves,
    population_medians,
    success_time,
)
from .policy import (
    ANY,
    FittedRule,
    FixedThresholdRule,
    PolicyStats,
    StoppingTree,
    SuccessUnreachable,
    WeightedTrie,
    brute_force_optimal,
    build_trie,
    delta,
    evaluate_rule,
    find_stopping_rule,
    fixed_threshold_rule,
)
from .simulator import (
    RunSwitchingPolicy,
    SimResult,
    StaticRestartPolicy,
    exact_restart_expectation,
    simulate_time_to_success,
)

__version__ = "0.1.0"
