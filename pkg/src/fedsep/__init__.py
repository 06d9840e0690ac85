"""Simulator and analysis library for federated learning under non-uniform,
correlated client participation with a minimum-separation constraint."""

__version__ = "0.1.0"

from .chain import (
    AvailabilityProfile,
    ChainConfig,
    ChainState,
    HistoryWindow,
    OrderedBatch,
    make_profile,
    power_law_profile,
    sample_next_batch,
)
from .errors import FedsepError, FeasibilityError, NumericalError, ValidationError
from .exact import (
    ExactChain,
    chain_period,
    column_sums,
    distance_to_uniform,
    enumerate_exact_chain,
    export_exact_chain,
    export_marginal,
    marginal_participation,
    mixing_time,
    state_count,
    stationary_distribution,
    tv_decay,
)
from .montecarlo import (
    EvolutionEstimate,
    FrequencyEstimator,
    MarginalEstimate,
    estimate_pi,
    estimator_error_trace,
    export_estimate,
    marginal_evolution,
    mean_estimator_error_trace,
)
from .objectives import (
    GroupMap,
    Problem,
    SyntheticDataset,
    SyntheticSpec,
    contiguous_groups,
    dataset_problem,
    generate_synthetic,
    global_metrics,
    group_problem,
    load_dataset,
    make_synthetic_dataset,
    quadratic_toy,
    save_dataset,
    weighted_toy_minimizer,
)
from .sim import (
    HyperParams,
    RunTrace,
    export_trace,
    run_debiased_fedavg,
    run_fedavg,
    run_known_pi,
    run_oracle_uniform,
)
