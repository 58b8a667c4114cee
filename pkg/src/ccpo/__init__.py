"""Cost-aware base/guide agent orchestration with conformal coverage guarantees."""

from .calibrator import CalibratorState, batch_calibrate, online_update, step_size
from .env import (
    Action,
    EnvConfig,
    Observation,
    RolloutTree,
    Transition,
    answer_universe,
    coverage_indicator,
    enumerate_branches,
    observe,
    prediction_set,
    step,
)
from .numerics import MLP, FisherOperator, conjugate_gradient, kl_categorical
from .optimizer import (
    SurrogateGradients,
    TrustRegionConfig,
    coverage_surrogate,
    line_search,
    surrogate_gradients,
    trust_region_step,
)
from .policy import (
    ConformalPolicy,
    conformal_set,
    sample_action,
    score,
    soft_stochastic_conformal,
    softmask,
    stochastic_conformal,
)
from .trainer import (
    MetricsRecord,
    RunConfig,
    evaluate,
    run_baseline,
    run_ccpo,
)
from .traces import (
    PriceTable,
    RoundRecord,
    SyntheticConfig,
    Trace,
    generate_synthetic,
    load_traces,
    save_traces,
    step_cost,
    validate_trace,
)
from .vtrace import CriticPair, advantages, critic_update, importance_weights, vtrace_targets

__version__ = "0.1.0"
