"""Model-growth toolkit: operators for widening and deepening small
decoder-only transformers, function-preservation verification, desk-scale
training comparisons, and the empirical scaling arithmetic around them.
"""

from .errors import (
    CheckpointError,
    CorpusReadError,
    GrowkitError,
    InputError,
    PatternError,
    TrainingDiverged,
    UnreachableTargetError,
)
from .growth import (
    GrowthPlan,
    MaskSet,
    apply_plan,
    connection_rate,
    gradual_plan,
    grow_depth_stack,
    grow_depth_zero,
    grow_learn,
    grow_random_masked,
    grow_width_direct,
    grow_width_zero,
    inject_noise,
    mask_schedule,
    parse_stack_pattern,
    stack_by_pattern,
)
from .laws import (
    IsoflopFit,
    LossGapFit,
    PowerLawFit,
    fit_isoflop,
    fit_loss_gap,
    fit_power_law,
    guideline_d,
    guideline_g,
    predict_loss,
    speedup,
)
from .model import (
    Gradients,
    ModelConfig,
    ParameterSet,
    backward,
    forward,
    init_params,
    lm_loss,
    rmsnorm,
)
from .trainer import (
    LossCurve,
    TokenStream,
    TrainConfig,
    flops,
    load_corpus,
    lr_at,
    make_synthetic_corpus,
    nonembed_params,
    run_gradual_experiment,
    run_growth_experiment,
    train,
)
from .verify import FpReport, fp_deviation, grad_check

__version__ = "0.1.0"
