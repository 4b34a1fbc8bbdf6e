"""Component-wise gradient boosting for joint models of longitudinal and
time-to-event data."""

from boostjm.data import (
    DataError,
    JointDataset,
    LongObservation,
    ScalingManifest,
    SurvivalRecord,
    apply_scaling,
    kfold_splits,
    load_csv,
    save_csv,
    split_holdout,
    standardize,
)
from boostjm.jointlik import (
    HazardOverflowError,
    NuisanceParams,
    PredictorState,
    cum_hazard_integral,
    event_cdf,
    gradient_l,
    gradient_ls,
    log_likelihood,
    update_nuisance,
)
from boostjm.baselearners import (
    LearnerBank,
    LinearLearner,
    RandomEffectsLearner,
    TimeLearner,
    default_banks,
)
from boostjm.engine import BoostConfig, FitResult, evaluate_risk, fit, predict_longitudinal
from boostjm.tuning import (
    DEFAULT_GRID,
    EvalSet,
    GridSpec,
    Holdout,
    KFold,
    TuneResult,
    evaluate_grid,
    refine_grid,
    tune_grid,
)
from boostjm.simgen import (
    SimOutput,
    SimScenario,
    StudyReport,
    generate,
    preset,
    replicate_study,
)

__version__ = "0.1.0"
