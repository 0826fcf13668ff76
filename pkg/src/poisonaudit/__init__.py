"""poisonaudit: audit and boost a training pipeline's natural resistance to
backdoor data poisoning.

The toolkit measures resistance via a deliberately easy "primitive"
backdoor sub-task (the poisoning fraction at which its accuracy takes off
is the resistance point) and searches hyperparameter space for
configurations that push that point higher at minimal cost to main-task
accuracy.
"""

__version__ = "0.1.0"

from .data import Dataset, SplitResult, load_csv, load_idx, shard_users, split_holdout, synth_blobs
from .nn import (
    ConvLayer,
    ModelParams,
    ModelSpec,
    OptState,
    TrainConfig,
    evaluate,
    init_model,
    loss_and_grad,
    lr_at,
    optimizer_step,
    predict,
    regularized_gradient,
    train,
)
from .poison import (
    PoisonSpec,
    PoisonedView,
    Trigger,
    apply_pattern,
    check_trigger_sanity,
    create_patch,
    make_backdoor,
    poison_eval_set,
    sample_indices,
    wrap_dataset,
)
from .resistance import (
    PoisonCurve,
    ResistancePoint,
    build_curve,
    exp_grid,
    resistance_point,
)
from .search import (
    ParamDomain,
    PipelineData,
    PipelineSettings,
    SearchSpace,
    TrialResult,
    alpha_from_tradeoff,
    asha_run,
    asha_select,
    importance,
    joint_score,
    pareto_frontier,
    run_pipeline,
    run_trial,
    sample_point,
    table3_space,
)
from .federated import FedConfig, FedRunResult, fed_resistance_curve, fed_train

__all__ = [name for name in dir() if not name.startswith("_")]
