"""Meta-learning with drift-tolerant subnetwork projection."""

from .core import (
    Batch,
    ModelConfig,
    ParamVector,
    cosine_distance,
    euclidean_distance,
    init_params,
    interpolate,
    loss_and_grad,
    sgd_step,
)
from .errors import (
    ConfigError,
    DivergenceError,
    InsufficientSamplesError,
    LayoutMismatchError,
    NonFiniteLossError,
    RadiusUnresolvedError,
    ShapeError,
    ZeroNormError,
)
from .evaluation import (
    ComparisonPolicy,
    EvalSettings,
    ResultLedger,
    bwt_metrics,
    few_shot_eval_gradient,
    few_shot_eval_ncm,
    run_finetune_baseline,
    run_joint_baseline,
    zero_shot_eval,
)
from .kernels import BACKEND
from .memory import MemoryBuffer, MemoryEntry
from .meta import (
    HyperParams,
    base_params,
    interpolation_drift_curve,
    measure_subspace_radius,
    recovery_check,
    sample_drift_profile,
    task_meta_loss,
    train_space,
)
from .online import (
    ExpansionConfig,
    SearchConfig,
    adaptive_beta,
    expand_space,
    interpolate_subnetworks,
    mode_switch,
    nearest_subnetwork,
    remove_subnetwork,
)
from .tasks import SuiteSpec, Task, TaskSuite, episode_sampler, generate_task_suite, group_tasks

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Batch",
    "ComparisonPolicy",
    "ConfigError",
    "DivergenceError",
    "EvalSettings",
    "ExpansionConfig",
    "HyperParams",
    "InsufficientSamplesError",
    "LayoutMismatchError",
    "MemoryBuffer",
    "MemoryEntry",
    "ModelConfig",
    "NonFiniteLossError",
    "ParamVector",
    "RadiusUnresolvedError",
    "ResultLedger",
    "SearchConfig",
    "ShapeError",
    "SuiteSpec",
    "Task",
    "TaskSuite",
    "ZeroNormError",
    "adaptive_beta",
    "base_params",
    "bwt_metrics",
    "cosine_distance",
    "episode_sampler",
    "euclidean_distance",
    "expand_space",
    "few_shot_eval_gradient",
    "few_shot_eval_ncm",
    "generate_task_suite",
    "group_tasks",
    "init_params",
    "interpolate",
    "interpolate_subnetworks",
    "interpolation_drift_curve",
    "loss_and_grad",
    "measure_subspace_radius",
    "mode_switch",
    "nearest_subnetwork",
    "recovery_check",
    "remove_subnetwork",
    "run_finetune_baseline",
    "run_joint_baseline",
    "sample_drift_profile",
    "sgd_step",
    "task_meta_loss",
    "train_space",
    "zero_shot_eval",
]

