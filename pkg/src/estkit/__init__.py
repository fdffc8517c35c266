"""estkit: an estimator-style training harness on a tiny numpy graph runtime.

Declarative feature columns, reusable layers and heads, canned model
families, checkpoint-driven train/evaluate/predict/export, and a simulated
parameter-server cluster for desk-scale experiments.
"""
from .canned import (
    CANNED_TYPES,
    DNNClassifier,
    DNNLinearCombinedClassifier,
    DNNRegressor,
    LinearClassifier,
    LinearRegressor,
)
from .errors import (
    ConfigError,
    CorruptCheckpointError,
    ExecutionError,
    NoCheckpointError,
    TrainingDivergedError,
)
from .estimator import Estimator, RunConfig
from .execution import Executor
from .experiment import (
    ChecksumMismatchError,
    ClusterRuntime,
    ClusterSpec,
    Experiment,
    train_and_evaluate,
)
from .export import ServedModel, load_saved_model
from .graph import (
    GLOBAL_STEP_NAME,
    Graph,
    Tensor,
    Variable,
    constant_initializer,
    get_default_graph,
    glorot_uniform_initializer,
    random_uniform_initializer,
    zeros_initializer,
)
from .heads import (
    EstimatorSpec,
    Head,
    binary_head,
    multi_class_head,
    multi_head,
    regression_head,
)
from .hooks import (
    CheckpointSaverHook,
    Hook,
    LoggerHook,
    RunContext,
    StepCounterHook,
    StopAtStepHook,
    TimeBasedStopHook,
    run_loop_with_hooks,
)
from .metrics import MetricPair
from .modes import Mode
from .optimizers import Adagrad, Optimizer, Sgd, gradients, joint_train_op

__all__ = [
    "Adagrad",
    "CANNED_TYPES",
    "CheckpointSaverHook",
    "ChecksumMismatchError",
    "ClusterRuntime",
    "ClusterSpec",
    "ConfigError",
    "CorruptCheckpointError",
    "DNNClassifier",
    "DNNLinearCombinedClassifier",
    "DNNRegressor",
    "Estimator",
    "EstimatorSpec",
    "ExecutionError",
    "Executor",
    "Experiment",
    "GLOBAL_STEP_NAME",
    "Graph",
    "Head",
    "Hook",
    "LinearClassifier",
    "LinearRegressor",
    "LoggerHook",
    "MetricPair",
    "Mode",
    "NoCheckpointError",
    "Optimizer",
    "RunConfig",
    "RunContext",
    "ServedModel",
    "Sgd",
    "StepCounterHook",
    "StopAtStepHook",
    "Tensor",
    "TimeBasedStopHook",
    "TrainingDivergedError",
    "Variable",
    "binary_head",
    "constant_initializer",
    "get_default_graph",
    "glorot_uniform_initializer",
    "gradients",
    "joint_train_op",
    "load_saved_model",
    "multi_class_head",
    "multi_head",
    "random_uniform_initializer",
    "regression_head",
    "run_loop_with_hooks",
    "train_and_evaluate",
    "zeros_initializer",
]

__version__ = "0.1.0"
