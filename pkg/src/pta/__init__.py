"""Multi-decoder training for single- and multitask learning.

A shared model feeds a bank of linear decoders per task; decoder-control
policies (freeze, perturb, greedy copy, ...) steer the bank between
meta-iterations. Includes scikit-learn estimators, an experiment harness, and
executable verification of the underlying training-dynamics algebra.
"""

from .autodiff import (GraphError, ShapeError, Tensor, add, add_n, backward, dropout,
                       matmul, mse_loss, relu, scale, softmax_cross_entropy, tanh)
from .control import (ControlPolicy, POLICY_NAMES, dec_initialize, dec_update,
                      policy_from_flags, policy_from_name, resolve_policy)
from .data import (SyntheticUniverse, SyntheticUniverseSpec, TaskDataset,
                   export_task_csv, generate_universe, load_csv_task, universe_spec)
from .estimator import PTAClassifier, PTARegressor
from .model import (Decoder, ModelSpec, PseudoTask, SharedModel, TaskHead,
                    load_checkpoint, save_checkpoint, snapshot_decoders)
from .optim import Adam, OptimizerSettings, Sgd, make_optimizer
from .training import (DivergenceError, MetricsRecord, RunResult, TrainSchedule,
                       TrajectorySnapshot, evaluate_best, evaluate_costs,
                       evaluate_ensemble, evaluate_selected, execute_run, pta_loss,
                       train_step)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "ControlPolicy",
    "Decoder",
    "DivergenceError",
    "GraphError",
    "MetricsRecord",
    "ModelSpec",
    "OptimizerSettings",
    "POLICY_NAMES",
    "PTAClassifier",
    "PTARegressor",
    "PseudoTask",
    "RunResult",
    "Sgd",
    "ShapeError",
    "SharedModel",
    "SyntheticUniverse",
    "SyntheticUniverseSpec",
    "TaskDataset",
    "TaskHead",
    "Tensor",
    "TrainSchedule",
    "TrajectorySnapshot",
    "add",
    "add_n",
    "backward",
    "dec_initialize",
    "dec_update",
    "dropout",
    "evaluate_best",
    "evaluate_costs",
    "evaluate_ensemble",
    "evaluate_selected",
    "execute_run",
    "export_task_csv",
    "generate_universe",
    "load_checkpoint",
    "load_csv_task",
    "make_optimizer",
    "matmul",
    "mse_loss",
    "policy_from_flags",
    "policy_from_name",
    "pta_loss",
    "relu",
    "resolve_policy",
    "save_checkpoint",
    "scale",
    "snapshot_decoders",
    "softmax_cross_entropy",
    "tanh",
    "train_step",
    "universe_spec",
]
