"""Scikit-learn estimators wrapping multi-decoder training for a single task.

``PTAClassifier`` and ``PTARegressor`` follow the usual conventions
(``fit``/``predict``/``score``, ``get_params``/``set_params``, attributes
with trailing underscores), so they compose with pipelines, ``clone`` and
cross-validation. Decoder costs are measured on an internal validation split
carved out of the training data.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .control import resolve_policy
from .data import TaskDataset, split_assignment
from .model import ModelSpec
from .optim import OptimizerSettings
from .training import TrainSchedule, evaluate_best, execute_run


class _BasePTAEstimator(BaseEstimator):
    def __init__(self, hidden_layer_sizes=(32,), activation="relu", embedding_dim=16,
                 n_decoders=4, policy="PTA-F", meta_iterations=10,
                 meta_iteration_length=50, batch_size=32, optimizer="adam",
                 learning_rate=1e-3, internal_dropout=0.0, validation_fraction=0.2,
                 random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.embedding_dim = embedding_dim
        self.n_decoders = n_decoders
        self.policy = policy
        self.meta_iterations = meta_iterations
        self.meta_iteration_length = meta_iteration_length
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.internal_dropout = internal_dropout
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _fit_task(self, X, y, kind: str, output_dim: int):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError(f"validation_fraction must lie in (0, 1), "
                             f"got {self.validation_fraction}")
        seed = int(self.random_state)
        ratios = (1.0 - self.validation_fraction, self.validation_fraction, 0.0)
        dataset = TaskDataset(
            task_id=0,
            features=np.asarray(X, dtype=np.float64),
            labels=y,
            kind=kind,
            output_dim=output_dim,
            split=split_assignment(X.shape[0], ratios, seed),
        )
        spec = ModelSpec(
            input_dim=X.shape[1],
            hidden_layers=tuple((int(u), self.activation) for u in self.hidden_layer_sizes),
            embedding_dim=int(self.embedding_dim),
            internal_dropout=float(self.internal_dropout),
        )
        result = execute_run(
            [dataset],
            spec,
            n_decoders=int(self.n_decoders),
            policy=resolve_policy(self.policy),
            schedule=TrainSchedule(
                meta_iteration_length=int(self.meta_iteration_length),
                meta_iterations=int(self.meta_iterations),
                batch_size=int(self.batch_size),
            ),
            optimizer_settings=OptimizerSettings(kind=self.optimizer,
                                                 learning_rate=float(self.learning_rate)),
            seed=seed,
        )
        report = evaluate_best(result.model, result.heads, [dataset], split="val")
        self.model_ = result.model
        self.head_ = result.heads[0]
        self.best_decoder_ = report.best_decoder[0]
        self.validation_cost_ = report.best_cost[0]
        self.metrics_ = result.metrics
        self.n_features_in_ = X.shape[1]
        return self

    def _decision_values(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        emb = self.model_.embed(X, training=False)
        return self.head_.decode(emb, self.best_decoder_, training=False).values


class PTAClassifier(ClassifierMixin, _BasePTAEstimator):
    """Classifier trained with a bank of linear decoders under a decoder-control
    policy; predictions come from the decoder with the lowest validation cost."""

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        classes, encoded = np.unique(y, return_inverse=True)
        if classes.shape[0] < 2:
            raise ValueError("classifier needs at least two classes")
        self.classes_ = classes
        self._fit_task(X, encoded.astype(np.int64), "classification", classes.shape[0])
        return self

    def predict_log_odds(self, X) -> np.ndarray:
        return self._decision_values(X)

    def predict_proba(self, X) -> np.ndarray:
        z = self._decision_values(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self._decision_values(X), axis=1)]


class PTARegressor(RegressorMixin, _BasePTAEstimator):
    """Regressor counterpart; supports single- and multi-output targets."""

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, multi_output=True)
        y = np.asarray(y, dtype=np.float64)
        self._y_was_1d_ = y.ndim == 1
        if self._y_was_1d_:
            y = y[:, None]
        self._fit_task(X, y, "regression", y.shape[1])
        return self

    def predict(self, X):
        pred = self._decision_values(X)
        return pred[:, 0] if self._y_was_1d_ else pred
