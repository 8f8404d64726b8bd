"""Joint multi-decoder training: loss assembly, the meta-iteration loop, and
the three evaluation modes (training loss, best-decoder selection, ensemble).

The reported loss averages over tasks and decoders; the gradient step uses
the same per-decoder losses summed (not averaged) over decoders, so a bank of
D identical decoders trained at rate lr/D reproduces the single-decoder
update at rate lr exactly.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, add_n, backward, scale
from .control import ControlPolicy, control_rng, dec_initialize, dec_update
from .data import TaskDataset
from .model import ModelSpec, SharedModel, TaskHead
from .optim import OptimizerSettings, make_optimizer


class DivergenceError(RuntimeError):
    """A per-decoder loss became non-finite during training."""

    def __init__(self, task_id: int, decoder_index: int, value: float):
        super().__init__(f"non-finite loss {value} for task {task_id}, "
                         f"decoder {decoder_index}")
        self.task_id = task_id
        self.decoder_index = decoder_index


@dataclass(frozen=True)
class TrainSchedule:
    meta_iteration_length: int = 250   # gradient steps per meta-iteration
    meta_iterations: int = 10
    batch_size: int = 32

    def validate(self) -> None:
        if self.meta_iteration_length < 1:
            raise ValueError("meta_iteration_length must be >= 1")
        if self.meta_iterations < 0:
            raise ValueError("meta_iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {"meta_iteration_length": self.meta_iteration_length,
                "meta_iterations": self.meta_iterations,
                "batch_size": self.batch_size}

    @staticmethod
    def from_dict(d: dict) -> "TrainSchedule":
        s = TrainSchedule(
            meta_iteration_length=int(d.get("meta_iteration_length", 250)),
            meta_iterations=int(d.get("meta_iterations", 10)),
            batch_size=int(d.get("batch_size", 32)),
        )
        s.validate()
        return s


@dataclass
class MetricsRecord:
    """One row per meta-iteration of the training loop."""

    meta_iteration: int
    train_loss: float
    costs: list[list[float]]           # [task][decoder] validation loss
    best_decoder: list[int]
    best_cost: list[float]
    val_error: list[float]             # best decoder's error metric per task
    aggregate_cost: float              # mean over tasks of the minimum cost
    dropout_rates: list[list[float]]
    wall_clock: float                  # seconds; kept out of the metrics file

    def to_json_dict(self) -> dict:
        return {
            "meta_iteration": self.meta_iteration,
            "train_loss": _json_float(self.train_loss),
            "costs": [[_json_float(c) for c in row] for row in self.costs],
            "best_decoder": self.best_decoder,
            "best_cost": [_json_float(c) for c in self.best_cost],
            "val_error": [_json_float(e) for e in self.val_error],
            "aggregate_cost": _json_float(self.aggregate_cost),
            "dropout_rates": self.dropout_rates,
        }


def _json_float(x: float):
    return float(x) if math.isfinite(x) else None


def _task_loss(pred: Tensor, labels, loss_kind: str) -> Tensor:
    if loss_kind == "mse":
        return ad.mse_loss(pred, ad.as_tensor(labels))
    return ad.softmax_cross_entropy(pred, labels)


def _decoder_losses(batches, model: SharedModel, heads: list[TaskHead], *,
                    training: bool, independent_dropout: bool, mask_seed) -> list[list[Tensor]]:
    """Per-(task, decoder) batch losses; one embedding pass per task batch."""
    if len(batches) != len(heads):
        raise ValueError(f"got {len(batches)} batches for {len(heads)} heads")
    losses: list[list[Tensor]] = []
    for t, (head, (x, y)) in enumerate(zip(heads, batches)):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] == 0:
            raise ValueError(f"empty batch for task {head.task_id}")
        step_seed = ad.derive_seed(mask_seed, t)
        emb = model.embed(x, training=training, mask_seed=step_seed)
        row = []
        for d in range(head.n_decoders):
            pred = head.decode(emb, d, training=training, mask_seed=step_seed,
                               independent_dropout=independent_dropout)
            loss = _task_loss(pred, y, head.loss_kind)
            if not math.isfinite(loss.item()):
                raise DivergenceError(head.task_id, d, loss.item())
            row.append(loss)
        losses.append(row)
    return losses


def pta_loss(batches, model: SharedModel, heads: list[TaskHead], *,
             training: bool = True, independent_dropout: bool = False,
             mask_seed=0) -> Tensor:
    """The joint loss: mean over tasks and decoders of the per-batch losses."""
    n_decoders = {head.n_decoders for head in heads}
    if len(n_decoders) > 1:
        raise ValueError(f"all heads must share one decoder count, got {sorted(n_decoders)}")
    losses = _decoder_losses(batches, model, heads, training=training,
                             independent_dropout=independent_dropout, mask_seed=mask_seed)
    flat = [loss for row in losses for loss in row]
    return scale(add_n(flat), 1.0 / (len(heads) * n_decoders.pop()))


def train_step(model: SharedModel, heads: list[TaskHead], optimizer, batches, *,
               independent_dropout: bool = False, mask_seed=0) -> float:
    """One joint gradient step; returns the reported (decoder-averaged) loss.

    The backward pass runs on the decoder-sum objective, so frozen decoders
    still shape the shared model's gradient; the optimizer only owns the
    unfrozen parameters.
    """
    losses = _decoder_losses(batches, model, heads, training=True,
                             independent_dropout=independent_dropout, mask_seed=mask_seed)
    flat = [loss for row in losses for loss in row]
    objective = scale(add_n(flat), 1.0 / len(heads))
    optimizer.zero_grad()
    model.zero_grad()
    for head in heads:
        head.zero_grad()
    backward(objective)
    optimizer.step()
    total_decoders = sum(head.n_decoders for head in heads)
    return objective.item() * len(heads) / total_decoders


def trainable_parameters(model: SharedModel, heads: list[TaskHead]):
    params = model.parameters()
    for head in heads:
        params.extend(head.parameters(include_frozen=False))
    return params


def _forward_eval(model: SharedModel, head: TaskHead, x: np.ndarray) -> list[np.ndarray]:
    """All decoder outputs for one batch in evaluation mode (no dropout)."""
    emb = model.embed(x, training=False)
    return [head.decode(emb, d, training=False).values for d in range(head.n_decoders)]


def _loss_value(pred: np.ndarray, labels, loss_kind: str) -> float:
    return _task_loss(Tensor(pred), labels, loss_kind).item()


def _error_value(pred: np.ndarray, labels, kind: str) -> float:
    """Classification error rate, or mse for regression tasks."""
    if kind == "classification":
        return float(np.mean(np.argmax(pred, axis=1) != labels))
    return _loss_value(pred, labels, "mse")


@dataclass
class BestDecoderReport:
    best_decoder: list[int]
    best_cost: list[float]
    error: list[float]       # metric of the selected decoder per task
    aggregate_cost: float    # mean over tasks of the per-task minimum cost


def evaluate_costs(model: SharedModel, heads: list[TaskHead],
                   datasets: list[TaskDataset], split: str = "val") -> list[list[float]]:
    """Per-(task, decoder) loss on a split, evaluation mode."""
    costs = []
    for head, ds in zip(heads, datasets):
        x, y = ds.split_arrays(split)
        if x.shape[0] == 0:
            raise ValueError(f"task {ds.task_id} has no {split} samples")
        preds = _forward_eval(model, head, x)
        costs.append([_loss_value(p, y, head.loss_kind) for p in preds])
    return costs


def evaluate_best(model: SharedModel, heads: list[TaskHead],
                  datasets: list[TaskDataset], split: str = "val") -> BestDecoderReport:
    """Select each task's minimum-cost decoder (lowest index on ties) and report
    its error; the aggregate is the mean over tasks of the per-task minimum."""
    best_decoder, best_cost, error = [], [], []
    for head, ds in zip(heads, datasets):
        x, y = ds.split_arrays(split)
        if x.shape[0] == 0:
            raise ValueError(f"task {ds.task_id} has no {split} samples")
        preds = _forward_eval(model, head, x)
        costs = [_loss_value(p, y, head.loss_kind) for p in preds]
        idx = int(np.argmin(costs))
        best_decoder.append(idx)
        best_cost.append(costs[idx])
        error.append(_error_value(preds[idx], y, ds.kind))
    return BestDecoderReport(best_decoder=best_decoder, best_cost=best_cost, error=error,
                             aggregate_cost=float(np.mean(best_cost)))


def evaluate_selected(model: SharedModel, heads: list[TaskHead],
                      datasets: list[TaskDataset], selection: list[int],
                      split: str = "test") -> list[float]:
    """Error of a pre-selected decoder per task on a split (e.g. holdout error
    of the decoders chosen on the validation split)."""
    out = []
    for head, ds, d in zip(heads, datasets, selection):
        x, y = ds.split_arrays(split)
        emb = model.embed(x, training=False)
        pred = head.decode(emb, d, training=False).values
        out.append(_error_value(pred, y, ds.kind))
    return out


def evaluate_ensemble(model: SharedModel, heads: list[TaskHead],
                      datasets: list[TaskDataset], split: str = "val") -> list[dict]:
    """Per-task loss/error of decoder-averaged predictions."""
    out = []
    for head, ds in zip(heads, datasets):
        x, y = ds.split_arrays(split)
        if x.shape[0] == 0:
            raise ValueError(f"task {ds.task_id} has no {split} samples")
        preds = _forward_eval(model, head, x)
        mean_pred = np.mean(preds, axis=0)
        out.append({"loss": _loss_value(mean_pred, y, head.loss_kind),
                    "error": _error_value(mean_pred, y, ds.kind)})
    return out


class _BatchStream:
    """Seeded minibatch index stream for one task, reshuffled every epoch."""

    def __init__(self, n: int, batch_size: int, seed: int, task_id: int):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.seed = seed
        self.task_id = task_id
        self.epoch = -1
        self.cursor = 0
        self.order = np.empty(0, dtype=np.int64)

    def _reshuffle(self) -> None:
        self.epoch += 1
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, 40, self.task_id, self.epoch]))
        self.order = rng.permutation(self.n)
        self.cursor = 0

    def next_batch(self) -> np.ndarray:
        if self.cursor + self.batch_size > self.order.size:
            self._reshuffle()
        idx = self.order[self.cursor:self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return idx


@dataclass
class TrajectorySnapshot:
    """One decoder's state at the end of a meta-iteration, with the cost it
    was evaluated at. Raw material for trajectory projections."""

    meta_iteration: int
    task_id: int
    decoder_index: int
    params: np.ndarray           # flattened weights then bias
    cost: float
    dropout_rate: float

    def to_json_dict(self) -> dict:
        return {
            "meta_iteration": self.meta_iteration,
            "task_id": self.task_id,
            "decoder_index": self.decoder_index,
            "cost": _json_float(self.cost),
            "dropout_rate": self.dropout_rate,
            "params": [float(v) for v in self.params],
        }


@dataclass
class RunResult:
    model: SharedModel
    heads: list[TaskHead]
    metrics: list[MetricsRecord]
    snapshots: list[TrajectorySnapshot] = field(default_factory=list)


def execute_run(datasets: list[TaskDataset], model_spec: ModelSpec, n_decoders: int,
                policy: ControlPolicy, schedule: TrainSchedule,
                optimizer_settings: OptimizerSettings, seed: int,
                collect_snapshots: bool = False) -> RunResult:
    """The full training loop: decoder initialization, then per meta-iteration
    M joint gradient steps, cost evaluation of every decoder on the validation
    split, an optional trajectory snapshot, and the policy's decoder update.
    """
    schedule.validate()
    model = SharedModel(model_spec, seed=seed)
    heads = [
        TaskHead(ds.task_id, model_spec.embedding_dim, ds.output_dim,
                 n_decoders, ds.loss_kind, seed=seed)
        for ds in datasets
    ]
    dec_initialize(policy, heads, seed)
    optimizer = make_optimizer(trainable_parameters(model, heads), optimizer_settings)

    streams = []
    train_xy = []
    for ds in datasets:
        x, y = ds.split_arrays("train")
        if x.shape[0] == 0:
            raise ValueError(f"task {ds.task_id} has no training samples")
        train_xy.append((x, y))
        streams.append(_BatchStream(x.shape[0], schedule.batch_size, seed, ds.task_id))

    metrics: list[MetricsRecord] = []
    snapshots: list[TrajectorySnapshot] = []
    step = 0
    for meta in range(1, schedule.meta_iterations + 1):
        t0 = time.perf_counter()
        loss_sum = 0.0
        for _ in range(schedule.meta_iteration_length):
            batches = []
            for (x, y), stream in zip(train_xy, streams):
                idx = stream.next_batch()
                batches.append((x[idx], y[idx]))
            loss_sum += train_step(
                model, heads, optimizer, batches,
                independent_dropout=policy.independent_dropout,
                mask_seed=(seed, 41, step))
            step += 1

        costs = evaluate_costs(model, heads, datasets, split="val")
        for head, row in zip(heads, costs):
            for dec, c in zip(head.decoders, row):
                dec.last_cost = c
        report = evaluate_best(model, heads, datasets, split="val")

        if collect_snapshots:
            for head, ds, row in zip(heads, datasets, costs):
                for task in head.snapshot(ds):
                    snapshots.append(TrajectorySnapshot(
                        meta_iteration=meta,
                        task_id=task.task_id,
                        decoder_index=task.decoder_index,
                        params=task.flatten(),
                        cost=row[task.decoder_index],
                        dropout_rate=task.dropout_rate,
                    ))

        record = MetricsRecord(
            meta_iteration=meta,
            train_loss=loss_sum / schedule.meta_iteration_length,
            costs=costs,
            best_decoder=report.best_decoder,
            best_cost=report.best_cost,
            val_error=report.error,
            aggregate_cost=report.aggregate_cost,
            dropout_rates=[[dec.dropout_rate for dec in head.decoders] for head in heads],
            wall_clock=time.perf_counter() - t0,
        )
        metrics.append(record)

        for head, row in zip(heads, costs):
            dec_update(policy, head, row, control_rng(seed, meta, head.task_id))

    return RunResult(model=model, heads=heads, metrics=metrics, snapshots=snapshots)
