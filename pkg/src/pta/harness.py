"""Experiment orchestration: config files, seeded sweeps, metrics persistence,
trajectory export and dropout-schedule reports.

Everything a run writes is deterministic given its config and seed; wall-clock
timings go to a separate sidecar file so reruns are byte-identical. Files are
written to a temp path and renamed into place.
"""

from __future__ import annotations

import concurrent.futures
import csv
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .control import ControlPolicy, resolve_policy
from .data import TaskDataset, generate_universe, load_csv_task, universe_spec
from .model import ModelSpec, save_checkpoint
from .optim import OptimizerSettings
from .training import (RunResult, TrainSchedule, evaluate_best, evaluate_selected,
                       execute_run)

CONFIG_SCHEMA_VERSION = 1
METRICS_SCHEMA_VERSION = 1

METRICS_FILE = "metrics.jsonl"
SNAPSHOTS_FILE = "snapshots.jsonl"
CHECKPOINT_FILE = "checkpoint.bin"
TIMING_FILE = "timing.json"
SUMMARY_FILE = "summary.json"


class ConfigError(ValueError):
    """The experiment config is malformed (unknown key, bad value, ...)."""


def _reject_unknown(d: dict, allowed: set, context: str) -> None:
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"{context}: unknown key(s) {extra}; allowed: {sorted(allowed)}")


@dataclass(frozen=True)
class CsvTaskSource:
    path: str
    label_column: str
    label_kind: str


@dataclass(frozen=True)
class DatasetConfig:
    kind: str                       # "synthetic" | "csv"
    synthetic: dict | None
    csv_tasks: tuple[CsvTaskSource, ...]
    split: tuple[float, float, float]
    seed: int

    def load(self) -> list[TaskDataset]:
        if self.kind == "synthetic":
            args = dict(self.synthetic)
            spec = universe_spec(split=self.split, **args)
            return generate_universe(spec, self.seed)
        return [
            load_csv_task(src.path, src.label_column, kind=src.label_kind,
                          split=self.split, seed=self.seed, task_id=t)
            for t, src in enumerate(self.csv_tasks)
        ]


def _parse_dataset(d: dict) -> DatasetConfig:
    if not isinstance(d, dict):
        raise ConfigError("dataset: expected an object")
    kind = d.get("kind")
    if kind == "synthetic":
        allowed = {"kind", "tasks", "input_dim", "samples_per_task", "teacher_hidden",
                   "label_kind", "classes", "regression_dim", "noise", "mixing",
                   "split", "seed"}
        _reject_unknown(d, allowed, "dataset")
        synthetic = {k: d[k] for k in ("tasks", "input_dim", "samples_per_task") if k in d}
        missing = {"tasks", "input_dim", "samples_per_task"} - set(synthetic)
        if missing:
            raise ConfigError(f"dataset: missing required key(s) {sorted(missing)}")
        for k in ("teacher_hidden", "label_kind", "classes", "regression_dim",
                  "noise", "mixing"):
            if k in d:
                synthetic[k] = d[k]
        return DatasetConfig(kind="synthetic", synthetic=synthetic, csv_tasks=(),
                             split=tuple(d.get("split", (0.5, 0.2, 0.3))),
                             seed=int(d.get("seed", 0)))
    if kind == "csv":
        _reject_unknown(d, {"kind", "tasks", "split", "seed"}, "dataset")
        tasks = d.get("tasks")
        if not isinstance(tasks, list) or not tasks:
            raise ConfigError("dataset: csv datasets need a nonempty 'tasks' list")
        sources = []
        for i, t in enumerate(tasks):
            _reject_unknown(t, {"path", "label_column", "label_kind"}, f"dataset.tasks[{i}]")
            sources.append(CsvTaskSource(path=str(t["path"]),
                                         label_column=str(t["label_column"]),
                                         label_kind=str(t.get("label_kind", "regression"))))
        return DatasetConfig(kind="csv", synthetic=None, csv_tasks=tuple(sources),
                             split=tuple(d.get("split", (0.5, 0.2, 0.3))),
                             seed=int(d.get("seed", 0)))
    raise ConfigError(f"dataset: kind must be 'synthetic' or 'csv', got {kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    model: ModelSpec
    decoders: tuple[int, ...]
    policies: tuple[str, ...]
    policy_options: dict
    schedule: TrainSchedule
    optimizer: OptimizerSettings
    seeds: tuple[int, ...]
    snapshots: bool

    def resolve_policy(self, name: str) -> ControlPolicy:
        return resolve_policy(name, **self.policy_options)

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be an object")
        allowed = {"schema_version", "dataset", "model", "decoders", "policies",
                   "policy_options", "schedule", "optimizer", "seeds", "snapshots"}
        _reject_unknown(d, allowed, "config")
        version = d.get("schema_version")
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"config: schema_version must be {CONFIG_SCHEMA_VERSION}, "
                              f"got {version!r}")
        for key in ("dataset", "model", "decoders", "policies", "schedule",
                    "optimizer", "seeds"):
            if key not in d:
                raise ConfigError(f"config: missing required key {key!r}")

        model_d = dict(d["model"])
        _reject_unknown(model_d, {"hidden_layers", "embedding_dim", "input_dim",
                                  "internal_dropout"}, "model")
        _reject_unknown(dict(d["schedule"]),
                        {"meta_iteration_length", "meta_iterations", "batch_size"},
                        "schedule")
        _reject_unknown(dict(d["optimizer"]),
                        {"kind", "learning_rate", "beta1", "beta2", "eps"}, "optimizer")
        dataset = _parse_dataset(d["dataset"])
        if "input_dim" not in model_d:
            if dataset.kind == "synthetic":
                model_d["input_dim"] = dataset.synthetic["input_dim"]
            else:
                raise ConfigError("model: input_dim is required with csv datasets")
        model = ModelSpec.from_dict(model_d)

        decoders = tuple(int(x) for x in d["decoders"])
        if not decoders or any(x < 1 for x in decoders):
            raise ConfigError("decoders: need a nonempty list of counts >= 1")
        policies = tuple(str(p) for p in d["policies"])
        if not policies:
            raise ConfigError("policies: need at least one policy")
        seeds = tuple(int(s) for s in d["seeds"])
        if not seeds:
            raise ConfigError("seeds: need at least one seed")

        policy_options = dict(d.get("policy_options", {}))
        _reject_unknown(policy_options, {"eps_p", "eps_h", "rate_clamp"}, "policy_options")
        if "rate_clamp" in policy_options:
            policy_options["rate_clamp"] = tuple(policy_options["rate_clamp"])

        config = ExperimentConfig(
            dataset=dataset,
            model=model,
            decoders=decoders,
            policies=policies,
            policy_options=policy_options,
            schedule=TrainSchedule.from_dict(d["schedule"]),
            optimizer=OptimizerSettings.from_dict(d["optimizer"]),
            seeds=seeds,
            snapshots=bool(d.get("snapshots", False)),
        )
        for p in policies:
            config.resolve_policy(p)  # fail fast on unknown names/flags
        return config


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return ExperimentConfig.from_dict(raw)


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(f"{path.name}.tmp-{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def run_name(policy: str, n_decoders: int, seed: int) -> str:
    return f"{policy}_D{n_decoders}_seed{seed}"


def _write_run_outputs(run_dir: Path, config: ExperimentConfig, policy_name: str,
                       n_decoders: int, seed: int, datasets: list[TaskDataset],
                       result: RunResult) -> dict:
    run_dir.mkdir(parents=True, exist_ok=True)
    policy = config.resolve_policy(policy_name)

    header = {
        "record": "header",
        "schema_version": METRICS_SCHEMA_VERSION,
        "policy": policy_name,
        "flags": policy.flags,
        "decoders": n_decoders,
        "seed": seed,
        "tasks": len(datasets),
        "hyperperturb": policy.hyperperturb,
    }
    lines = [_dump_json(header)]
    lines.extend(_dump_json({"record": "meta", **m.to_json_dict()}) for m in result.metrics)
    atomic_write_text(run_dir / METRICS_FILE, "\n".join(lines) + "\n")

    if config.snapshots:
        snap_lines = [_dump_json({"record": "snapshot", **s.to_json_dict()})
                      for s in result.snapshots]
        atomic_write_text(run_dir / SNAPSHOTS_FILE, "\n".join(snap_lines) + "\n")

    tmp_ckpt = run_dir / f"{CHECKPOINT_FILE}.tmp-{os.getpid()}"
    save_checkpoint(tmp_ckpt, result.model, result.heads)
    os.replace(tmp_ckpt, run_dir / CHECKPOINT_FILE)

    atomic_write_text(run_dir / TIMING_FILE, _dump_json({
        "meta_iteration_seconds": [m.wall_clock for m in result.metrics],
        "total_seconds": sum(m.wall_clock for m in result.metrics),
    }) + "\n")

    report = evaluate_best(result.model, result.heads, datasets, split="val")
    test_errors = evaluate_selected(result.model, result.heads, datasets,
                                    report.best_decoder, split="test")
    return {
        "policy": policy_name,
        "decoders": n_decoders,
        "seed": seed,
        "run_dir": run_dir.name,
        "best_decoder": report.best_decoder,
        "val_error": float(np.mean(report.error)),
        "test_error": float(np.mean(test_errors)),
        "val_cost": report.aggregate_cost,
    }


def run_single(config: ExperimentConfig, policy_name: str, n_decoders: int, seed: int,
               run_dir) -> dict:
    """Execute one (policy, D, seed) run and persist its outputs."""
    datasets = config.dataset.load()
    result = execute_run(
        datasets,
        config.model,
        n_decoders=n_decoders,
        policy=config.resolve_policy(policy_name),
        schedule=config.schedule,
        optimizer_settings=config.optimizer,
        seed=seed,
        collect_snapshots=config.snapshots,
    )
    return _write_run_outputs(Path(run_dir), config, policy_name, n_decoders, seed,
                              datasets, result)


def _sweep_worker(args) -> dict:
    config_dict, policy_name, n_decoders, seed, run_dir = args
    config = ExperimentConfig.from_dict(config_dict)
    return run_single(config, policy_name, n_decoders, seed, run_dir)


def _mean_std(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(np.mean(arr)), "std": std, "values": [float(v) for v in arr]}


def summarize(rows: list[dict], failures: list[dict]) -> dict:
    """Aggregate per-run rows into one summary row per (policy, D) cell.

    The baseline cell is single-decoder training with the plain policy
    (PTA-I, D=1) when present; improvement columns are absolute
    percentage-point decreases in error relative to it.
    """
    cells: dict[tuple[str, int], list[dict]] = {}
    order: list[tuple[str, int]] = []
    for row in rows:
        key = (row["policy"], row["decoders"])
        if key not in cells:
            cells[key] = []
            order.append(key)
        cells[key].append(row)

    baseline_key = ("PTA-I", 1) if ("PTA-I", 1) in cells else None
    baseline_test = (np.mean([r["test_error"] for r in cells[baseline_key]])
                     if baseline_key else None)

    summary_rows = []
    for key in order:
        runs = cells[key]
        test = _mean_std([r["test_error"] for r in runs])
        val = _mean_std([r["val_error"] for r in runs])
        improvement = (None if baseline_test is None
                       else float((baseline_test - test["mean"]) * 100.0))
        summary_rows.append({
            "policy": key[0],
            "decoders": key[1],
            "seeds": [r["seed"] for r in runs],
            "val_error": val,
            "test_error": test,
            "improvement_pp": improvement,
        })
    return {
        "schema_version": METRICS_SCHEMA_VERSION,
        "baseline": {"policy": "PTA-I", "decoders": 1} if baseline_key else None,
        "rows": summary_rows,
        "failures": failures,
    }


def run_sweep(config: ExperimentConfig, out_dir, jobs: int = 1) -> dict:
    """Run the cross product of policies x decoder counts x seeds.

    Failed runs are recorded and the sweep continues; the summary lists them
    and the CLI exits nonzero if any are present.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    combos = [(p, d, s) for p in config.policies for d in config.decoders
              for s in config.seeds]

    rows: list[dict] = []
    failures: list[dict] = []
    if jobs <= 1:
        for policy, d, seed in combos:
            try:
                rows.append(run_single(config, policy, d, seed,
                                       out / run_name(policy, d, seed)))
            except Exception as e:  # noqa: BLE001 - record and continue
                failures.append({"policy": policy, "decoders": d, "seed": seed,
                                 "error": f"{type(e).__name__}: {e}"})
    else:
        config_dict = _config_to_dict(config)
        args = [(config_dict, p, d, s, str(out / run_name(p, d, s)))
                for p, d, s in combos]
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_sweep_worker, a): a for a in args}
            results: dict[tuple, dict] = {}
            for fut, a in futures.items():
                key = (a[1], a[2], a[3])
                try:
                    results[key] = fut.result()
                except Exception as e:  # noqa: BLE001
                    failures.append({"policy": a[1], "decoders": a[2], "seed": a[3],
                                     "error": f"{type(e).__name__}: {e}"})
            rows = [results[(p, d, s)] for p, d, s in combos if (p, d, s) in results]

    summary = summarize(rows, failures)
    atomic_write_text(out / SUMMARY_FILE, _dump_json(summary) + "\n")
    return summary


def _config_to_dict(config: ExperimentConfig) -> dict:
    dataset: dict = {"kind": config.dataset.kind, "split": list(config.dataset.split),
                     "seed": config.dataset.seed}
    if config.dataset.kind == "synthetic":
        dataset.update(config.dataset.synthetic)
    else:
        dataset["tasks"] = [{"path": s.path, "label_column": s.label_column,
                             "label_kind": s.label_kind} for s in config.dataset.csv_tasks]
    return {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "dataset": dataset,
        "model": config.model.to_dict(),
        "decoders": list(config.decoders),
        "policies": list(config.policies),
        "policy_options": {k: (list(v) if isinstance(v, tuple) else v)
                           for k, v in config.policy_options.items()},
        "schedule": config.schedule.to_dict(),
        "optimizer": config.optimizer.to_dict(),
        "seeds": list(config.seeds),
        "snapshots": config.snapshots,
    }


def read_metrics(run_dir) -> tuple[dict, list[dict]]:
    """Load a run's metrics file: (header, meta-iteration records)."""
    path = Path(run_dir) / METRICS_FILE
    if not path.exists():
        raise FileNotFoundError(f"no metrics file in {run_dir}")
    header = None
    records = []
    with open(path) as f:
        for line in f:
            obj = json.loads(line)
            if obj.get("record") == "header":
                header = obj
            elif obj.get("record") == "meta":
                records.append(obj)
    if header is None:
        raise ValueError(f"{path}: missing header record")
    return header, records


def export_trajectories(run_dir, out_path) -> int:
    """Render a run's decoder snapshots as CSV, one row per
    (meta-iteration, task, decoder); returns the row count."""
    snap_path = Path(run_dir) / SNAPSHOTS_FILE
    if not snap_path.exists():
        raise FileNotFoundError(
            f"{run_dir}: no snapshots found; run with snapshotting enabled")
    rows = []
    with open(snap_path) as f:
        for line in f:
            rows.append(json.loads(line))
    if not rows:
        raise ValueError(f"{snap_path}: snapshot file is empty")
    n_params = len(rows[0]["params"])

    out_path = Path(out_path)
    tmp = out_path.with_name(f"{out_path.name}.tmp-{os.getpid()}")
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["meta_iteration", "task_id", "decoder_index", "cost",
                         "dropout_rate"] + [f"param_{i}" for i in range(n_params)])
        for r in rows:
            cost = r["cost"]
            writer.writerow([r["meta_iteration"], r["task_id"], r["decoder_index"],
                             "" if cost is None else repr(float(cost)),
                             repr(float(r["dropout_rate"]))]
                            + [repr(float(v)) for v in r["params"]])
    os.replace(tmp, out_path)
    return len(rows)


def moving_average(series: list[float], window: int) -> list[float]:
    """Simple moving average; the warm-up prefix averages what is available."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    return [sum(series[max(0, i - window + 1):i + 1]) / min(i + 1, window)
            for i in range(len(series))]


def report_dropout_schedules(run_dir, window: int = 10, require_h: bool = True) -> dict:
    """Per-task mean decoder dropout rate per meta-iteration, plus a smoothed
    series. Errors out when the run did not adapt rates (no hyperperturb)."""
    header, records = read_metrics(run_dir)
    if require_h and not header.get("hyperperturb", False):
        raise ValueError(f"{run_dir}: hyperperturbation was not active in this run")
    if not records:
        raise ValueError(f"{run_dir}: no meta-iteration records")
    n_tasks = header["tasks"]
    tasks = []
    for t in range(n_tasks):
        means = [float(np.mean(rec["dropout_rates"][t])) for rec in records]
        tasks.append({
            "task_id": t,
            "mean_rates": means,
            "smoothed": moving_average(means, window),
        })
    return {
        "window": window,
        "meta_iterations": [rec["meta_iteration"] for rec in records],
        "tasks": tasks,
    }
