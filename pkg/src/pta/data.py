"""Task datasets: seeded synthetic multitask generators and a CSV loader.

Every dataset carries a fixed train/validation/test split assignment that is
a pure function of the dataset seed, so reruns see identical splits.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

TRAIN, VAL, TEST = 0, 1, 2
_SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}

VARIANCE_FLOOR = 1e-8


@dataclass
class TaskDataset:
    """One task's samples with a per-sample split assignment."""

    task_id: int
    features: np.ndarray          # N x input_dim
    labels: np.ndarray            # N x C floats (regression) or N class indices
    kind: str                     # "regression" | "classification"
    output_dim: int               # C, or the number of classes
    split: np.ndarray             # N entries in {TRAIN, VAL, TEST}

    def __post_init__(self):
        if self.kind not in ("regression", "classification"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        n = self.features.shape[0]
        if self.labels.shape[0] != n or self.split.shape[0] != n:
            raise ValueError(f"features/labels/split lengths disagree: "
                             f"{n}/{self.labels.shape[0]}/{self.split.shape[0]}")

    @property
    def loss_kind(self) -> str:
        return "mse" if self.kind == "regression" else "cross_entropy"

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def split_arrays(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        idx = np.flatnonzero(self.split == _SPLIT_NAMES[which])
        return self.features[idx], self.labels[idx]

    def split_size(self, which: str) -> int:
        return int(np.sum(self.split == _SPLIT_NAMES[which]))


def split_assignment(n: int, ratios: tuple[float, float, float], seed: int) -> np.ndarray:
    """Seeded random split membership with sizes matching ``ratios`` up to rounding."""
    if n < 1:
        raise ValueError("cannot split an empty dataset")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be nonnegative and sum to 1, got {ratios}")
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    assignment = np.full(n, TEST, dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 10]))
    order = rng.permutation(n)
    assignment[order[:n_train]] = TRAIN
    assignment[order[n_train:n_train + n_val]] = VAL
    return assignment


@dataclass(frozen=True)
class SyntheticUniverseSpec:
    """Controls a family of related tasks: labels come from a shared teacher
    blended with per-task private teachers by the mixing coefficient."""

    tasks: int
    input_dim: int
    samples_per_task: tuple[int, ...]  # may differ per task
    teacher_hidden: int = 32
    label_kind: str = "classification"
    classes: int = 4                   # classification only
    regression_dim: int = 1            # regression only
    noise: float = 0.0
    mixing: float = 1.0
    split: tuple[float, float, float] = (0.5, 0.2, 0.3)

    def validate(self) -> None:
        if self.tasks < 1 or self.input_dim < 1 or self.teacher_hidden < 1:
            raise ValueError("tasks, input_dim and teacher_hidden must be >= 1")
        if len(self.samples_per_task) != self.tasks:
            raise ValueError(f"need {self.tasks} per-task sample counts, "
                             f"got {len(self.samples_per_task)}")
        if any(n < 10 for n in self.samples_per_task):
            raise ValueError("each task needs at least 10 samples")
        if not 0.0 <= self.mixing <= 1.0:
            raise ValueError(f"mixing must lie in [0, 1], got {self.mixing}")
        if self.label_kind not in ("regression", "classification"):
            raise ValueError(f"unknown label kind {self.label_kind!r}")
        if self.label_kind == "classification" and self.classes < 2:
            raise ValueError("classification needs at least 2 classes")

    @property
    def output_dim(self) -> int:
        return self.classes if self.label_kind == "classification" else self.regression_dim

    def to_dict(self) -> dict:
        return {
            "tasks": self.tasks,
            "input_dim": self.input_dim,
            "samples_per_task": list(self.samples_per_task),
            "teacher_hidden": self.teacher_hidden,
            "label_kind": self.label_kind,
            "classes": self.classes,
            "regression_dim": self.regression_dim,
            "noise": self.noise,
            "mixing": self.mixing,
            "split": list(self.split),
        }


def universe_spec(tasks: int, input_dim: int, samples_per_task, **kwargs) -> SyntheticUniverseSpec:
    """Convenience constructor accepting a single int for the sample counts."""
    if isinstance(samples_per_task, (int, np.integer)):
        samples_per_task = (int(samples_per_task),) * tasks
    spec = SyntheticUniverseSpec(tasks=tasks, input_dim=input_dim,
                                 samples_per_task=tuple(int(n) for n in samples_per_task),
                                 **kwargs)
    spec.validate()
    return spec


class _Teacher:
    """One hidden-layer tanh network drawn from a seeded rng."""

    def __init__(self, rng: np.random.Generator, input_dim: int, hidden: int):
        self.w = rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=(input_dim, hidden))
        self.b = rng.normal(0.0, 0.1, size=hidden)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.w + self.b)


class SyntheticUniverse:
    """One shared teacher-with-head plus per-task private teachers and heads.

    Task t's pre-label outputs blend the two at the output level:
    mixing * shared_head(shared(x)) + (1 - mixing) * private_head_t(private_t(x)),
    so the mixing coefficient directly controls how much of every task's label
    function is literally shared. Classification labels are the argmax.
    """

    def __init__(self, spec: SyntheticUniverseSpec, seed: int, head_seeds=None):
        spec.validate()
        self.spec = spec
        self.seed = int(seed)
        base = [self.seed, 20]
        shared_rng = np.random.default_rng(np.random.SeedSequence(base + [0]))
        self.shared = _Teacher(shared_rng, spec.input_dim, spec.teacher_hidden)
        self.shared_head = shared_rng.normal(0.0, 1.0 / np.sqrt(spec.teacher_hidden),
                                             size=(spec.teacher_hidden, spec.output_dim))
        self.private = []
        self.heads = []
        for t in range(spec.tasks):
            prng = np.random.default_rng(np.random.SeedSequence(base + [1, t]))
            self.private.append(_Teacher(prng, spec.input_dim, spec.teacher_hidden))
            hseed = head_seeds[t] if head_seeds is not None else None
            hent = base + [2, int(hseed)] if hseed is not None else base + [3, t]
            hrng = np.random.default_rng(np.random.SeedSequence(hent))
            self.heads.append(hrng.normal(0.0, 1.0 / np.sqrt(spec.teacher_hidden),
                                          size=(spec.teacher_hidden, spec.output_dim)))

    def raw_outputs(self, t: int, x: np.ndarray, rng=None) -> np.ndarray:
        mix = self.spec.mixing
        out = mix * (self.shared(x) @ self.shared_head)
        if mix < 1.0:
            out = out + (1.0 - mix) * (self.private[t](x) @ self.heads[t])
        if self.spec.noise > 0.0 and rng is not None:
            out = out + rng.normal(0.0, self.spec.noise, size=out.shape)
        return out

    def label(self, t: int, x: np.ndarray, rng=None) -> np.ndarray:
        out = self.raw_outputs(t, x, rng)
        if self.spec.label_kind == "classification":
            return np.argmax(out, axis=1).astype(np.int64)
        return out

    def datasets(self) -> list[TaskDataset]:
        out = []
        for t in range(self.spec.tasks):
            n = self.spec.samples_per_task[t]
            xrng = np.random.default_rng(np.random.SeedSequence([self.seed, 21, t]))
            x = xrng.normal(0.0, 1.0, size=(n, self.spec.input_dim))
            nrng = np.random.default_rng(np.random.SeedSequence([self.seed, 22, t]))
            y = self.label(t, x, nrng)
            out.append(TaskDataset(
                task_id=t,
                features=x,
                labels=y,
                kind=self.spec.label_kind,
                output_dim=self.spec.output_dim,
                split=split_assignment(n, self.spec.split, seed_for_task(self.seed, t)),
            ))
        return out


def seed_for_task(seed: int, t: int) -> int:
    ss = np.random.SeedSequence([int(seed), 23, int(t)])
    return int(ss.generate_state(1, np.uint64)[0])


def generate_universe(spec: SyntheticUniverseSpec, seed: int, head_seeds=None) -> list[TaskDataset]:
    """Draw the teachers and materialize one dataset per task."""
    return SyntheticUniverse(spec, seed, head_seeds=head_seeds).datasets()


def load_csv_task(path, label_column: str, kind: str = "regression",
                  split: tuple[float, float, float] = (0.5, 0.2, 0.3),
                  seed: int = 0, task_id: int = 0) -> TaskDataset:
    """Load one task from a headered CSV file.

    Features are standardized to zero mean and unit variance using statistics
    from the training split only (variance floored at 1e-8). Classification
    labels may be arbitrary strings; they are mapped to indices in sorted
    order.
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, header row required") from None
        if label_column not in header:
            raise ValueError(f"{path}: label column {label_column!r} not in header {header}")
        label_idx = header.index(label_column)
        feature_cols = [(i, name) for i, name in enumerate(header) if i != label_idx]

        rows = []
        raw_labels = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}: line {lineno}: expected {len(header)} fields, "
                                 f"got {len(row)}")
            feats = []
            for i, name in feature_cols:
                try:
                    feats.append(float(row[i]))
                except ValueError:
                    raise ValueError(f"{path}: line {lineno}: non-numeric value {row[i]!r} "
                                     f"in feature column {name!r}") from None
            rows.append(feats)
            raw_labels.append(row[label_idx])

    if not rows:
        raise ValueError(f"{path}: no data rows")
    features = np.asarray(rows, dtype=np.float64)

    if kind == "classification":
        values = sorted(set(raw_labels))
        index = {v: i for i, v in enumerate(values)}
        labels = np.asarray([index[v] for v in raw_labels], dtype=np.int64)
        output_dim = len(values)
    elif kind == "regression":
        try:
            labels = np.asarray([[float(v)] for v in raw_labels], dtype=np.float64)
        except ValueError:
            raise ValueError(f"{path}: non-numeric value in label column "
                             f"{label_column!r}") from None
        output_dim = 1
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")

    assignment = split_assignment(len(rows), tuple(split), seed)
    train_rows = features[assignment == TRAIN]
    mean = train_rows.mean(axis=0)
    std = np.sqrt(np.maximum(train_rows.var(axis=0), VARIANCE_FLOOR))
    features = (features - mean) / std

    return TaskDataset(task_id=task_id, features=features, labels=labels,
                       kind=kind, output_dim=output_dim, split=assignment)


def export_task_csv(dataset: TaskDataset, path) -> None:
    """Write a dataset back out in the loadable CSV form (f0..fk, label)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"f{i}" for i in range(dataset.input_dim)] + ["label"])
        for i in range(dataset.features.shape[0]):
            row = [repr(float(v)) for v in dataset.features[i]]
            if dataset.kind == "classification":
                row.append(str(int(dataset.labels[i])))
            else:
                row.append(repr(float(dataset.labels[i][0])))
            writer.writerow(row)
