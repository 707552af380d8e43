"""Task and episode data layer.

Covers the three ways tasks enter the system: the synthetic biased-task
generator (two Gaussians with a protected-group mean shift), CSV ingestion
of crime-style multi-task tables, and K-shot support/query episode
sampling. Standardization statistics travel with the task set so metrics
can be reported on the original target scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .validation import check_finite


@dataclass
class Batch:
    """Column-wise view of records: features, target, protected label."""

    X: np.ndarray
    y: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        self.s = np.asarray(self.s).ravel().astype(np.int64)
        if not (len(self.X) == len(self.y) == len(self.s)):
            raise ValueError("X, y and s must have the same number of records")

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def model_inputs(self, include_protected: bool = True) -> np.ndarray:
        """Network input matrix; optionally appends s as the last column."""
        if not include_protected:
            return self.X
        return np.column_stack([self.X, self.s.astype(np.float64)])

    def take(self, idx) -> "Batch":
        return Batch(self.X[idx], self.y[idx], self.s[idx])


@dataclass
class Task(Batch):
    """One data-generating unit; requires both protected groups present."""

    task_id: object = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        super().__post_init__()
        if len(self) < 2:
            raise ValueError(f"task {self.task_id!r} has fewer than 2 records")
        if len(np.unique(self.s)) < 2:
            raise ValueError(f"task {self.task_id!r} has a single protected group")
        check_finite(f"task {self.task_id!r}", self.X, self.y)


@dataclass(frozen=True)
class ScaleStats:
    """Training-split moments used to (de-)standardize features and target."""

    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: float
    target_std: float

    def to_raw_y(self, y):
        return np.asarray(y, dtype=np.float64) * self.target_std + self.target_mean

    def to_std_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.target_mean) / self.target_std

    def to_dict(self) -> dict:
        return {
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "target_mean": self.target_mean,
            "target_std": self.target_std,
        }

    @classmethod
    def from_dict(cls, d) -> "ScaleStats":
        return cls(
            np.asarray(d["feature_mean"], dtype=np.float64),
            np.asarray(d["feature_std"], dtype=np.float64),
            float(d["target_mean"]),
            float(d["target_std"]),
        )


@dataclass
class TaskSet:
    """Train/validation/test task partitions plus standardization state.

    ``stats`` is None while the data sit on their raw scale; after
    :func:`standardize_taskset` it holds the mapping back to raw units.
    """

    train: list[Task]
    val: list[Task]
    test: list[Task]
    n_features: int
    stats: ScaleStats | None = None
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Task]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def all_tasks(self) -> list[Task]:
        return [*self.train, *self.val, *self.test]


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings for biased regression tasks.

    Targets come from two Gaussians with shared sigma; the protected group's
    mean is shifted up by a per-task delta drawn from ``shift_range``.
    Features are uniform on [0, 1]^n and enter the target through per-task
    weights drawn once from [-1, 1]^n, so the task is a learnable regression
    and the injected group gap equals delta in expectation.
    """

    n_features: int = 7
    base_mean_range: tuple[float, float] = (0.0, 10.0)
    shift_range: tuple[float, float] = (1.0, 5.0)
    sigma: float = 1.0
    records_per_task: int = 1000
    train_tasks: int = 10000
    val_tasks: int = 1000
    test_tasks: int = 1000
    group_balance: float = 0.5

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.shift_range[0] <= 0 or self.shift_range[1] < self.shift_range[0]:
            raise ValueError("shift_range must be positive and ordered")
        if not 0.0 < self.group_balance < 1.0:
            raise ValueError("group_balance must be in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        kwargs = dict(d)
        for key in ("base_mean_range", "shift_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def _synthetic_task(spec: SyntheticSpec, task_id, rng: np.random.Generator) -> Task:
    m, n = spec.records_per_task, spec.n_features
    mu0 = rng.uniform(*spec.base_mean_range)
    delta = rng.uniform(*spec.shift_range)
    beta = rng.uniform(-1.0, 1.0, size=n)
    s = (rng.random(m) < spec.group_balance).astype(np.int64)
    while len(np.unique(s)) < 2:  # vanishing probability for realistic m
        s = (rng.random(m) < spec.group_balance).astype(np.int64)
    X = rng.random((m, n))
    y = mu0 + delta * s + X @ beta + rng.normal(0.0, spec.sigma, size=m)
    return Task(X, y, s, task_id=task_id, meta={"mu0": mu0, "delta": delta, "beta": beta})


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> TaskSet:
    """Seeded task set on the raw target scale (train, then val, then test)."""
    rng = np.random.default_rng(seed)
    counts = (spec.train_tasks, spec.val_tasks, spec.test_tasks)
    splits, next_id = [], 0
    for count in counts:
        tasks = []
        for _ in range(count):
            tasks.append(_synthetic_task(spec, next_id, rng))
            next_id += 1
        splits.append(tasks)
    return TaskSet(*splits, n_features=spec.n_features, meta={"source": "synthetic"})


def standardize_taskset(ts: TaskSet) -> TaskSet:
    """Standardize features and target to zero mean / unit variance.

    Moments come from the training split only. Constant features get their
    std clamped to 1 (with a warning), which zeroes the column.
    """
    if ts.stats is not None:
        raise ValueError("task set is already standardized")
    if not ts.train:
        raise ValueError("cannot standardize without training tasks")
    X = np.concatenate([t.X for t in ts.train], axis=0)
    y = np.concatenate([t.y for t in ts.train])
    fmean, fstd = X.mean(axis=0), X.std(axis=0)
    tmean, tstd = float(y.mean()), float(y.std())
    degenerate = fstd < 1e-12
    if degenerate.any():
        warnings.warn(
            f"{int(degenerate.sum())} constant feature column(s); std clamped to 1",
            stacklevel=2,
        )
        fstd = np.where(degenerate, 1.0, fstd)
    if tstd < 1e-12:
        warnings.warn("constant target; std clamped to 1", stacklevel=2)
        tstd = 1.0
    stats = ScaleStats(fmean, fstd, tmean, tstd)

    def transform(task: Task) -> Task:
        return Task(
            (task.X - fmean) / fstd,
            (task.y - tmean) / tstd,
            task.s,
            task_id=task.task_id,
            meta=task.meta,
        )

    return TaskSet(
        [transform(t) for t in ts.train],
        [transform(t) for t in ts.val],
        [transform(t) for t in ts.test],
        n_features=ts.n_features,
        stats=stats,
        meta=dict(ts.meta),
    )


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass(frozen=True)
class CsvSchema:
    """Column roles and split sizes for a multi-task CSV table."""

    task_column: str
    target_column: str
    protected_column: str
    feature_columns: tuple[str, ...]
    protected_threshold: float = 0.70
    splits: tuple[int, int, int] = (0, 0, 0)  # tasks per (train, val, test)

    @classmethod
    def from_dict(cls, d: dict) -> "CsvSchema":
        splits = d.get("splits", {})
        if isinstance(splits, dict):
            splits = (splits.get("train", 0), splits.get("val", 0), splits.get("test", 0))
        return cls(
            task_column=d["task_column"],
            target_column=d["target_column"],
            protected_column=d["protected_column"],
            feature_columns=tuple(d["feature_columns"]),
            protected_threshold=float(d.get("protected_threshold", 0.70)),
            splits=tuple(splits),
        )


def load_csv(path, schema: CsvSchema, seed: int = 0) -> TaskSet:
    """Load a task-per-group CSV table into a standardized task set.

    The protected column may already be binary or hold percentages, which
    are binarized at ``protected_threshold`` (strictly greater). Tasks with
    a single protected group are dropped with a warning and recorded in
    ``meta["dropped_tasks"]``. Split membership uses a seeded shuffle of
    the surviving task ids.
    """
    df = pd.read_csv(path)
    needed = [schema.task_column, schema.target_column, schema.protected_column]
    needed += list(schema.feature_columns)
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise ValueError(f"missing column(s) in {path}: {missing}")
    numeric = [schema.target_column, schema.protected_column, *schema.feature_columns]
    for col in numeric:
        try:
            df[col] = pd.to_numeric(df[col])
        except (ValueError, TypeError) as err:
            raise ValueError(f"non-numeric cell in column {col!r}: {err}") from None

    raw_s = df[schema.protected_column].to_numpy(dtype=np.float64)
    if np.isin(raw_s, (0.0, 1.0)).all():
        df["_s"] = raw_s.astype(np.int64)
    else:
        df["_s"] = (raw_s > schema.protected_threshold).astype(np.int64)

    tasks, dropped = [], []
    for task_id in sorted(df[schema.task_column].unique().tolist()):
        rows = df[df[schema.task_column] == task_id]
        s = rows["_s"].to_numpy()
        if len(rows) < 2 or len(np.unique(s)) < 2:
            dropped.append(task_id)
            continue
        tasks.append(
            Task(
                rows[list(schema.feature_columns)].to_numpy(dtype=np.float64),
                rows[schema.target_column].to_numpy(dtype=np.float64),
                s,
                task_id=task_id,
            )
        )
    if dropped:
        warnings.warn(
            f"dropped {len(dropped)} task(s) with a single protected group: "
            f"{dropped[:5]}{'...' if len(dropped) > 5 else ''}",
            stacklevel=2,
        )

    n_train, n_val, n_test = schema.splits
    if n_train + n_val + n_test > len(tasks):
        raise ValueError(
            f"splits ask for {n_train + n_val + n_test} tasks, only {len(tasks)} available"
        )
    order = np.random.default_rng(seed).permutation(len(tasks))
    picked = [tasks[i] for i in order]
    raw = TaskSet(
        picked[:n_train],
        picked[n_train : n_train + n_val],
        picked[n_train + n_val : n_train + n_val + n_test],
        n_features=len(schema.feature_columns),
        meta={"source": str(path), "dropped_tasks": dropped},
    )
    return standardize_taskset(raw)


def export_taskset_csv(ts: TaskSet, outdir) -> list[str]:
    """Write one CSV per split with columns task_id, s, y, x1..xn."""
    from pathlib import Path

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    cols = [f"x{i + 1}" for i in range(ts.n_features)]
    for name in ("train", "val", "test"):
        tasks = ts.split(name)
        frames = []
        for t in tasks:
            frame = pd.DataFrame(t.X, columns=cols)
            frame.insert(0, "y", t.y)
            frame.insert(0, "s", t.s)
            frame.insert(0, "task_id", t.task_id)
            frames.append(frame)
        path = outdir / f"{name}.csv"
        table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
            columns=["task_id", "s", "y", *cols]
        )
        table.to_csv(path, index=False, lineterminator="\n")
        written.append(str(path))
    return written


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    """K-shot support set and 2K query set drawn from one task."""

    task_id: object
    support: Batch
    query: Batch
    support_idx: np.ndarray
    query_idx: np.ndarray


def sample_episode(task: Task, k: int, rng: np.random.Generator) -> Episode:
    """Stratified support/query split: K support and 2K query records,
    disjoint, with both protected groups present in each."""
    if k < 2:
        raise ValueError(f"K must be >= 2 so both groups fit in the support, got {k}")
    if len(task) < 3 * k:
        raise ValueError(
            f"task {task.task_id!r} has {len(task)} records, needs >= {3 * k} for K={k}"
        )
    pos = np.flatnonzero(task.s == 1)
    neg = np.flatnonzero(task.s == 0)
    if pos.size < 2 or neg.size < 2:
        raise ValueError(
            f"task {task.task_id!r} needs >= 2 records per protected group"
        )
    pos = rng.permutation(pos)
    neg = rng.permutation(neg)
    # one record of each group is pinned into support and into query,
    # the rest fills up at random
    pool = rng.permutation(np.concatenate([pos[2:], neg[2:]]))
    support_idx = np.concatenate([[pos[0], neg[0]], pool[: k - 2]])
    query_idx = np.concatenate([[pos[1], neg[1]], pool[k - 2 : 3 * k - 4]])
    return Episode(
        task.task_id,
        task.take(support_idx),
        task.take(query_idx),
        support_idx,
        query_idx,
    )
