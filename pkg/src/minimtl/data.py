"""Synthetic multi-task datasets and batching for both input settings."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .tasks import TaskSpec, classification, regression
from .tensor import Tensor

NOISE_VAR = 0.01


@dataclass
class TaskDataset:
    task: TaskSpec
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if len(self.inputs) < 1:
            raise ValueError(f"{self.task.name}: dataset is empty")
        if len(self.inputs) != len(self.targets):
            raise ValueError(f"{self.task.name}: {len(self.inputs)} inputs but {len(self.targets)} targets")

    @property
    def name(self) -> str:
        return self.task.name

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass
class Batch:
    inputs: list[Tensor]
    targets: list[np.ndarray]
    single_input: bool

    @property
    def model_input(self):
        return self.inputs[0] if self.single_input else self.inputs

    @property
    def sizes(self) -> list[int]:
        return [len(y) for y in self.targets]


def teacher_vectors(num_tasks: int, dim: int, conflict: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Unit teacher vectors whose pairwise cosine is 1 - 2 * conflict where attainable.

    T vectors can share a pairwise cosine no lower than -1/(T-1); lower targets
    are clamped there. With dim < T + 1 there is no room for the construction
    and the vectors are random.
    """
    if not 0.0 <= conflict <= 1.0:
        raise ValueError(f"conflict must lie in [0, 1], got {conflict}")
    T = num_tasks
    rho = 1.0 - 2.0 * conflict
    if T == 1:
        v = rng.standard_normal(dim)
        return (v / np.linalg.norm(v))[None, :]
    if dim < T + 1:
        v = rng.standard_normal((T, dim))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    q, _ = np.linalg.qr(rng.standard_normal((dim, T + 1)))
    common, spokes = q[:, 0], q[:, 1:].T
    centred = spokes - spokes.mean(axis=0)
    centred /= np.linalg.norm(centred, axis=1, keepdims=True)
    # pairwise cosine of the centred spokes is -1/(T-1)
    a2 = np.clip((rho * (T - 1) + 1) / T, 0.0, 1.0)
    w = math.sqrt(a2) * common + math.sqrt(1 - a2) * centred
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def _features(x: np.ndarray, teacher: str, rng: np.random.Generator) -> np.ndarray:
    if teacher == "linear":
        return x
    if teacher == "mlp":
        d = x.shape[1]
        A = rng.standard_normal((d, d)) / math.sqrt(d)
        return np.tanh(x @ A)
    raise ValueError(f"unknown teacher {teacher!r}; expected 'linear' or 'mlp'")


def _default_tasks(num_tasks: int, num_classes: int) -> list[TaskSpec]:
    if num_classes:
        return [classification(f"task{t}", num_classes) for t in range(num_tasks)]
    return [regression(f"task{t}") for t in range(num_tasks)]


def _targets(task: TaskSpec, feats: np.ndarray, teacher: np.ndarray,
             rng: np.random.Generator) -> np.ndarray:
    if task.is_classification:
        C = task.output_dim
        W = rng.standard_normal((feats.shape[1], C))
        W[:, 0] = teacher  # anchor the first class to the task's teacher direction
        return np.argmax(feats @ W, axis=1).astype(np.float64)
    y = feats @ teacher
    if task.output_dim > 1:
        extra = rng.standard_normal((feats.shape[1], task.output_dim - 1)) / math.sqrt(feats.shape[1])
        y = np.column_stack([y, feats @ extra])
    else:
        y = y[:, None]
    return y + rng.normal(0.0, math.sqrt(NOISE_VAR), size=y.shape)


def gen_single_input(num_tasks: int, n: int, dim: int, seed: int = 0, teacher: str = "linear",
                     conflict: float = 0.5, tasks: Sequence[TaskSpec] | None = None,
                     num_classes: int = 0) -> list[TaskDataset]:
    """Datasets that all share one input matrix (the same array object)."""
    if n < 1 or dim < 1:
        raise ValueError("n and dim must be positive")
    tasks = list(tasks) if tasks is not None else _default_tasks(num_tasks, num_classes)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    teachers = teacher_vectors(len(tasks), dim, conflict, rng)
    x = rng.standard_normal((n, dim))
    feats = _features(x, teacher, rng)
    x.setflags(write=False)
    return [TaskDataset(task, x, _targets(task, feats, teachers[t], rng))
            for t, task in enumerate(tasks)]


def derive_seeds(master_seed: int, num_tasks: int) -> list[tuple[int, int]]:
    """One seed per task; pairs (master, t) are distinct for distinct t."""
    return [(int(master_seed), t) for t in range(num_tasks)]


def gen_multi_input(num_tasks: int, n_per_task: int | Sequence[int], dim: int, seed: int = 0,
                    teacher: str = "linear", conflict: float = 0.5,
                    tasks: Sequence[TaskSpec] | None = None,
                    num_classes: int = 0) -> list[TaskDataset]:
    """Datasets where every task draws its own inputs from a derived seed."""
    tasks = list(tasks) if tasks is not None else _default_tasks(num_tasks, num_classes)
    T = len(tasks)
    sizes = [int(n_per_task)] * T if np.isscalar(n_per_task) else [int(n) for n in n_per_task]
    if len(sizes) != T or min(sizes) < 1 or dim < 1:
        raise ValueError(f"need {T} positive dataset sizes and a positive dim, got {sizes}, {dim}")
    master = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    teachers = teacher_vectors(T, dim, conflict, master)
    # the feature map for the mlp teacher must be common to every task
    feat_seed = np.random.SeedSequence([seed, 0xFEA7])
    out = []
    for t, (task, derived) in enumerate(zip(tasks, derive_seeds(seed, T))):
        rng = np.random.default_rng(np.random.SeedSequence([*derived, 0x1D]))
        x = rng.standard_normal((sizes[t], dim))
        feats = _features(x, teacher, np.random.default_rng(feat_seed))
        x.setflags(write=False)
        out.append(TaskDataset(task, x, _targets(task, feats, teachers[t], rng)))
    return out


def is_single_input(datasets: Sequence[TaskDataset]) -> bool:
    first = datasets[0].inputs
    return all(d.inputs is first or (d.inputs.shape == first.shape and np.array_equal(d.inputs, first))
               for d in datasets[1:])


def train_val_split(datasets: Sequence[TaskDataset], val_fraction: float = 0.2
                    ) -> tuple[list[TaskDataset], list[TaskDataset]]:
    """First (1 - val_fraction) of each dataset trains, the rest validates.

    Datasets sharing one input array keep sharing it after the split.
    """
    train, val = [], []
    cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for d in datasets:
        n = len(d)
        n_val = min(n - 1, max(1, int(round(n * val_fraction)))) if n > 1 else 0
        cut = n - n_val
        key = id(d.inputs)
        if key not in cache:
            cache[key] = (d.inputs[:cut], d.inputs[cut:])
        xtr, xva = cache[key]
        train.append(TaskDataset(d.task, xtr, d.targets[:cut]))
        if n_val:
            val.append(TaskDataset(d.task, xva, d.targets[cut:]))
        else:
            val.append(TaskDataset(d.task, xtr, d.targets[:cut]))
    return train, val


def num_batches(datasets: Sequence[TaskDataset], batch_size: int, single_input: bool) -> int:
    if single_input:
        return math.ceil(len(datasets[0]) / batch_size)
    return max(math.ceil(len(d) / batch_size) for d in datasets)


def batches(datasets: Sequence[TaskDataset], batch_size: int, single_input: bool,
            epoch_seed) -> Iterator[Batch]:
    """Shuffled mini-batches for one epoch.

    Single-input: one index stream shared by every task. Multi-input: an
    independent stream per task; the epoch runs for the longest task and
    shorter tasks wrap around with a fresh shuffle.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not datasets or any(len(d) == 0 for d in datasets):
        raise ValueError("cannot batch an empty dataset")
    seed_words = list(epoch_seed) if isinstance(epoch_seed, (tuple, list)) else [int(epoch_seed)]
    rng = np.random.default_rng(np.random.SeedSequence([*seed_words, 0xBA7C]))
    if single_input:
        x = datasets[0].inputs
        if any(len(d) != len(x) for d in datasets):
            raise ValueError("single-input datasets must have equal sizes")
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            xb = Tensor(x[idx])
            yield Batch([xb] * len(datasets), [d.targets[idx] for d in datasets], True)
        return
    steps = num_batches(datasets, batch_size, False)
    streams = [rng.permutation(len(d)) for d in datasets]
    cursors = [0] * len(datasets)
    for _ in range(steps):
        xs, ys = [], []
        for t, d in enumerate(datasets):
            if cursors[t] >= len(d):
                streams[t] = rng.permutation(len(d))
                cursors[t] = 0
            idx = streams[t][cursors[t]:cursors[t] + batch_size]
            cursors[t] += len(idx)
            xs.append(Tensor(d.inputs[idx]))
            ys.append(d.targets[idx])
        yield Batch(xs, ys, False)


def full_batch(datasets: Sequence[TaskDataset], single_input: bool) -> Batch:
    if single_input:
        x = Tensor(datasets[0].inputs)
        return Batch([x] * len(datasets), [d.targets for d in datasets], True)
    return Batch([Tensor(d.inputs) for d in datasets], [d.targets for d in datasets], False)


# -- CSV exchange --------------------------------------------------------------------

def write_csv(dataset: TaskDataset, path) -> None:
    x = dataset.inputs
    y2 = dataset.targets.reshape(len(dataset), -1)
    ycols = ["y"] if dataset.task.is_classification else [f"y{j}" for j in range(y2.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(x.shape[1])] + ycols)
        for row_x, row_y in zip(x, y2):
            w.writerow([repr(float(v)) for v in row_x] +
                       ([str(int(row_y[0]))] if dataset.task.is_classification
                        else [repr(float(v)) for v in row_y]))


def read_csv(path, task: TaskSpec | None = None) -> TaskDataset:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: no data rows")
    header = rows[0]
    xcols = [i for i, h in enumerate(header) if h.startswith("x")]
    ycols = [i for i, h in enumerate(header) if h.startswith("y")]
    if not xcols or not ycols:
        raise ValueError(f"{path}: header needs x0.. and y columns, got {header}")
    values = np.array([[float(v) for v in r] for r in rows[1:]])
    x, y = values[:, xcols], values[:, ycols]
    if task is None:
        if header[ycols[0]] == "y":
            task = classification(path.stem, int(y.max()) + 1 if y.max() >= 1 else 2)
        else:
            task = regression(path.stem, len(ycols))
    if task.is_classification:
        y = y[:, 0]
    return TaskDataset(task, x, y)


def save_datasets(datasets: Sequence[TaskDataset], directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for d in datasets:
        p = directory / f"{d.name}.csv"
        write_csv(d, p)
        paths.append(p)
    return paths


def load_datasets(directory) -> list[TaskDataset]:
    """Read every ``*.csv`` in ``directory`` (sorted by name). Identical inputs are shared."""
    paths = sorted(Path(directory).glob("*.csv"))
    if not paths:
        raise FileNotFoundError(f"no CSV datasets in {directory}")
    loaded = [read_csv(p) for p in paths]
    first = loaded[0].inputs
    for d in loaded[1:]:
        if d.inputs.shape == first.shape and np.array_equal(d.inputs, first):
            d.inputs = first
    return loaded
