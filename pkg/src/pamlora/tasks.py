"""Synthetic task families sharing one label space.

Rotated clusters: ``n_classes`` centroids on the unit circle, class ``c`` at
angle ``2*pi*c/n_classes + rotation``, Gaussian noise in the plane, then
lifted to ``n_features`` dimensions by a fixed random linear map drawn from
``embed_seed``. Each input is also shifted by a context offset
``context_scale * C @ (cos(rotation), sin(rotation))`` with ``C`` a second
fixed random map, so tasks at nearby angles overlap and distant ones occupy
separable regions. The rotation angle sets how similar two tasks are;
``context_scale=0`` puts every task on the same plane.

Permuted features: a rotated-cluster task with a fixed permutation of the
feature columns applied to every example.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractError
from .rng import make_rng

N_FEATURES = 16


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ContractError(f"features {x.shape} and labels {y.shape} disagree")
        if y.size and y.min() < 0:
            raise ContractError("labels must be non-negative")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx])

    def __eq__(self, other):
        return (isinstance(other, Dataset)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))


@dataclass(frozen=True)
class TaskSpec:
    """Everything needed to regenerate one task's train/eval splits."""

    task_id: str
    angle: float = 0.0
    n_classes: int = 8
    n_train_per_class: int = 100
    n_eval_per_class: int = 50
    noise_std: float = 0.15
    context_scale: float = 1.0
    seed: int = 0
    embed_seed: int = 0
    permutation_seed: int | None = None
    source_id: str | None = None   # noise stream owner; a permuted copy shares its base's
    epochs: int | None = None
    batch_size: int | None = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ContractError(f"n_classes must be >= 2, got {self.n_classes}")
        if not self.noise_std > 0:
            raise ContractError(f"noise_std must be > 0, got {self.noise_std}")
        if self.n_train_per_class < 1 or self.n_eval_per_class < 1:
            raise ContractError("per-class split sizes must be >= 1")

    @property
    def family(self) -> str:
        return "rotated" if self.permutation_seed is None else "permuted"


def embedding(embed_seed: int, n_features: int = N_FEATURES) -> np.ndarray:
    """The fixed 2 -> n_features lift shared by every task built from ``embed_seed``."""
    return make_rng(embed_seed, "embedding").normal(0.0, 1.0, size=(n_features, 2)) / math.sqrt(2)


def context_directions(embed_seed: int, n_features: int = N_FEATURES) -> np.ndarray:
    return make_rng(embed_seed, "context").normal(0.0, 1.0, size=(n_features, 2)) / math.sqrt(2)


def _reduced(angle: float) -> float:
    theta = math.fmod(angle, 2 * math.pi)
    return theta + 2 * math.pi if theta < 0 else theta


def context_offset(spec: "TaskSpec") -> np.ndarray:
    """Input shift that moves round a circle with the rotation angle."""
    theta = _reduced(spec.angle)
    return spec.context_scale * context_directions(spec.embed_seed) @ np.array([math.cos(theta), math.sin(theta)])


def centroids(angle: float, n_classes: int) -> np.ndarray:
    theta = _reduced(angle)
    ang = 2 * math.pi * np.arange(n_classes) / n_classes + theta
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _sample(spec: TaskSpec, split: str, per_class: int) -> Dataset:
    rng = make_rng(spec.seed, "task-data", spec.source_id or spec.task_id, split)
    cents = centroids(spec.angle, spec.n_classes)
    labels = np.repeat(np.arange(spec.n_classes), per_class)
    pts = cents[labels] + rng.normal(0.0, spec.noise_std, size=(labels.size, 2))
    order = rng.permutation(labels.size)
    x = pts[order] @ embedding(spec.embed_seed).T + context_offset(spec)
    return Dataset(x, labels[order])


def gen_rotated_clusters(spec: TaskSpec) -> tuple[Dataset, Dataset]:
    """Materialize ``(train, eval)`` for a rotated-cluster task."""
    train = _sample(spec, "train", spec.n_train_per_class)
    evals = _sample(spec, "eval", spec.n_eval_per_class)
    return train, evals


def feature_permutation(permutation_seed: int, n_features: int = N_FEATURES) -> np.ndarray:
    return make_rng(permutation_seed, "feature-permutation").permutation(n_features)


def permute_features(data: Dataset, perm) -> Dataset:
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(data.n_features)):
        raise ContractError("not a permutation of the feature indices")
    return Dataset(data.features[:, perm], data.labels)


def gen_permuted_features(base: TaskSpec, permutation_seed: int, task_id: str | None = None) -> TaskSpec:
    """Spec for ``base`` with its feature columns shuffled by ``permutation_seed``."""
    return replace(base, task_id=task_id or f"{base.task_id}-perm{permutation_seed}",
                   permutation_seed=permutation_seed, source_id=base.source_id or base.task_id)


def build(spec: TaskSpec) -> tuple[Dataset, Dataset]:
    train, evals = gen_rotated_clusters(spec)
    if spec.permutation_seed is not None:
        perm = feature_permutation(spec.permutation_seed)
        train, evals = permute_features(train, perm), permute_features(evals, perm)
    return train, evals


# sequences and orders ---------------------------------------------------------

DEFAULT_ANGLES_DEG = (0.0, 30.0, 60.0, 120.0, 180.0)
# ids deliberately not in angle order, so the sorted-by-id order differs from the given one
DEFAULT_IDS = ("task-c", "task-a", "task-e", "task-b", "task-d")
PRETRAIN_ANGLE_DEG = -45.0


def default_sequence(seed: int = 0, outlier: bool = False, **overrides) -> list[TaskSpec]:
    tasks = [
        TaskSpec(task_id=tid, angle=math.radians(deg), seed=seed, embed_seed=seed, **overrides)
        for tid, deg in zip(DEFAULT_IDS, DEFAULT_ANGLES_DEG)
    ]
    if outlier:
        tasks.append(gen_permuted_features(tasks[0], permutation_seed=seed + 1, task_id="task-f"))
    return tasks


def pretrain_spec(seed: int = 0, n_train_per_class: int = 500, **overrides) -> TaskSpec:
    return TaskSpec(task_id="pretrain", angle=math.radians(PRETRAIN_ANGLE_DEG), seed=seed,
                    embed_seed=seed, n_train_per_class=n_train_per_class, **overrides)


ORDER_MODES = ("given", "sorted_by_id", "seeded_shuffle")


def fisher_yates(items: list, rng: np.random.Generator) -> list:
    items = list(items)
    for i in range(len(items) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        items[i], items[j] = items[j], items[i]
    return items


def task_order(tasks: list, mode: str, seed: int = 0) -> list:
    if not tasks:
        raise ContractError("need at least one task")
    if mode == "given":
        return list(tasks)
    if mode == "sorted_by_id":
        return sorted(tasks, key=lambda t: t.task_id if isinstance(t, TaskSpec) else t)
    if mode == "seeded_shuffle":
        return fisher_yates(tasks, make_rng(seed, "task-order"))
    raise ContractError(f"unknown order mode {mode!r}; expected one of {ORDER_MODES}")


def task_orders(tasks: list, modes=ORDER_MODES, seed: int = 0) -> list[list]:
    return [task_order(tasks, m, seed) for m in modes]


# csv exchange -----------------------------------------------------------------

def save_dataset_csv(data: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"feature_{j}" for j in range(data.n_features)] + ["label"])
        for x, y in zip(data.features, data.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def load_dataset_csv(path) -> Dataset:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[-1] != "label" or any(h != f"feature_{j}" for j, h in enumerate(header[:-1])):
        raise ContractError(f"unexpected dataset header {header}")
    x = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64).reshape(len(body), len(header) - 1)
    y = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return Dataset(x, y)
