"""Per-task adapter training with optional distillation, replay and L2 anchoring."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ContractError, TrainingDiverged
from .model import BaseModel, LoraAdapter, forward_adapted, forward_tensors
from .rng import make_rng
from .tasks import Dataset

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 0.0
    label_smoothing: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ContractError(f"epochs must be a positive integer, got {self.epochs}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ContractError(f"batch_size must be a positive integer, got {self.batch_size}")
        if not self.lr > 0:
            raise ContractError(f"lr must be > 0, got {self.lr}")
        if not self.weight_decay >= 0:
            raise ContractError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.label_smoothing < 1:
            raise ContractError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")


class ReplayBuffer:
    """Reservoir-sampled memory of ``(x, y, task_id)`` examples."""

    def __init__(self, capacity: int = 200, seed: int = 0):
        if capacity < 1:
            raise ContractError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.features: list[np.ndarray] = []
        self.labels: list[int] = []
        self.task_ids: list = []
        self.seen = 0
        self._rng = make_rng(seed, "replay-reservoir")

    def __len__(self):
        return len(self.labels)

    def add(self, x, y, task_id) -> None:
        self.seen += 1
        if len(self) < self.capacity:
            self.features.append(np.array(x, dtype=np.float64))
            self.labels.append(int(y))
            self.task_ids.append(task_id)
            return
        j = int(self._rng.integers(0, self.seen))
        if j < self.capacity:
            self.features[j] = np.array(x, dtype=np.float64)
            self.labels[j] = int(y)
            self.task_ids[j] = task_id

    def add_batch(self, xs, ys, task_id) -> None:
        for x, y in zip(xs, ys):
            self.add(x, y, task_id)

    def sample(self, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        k = min(k, len(self))
        idx = np.sort(rng.choice(len(self), size=k, replace=False)) if k else np.zeros(0, int)
        x = np.array([self.features[i] for i in idx]).reshape(k, -1)
        y = np.array([self.labels[i] for i in idx], dtype=np.int64)
        return x, y


def replay_mix(x, y, buffer: ReplayBuffer | None, ratio: float, rng: np.random.Generator):
    """Append ``ceil(ratio * len(batch))`` buffered examples to the batch."""
    x = np.asarray(x)
    y = np.asarray(y)
    if buffer is None or len(buffer) == 0 or ratio <= 0:
        return x, y
    bx, by = buffer.sample(math.ceil(ratio * len(y)), rng)
    if len(by) == 0:
        return x, y
    return np.concatenate([x, bx]), np.concatenate([y, by])


@dataclass
class DistillConfig:
    teacher: LoraAdapter
    weight: float = 1.0
    temperature: float = 2.0

    def __post_init__(self):
        if self.weight < 0:
            raise ContractError(f"distillation weight must be >= 0, got {self.weight}")
        if not self.temperature > 0:
            raise ContractError(f"temperature must be > 0, got {self.temperature}")
        self.teacher = self.teacher.copy()


@dataclass
class ReplayConfig:
    buffer: ReplayBuffer
    ratio: float = 0.25

    def __post_init__(self):
        if not 0 <= self.ratio <= 1:
            raise ContractError(f"replay ratio must be in [0, 1], got {self.ratio}")


@dataclass
class AnchorConfig:
    anchor: np.ndarray
    weight: float = 0.0

    def __post_init__(self):
        if self.weight < 0:
            raise ContractError(f"anchor weight must be >= 0, got {self.weight}")
        self.anchor = np.array(self.anchor, dtype=np.float64)
        self.anchor.setflags(write=False)


def lwf_loss(student_logits, teacher_logits, temperature: float = 2.0) -> T.Tensor:
    """``T^2 * mean_rows KL(softmax(teacher/T) || softmax(student/T))``."""
    if not temperature > 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    if not isinstance(student_logits, T.Tensor):
        student_logits = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    s = T.as_tensor(student_logits)
    t = teacher_logits.data if isinstance(teacher_logits, T.Tensor) else teacher_logits
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    if s.shape != t.shape:
        raise ContractError(f"logit shapes differ: {s.shape} vs {t.shape}")
    log_pt = T._log_softmax(t / temperature)
    pt = np.exp(log_pt)
    log_ps = T.log_softmax(T.scale(s, 1.0 / temperature))
    cross = T.tsum(T.mul(pt, log_ps))
    entropy_term = float(np.sum(pt * log_pt))
    kl = T.scale(T.add(cross, -entropy_term), -1.0 / s.shape[0])
    return T.scale(kl, temperature**2)


def anchor_penalty(current, anchor, weight: float) -> float:
    c = np.asarray(current, dtype=np.float64)
    a = np.asarray(anchor, dtype=np.float64)
    if c.shape != a.shape:
        raise ContractError(f"length mismatch: {c.size} vs {a.size}")
    d = c - a
    return float(weight * np.dot(d, d))


def _anchor_term(factor_tensors, anchor: np.ndarray, weight: float) -> T.Tensor:
    total, pos = None, 0
    for b, a in factor_tensors:
        for p in (b, a):
            ref = anchor[pos:pos + p.size].reshape(p.shape)
            pos += p.size
            d = T.sub(p, ref)
            term = T.tsum(T.mul(d, d))
            total = term if total is None else T.add(total, term)
    return T.scale(total, weight)


@dataclass
class TrainResult:
    adapter: LoraAdapter
    log: list = field(default_factory=list)   # (task_index, step, loss, aligned_count)

    @property
    def losses(self) -> list[float]:
        return [row[2] for row in self.log]


def train_task(base: BaseModel, adapter: LoraAdapter, data: Dataset, cfg: TrainConfig,
               distill: DistillConfig | None = None, replay: ReplayConfig | None = None,
               anchor: AnchorConfig | None = None,
               hook: Callable[[int, LoraAdapter], int] | None = None,
               task_index: int = 0, task_id=None) -> TrainResult:
    """Train ``adapter`` in place on ``data``; base weights are never touched.

    ``hook(step, adapter)`` runs after every optimizer step (steps count from
    1) and returns how many entries it realigned.
    """
    if len(data) == 0:
        raise ContractError("cannot train on an empty dataset")
    order_rng = make_rng(cfg.seed, "batch-order", task_index)
    replay_rng = make_rng(cfg.seed, "replay-draw", task_index)
    states = [(T.AdamState.zeros_like(b), T.AdamState.zeros_like(a)) for b, a in adapter.factors]
    n = len(data)
    log = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x, y = data.features[idx], data.labels[idx]
            if replay is not None:
                x, y = replay_mix(x, y, replay.buffer, replay.ratio, replay_rng)
            teacher_logits = None
            if distill is not None:
                teacher_logits = forward_adapted(base, distill.teacher, x)
            step += 1
            with T.ComputationRecord() as rec:
                params = [(rec.watch(T.Tensor._wrap(b)), rec.watch(T.Tensor._wrap(a)))
                          for b, a in adapter.factors]
                logits = forward_tensors(base, params, x)
                loss = T.softmax_cross_entropy(logits, y, cfg.label_smoothing)
                if distill is not None:
                    loss = T.add(loss, T.scale(lwf_loss(logits, teacher_logits, distill.temperature),
                                               distill.weight))
                if anchor is not None:
                    loss = T.add(loss, _anchor_term(params, anchor.anchor, anchor.weight))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(step, value, task_index)
            grads = T.grad(loss, rec)
            new_factors, new_states = [], []
            for (pb, pa), (sb, sa) in zip(params, states):
                nb, sb = T.adam_step(pb, grads[pb.id], sb, cfg.lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
                na, sa = T.adam_step(pa, grads[pa.id], sa, cfg.lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
                if cfg.weight_decay:
                    nb = nb - cfg.lr * cfg.weight_decay * pb.data
                    na = na - cfg.lr * cfg.weight_decay * pa.data
                new_factors.append((nb, na))
                new_states.append((sb, sa))
            adapter.factors = new_factors
            states = new_states
            if replay is not None and epoch == 0:
                replay.buffer.add_batch(data.features[idx], data.labels[idx], task_id)
            aligned = hook(step, adapter) if hook is not None else 0
            log.append((task_index, step, value, aligned))
    return TrainResult(adapter, log)


def write_step_log(rows, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_index", "step", "loss", "aligned_count"])
        for t, s, loss, c in rows:
            w.writerow([t, s, repr(float(loss)), c])
    tmp.replace(path)
