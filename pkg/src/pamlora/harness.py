"""Continual-learning loop, accuracy matrix and transfer metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import AlignmentHook, sign_conflict_rate
from .config import (ALIGN_METHODS, ER_METHODS, LWF_METHODS, MERGE_METHODS, REG_METHODS, RunConfig,
                     alignment_config, merge_strategy)
from .errors import ContractError, TrainingDiverged
from .merging import merge_adapters, merge_report
from .model import (BaseModel, LoraAdapter, forward_adapted, init_adapter, pretrain_base,
                    save_adapter)
from .rng import make_rng
from .tasks import Dataset, TaskSpec, build, default_sequence, pretrain_spec, task_order
from .trainer import (AnchorConfig, DistillConfig, ReplayBuffer, ReplayConfig, train_task,
                      write_step_log)


# accuracy matrix & metrics ------------------------------------------------------

@dataclass
class AccuracyMatrix:
    """``acc[t, i]``: accuracy on task i after finishing task t (0-based, post-merge).

    ``pre_merge[t]`` is task t's accuracy right after training, before merging;
    ``zero_shot[i]`` is the frozen base model's accuracy. Missing entries are NaN.
    """

    acc: np.ndarray
    zero_shot: np.ndarray | None = None
    pre_merge: np.ndarray | None = None

    @classmethod
    def empty(cls, n_tasks: int) -> "AccuracyMatrix":
        return cls(np.full((n_tasks, n_tasks), np.nan), np.full(n_tasks, np.nan),
                   np.full(n_tasks, np.nan))

    def __post_init__(self):
        self.acc = np.asarray(self.acc, dtype=np.float64)
        if self.acc.ndim != 2 or self.acc.shape[0] != self.acc.shape[1]:
            raise ContractError(f"accuracy matrix must be square, got {self.acc.shape}")
        n = self.acc.shape[0]
        self.zero_shot = np.full(n, np.nan) if self.zero_shot is None else np.asarray(self.zero_shot, float)
        self.pre_merge = np.full(n, np.nan) if self.pre_merge is None else np.asarray(self.pre_merge, float)
        vals = np.concatenate([self.acc.ravel(), self.zero_shot, self.pre_merge])
        vals = vals[~np.isnan(vals)]
        if np.any((vals < 0) | (vals > 1)):
            raise ContractError("accuracies must lie in [0, 1]")

    @property
    def n_tasks(self) -> int:
        return self.acc.shape[0]

    @property
    def post_merge(self) -> np.ndarray:
        return np.diag(self.acc).copy()


def _need(values, what):
    values = np.asarray(values)
    if values.size == 0 or np.any(np.isnan(values)):
        raise ContractError(f"accuracy matrix incomplete: {what}")
    return values


def metric_acc(m: AccuracyMatrix) -> float:
    return float(np.mean(_need(m.acc[-1], "final row")))


def metric_bwt(m: AccuracyMatrix) -> float:
    T = m.n_tasks
    if T < 2:
        raise ContractError("BWT needs at least two tasks")
    final = _need(m.acc[-1, :-1], "final row")
    diag = _need(np.diag(m.acc)[:-1], "diagonal")
    return float(np.sum(final - diag) / (T - 1))


def metric_fwt(m: AccuracyMatrix, paper_literal: bool = False) -> float:
    """Mean of ``acc[i-1, i] - zero_shot[i]`` over i = 2..T (1-based).

    ``paper_literal`` stops the sum at T-1 while keeping the 1/(T-1) prefactor.
    """
    T = m.n_tasks
    if T < 2:
        raise ContractError("FWT needs at least two tasks")
    stop = T - 1 if paper_literal else T
    idx = np.arange(1, stop)
    upper = _need(m.acc[idx - 1, idx], "entries above the diagonal")
    zs = _need(m.zero_shot[idx], "zero-shot accuracies")
    return float(np.sum(upper - zs) / (T - 1))


def metric_at(m: AccuracyMatrix) -> float:
    return float(np.mean(_need(m.pre_merge, "pre-merge diagonal")))


def metric_am(m: AccuracyMatrix) -> float:
    return float(np.mean(_need(np.diag(m.acc), "post-merge diagonal")))


METRICS = ("ACC", "BWT", "FWT", "A_t", "A_m")


def all_metrics(m: AccuracyMatrix, paper_literal_fwt: bool = False) -> dict:
    out = {"ACC": metric_acc(m), "A_t": metric_at(m), "A_m": metric_am(m)}
    if m.n_tasks >= 2:
        out["BWT"] = metric_bwt(m)
        out["FWT"] = metric_fwt(m, paper_literal_fwt)
    else:
        out["BWT"] = 0.0
        out["FWT"] = 0.0
    return {k: out[k] for k in METRICS}


def evaluate(base: BaseModel, adapter: LoraAdapter | None, data: Dataset) -> float:
    """Fraction of argmax-correct predictions (ties go to the lowest class index)."""
    if len(data) == 0:
        raise ContractError("cannot evaluate on an empty split")
    pred = np.argmax(forward_adapted(base, adapter, data.features), axis=1)
    return float(np.mean(pred == data.labels))


# sequence runner --------------------------------------------------------------

@dataclass
class SequenceResult:
    matrix: AccuracyMatrix
    metrics: dict
    task_ids: list
    step_log: list = field(default_factory=list)
    alignment: list = field(default_factory=list)
    merges: list = field(default_factory=list)
    adapters: list = field(default_factory=list)   # global adapter after each task
    manifest: dict = field(default_factory=dict)

    def same_as(self, other: "SequenceResult") -> bool:
        """Bit-exact comparison of every recorded quantity except the manifest."""
        return (np.array_equal(self.matrix.acc, other.matrix.acc, equal_nan=True)
                and np.array_equal(self.matrix.zero_shot, other.matrix.zero_shot, equal_nan=True)
                and np.array_equal(self.matrix.pre_merge, other.matrix.pre_merge, equal_nan=True)
                and self.metrics == other.metrics
                and self.step_log == other.step_log
                and self.merges == other.merges
                and len(self.adapters) == len(other.adapters)
                and all(a == b for a, b in zip(self.adapters, other.adapters)))


@lru_cache(maxsize=16)
def _pretrained(seed: int, n_classes: int, noise_std: float, context_scale: float, hidden: tuple,
                epochs: int, lr: float, per_class: int) -> BaseModel:
    spec = pretrain_spec(seed, n_train_per_class=per_class, n_classes=n_classes, noise_std=noise_std,
                         context_scale=context_scale)
    train, _ = build(spec)
    return pretrain_base(train, hidden=hidden, epochs=epochs, lr=lr, seed=seed)


def base_model_for(cfg: RunConfig, seed: int) -> BaseModel:
    ts, ms = cfg.tasks, cfg.model
    return _pretrained(seed, ts.n_classes, ts.noise_std, ts.context_scale, tuple(ms.hidden), ms.pretrain_epochs,
                       ms.pretrain_lr, ms.pretrain_per_class)


def tasks_for(cfg: RunConfig, seed: int, order: str = "given") -> list[TaskSpec]:
    ts = cfg.tasks
    tasks = default_sequence(seed, outlier=ts.outlier, n_classes=ts.n_classes,
                             n_train_per_class=ts.n_train_per_class,
                             n_eval_per_class=ts.n_eval_per_class, noise_std=ts.noise_std,
                             context_scale=ts.context_scale)
    return task_order(tasks, order, cfg.order_seed)


def run_sequence(cfg: RunConfig, seed: int | None = None, order: str = "given",
                 tasks: list[TaskSpec] | None = None, on_hook=None) -> SequenceResult:
    """Train ``cfg.method`` through the task sequence and fill the accuracy matrix.

    ``on_hook(hook)`` is called after each task with that task's alignment hook,
    which lets callers inspect every firing.
    """
    seed = cfg.seeds[0] if seed is None else seed
    tasks = tasks_for(cfg, seed, order) if tasks is None else list(tasks)
    if not tasks:
        raise ContractError("need at least one task")
    base = base_model_for(cfg, seed)
    checksum = base.checksum()
    data = [build(t) for t in tasks]
    n = len(tasks)
    method = cfg.method
    matrix = AccuracyMatrix.empty(n)
    for i, (_, ev) in enumerate(data):
        matrix.zero_shot[i] = evaluate(base, None, ev)

    init_rng = make_rng(seed, "adapter-init")
    global_adapter = init_adapter(base, cfg.rank, "fresh", rng=init_rng)
    independent: list[LoraAdapter] = []
    buffer = ReplayBuffer(cfg.buffer_capacity, seed) if method in ER_METHODS else None
    align_cfg = alignment_config(cfg) if method in ALIGN_METHODS else None
    strategy = merge_strategy(cfg) if method in MERGE_METHODS else None
    result = SequenceResult(matrix=matrix, metrics={}, task_ids=[t.task_id for t in tasks])

    for t, (spec, (train, ev)) in enumerate(zip(tasks, data)):
        tcfg = cfg.trainer.for_seed(seed)
        if spec.epochs or spec.batch_size:
            tcfg = type(tcfg)(**{**tcfg.__dict__, "epochs": spec.epochs or tcfg.epochs,
                                 "batch_size": spec.batch_size or tcfg.batch_size})
        previous = global_adapter.copy()
        if method == "independent":
            current = init_adapter(base, cfg.rank, "fresh", rng=init_rng) if t else global_adapter
        elif method in MERGE_METHODS and t > 0:
            current = init_adapter(base, cfg.rank, cfg.init_mode, global_adapter=global_adapter,
                                   rng=init_rng)
        else:
            current = global_adapter

        hook = None
        if align_cfg is not None and t > 0:
            hook = AlignmentHook(align_cfg, previous, task_index=t)
        distill = None
        if method in LWF_METHODS and t > 0:
            distill = DistillConfig(previous, cfg.lambda_lwf, cfg.temperature)
        replay = ReplayConfig(buffer, cfg.replay_ratio) if buffer is not None else None
        anchor = None
        if method in REG_METHODS and cfg.lambda_reg and t > 0:
            anchor = AnchorConfig(previous.flatten(), cfg.lambda_reg)

        try:
            res = train_task(base, current, train, tcfg, distill=distill, replay=replay,
                             anchor=anchor, hook=hook, task_index=t, task_id=spec.task_id)
        except TrainingDiverged as exc:
            exc.task_index = t
            raise
        result.step_log.extend(res.log)
        if hook is not None:
            result.alignment.extend(hook.diagnostics)
            if on_hook is not None:
                on_hook(hook)

        matrix.pre_merge[t] = evaluate(base, current, ev)
        if method in MERGE_METHODS and t > 0:
            merged = merge_adapters(global_adapter, current, strategy)
            report = merge_report(global_adapter.flatten(), current.flatten(), merged.flatten(), strategy)
            report["task_index"] = t
            result.merges.append(report)
            global_adapter = merged
        elif method == "independent":
            independent.append(current)
            global_adapter = current
        else:
            global_adapter = current

        for i, (_, ev_i) in enumerate(data):
            if method == "independent" and i <= t:
                model = independent[i]
            else:
                model = global_adapter
            matrix.acc[t, i] = evaluate(base, model, ev_i)
        result.adapters.append(global_adapter.copy())

    if base.checksum() != checksum:
        raise RuntimeError("base model weights changed during the run")
    result.metrics = all_metrics(matrix, cfg.fwt_paper_literal)
    result.manifest = {"config_hash": cfg.config_hash(), "seed": seed, "order": order,
                       "method": method, "code_version": __version__, "task_ids": result.task_ids}
    return result


def pre_merge_conflicts(result: SequenceResult) -> list[float]:
    """Sign-conflict rate between task and global adapter at each merge (t >= 2)."""
    return [m["sign_conflict_pre"] for m in result.merges if m.get("sign_conflict_pre") is not None]


# results bundle -----------------------------------------------------------------

def atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_matrix_csv(m: AccuracyMatrix, path) -> None:
    rows = ["t,i,accuracy,phase"]
    for i, v in enumerate(m.zero_shot):
        if not np.isnan(v):
            rows.append(f"0,{i + 1},{float(v)!r},zero_shot")
    for t in range(m.n_tasks):
        if not np.isnan(m.pre_merge[t]):
            rows.append(f"{t + 1},{t + 1},{float(m.pre_merge[t])!r},pre_merge")
        for i in range(m.n_tasks):
            if not np.isnan(m.acc[t, i]):
                rows.append(f"{t + 1},{i + 1},{float(m.acc[t, i])!r},post_merge")
    atomic_write(Path(path), "\n".join(rows) + "\n")


def read_matrix_csv(path) -> AccuracyMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    n = max(max(int(r["t"]), int(r["i"])) for r in rows)
    m = AccuracyMatrix.empty(n)
    for r in rows:
        t, i, v = int(r["t"]), int(r["i"]), float(r["accuracy"])
        if r["phase"] == "zero_shot":
            m.zero_shot[i - 1] = v
        elif r["phase"] == "pre_merge":
            m.pre_merge[t - 1] = v
        elif r["phase"] == "post_merge":
            m.acc[t - 1, i - 1] = v
        else:
            raise ContractError(f"unknown phase {r['phase']!r} in {path}")
    return m


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_bundle(result: SequenceResult, directory) -> Path:
    d = Path(directory)
    (d / "adapters").mkdir(parents=True, exist_ok=True)
    write_matrix_csv(result.matrix, d / "matrix.csv")
    atomic_write(d / "metrics.json", _dumps({**result.metrics, **{
        "config_hash": result.manifest.get("config_hash"), "seed": result.manifest.get("seed"),
        "order": result.manifest.get("order"), "method": result.manifest.get("method"),
        "task_ids": result.task_ids}}))
    write_step_log(result.step_log, d / "steps.csv")
    lines = ["task_index,step,conflict_rate_pre,realigned_count,misaligned_after"]
    lines += [f"{t},{s},{float(c)!r},{n},{a}" for t, s, c, n, a in result.alignment]
    atomic_write(d / "alignment.csv", "\n".join(lines) + "\n")
    atomic_write(d / "merges.json", _dumps(result.merges))
    for t, adapter in enumerate(result.adapters):
        save_adapter(adapter, d / "adapters" / f"task_{t + 1:02d}.lora")
    return d


def read_metrics(directory) -> dict:
    return json.loads((Path(directory) / "metrics.json").read_text())


def recompute_metrics(directory, paper_literal_fwt: bool = False) -> dict:
    return all_metrics(read_matrix_csv(Path(directory) / "matrix.csv"), paper_literal_fwt)


__all__ = [
    "AccuracyMatrix", "SequenceResult", "all_metrics", "evaluate", "metric_acc", "metric_am",
    "metric_at", "metric_bwt", "metric_fwt", "run_sequence", "write_bundle", "read_matrix_csv",
    "recompute_metrics", "sign_conflict_rate", "pre_merge_conflicts",
]
