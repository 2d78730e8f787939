"""Sign alignment of a task adapter against the global adapter.

Importance is ranked over the global adapter's flattened factor entries by
magnitude. During task training, entries of the task adapter whose sign
disagrees with an important global entry are reset, either to the global
value or to zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .model import LoraAdapter, flatten_adapter, layer_slices, unflatten_adapter

REINIT_MODES = ("global", "zero")


def ceil_fraction(frac: float, n: int) -> int:
    """``ceil(frac * n)``, immune to float noise such as 0.9 * 10 = 9.000000000000002."""
    return math.ceil(round(frac * n, 9))


@dataclass(frozen=True)
class AlignmentConfig:
    p: float = 50.0
    s: int = 100
    reinit: str = "global"
    per_layer: bool = False

    def __post_init__(self):
        if not 0 <= self.p <= 100:
            raise ContractError(f"alignment percentage p must be in [0, 100], got {self.p}")
        if int(self.s) != self.s or self.s < 1:
            raise ContractError(f"schedule s must be an integer >= 1, got {self.s}")
        if self.reinit not in REINIT_MODES:
            raise ContractError(f"reinit must be one of {REINIT_MODES}, got {self.reinit!r}")


@dataclass(frozen=True)
class ImportanceThreshold:
    tau: float
    k: int
    indices: np.ndarray          # sorted flat indices of the important set
    mask: np.ndarray = field(repr=False)

    @property
    def important_set(self) -> frozenset:
        return frozenset(int(i) for i in self.indices)


def _top_k(mags: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -|w|: equal magnitudes keep ascending index order
    return np.argsort(-mags, kind="stable")[:k]


def compute_important_set(global_flat, p: float, layout=None) -> ImportanceThreshold:
    """Top ``ceil(p/100 * N)`` entries of ``global_flat`` by magnitude.

    With ``layout`` given, ranking is done separately inside each layer.
    """
    g = np.asarray(global_flat, dtype=np.float64)
    if g.ndim != 1 or g.size == 0:
        raise ContractError("importance needs a non-empty flat vector")
    if not 0 <= p <= 100:
        raise ContractError(f"p must be in [0, 100], got {p}")
    mags = np.abs(g)
    mask = np.zeros(g.size, dtype=bool)
    if layout is None:
        k = ceil_fraction(p / 100, g.size)
        top = _top_k(mags, k)
        mask[top] = True
        tau = float(mags[top[-1]]) if k else math.inf
    else:
        taus = []
        for sl in layer_slices(layout):
            kl = ceil_fraction(p / 100, sl.stop - sl.start)
            top = _top_k(mags[sl], kl) + sl.start
            mask[top] = True
            if kl:
                taus.append(float(mags[top[-1]]))
        k = int(mask.sum())
        tau = min(taus) if taus else math.inf
    return ImportanceThreshold(tau=tau, k=k, indices=np.flatnonzero(mask), mask=mask)


def _check_lengths(a, b):
    if a.shape != b.shape:
        raise ContractError(f"length mismatch: {a.size} vs {b.size}")


def conflict_mask(a, b) -> np.ndarray:
    """True where both entries are nonzero with opposite signs."""
    return np.sign(a) * np.sign(b) < 0


def find_misaligned(current_flat, global_flat, threshold: ImportanceThreshold) -> np.ndarray:
    c = np.asarray(current_flat, dtype=np.float64)
    g = np.asarray(global_flat, dtype=np.float64)
    _check_lengths(c, g)
    if threshold.mask.shape != g.shape:
        raise ContractError("threshold was built for a vector of different length")
    return np.flatnonzero(conflict_mask(c, g) & threshold.mask)


def realign(adapter: LoraAdapter, global_adapter: LoraAdapter, misaligned, mode: str = "global") -> int:
    """Reset ``misaligned`` flat entries of ``adapter`` in place; returns how many."""
    idx = np.asarray(misaligned, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        return 0
    cur, layout = flatten_adapter(adapter)
    if global_adapter.layout != layout:
        raise ContractError(f"layout mismatch: {layout} vs {global_adapter.layout}")
    if idx.min() < 0 or idx.max() >= cur.size:
        raise ContractError("misaligned index out of range")
    if mode == "global":
        cur[idx] = global_adapter.flatten()[idx]
    elif mode == "zero":
        cur[idx] = 0.0
    else:
        raise ContractError(f"unknown reinit mode {mode!r}")
    adapter.factors = unflatten_adapter(cur, layout).factors
    return int(idx.size)


def sign_conflict_rate(a, b) -> float:
    """Fraction of both-nonzero coordinates whose signs disagree."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_lengths(a, b)
    both = (a != 0) & (b != 0)
    denom = int(both.sum())
    if denom == 0:
        return 0.0
    return int(conflict_mask(a, b).sum()) / denom


def pam_hook(step: int, cfg: AlignmentConfig, current: LoraAdapter, global_adapter: LoraAdapter,
             threshold: ImportanceThreshold | None = None) -> int:
    """Run one alignment check if ``step`` is on the schedule; returns entries realigned."""
    if step < 1:
        raise ContractError(f"step must be >= 1, got {step}")
    if step % cfg.s:
        return 0
    g = global_adapter.flatten()
    if threshold is None:
        threshold = compute_important_set(g, cfg.p, global_adapter.layout if cfg.per_layer else None)
    bad = find_misaligned(current.flatten(), g, threshold)
    return realign(current, global_adapter, bad, cfg.reinit)


class AlignmentHook:
    """Training callback bound to one task: caches the threshold and logs each firing.

    ``diagnostics`` rows are ``(task_index, step, conflict_rate_pre,
    realigned_count, misaligned_after)``.
    """

    def __init__(self, cfg: AlignmentConfig, global_adapter: LoraAdapter, task_index: int = 0):
        self.cfg = cfg
        self.global_adapter = global_adapter.copy()
        self.global_flat = self.global_adapter.flatten()
        self.task_index = task_index
        layout = self.global_adapter.layout if cfg.per_layer else None
        self.threshold = compute_important_set(self.global_flat, cfg.p, layout)
        self.diagnostics: list[tuple] = []

    def __call__(self, step: int, adapter: LoraAdapter) -> int:
        if step % self.cfg.s:
            return 0
        before = sign_conflict_rate(adapter.flatten(), self.global_flat)
        count = pam_hook(step, self.cfg, adapter, self.global_adapter, self.threshold)
        after = find_misaligned(adapter.flatten(), self.global_flat, self.threshold).size
        self.diagnostics.append((self.task_index, step, before, count, int(after)))
        return count
