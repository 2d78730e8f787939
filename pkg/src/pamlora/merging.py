"""Two-operand merges of a global adapter ``g`` and a task adapter ``w``.

All functions are pure and act on flat factor vectors. Ties are resolved in
favour of the global operand.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import ceil_fraction, sign_conflict_rate
from .errors import ContractError
from .model import LoraAdapter, flatten_adapter, unflatten_adapter

STRATEGIES = ("average", "ties", "tall", "magmax")


@dataclass(frozen=True)
class MergeStrategy:
    kind: str = "average"
    density: float = 0.9   # ties
    lam: float = 0.1       # tall

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ContractError(f"unknown merge strategy {self.kind!r}; expected one of {STRATEGIES}")
        if not 0 < self.density <= 1:
            raise ContractError(f"ties density must be in (0, 1], got {self.density}")
        if not self.lam > 0:
            raise ContractError(f"tall lambda must be > 0, got {self.lam}")

    def params(self) -> dict:
        if self.kind == "ties":
            return {"density": self.density}
        if self.kind == "tall":
            return {"lambda": self.lam}
        return {}


def _pair(g, w):
    g = np.asarray(g, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if g.shape != w.shape:
        raise ContractError(f"length mismatch: {g.size} vs {w.size}")
    return g, w


def merge_average(g, w) -> np.ndarray:
    g, w = _pair(g, w)
    return (g + w) / 2


def merge_magmax(g, w) -> np.ndarray:
    g, w = _pair(g, w)
    return np.where(np.abs(w) > np.abs(g), w, g)


def ties_trim(v, density: float) -> np.ndarray:
    """Zero all but the ``ceil(density * N)`` largest-magnitude entries."""
    if not 0 < density <= 1:
        raise ContractError(f"density must be in (0, 1], got {density}")
    v = np.asarray(v, dtype=np.float64)
    k = ceil_fraction(density, v.size)
    keep = np.argsort(-np.abs(v), kind="stable")[:k]
    out = np.zeros_like(v)
    out[keep] = v[keep]
    return out


def merge_ties(g, w, density: float = 0.9) -> np.ndarray:
    """Trim, elect the sign with larger total mass, then average the agreeing values."""
    g, w = _pair(g, w)
    tg, tw = ties_trim(g, density), ties_trim(w, density)
    stacked = np.stack([tg, tw])
    pos = np.where(stacked > 0, stacked, 0.0).sum(axis=0)
    neg = np.where(stacked < 0, -stacked, 0.0).sum(axis=0)
    elected = np.where(pos > neg, 1.0, np.where(neg > pos, -1.0, np.sign(tg)))
    agree = (np.sign(stacked) == elected) & (stacked != 0)
    count = agree.sum(axis=0)
    total = np.where(agree, stacked, 0.0).sum(axis=0)
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def tall_masks(g, w, lam: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    g, w = _pair(g, w)
    m = g + w
    return np.abs(g) >= lam * np.abs(m - g), np.abs(w) >= lam * np.abs(m - w)


def merge_tall(g, w, lam: float = 0.1) -> np.ndarray:
    """Keep each operand where it dominates the rest of the summed vector; mean of the kept."""
    if not lam > 0:
        raise ContractError(f"lambda must be > 0, got {lam}")
    g, w = _pair(g, w)
    keep_g, keep_w = tall_masks(g, w, lam)
    count = keep_g.astype(int) + keep_w.astype(int)
    total = np.where(keep_g, g, 0.0) + np.where(keep_w, w, 0.0)
    return np.where(count > 0, total / np.maximum(count, 1), (g + w) / 2)


def merge_flat(g, w, strategy: MergeStrategy) -> np.ndarray:
    if strategy.kind == "average":
        return merge_average(g, w)
    if strategy.kind == "magmax":
        return merge_magmax(g, w)
    if strategy.kind == "ties":
        return merge_ties(g, w, strategy.density)
    return merge_tall(g, w, strategy.lam)


def merge_adapters(g: LoraAdapter, w: LoraAdapter, strategy: MergeStrategy) -> LoraAdapter:
    gf, gl = flatten_adapter(g)
    wf, wl = flatten_adapter(w)
    if gl != wl:
        raise ContractError(f"adapter layouts differ: {gl} vs {wl}")
    return unflatten_adapter(merge_flat(gf, wf, strategy), gl)


def merge_report(g_flat, w_flat, merged_flat, strategy: MergeStrategy) -> dict:
    """Diagnostics for one merge, written to ``merges.json``."""
    g, w = _pair(g_flat, w_flat)
    merged = np.asarray(merged_flat, dtype=np.float64)
    report = {
        "strategy": strategy.kind,
        "params": strategy.params(),
        "sign_conflict_pre": sign_conflict_rate(g, w),
        "sign_conflict_post": sign_conflict_rate(merged, w),
    }
    if strategy.kind == "ties":
        live = (g != 0) | (w != 0)
        report["zeroed_fraction"] = float(np.mean((merged == 0) & live)) if g.size else 0.0
    if strategy.kind == "tall":
        keep_g, keep_w = tall_masks(g, w, strategy.lam)
        report["fallback_fraction"] = float(np.mean(~keep_g & ~keep_w)) if g.size else 0.0
    return report
