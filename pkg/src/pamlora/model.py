"""Frozen MLP base model with per-layer low-rank adapters.

Each adapted layer computes ``W0 x + B (A x) + bias`` where ``W0`` is n x m,
``B`` is n x r and ``A`` is r x m. Hidden layers use relu; the last layer
emits logits.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError, TrainingDiverged
from .rng import make_rng


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BaseModel:
    """Pretrained network; weights are read-only arrays."""

    weights: tuple
    biases: tuple

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(_frozen(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_frozen(b) for b in self.biases))
        if len(self.weights) != len(self.biases):
            raise ShapeError("weights and biases differ in layer count")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {l}: weight {w.shape} incompatible with bias {b.shape}")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ShapeError(f"layer {l} input {w.shape[1]} != previous output")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    @property
    def in_features(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[0]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for w, b in zip(self.weights, self.biases):
            h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(b, dtype="<f8").tobytes())
        return h.hexdigest()


class LoraAdapter:
    """Per-layer factor pairs ``(B, A)``; the delta of layer l is ``B @ A``."""

    def __init__(self, factors):
        self.factors = [(np.array(b, dtype=np.float64), np.array(a, dtype=np.float64))
                        for b, a in factors]
        for l, (b, a) in enumerate(self.factors):
            if b.ndim != 2 or a.ndim != 2 or b.shape[1] != a.shape[0]:
                raise ShapeError(f"layer {l}: B {b.shape} and A {a.shape} do not compose")

    @property
    def layout(self) -> tuple:
        return tuple((b.shape[0], a.shape[1], a.shape[0]) for b, a in self.factors)

    @property
    def rank(self) -> int:
        return self.factors[0][1].shape[0] if self.factors else 0

    def copy(self) -> "LoraAdapter":
        return LoraAdapter([(b.copy(), a.copy()) for b, a in self.factors])

    def deltas(self) -> list[np.ndarray]:
        return [b @ a for b, a in self.factors]

    def flatten(self) -> np.ndarray:
        return flatten_adapter(self)[0]

    def __eq__(self, other):
        if not isinstance(other, LoraAdapter) or self.layout != other.layout:
            return False
        return bool(np.array_equal(self.flatten(), other.flatten()))

    def __repr__(self):
        return f"LoraAdapter(layout={self.layout})"


def flatten_adapter(adapter: LoraAdapter) -> tuple[np.ndarray, tuple]:
    """Concatenate factors layer by layer, B before A, row-major."""
    parts = []
    for b, a in adapter.factors:
        parts.append(b.reshape(-1))
        parts.append(a.reshape(-1))
    flat = np.concatenate(parts) if parts else np.zeros(0)
    return flat, adapter.layout


def unflatten_adapter(flat, layout) -> LoraAdapter:
    flat = np.asarray(flat, dtype=np.float64)
    need = sum(n * r + r * m for n, m, r in layout)
    if flat.ndim != 1 or flat.size != need:
        raise ContractError(f"flat vector of length {flat.size} does not match layout needing {need}")
    factors, pos = [], 0
    for n, m, r in layout:
        b = flat[pos:pos + n * r].reshape(n, r)
        pos += n * r
        a = flat[pos:pos + r * m].reshape(r, m)
        pos += r * m
        factors.append((b.copy(), a.copy()))
    return LoraAdapter(factors)


def layer_slices(layout) -> list[slice]:
    """Flat-index span of each layer (B and A together)."""
    out, pos = [], 0
    for n, m, r in layout:
        size = n * r + r * m
        out.append(slice(pos, pos + size))
        pos += size
    return out


# forward ------------------------------------------------------------------

def forward_tensors(base: BaseModel, factors, x) -> T.Tensor:
    """Adapted forward on tensors; ``factors`` may be None for the base network."""
    h = T.as_tensor(x)
    if h.data.ndim != 2 or h.shape[1] != base.in_features:
        raise ShapeError(f"input shape {h.shape} does not match first layer input {base.in_features}")
    last = len(base.weights) - 1
    for l, (w, bias) in enumerate(zip(base.weights, base.biases)):
        w = w if isinstance(w, T.Tensor) else T.Tensor._wrap(w)
        z = T.matmul(h, T.transpose(w))
        if factors is not None:
            B, A = factors[l]
            z = T.add(z, T.matmul(T.matmul(h, T.transpose(A)), T.transpose(B)))
        z = T.add(z, bias)
        h = T.relu(z) if l < last else z
    return h


def forward_adapted(base: BaseModel, adapter: LoraAdapter | None, x) -> np.ndarray:
    factors = None
    if adapter is not None:
        if len(adapter.factors) != len(base.weights):
            raise ShapeError("adapter layer count does not match base model")
        factors = [(T.Tensor._wrap(b), T.Tensor._wrap(a)) for b, a in adapter.factors]
    return forward_tensors(base, factors, x).data


def forward_dense(base: BaseModel, x, deltas=None) -> np.ndarray:
    """Plain numpy forward with optional dense weight deltas (used as an oracle)."""
    h = np.asarray(x, dtype=np.float64)
    last = len(base.weights) - 1
    for l, (w, b) in enumerate(zip(base.weights, base.biases)):
        if deltas is not None:
            w = w + deltas[l]
        h = h @ w.T + b
        if l < last:
            h = np.maximum(h, 0.0)
    return h


# construction ---------------------------------------------------------------

def init_base(sizes, rng: np.random.Generator) -> BaseModel:
    weights, biases = [], []
    for m, n in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(m)
        weights.append(rng.uniform(-bound, bound, size=(n, m)))
        biases.append(np.zeros(n))
    return BaseModel(tuple(weights), tuple(biases))


def pretrain_base(train, hidden=(64, 64), epochs: int = 20, batch_size: int = 64,
                  lr: float = 1e-2, seed: int = 0) -> BaseModel:
    """Dense training of all weights on ``train``; the returned model is frozen."""
    if len(train) == 0:
        raise ContractError("pretraining dataset is empty")
    sizes = [train.n_features, *hidden, train.n_classes]
    init = init_base(sizes, make_rng(seed, "pretrain-init"))
    params = [np.array(p) for pair in zip(init.weights, init.biases) for p in pair]
    states = [T.AdamState.zeros_like(p) for p in params]
    order_rng = make_rng(seed, "pretrain-order")
    n = len(train)
    step = 0
    for _ in range(epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            step += 1
            with T.ComputationRecord() as rec:
                ts = [rec.watch(T.Tensor._wrap(p)) for p in params]
                model = _TensorBase(ts[0::2], ts[1::2])
                loss = T.softmax_cross_entropy(
                    forward_tensors(model, None, train.features[idx]), train.labels[idx]
                )
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(step, loss.item())
            grads = T.grad(loss, rec)
            for i, t in enumerate(ts):
                params[i], states[i] = T.adam_step(params[i], grads[t.id], states[i], lr=lr)
    return BaseModel(tuple(params[0::2]), tuple(params[1::2]))


class _TensorBase:
    """Duck-typed BaseModel whose parameters are watched tensors (pretraining only)."""

    def __init__(self, weights, biases):
        self.weights = weights
        self.biases = biases
        self.in_features = weights[0].shape[1]


def init_adapter(base: BaseModel, r: int, mode: str = "fresh",
                 global_adapter: LoraAdapter | None = None,
                 rng: np.random.Generator | None = None) -> LoraAdapter:
    """New adapter: ``fresh`` (A uniform in +-1/sqrt(m), B zero) or a copy of ``global_adapter``."""
    for n, m in base.shapes:
        if not 1 <= r <= min(n, m):
            raise ContractError(f"rank {r} invalid for layer of shape {n}x{m} (need 1 <= r <= {min(n, m)})")
    if mode == "from_global":
        if global_adapter is None:
            raise ContractError("from_global initialization needs a global adapter")
        if global_adapter.layout != tuple((n, m, r) for n, m in base.shapes):
            raise ContractError(f"global adapter layout {global_adapter.layout} does not fit base/rank")
        return global_adapter.copy()
    if mode != "fresh":
        raise ContractError(f"unknown adapter init mode {mode!r}")
    if rng is None:
        raise ContractError("fresh initialization needs an rng")
    factors = []
    for n, m in base.shapes:
        bound = 1.0 / np.sqrt(m)
        factors.append((np.zeros((n, r)), rng.uniform(-bound, bound, size=(r, m))))
    return LoraAdapter(factors)


def zero_adapter(base: BaseModel, r: int) -> LoraAdapter:
    return LoraAdapter([(np.zeros((n, r)), np.zeros((r, m))) for n, m in base.shapes])


# checkpoint format ------------------------------------------------------------
#
#   magic  b"PLRA"            4 bytes
#   version                   uint32 LE (currently 1)
#   layer count L             uint32 LE
#   L x (n, m, r)             uint32 LE each
#   payload                   float64 LE, flatten_adapter order

MAGIC = b"PLRA"
FORMAT_VERSION = 1


def adapter_to_bytes(adapter: LoraAdapter) -> bytes:
    flat, layout = flatten_adapter(adapter)
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, len(layout))
    for n, m, r in layout:
        header += struct.pack("<III", n, m, r)
    return header + np.ascontiguousarray(flat, dtype="<f8").tobytes()


def adapter_from_bytes(buf: bytes) -> LoraAdapter:
    if buf[:4] != MAGIC:
        raise ContractError("not an adapter checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    pos = 12
    layout = []
    for _ in range(count):
        layout.append(struct.unpack_from("<III", buf, pos))
        pos += 12
    flat = np.frombuffer(buf, dtype="<f8", offset=pos).astype(np.float64)
    return unflatten_adapter(flat, tuple(layout))


def save_adapter(adapter: LoraAdapter, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(adapter_to_bytes(adapter))
    tmp.replace(path)


def load_adapter(path) -> LoraAdapter:
    return adapter_from_bytes(Path(path).read_bytes())
