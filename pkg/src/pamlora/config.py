"""Experiment configuration: YAML file -> validated :class:`RunConfig`.

Grammar (YAML mapping; every key optional except ``method``)::

    method: pam                 # one of METHODS
    rank: 8
    seeds: [0, 1, 2]
    orders: [given, sorted_by_id, seeded_shuffle]
    order_seed: 0
    output_dir: runs/pam
    fwt_paper_literal: false

    # method hyperparameters; only those the method consumes are accepted
    p: 50                       # alignment methods
    s: 100
    reinit: global              # global | zero
    per_layer: false
    init_mode: from_global      # merging methods: from_global | fresh
    density: 0.9                # ties
    tall_lambda: 0.1            # tall
    lambda_lwf: 1.0             # lwf, pam+lwf
    temperature: 2.0
    buffer_capacity: 200        # er, pam+er
    replay_ratio: 0.25
    lambda_reg: 0.0             # finetune, average

    trainer: {epochs: 20, batch_size: 16, lr: 5.0e-4, weight_decay: 0.0, label_smoothing: 0.0}
    tasks: {sequence: default, outlier: false, n_classes: 8, n_train_per_class: 100,
            n_eval_per_class: 100, noise_std: 0.15, context_scale: 1.0}
    model: {hidden: [64, 64], pretrain_epochs: 20, pretrain_lr: 0.01, pretrain_per_class: 500}
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError, ContractError
from .tasks import ORDER_MODES
from .trainer import TrainConfig

MERGE_METHODS = ("average", "ties", "tall", "magmax", "pam", "pam+lwf", "pam+er")
INPLACE_METHODS = ("finetune", "lwf", "er", "finetune+align")
METHODS = ("finetune", "independent", "average", "ties", "tall", "magmax",
           "pam", "pam+lwf", "pam+er", "lwf", "er", "finetune+align")
ALIGN_METHODS = ("pam", "pam+lwf", "pam+er", "finetune+align")
LWF_METHODS = ("lwf", "pam+lwf")
ER_METHODS = ("er", "pam+er")
REG_METHODS = ("finetune", "average")

# hyperparameter -> (default, methods consuming it)
METHOD_PARAMS = {
    "p": (50.0, ALIGN_METHODS),
    "s": (100, ALIGN_METHODS),
    "reinit": ("global", ALIGN_METHODS),
    "per_layer": (False, ALIGN_METHODS),
    "init_mode": ("from_global", MERGE_METHODS),
    "density": (0.9, ("ties",)),
    "tall_lambda": (0.1, ("tall",)),
    "lambda_lwf": (1.0, LWF_METHODS),
    "temperature": (2.0, LWF_METHODS),
    "buffer_capacity": (200, ER_METHODS),
    "replay_ratio": (0.25, ER_METHODS),
    "lambda_reg": (0.0, REG_METHODS),
}


@dataclass(frozen=True)
class TaskSettings:
    sequence: str = "default"
    outlier: bool = False
    n_classes: int = 8
    n_train_per_class: int = 100
    n_eval_per_class: int = 100
    noise_std: float = 0.15
    context_scale: float = 1.0


@dataclass(frozen=True)
class ModelSettings:
    hidden: tuple = (64, 64)
    pretrain_epochs: int = 20
    pretrain_lr: float = 1e-2
    pretrain_per_class: int = 500


@dataclass(frozen=True)
class TrainerSettings:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 5e-4
    weight_decay: float = 0.0
    label_smoothing: float = 0.0

    def for_seed(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **asdict(self))


@dataclass(frozen=True)
class RunConfig:
    method: str
    rank: int = 8
    seeds: tuple = (0,)
    orders: tuple = ("given",)
    order_seed: int = 0
    output_dir: str = "runs"
    fwt_paper_literal: bool = False
    p: float | None = None
    s: int | None = None
    reinit: str | None = None
    per_layer: bool | None = None
    init_mode: str | None = None
    density: float | None = None
    tall_lambda: float | None = None
    lambda_lwf: float | None = None
    temperature: float | None = None
    buffer_capacity: int | None = None
    replay_ratio: float | None = None
    lambda_reg: float | None = None
    trainer: TrainerSettings = field(default_factory=TrainerSettings)
    tasks: TaskSettings = field(default_factory=TaskSettings)
    model: ModelSettings = field(default_factory=ModelSettings)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["orders"] = list(self.orders)
        d["model"]["hidden"] = list(self.model.hidden)
        return d

    def config_hash(self) -> str:
        """Hash of the resolved config; independent of key order in the source file.

        ``output_dir`` is left out: where results land does not change them.
        """
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_(self, **changes) -> "RunConfig":
        """Copy with changes, re-validated (method params refilled for a new method)."""
        d = self.to_dict()
        if "method" in changes and changes["method"] != self.method:
            for k in METHOD_PARAMS:
                d.pop(k, None)
        d.update(changes)
        d = {k: v for k, v in d.items() if v is not None}
        return config_from_dict(d)


def _range_error(key, value, valid):
    return ConfigError(f"invalid value {value!r} for {key!r}; valid range: {valid}")


def _validate_method_params(d: dict) -> None:
    checks = {
        "p": (lambda v: 0 <= v <= 100, "0 <= p <= 100"),
        "s": (lambda v: int(v) == v and v >= 1, "integer >= 1"),
        "reinit": (lambda v: v in ("global", "zero"), "global | zero"),
        "per_layer": (lambda v: isinstance(v, bool), "true | false"),
        "init_mode": (lambda v: v in ("from_global", "fresh"), "from_global | fresh"),
        "density": (lambda v: 0 < v <= 1, "0 < density <= 1"),
        "tall_lambda": (lambda v: v > 0, "tall_lambda > 0"),
        "lambda_lwf": (lambda v: v >= 0, "lambda_lwf >= 0"),
        "temperature": (lambda v: v > 0, "temperature > 0"),
        "buffer_capacity": (lambda v: int(v) == v and v >= 1, "integer >= 1"),
        "replay_ratio": (lambda v: 0 <= v <= 1, "0 <= replay_ratio <= 1"),
        "lambda_reg": (lambda v: v >= 0, "lambda_reg >= 0"),
    }
    for key, (ok, valid) in checks.items():
        if d.get(key) is None:
            continue
        try:
            good = ok(d[key])
        except TypeError:
            good = False
        if not good:
            raise _range_error(key, d[key], valid)


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    for k in raw:
        if k not in known:
            raise ConfigError(f"unknown key {name}.{k!r}")
    if cls is ModelSettings and "hidden" in raw:
        raw = {**raw, "hidden": tuple(raw["hidden"])}
    return cls(**raw)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    top = {f.name for f in fields(RunConfig)}
    for k in raw:
        if k not in top:
            raise ConfigError(f"unknown key {k!r}")
    method = raw.get("method")
    if method not in METHODS:
        raise _range_error("method", method, " | ".join(METHODS))
    d = dict(raw)
    for key, (default, consumers) in METHOD_PARAMS.items():
        if method in consumers:
            d.setdefault(key, default)
        elif d.get(key) is not None:
            raise ConfigError(f"key {key!r} is not used by method {method!r}")
    _validate_method_params(d)
    if d.get("p") is not None:
        d["p"] = float(d["p"])
    if int(d.get("rank", 8)) != d.get("rank", 8) or d.get("rank", 8) < 1:
        raise _range_error("rank", d.get("rank"), "integer >= 1")
    seeds = d.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds or any(not isinstance(x, int) or x < 0 for x in seeds):
        raise _range_error("seeds", seeds, "non-empty list of integers >= 0")
    d["seeds"] = tuple(seeds)
    orders = d.get("orders", ["given"])
    if isinstance(orders, str):
        orders = [orders]
    if not orders or any(o not in ORDER_MODES for o in orders):
        raise _range_error("orders", orders, " | ".join(ORDER_MODES))
    d["orders"] = tuple(orders)
    try:
        d["trainer"] = _section(TrainerSettings, d.get("trainer"), "trainer")
        d["tasks"] = _section(TaskSettings, d.get("tasks"), "tasks")
        d["model"] = _section(ModelSettings, d.get("model"), "model")
        d["trainer"].for_seed(0)
    except (TypeError, ContractError) as exc:
        raise ConfigError(str(exc)) from None
    if d["tasks"].sequence != "default":
        raise _range_error("tasks.sequence", d["tasks"].sequence, "default")
    return RunConfig(**d)


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return config_from_dict(raw or {})


def alignment_config(cfg: RunConfig):
    from .alignment import AlignmentConfig
    return AlignmentConfig(p=cfg.p, s=int(cfg.s), reinit=cfg.reinit, per_layer=cfg.per_layer)


def merge_strategy(cfg: RunConfig):
    from .merging import MergeStrategy
    kind = {"pam": "average", "pam+lwf": "average", "pam+er": "average"}.get(cfg.method, cfg.method)
    return MergeStrategy(kind=kind, density=cfg.density or 0.9, lam=cfg.tall_lambda or 0.1)

