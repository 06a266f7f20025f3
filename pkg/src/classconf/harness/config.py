"""Flat, file-backed experiment configuration.

The file form is a JSON object whose keys are exactly the field names of
:class:`ExperimentConfig`. Unknown keys are rejected so that a misspelt
hyperparameter cannot silently fall back to its default.
"""

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import List, Optional

from ..exceptions import ConfigError
from ..objectives import OBJECTIVES

SCORE_KINDS = ("thr", "aps", "raps")
CP_MODES = ("split", "label", "cluster")
PENALTIES = ("phr", "p2", "p3")
ABLATION_AXES = ("eta", "alpha_test", "gamma", "penalty_kind", "temperature")


@dataclass
class ExperimentConfig:
    """Every knob of a benchmark run.

    The defaults describe the desk-scale long-tailed benchmark: ten classes,
    imbalance 0.1, fifty epochs. ``train_csv``/``pool_csv`` switch from the
    synthetic generator to user data (the pool is split into val/cal/test).
    """

    # data
    n_classes: int = 10
    n_features: int = 10
    class_separation: float = 5.0
    gamma: float = 0.1
    base_count: int = 1000
    pool_per_class: int = 400
    train_csv: Optional[str] = None
    pool_csv: Optional[str] = None
    label_column: str = "label"
    # model and optimiser
    hidden_layer_sizes: List[int] = field(default_factory=lambda: [64])
    learning_rate: float = 0.01
    momentum: float = 0.9
    nesterov: bool = True
    milestones: List[float] = field(default_factory=lambda: [0.4, 0.6, 0.8])
    decay: float = 0.1
    epochs: int = 50
    batch_size: int = 500
    finetune: bool = False
    base_epochs: int = 0
    # objective
    methods: List[str] = field(default_factory=lambda: ["ce", "conftr", "cact"])
    eta: float = 1.0
    alpha_train: float = 0.01
    temperature: float = 0.5
    steepness: float = 10.0
    cal_fraction: float = 0.5
    cls_on_pred_only: bool = True
    reg_weight: float = 0.05
    focal_gamma: float = 3.0
    penalty: str = "phr"
    lambda_init: float = 1e-6
    rho_init: float = 0.01
    beta: float = 1.2
    rho_update_period: int = 10
    hr_lambda_init: float = 0.1
    hr_mu: float = 1.1
    hr_tau: float = 1.1
    threshold_source: str = "validation"
    # evaluation
    eval_alphas: List[float] = field(default_factory=lambda: [0.1])
    eval_scores: List[str] = field(default_factory=lambda: ["thr", "aps", "raps"])
    cp_modes: List[str] = field(default_factory=lambda: ["split"])
    n_resamples: int = 10
    raps_lambda: float = 0.01
    raps_k: int = 5
    randomized: bool = False
    # bookkeeping
    seeds: List[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    # -- checks ------------------------------------------------------------

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.n_classes >= 2, "n_classes must be >= 2")
        need(self.n_features >= 2, "n_features must be >= 2")
        need(self.class_separation > 0, "class_separation must be positive")
        need(0 < self.gamma <= 1, "gamma must lie in (0, 1]")
        need(self.base_count >= 1 and self.pool_per_class >= 1, "counts must be positive")
        need(all(int(h) >= 1 for h in self.hidden_layer_sizes), "hidden widths must be >= 1")
        need(self.learning_rate > 0, "learning_rate must be positive")
        need(0 <= self.momentum < 1, "momentum must lie in [0, 1)")
        need(all(0 < m < 1 for m in self.milestones), "milestones are fractions in (0, 1)")
        need(0 < self.decay <= 1, "decay must lie in (0, 1]")
        need(self.epochs >= 1 and self.batch_size >= 2, "epochs >= 1 and batch_size >= 2")
        need(self.base_epochs >= 0, "base_epochs must be >= 0")
        need(len(self.methods) > 0, "methods must not be empty")
        for m in self.methods:
            need(m in OBJECTIVES, f"unknown method {m!r}; choose from {OBJECTIVES}")
        need(self.eta > 0, "eta must be positive")
        need(0 < self.alpha_train < 1, "alpha_train must lie in (0, 1)")
        need(self.temperature > 0 and self.steepness > 0, "temperature and steepness must be positive")
        need(0 < self.cal_fraction < 1, "cal_fraction must lie in (0, 1)")
        need(self.reg_weight >= 0 and self.focal_gamma >= 0, "reg_weight and focal_gamma must be >= 0")
        need(self.penalty in PENALTIES, f"penalty must be one of {PENALTIES}")
        need(self.lambda_init > 0 and self.rho_init > 0, "lambda_init and rho_init must be positive")
        need(self.beta > 1, "beta must exceed 1")
        need(self.rho_update_period >= 1, "rho_update_period must be >= 1")
        need(self.hr_lambda_init > 0 and self.hr_mu > 1 and self.hr_tau > 1,
             "heuristic rule needs hr_lambda_init > 0, hr_mu > 1, hr_tau > 1")
        need(self.threshold_source in ("validation", "frozen_batch"),
             "threshold_source must be 'validation' or 'frozen_batch'")
        need(len(self.eval_alphas) > 0 and all(0 < a < 1 for a in self.eval_alphas),
             "eval_alphas must lie in (0, 1)")
        for s in self.eval_scores:
            need(s in SCORE_KINDS, f"unknown score {s!r}")
        for m in self.cp_modes:
            need(m in CP_MODES, f"unknown CP mode {m!r}")
        need(self.n_resamples >= 1, "n_resamples must be >= 1")
        need(self.raps_lambda >= 0 and self.raps_k >= 0, "RAPS settings must be >= 0")
        need(len(self.seeds) > 0, "seeds must not be empty")
        need((self.train_csv is None) == (self.pool_csv is None),
             "train_csv and pool_csv go together")
        for name in ("class_separation", "learning_rate", "eta", "temperature"):
            need(math.isfinite(getattr(self, name)), f"{name} must be finite")

    # -- file form ---------------------------------------------------------

    @classmethod
    def field_names(cls):
        return [f.name for f in dataclasses.fields(cls)]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("a config must be a JSON object")
        unknown = sorted(set(data) - set(cls.field_names()))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in data:
                kwargs[f.name] = coerce(f.name, data[f.name])
        return cls(**kwargs)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())

    def replace(self, **changes):
        data = self.to_dict()
        data.update(changes)
        return type(self).from_dict(data)

    def digest(self, length=10):
        """Short stable hash of the resolved config, used to name run directories."""
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:length]


_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _to_bool(name, value):
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.lower() in ("true", "1", "yes"):
        return True
    if isinstance(value, str) and value.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"{name}: expected a boolean, got {value!r}")


def coerce(name, value):
    """Convert a JSON or command-line value to the declared type of ``name``."""
    if name not in _TYPES:
        raise ConfigError(f"unknown config key {name!r}")
    tp = _TYPES[name]
    text = str(tp)
    try:
        if tp is bool:
            return _to_bool(name, value)
        if tp is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            return str(value)
        if "Optional[str]" in text:
            if value is None or (isinstance(value, str) and value.lower() in ("", "none", "null")):
                return None
            return str(value)
        if text.startswith("typing.List"):
            items = value
            if isinstance(value, str):
                items = [v for v in value.split(",") if v.strip()]
            if not isinstance(items, (list, tuple)):
                raise ValueError
            inner = text[len("typing.List["):-1]
            conv = {"int": int, "float": float, "str": lambda v: str(v).strip()}[inner]
            return [conv(v) for v in items]
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot interpret {value!r} as {text}") from None
    raise ConfigError(f"{name}: unsupported type {text}")
