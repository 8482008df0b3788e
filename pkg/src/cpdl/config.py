"""Experiment configuration: a single JSON document with dotted-key overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import fields

from .trainer import TrainConfig

DEFAULT_CONFIG = {
    "grid": {"rows": 5, "cols": 5},
    "n": 5,
    "dgp": {"I": 100, "S": 1000, "seed": 0, "I_test": 20, "second_order": False},
    "train": {"method": "cpdl", "encoder": "mlp", "moment_order": 1, "seed": 0},
    "decision": {
        "num_drivers": 4,
        "K": 100,
        "alpha": 0.95,
        "N_eval": 10000,
        "seed": 0,
        "methods": None,
    },
    "sweep": {"I": [10, 100], "S": [10, 1000], "seeds": [0, 1, 2]},
    "out": "runs",
}

TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
METHOD_CHOICES = ("cpdl", "reinforce", "gtd-rn", "gtd-ra")


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_value(text: str):
    """JSON literal if it parses, otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ValueError(f"cannot set {key!r}: {part!r} is not a section")
    node[parts[-1]] = value


def resolve(cfg: dict) -> dict:
    """Fill defaults, including method-specific training hyperparameters."""
    cfg = _merge(DEFAULT_CONFIG, cfg)
    train = cfg["train"]
    method = train["method"]
    if method not in ("cpdl", "reinforce"):
        raise ValueError(f"training method must be cpdl or reinforce, got {method!r}")
    unknown = set(train) - TRAIN_FIELDS - {"method", "encoder", "moment_order"}
    if unknown:
        raise ValueError(f"unknown train keys: {sorted(unknown)}")
    tc = TrainConfig.for_method(method, **{k: v for k, v in train.items() if k in TRAIN_FIELDS})
    for f in fields(TrainConfig):
        train[f.name] = getattr(tc, f.name)
    if cfg["decision"]["methods"] is None:
        cfg["decision"]["methods"] = [method, "gtd-rn", "gtd-ra"]
    for m in cfg["decision"]["methods"]:
        if m not in METHOD_CHOICES:
            raise ValueError(f"unknown evaluation method {m!r}")
    if cfg["dgp"]["I"] < 1 or cfg["dgp"]["S"] < 1 or cfg["dgp"]["I_test"] < 1:
        raise ValueError("I, S and I_test must be >= 1")
    if train["moment_order"] == 2 and not cfg["dgp"]["second_order"]:
        cfg["dgp"]["second_order"] = True
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**{k: v for k, v in cfg["train"].items() if k in TRAIN_FIELDS})


def config_hash(cfg: dict, exclude: tuple[str, ...] = ("out",)) -> str:
    """Short SHA-256 of the canonical JSON form, ignoring output location."""
    data = {k: v for k, v in cfg.items() if k not in exclude}
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def load_config(path=None, overrides=(), seed=None, method=None, out=None) -> dict:
    cfg: dict = {}
    if path is not None:
        with open(path) as f:
            cfg = json.load(f)
    if seed is not None:
        for section in ("dgp", "train", "decision"):
            set_dotted(cfg, f"{section}.seed", seed)
    if method is not None:
        if method in ("cpdl", "reinforce"):
            set_dotted(cfg, "train.method", method)
        else:
            set_dotted(cfg, "decision.methods", [method])
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        set_dotted(cfg, key.strip(), parse_value(value))
    if out is not None:
        cfg["out"] = out
    return resolve(cfg)
