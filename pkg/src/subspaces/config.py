"""Run configuration: a nested YAML document plus ``section.key=value`` overrides.

Unknown keys are rejected by name. Every section and its defaults are listed in
:data:`DEFAULTS`; the ``train`` section mirrors :class:`TrainConfig` exactly.
"""

from __future__ import annotations

import copy
from dataclasses import asdict
from pathlib import Path

import yaml

from .data import Dataset, corrupt_gaussian, inject_label_noise, load_idx, synth_split
from .errors import ConfigError
from .nn import NetworkSpec, mlp
from .subspace import Kind, parse_kind
from .trainer import TrainConfig

DEFAULTS: dict = {
    "model": {"hidden": [32, 32], "batch_norm": True},
    "data": {
        "source": "blobs",
        "seed": 0,
        "n_train": 1000,
        "n_test": 500,
        "dim": 8,
        "classes": 3,
        "spread": 0.15,
        "train_images": None,
        "train_labels": None,
        "test_images": None,
        "test_labels": None,
        "num_classes": None,
        "label_noise": 0.0,
        "corruption": 0.0,
    },
    "subspace": {"kind": "line", "m": None},
    "train": asdict(TrainConfig()),
    "eval": {"grid": "0:1:0.05", "ece_bins": 15, "ensemble_members": 6},
    "plane": {"resolution": 21, "margin": 0.2},
    "integral": {"epsilon": 0.1},
    "instability": {"k": 1, "forks": 2, "fork_seeds": None, "different_init": False, "n_mixtures": 4, "alphas": 21},
    "output": {"checkpoint_every": 0},
}


def _check_type(path: str, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, (str, int, float)) or isinstance(value, bool):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        value = str(value)
    elif isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{path}: expected a list, got {value!r}")
    return value


def merge(base: dict, update: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (update or {}).items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a section")
            out[key] = merge(base[key], value, path + ".")
        else:
            out[key] = _check_type(path, base[key], value)
    return out


def parse_override(text: str) -> dict:
    """``train.beta=0.5`` -> ``{"train": {"beta": 0.5}}`` (values parsed as YAML)."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r} is not of the form key=value")
    value = yaml.safe_load(raw) if raw.strip() else None
    tree: dict = {}
    node = tree
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return tree


def load_config(path=None, overrides=(), base: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS) if base is None else merge(DEFAULTS, base)
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a mapping")
        cfg = merge(cfg, doc)
    for ov in overrides:
        cfg = merge(cfg, parse_override(ov))
    train_config(cfg)
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


def subspace_kind(cfg: dict) -> Kind:
    return parse_kind(cfg["subspace"]["kind"], cfg["subspace"]["m"])


def datasets(cfg: dict) -> tuple[Dataset, Dataset]:
    """Train and test sets; label noise touches the training set only."""
    d = cfg["data"]
    if d["source"] == "blobs":
        train, test = synth_split(d["seed"], d["n_train"], d["n_test"], d["dim"], d["classes"], d["spread"])
    elif d["source"] == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not d[key]:
                raise ConfigError(f"data.{key} is required for idx data")
        train = load_idx(d["train_images"], d["train_labels"], d["num_classes"], "train")
        test = load_idx(d["test_images"], d["test_labels"], train.num_classes, "test")
    else:
        raise ConfigError(f"unknown data.source {d['source']!r}")
    if d["label_noise"]:
        train = inject_label_noise(train, d["label_noise"], d["seed"])
    return train, test


def corrupted_test(cfg: dict, test: Dataset) -> Dataset | None:
    sev = cfg["data"]["corruption"]
    return corrupt_gaussian(test, sev, cfg["data"]["seed"]) if sev else None


def network_spec(cfg: dict, dataset: Dataset) -> NetworkSpec:
    m = cfg["model"]
    return mlp(dataset.dim, [int(h) for h in m["hidden"]], dataset.num_classes, m["batch_norm"])
