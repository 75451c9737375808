"""Run configuration: a strict nested YAML document.

Unknown keys are rejected (typos should fail, not silently default) and
the fully-resolved document is echoed into the output directory so any
artifact can be replayed from its echo alone. The FIML_SEED environment
variable overrides the configured seed.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass

import numpy as np
import yaml

from .data import TaskFamily, generate_family, load_dataset
from .embedding import EmbeddingConfig
from .learner import InnerConfig
from .meta import FinetuneConfig, MetaConfig
from .objective import PSI_SCALAR_FIELDS, Psi

__all__ = ["ConfigError", "RunConfig", "DEFAULTS", "load_config", "family_from_spec"]


class ConfigError(ValueError):
    """Malformed configuration: unknown key, bad type, or bad value."""


DEFAULTS: dict = {
    "seed": 0,
    "output_dir": "runs/out",
    "threads": 1,
    "precision": 64,
    "family": {
        "kind": "gaussian",  # gaussian | ring | file
        "classes": 20,
        "dim": 32,
        "split": [10, 5, 5],
        "dispersion": 1.0,
        "mean_scale": 1.0,
        "cells": 1,
        "signal_dims": None,  # None -> full per-cell space
        "noise_scale": 1.0,
        "cell_jitter": 0.0,
        "path": None,  # FSDT file for kind=file
    },
    "embedding": {
        "kind": "linear",  # identity | linear | mlp2
        "locations": 4,
        "features": 16,
        "hidden": 32,
    },
    "psi": {
        "l_pos": 1.0,
        "l_neg": -1.0,
        "a_pos": 1.0,
        "a_neg": 1.0,
        "o_pos": 1.0,
        "o_neg": -1.0,
        "lambda_reg": 0.01,
        "lambda_tran": 0.1,
        "beta": 1.0,
        "v": None,  # None -> uniform 1/L
        "transductive": False,
        "dense": True,
        "learnable": [],
    },
    "inner": {
        "iters_train": 10,
        "iters_eval": 15,
        "init": "support",
    },
    "meta": {
        "epochs": 5,
        "batches_per_epoch": 50,
        "tasks_per_batch": 16,
        "lr": 0.02,
        "momentum": 0.9,
        "weight_decay": 0.0005,
        "ways": 5,
        "train_shots": 1,
        "eval_shots": 1,
        "queries_per_class": 15,
        "val_episodes": 100,
        "lr_decay_epochs": [],
        "lr_decay_factor": 0.1,
        "finetune": {
            "epochs": 10,
            "lr": 0.001,
            "batches_per_epoch": 25,
            "freeze_embedding": True,
        },
    },
    "eval": {
        "split": "test",
        "episodes": 600,
        "shots": 1,
        "iterations": None,  # None -> inner.iters_eval
    },
    "ablation": {
        "ladder": "main",  # main | dense_free
        "shots": [1, 5],
        "eval_episodes": 600,
    },
    "sweep": {
        "mode": "eval-side",  # eval-side | train-side
        "grid": None,  # None -> protocol default per mode
        "shots": 1,
        "eval_episodes": 300,
    },
    "confidence": {
        "split": "test",
        "episodes": 1,
        "shots": 1,
    },
}

_PSI_FIELD_NAMES = set(PSI_SCALAR_FIELDS) | {"v"}


def _merge(defaults, override, path=""):
    """Deep-merge override into defaults, rejecting unknown keys."""
    if not isinstance(override, dict):
        raise ConfigError(f"expected a mapping at {path or 'top level'}, got {type(override).__name__}")
    merged = copy.deepcopy(defaults)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict):
            merged[key] = _merge(defaults[key], value, here)
        else:
            merged[key] = value
    return merged


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


@dataclass
class RunConfig:
    """Fully-resolved configuration with typed accessors."""

    data: dict
    source: str = ""

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def output_dir(self) -> str:
        return str(self.data["output_dir"])

    @property
    def threads(self) -> int:
        t = self.data["threads"]
        return int(t) if t else max(1, os.cpu_count() or 1)

    @property
    def dense(self) -> bool:
        return bool(self.data["psi"]["dense"])

    def family_spec(self) -> dict:
        return dict(self.data["family"], seed=self.seed)

    def family(self) -> TaskFamily:
        return family_from_spec(self.family_spec())

    def embedding(self) -> EmbeddingConfig:
        fam = self.data["family"]
        emb = self.data["embedding"]
        try:
            return EmbeddingConfig(
                kind=str(emb["kind"]),
                input_dim=int(fam["dim"]),
                locations=int(emb["locations"]),
                features=int(emb["features"]),
                hidden=int(emb["hidden"]),
            )
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def psi(self) -> Psi:
        p = self.data["psi"]
        locations = int(self.data["embedding"]["locations"]) if self.dense else 1
        if p["v"] is None:
            v = np.full(locations, 1.0 / locations)
        else:
            v = np.asarray(p["v"], dtype=np.float64)
            _require(v.shape == (locations,), f"psi.v needs exactly {locations} entries")
        try:
            return Psi(
                l_pos=float(p["l_pos"]),
                l_neg=float(p["l_neg"]),
                a_pos=float(p["a_pos"]),
                a_neg=float(p["a_neg"]),
                o_pos=float(p["o_pos"]),
                o_neg=float(p["o_neg"]),
                lambda_reg=float(p["lambda_reg"]),
                lambda_tran=float(p["lambda_tran"]),
                beta=float(p["beta"]),
                v=v,
                transductive=bool(p["transductive"]),
            )
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def learnable(self) -> tuple:
        fields = tuple(self.data["psi"]["learnable"])
        for f in fields:
            _require(f in _PSI_FIELD_NAMES, f"unknown learnable psi field: {f}")
        return fields

    def inner(self) -> InnerConfig:
        i = self.data["inner"]
        try:
            return InnerConfig(iters_train=int(i["iters_train"]), iters_eval=int(i["iters_eval"]), init=str(i["init"]))
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def meta(self) -> MetaConfig:
        m = self.data["meta"]
        ft = m["finetune"]
        try:
            return MetaConfig(
                epochs=int(m["epochs"]),
                batches_per_epoch=int(m["batches_per_epoch"]),
                tasks_per_batch=int(m["tasks_per_batch"]),
                lr=float(m["lr"]),
                momentum=float(m["momentum"]),
                weight_decay=float(m["weight_decay"]),
                ways=int(m["ways"]),
                train_shots=int(m["train_shots"]),
                eval_shots=int(m["eval_shots"]),
                queries_per_class=int(m["queries_per_class"]),
                val_episodes=int(m["val_episodes"]),
                lr_decay_epochs=tuple(m["lr_decay_epochs"]),
                lr_decay_factor=float(m["lr_decay_factor"]),
                finetune=FinetuneConfig(
                    epochs=int(ft["epochs"]),
                    lr=float(ft["lr"]),
                    batches_per_epoch=int(ft["batches_per_epoch"]),
                    freeze_embedding=bool(ft["freeze_embedding"]),
                ),
            )
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def echo_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True, default_flow_style=False)


def family_from_spec(spec: dict) -> TaskFamily:
    """Build (or load) the task family a config or checkpoint describes."""
    kind = spec["kind"]
    if kind == "file":
        path = spec.get("path")
        _require(bool(path), "family.kind=file needs family.path")
        family = load_dataset(path)
        family.extra["path"] = path
        return family
    sdims = spec.get("signal_dims")
    try:
        return generate_family(
            kind=kind,
            classes=int(spec["classes"]),
            dim=int(spec["dim"]),
            split=tuple(int(s) for s in spec["split"]),
            seed=int(spec["seed"]),
            dispersion=float(spec["dispersion"]),
            mean_scale=float(spec["mean_scale"]),
            cells=int(spec.get("cells", 1)),
            signal_dims=None if sdims is None else int(sdims),
            noise_scale=float(spec.get("noise_scale", 1.0)),
            cell_jitter=float(spec.get("cell_jitter", 0.0)),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from err


def load_config(path: str) -> RunConfig:
    """Parse, merge over defaults, validate, and apply FIML_SEED."""
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}") from err
    except yaml.YAMLError as err:
        raise ConfigError(f"invalid YAML: {err}") from err
    if raw is None:
        raw = {}
    data = _merge(DEFAULTS, raw)
    env_seed = os.environ.get("FIML_SEED")
    if env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError as err:
            raise ConfigError(f"FIML_SEED must be an integer, got {env_seed!r}") from err
    cfg = RunConfig(data=data, source=str(path))
    # touch the typed sections so value errors surface at load time
    # (the family itself is built lazily; its file may not exist yet)
    cfg.embedding()
    cfg.psi()
    cfg.learnable()
    cfg.inner()
    cfg.meta()
    _require(int(data["precision"]) in (32, 64), f"precision must be 32 or 64, got {data['precision']}")
    return cfg
