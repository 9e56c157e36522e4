"""Experiment configuration: parsing, normalization and validation.

Config files are YAML (JSON is accepted too, being a YAML subset). Keys::

    name: str                      # free-form
    description: str               # optional
    seed: int                      # master seed (splits, clients, synth default)
    workers: int                   # client-level thread parallelism
    data:
      path: str                    # dataset JSON file, or
      synth: {SynthConfig fields}  # generated in-process
    preprocess:
      min_samples: int | null
      subsample: {count: int} | {fraction: float} | null
      split: [train, val, test]
      mix_iid: bool                # pool the train split into one device
    model: {kind: linear|one_hidden, hidden_dim: int, init: zeros|gaussian, init_std: float}
    algorithm: fedavg|minibatch_sgd|reptile|local|global_iid
    fed: {FedConfig fields except seed}
    local: {lr_grid: [float], epochs: int, batch_size: int}
    global_iid: {epochs: int, lr: float, batch_size: int}
    evaluation: {weighting: per_sample|per_device, finetune_steps: int,
                 finetune_batch: int, finetune_lr: float}
"""

from __future__ import annotations

import copy
import dataclasses
import os

import yaml

from .errors import ConfigError
from .fedalgo import FedConfig
from .synthgen import SynthConfig

ALGORITHMS = ("fedavg", "minibatch_sgd", "reptile", "local", "global_iid")
ROUND_ALGORITHMS = ("fedavg", "minibatch_sgd", "reptile")

DEFAULTS = {
    "name": "experiment",
    "description": "",
    "seed": 0,
    "workers": 1,
    "data": {},
    "preprocess": {"min_samples": None, "subsample": None, "split": [0.6, 0.2, 0.2],
                   "mix_iid": False},
    "model": {"kind": "linear", "hidden_dim": 0, "init": "zeros", "init_std": 0.01},
    "algorithm": "fedavg",
    "fed": {},
    "local": {"lr_grid": [0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0], "epochs": 5,
              "batch_size": 5},
    "global_iid": {"epochs": 3, "lr": 0.1, "batch_size": 10},
    "evaluation": {"weighting": "per_sample", "finetune_steps": 0, "finetune_batch": 5,
                   "finetune_lr": 0.01},
}

_FED_FIELDS = {f.name: f.default for f in dataclasses.fields(FedConfig) if f.name != "seed"}
_SYNTH_FIELDS = {f.name: f.default for f in dataclasses.fields(SynthConfig)
                 if f.default is not dataclasses.MISSING}
_SYNTH_KEYS = {f.name for f in dataclasses.fields(SynthConfig)}


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("FEDSIM_WORKERS", "1")))
    except ValueError:
        return 1


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and out[key]:
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def normalize(raw: dict) -> dict:
    """Fill defaults so the result is a complete, self-describing config."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    cfg = _merge(DEFAULTS, raw)
    cfg["fed"] = {**_FED_FIELDS, **cfg.get("fed", {})}
    synth = cfg.get("data", {}).get("synth")
    if isinstance(synth, dict):
        merged = {**_SYNTH_FIELDS, **synth}
        if "seed" not in synth:
            merged["seed"] = cfg["seed"]
        merged["cluster_probs"] = list(merged["cluster_probs"])
        cfg["data"]["synth"] = merged
    return cfg


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: cannot parse config ({exc})") from None
    return normalize(raw or {})


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate_config(cfg: dict) -> list[str]:
    """Every violated constraint, as ``field: message`` strings. Empty means valid."""
    problems: list[str] = []
    cfg = normalize(cfg)

    unknown = set(cfg) - set(DEFAULTS)
    problems += [f"{k}: unknown key" for k in sorted(unknown)]

    if not _is_int(cfg["seed"]) or cfg["seed"] < 0:
        problems.append("seed: must be a nonnegative integer")
    if not _is_int(cfg["workers"]) or cfg["workers"] < 1:
        problems.append("workers: must be an integer >= 1")

    data = cfg["data"]
    if ("path" in data) == ("synth" in data):
        problems.append("data: give exactly one of data.path or data.synth")
    elif "synth" in data:
        synth = data["synth"]
        extra = set(synth) - _SYNTH_KEYS
        problems += [f"data.synth.{k}: unknown key" for k in sorted(extra)]
        if "num_tasks" not in synth:
            problems.append("data.synth.num_tasks: required")
        elif not extra:
            try:
                sc = SynthConfig(**{**synth, "cluster_probs": tuple(synth["cluster_probs"])})
                problems += [f"data.synth: {p}" for p in sc.violations()]
            except (TypeError, ValueError) as exc:
                problems.append(f"data.synth: {exc}")

    pre = cfg["preprocess"]
    if pre.get("min_samples") is not None and (not _is_int(pre["min_samples"]) or pre["min_samples"] < 1):
        problems.append("preprocess.min_samples: must be an integer >= 1")
    sub = pre.get("subsample")
    if sub is not None:
        if not isinstance(sub, dict) or len(sub) != 1 or not set(sub) <= {"count", "fraction"}:
            problems.append("preprocess.subsample: must be {count: n} or {fraction: f}")
        elif "count" in sub and (not _is_int(sub["count"]) or sub["count"] < 1):
            problems.append("preprocess.subsample.count: must be an integer >= 1")
        elif "fraction" in sub and not (_is_num(sub["fraction"]) and 0 < sub["fraction"] <= 1):
            problems.append("preprocess.subsample.fraction: must be in (0, 1]")
    split = pre.get("split")
    if not (isinstance(split, (list, tuple)) and len(split) == 3 and all(_is_num(f) for f in split)):
        problems.append("preprocess.split: must be three numbers")
    elif any(f <= 0 for f in split):
        problems.append("preprocess.split: fractions must be > 0")
    elif abs(sum(split) - 1.0) > 1e-9:
        problems.append(f"preprocess.split: fractions sum to {sum(split):.12g}, not 1")

    mdl = cfg["model"]
    if mdl.get("kind") not in ("linear", "one_hidden"):
        problems.append("model.kind: must be 'linear' or 'one_hidden'")
    elif mdl["kind"] == "one_hidden" and (not _is_int(mdl.get("hidden_dim")) or mdl["hidden_dim"] < 1):
        problems.append("model.hidden_dim: must be >= 1 for one_hidden")
    if mdl.get("init") not in ("zeros", "gaussian"):
        problems.append("model.init: must be 'zeros' or 'gaussian'")

    algo = cfg["algorithm"]
    if algo not in ALGORITHMS:
        problems.append(f"algorithm: must be one of {', '.join(ALGORITHMS)}")

    fed = cfg["fed"]
    extra = set(fed) - set(_FED_FIELDS)
    problems += [f"fed.{k}: unknown key" for k in sorted(extra)]
    if algo in ROUND_ALGORITHMS and not extra:
        try:
            problems += [f"fed: {p}" for p in FedConfig(**fed, seed=0).violations()]
        except TypeError as exc:
            problems.append(f"fed: {exc}")

    if algo == "local":
        loc = cfg["local"]
        grid = loc.get("lr_grid")
        if not isinstance(grid, list) or not grid or not all(_is_num(v) and v > 0 for v in grid):
            problems.append("local.lr_grid: must be a nonempty list of positive numbers")
        if not _is_int(loc.get("epochs")) or loc["epochs"] < 0:
            problems.append("local.epochs: must be an integer >= 0")
        if not _is_int(loc.get("batch_size")) or loc["batch_size"] < 1:
            problems.append("local.batch_size: must be an integer >= 1")
    if algo == "global_iid":
        g = cfg["global_iid"]
        if not _is_int(g.get("epochs")) or g["epochs"] < 0:
            problems.append("global_iid.epochs: must be an integer >= 0")
        if not (_is_num(g.get("lr")) and g["lr"] > 0):
            problems.append("global_iid.lr: must be > 0")
        if not _is_int(g.get("batch_size")) or g["batch_size"] < 1:
            problems.append("global_iid.batch_size: must be an integer >= 1")

    ev = cfg["evaluation"]
    if ev.get("weighting") not in ("per_sample", "per_device"):
        problems.append("evaluation.weighting: must be 'per_sample' or 'per_device'")
    if not _is_int(ev.get("finetune_steps")) or ev["finetune_steps"] < 0:
        problems.append("evaluation.finetune_steps: must be an integer >= 0")
    if not _is_int(ev.get("finetune_batch")) or ev["finetune_batch"] < 1:
        problems.append("evaluation.finetune_batch: must be an integer >= 1")
    if not (_is_num(ev.get("finetune_lr")) and ev["finetune_lr"] >= 0):
        problems.append("evaluation.finetune_lr: must be >= 0")
    return problems


def synth_config(cfg: dict) -> SynthConfig:
    s = dict(cfg["data"]["synth"])
    s["cluster_probs"] = tuple(s["cluster_probs"])
    return SynthConfig(**s)


def fed_config(cfg: dict) -> FedConfig:
    return FedConfig(**cfg["fed"], seed=cfg["seed"])
