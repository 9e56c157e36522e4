"""Named experiment presets on the synthetic dataset.

Each preset is a partial config (see ``fedsim.config``) that ``normalize``
completes. All of them run on generated data. Experiments on real datasets
need an externally prepared data file passed as ``data.path`` in a config of
your own.
"""

from __future__ import annotations

import copy

from .config import normalize
from .errors import ConfigError

# 1000 devices, one cluster, 60 features, 5 classes. latent_dim=5 is a
# calibration choice (see the README).
BASE_SYNTH = {"num_tasks": 1000, "cluster_probs": [1.0], "latent_dim": 5,
                "feature_dim": 60, "num_classes": 5}

THREE_CLUSTER_SYNTH = {"num_tasks": 100, "cluster_probs": [1 / 3, 1 / 3, 1 / 3],
                       "latent_dim": 5, "feature_dim": 60, "num_classes": 5}

TWO_CLUSTER_SYNTH = {"num_tasks": 200, "cluster_probs": [0.5, 0.5], "latent_dim": 5,
                     "feature_dim": 60, "num_classes": 5}

LOCAL_LR_GRID = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0]


def _divergence(E: int) -> dict:
    return {
        "name": f"synth-divergence-E{E}",
        "description": "FedAvg training loss versus local epochs on a 3-cluster synthetic "
                       "population of 100 devices.",
        "data": {"synth": THREE_CLUSTER_SYNTH},
        "algorithm": "fedavg",
        "fed": {"clients_per_round": 10, "local_epochs": E, "batch_size": 10,
                "client_lr": 0.1, "rounds": 20, "eval_every": 5},
    }


PRESETS: dict[str, dict] = {
    "synth-table2-fedavg": {
        "name": "synth-table2-fedavg",
        "description": "FedAvg on the 1000-device synthetic population: "
                       "10 clients/round, 100 rounds, 1 local epoch, batch 5, lr 0.1.",
        "data": {"synth": BASE_SYNTH},
        "algorithm": "fedavg",
        "fed": {"clients_per_round": 10, "local_epochs": 1, "batch_size": 5,
                "client_lr": 0.1, "rounds": 100, "eval_every": 10},
    },
    "synth-table2-local": {
        "name": "synth-table2-local",
        "description": "One model per device on the 1000-device synthetic population, "
                       "per-device lr chosen from 1e-3..1e3 on the validation split.",
        "data": {"synth": BASE_SYNTH},
        "algorithm": "local",
        "local": {"lr_grid": LOCAL_LR_GRID, "epochs": 5, "batch_size": 5},
    },
    "synth-global-iid": {
        "name": "synth-global-iid",
        "description": "Global IID pipeline: all training data pooled, 3 epochs of SGD.",
        "data": {"synth": BASE_SYNTH},
        "algorithm": "global_iid",
        "global_iid": {"epochs": 3, "lr": 0.01, "batch_size": 10},
    },
    **{f"synth-divergence-E{E}": _divergence(E) for E in (1, 4, 16, 64)},
    "synth-budget-0.75": {
        "name": "synth-budget-0.75",
        "description": "Systems budget to reach 0.75 per-sample accuracy with FedAvg "
                       "on 200 synthetic devices. Analyse with "
                       "`fedsim metrics --threshold 0.75`.",
        "data": {"synth": {**BASE_SYNTH, "num_tasks": 200, "cluster_probs": [1.0]}},
        "algorithm": "fedavg",
        "fed": {"clients_per_round": 10, "local_epochs": 1, "batch_size": 10,
                "client_lr": 0.004, "rounds": 100, "eval_every": 1},
    },
    "synth-budget-0.75-minibatch": {
        "name": "synth-budget-0.75-minibatch",
        "description": "Minibatch SGD comparator for synth-budget-0.75.",
        "data": {"synth": {**BASE_SYNTH, "num_tasks": 200, "cluster_probs": [1.0]}},
        "algorithm": "minibatch_sgd",
        "fed": {"clients_per_round": 10, "data_fraction": 1.0, "client_lr": 0.06,
                "server_lr": 0.06, "rounds": 100, "eval_every": 1},
    },
    "synth-reptile-2cluster": {
        "name": "synth-reptile-2cluster",
        "description": "Reptile with meta lr decaying linearly 2 -> 0, evaluated after "
                       "fine-tuning each device for 50 minibatches of 5.",
        "data": {"synth": TWO_CLUSTER_SYNTH},
        "algorithm": "reptile",
        "fed": {"clients_per_round": 5, "rounds": 200, "client_lr": 0.001,
                "inner_steps": 5, "inner_batch": 10, "meta_lr_start": 2.0,
                "meta_lr_end": 0.0, "eval_every": 50},
        "evaluation": {"finetune_steps": 50, "finetune_batch": 5, "finetune_lr": 0.001},
    },
}


def get_preset(name: str, seed: int | None = None) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    raw = copy.deepcopy(PRESETS[name])
    if seed is not None:
        raw["seed"] = seed
    return normalize(raw)
