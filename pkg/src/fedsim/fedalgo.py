"""Round-based federated training engines and baseline pipelines.

All engines share the same contract: a round samples clients, each client
works from the current global parameters on its own keyed random stream
``(seed, "client", round, device_id)``, and the server reduces the client
results in ascending device-id order. Because neither the streams nor the
reduction order depend on scheduling, running clients on a thread pool gives
bit-identical results to running them sequentially.

Costs are charged to devices only: FLOPs spent by clients on gradients and
parameter updates, ``P * bytes_per_param`` downloaded and uploaded by every
participant per round. Server-side aggregation and evaluation are free.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import Executor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import model as M
from .dataset import IID_DEVICE, DeviceData, FederatedDataset, mix_iid
from .errors import ConfigError, NumericError, RoundError
from .model import ModelSpec
from .rng import stream

logger = logging.getLogger(__name__)

EvalEntry = tuple[str, float, int]


@dataclass(frozen=True)
class FedConfig:
    clients_per_round: int = 10
    local_epochs: int = 1
    batch_size: int = 10
    client_lr: float = 0.1
    rounds: int = 100
    eval_every: int = 1
    seed: int = 0
    # minibatch SGD
    data_fraction: float = 1.0
    server_lr: float = 1.0
    # Reptile
    meta_lr_start: float = 2.0
    meta_lr_end: float = 0.0
    inner_steps: int = 5
    inner_batch: int = 10
    # accounting / aggregation
    bytes_per_param: int = 4
    aggregation: str = "samples"
    eval_fraction: float = 1.0

    def violations(self) -> list[str]:
        out = []
        for name in ("clients_per_round", "local_epochs", "batch_size", "eval_every",
                     "inner_steps", "inner_batch", "bytes_per_param"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.rounds < 0:
            out.append("rounds must be >= 0")
        for name in ("client_lr", "server_lr"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be > 0")
        if self.meta_lr_start < 0 or self.meta_lr_end < 0:
            out.append("meta learning rates must be >= 0")
        if not 0 < self.data_fraction <= 1:
            out.append("data_fraction must be in (0, 1]")
        if not 0 < self.eval_fraction <= 1:
            out.append("eval_fraction must be in (0, 1]")
        if self.aggregation not in ("samples", "uniform"):
            out.append("aggregation must be 'samples' or 'uniform'")
        return out


@dataclass
class RoundLog:
    round: int
    participants: list[str]
    train_loss: float
    cumulative_flops: int
    cumulative_bytes_up: int
    cumulative_bytes_down: int
    client_dispersion: float = 0.0
    eval: list[EvalEntry] | None = None

    def as_dict(self) -> dict:
        d = asdict(self)
        if self.eval is not None:
            d["eval"] = [[uid, acc, n] for uid, acc, n in self.eval]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoundLog":
        ev = d.get("eval")
        return cls(
            round=d["round"], participants=list(d["participants"]), train_loss=d["train_loss"],
            cumulative_flops=d["cumulative_flops"], cumulative_bytes_up=d["cumulative_bytes_up"],
            cumulative_bytes_down=d["cumulative_bytes_down"],
            client_dispersion=d.get("client_dispersion", 0.0),
            eval=None if ev is None else [(u, float(a), int(n)) for u, a, n in ev],
        )


@dataclass
class FedState:
    spec: ModelSpec
    params: np.ndarray
    train: FederatedDataset
    flops: int = 0
    bytes_up: int = 0
    bytes_down: int = 0
    pool: Executor | None = field(default=None, repr=False)

    def advance(self, params: np.ndarray, log: RoundLog) -> "FedState":
        return replace(self, params=params, flops=log.cumulative_flops,
                       bytes_up=log.cumulative_bytes_up, bytes_down=log.cumulative_bytes_down)


def _map(fn, items: Sequence, pool: Executor | None) -> list:
    if pool is None:
        return [fn(item) for item in items]
    return list(pool.map(fn, items))


# -- client-side primitives --------------------------------------------------

def select_clients(ds: FederatedDataset, clients_per_round: int, rnd: int, seed: int) -> list[str]:
    ids = ds.device_ids
    if clients_per_round > len(ids):
        raise ConfigError(f"clients_per_round={clients_per_round} exceeds the {len(ids)} "
                          "available devices")
    if clients_per_round == len(ids):
        return ids
    chosen = stream(seed, "select", rnd).choice(len(ids), size=clients_per_round, replace=False)
    return [ids[i] for i in sorted(chosen)]


def local_update(spec: ModelSpec, params: np.ndarray, data: DeviceData, epochs: int,
                 batch_size: int, lr: float, rng: np.random.Generator):
    """``epochs`` passes of minibatch SGD; returns (params, n_k, flops, mean batch loss)."""
    n = len(data)
    if n == 0:
        raise ValueError("local_update needs at least one sample")
    flops, losses = 0, []
    for _ in range(epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = perm[lo:lo + batch_size]
            g = M.gradient(spec, params, data.x[idx], data.y[idx])
            params = M.sgd_step(params, g.grad, lr)
            flops += g.flops + spec.update_flops
            losses.append(g.mean_loss)
    return params, n, flops, float(np.mean(losses)) if losses else 0.0


def sgd_steps(spec: ModelSpec, params: np.ndarray, data: DeviceData, steps: int,
              batch_size: int, lr: float, rng: np.random.Generator):
    """``steps`` minibatches drawn by cycling through fresh shuffles of the data."""
    n = len(data)
    flops = 0
    perm, pos = rng.permutation(n), 0
    for _ in range(steps):
        if pos >= n:
            perm, pos = rng.permutation(n), 0
        idx = perm[pos:pos + batch_size]
        pos += batch_size
        g = M.gradient(spec, params, data.x[idx], data.y[idx])
        params = M.sgd_step(params, g.grad, lr)
        flops += g.flops + spec.update_flops
    return params, flops


def mean_pairwise_distance(vectors: Sequence[np.ndarray]) -> float:
    if len(vectors) < 2:
        return 0.0
    a = np.stack(vectors)
    sq = np.sum(a * a, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * a @ a.T, 0.0)
    iu = np.triu_indices(len(vectors), k=1)
    return float(np.mean(np.sqrt(d2[iu])))


def _participants(state: FedState, cfg: FedConfig, rnd: int) -> list[str]:
    ids = select_clients(state.train, cfg.clients_per_round, rnd, cfg.seed)
    return sorted(ids)


def _train_loss(spec, params, train: FederatedDataset, ids) -> float:
    total, count = 0.0, 0
    for uid in ids:
        dev = train[uid]
        loss, _, _ = M.forward_loss(spec, params, dev.x, dev.y)
        total += loss * len(dev)
        count += len(dev)
    return total / count


def _log(state, cfg, rnd, ids, params, client_flops, dispersion=0.0) -> RoundLog:
    traffic = len(ids) * state.spec.num_params * cfg.bytes_per_param
    return RoundLog(
        round=rnd, participants=list(ids),
        train_loss=_train_loss(state.spec, params, state.train, ids),
        cumulative_flops=state.flops + client_flops,
        cumulative_bytes_up=state.bytes_up + traffic,
        cumulative_bytes_down=state.bytes_down + traffic,
        client_dispersion=dispersion,
    )


def weighted_average(vectors, weights) -> np.ndarray:
    """Sum of ``w_k / sum(w) * v_k``, accumulated in the given order."""
    total = float(sum(weights))
    out = np.zeros_like(vectors[0])
    for v, w in zip(vectors, weights):
        out += (w / total) * v
    return out


# -- round engines -----------------------------------------------------------

def fedavg_round(state: FedState, cfg: FedConfig, rnd: int):
    """One FedAvg round: local SGD on each participant, sample-weighted average."""
    ids = _participants(state, cfg, rnd)

    def client(uid):
        rng = stream(cfg.seed, "client", rnd, uid)
        return local_update(state.spec, state.params, state.train[uid],
                            cfg.local_epochs, cfg.batch_size, cfg.client_lr, rng)

    results = _map(client, ids, state.pool)
    if not results:
        raise RoundError(f"round {rnd}: no client produced an update")
    client_params = [r[0] for r in results]
    weights = [r[1] if cfg.aggregation == "samples" else 1 for r in results]
    params = weighted_average(client_params, weights)
    flops = sum(r[2] for r in results)
    return params, _log(state, cfg, rnd, ids, params, flops, mean_pairwise_distance(client_params))


def minibatch_sgd_round(state: FedState, cfg: FedConfig, rnd: int):
    """One gradient per participant on a random data fraction; one server step."""
    ids = _participants(state, cfg, rnd)

    def client(uid):
        dev = state.train[uid]
        m = max(1, math.ceil(cfg.data_fraction * len(dev) - 1e-9))
        rng = stream(cfg.seed, "client", rnd, uid)
        idx = np.sort(rng.choice(len(dev), size=m, replace=False))
        g = M.gradient(state.spec, state.params, dev.x[idx], dev.y[idx])
        return g.grad, m, g.flops

    results = _map(client, ids, state.pool)
    weights = [r[1] if cfg.aggregation == "samples" else 1 for r in results]
    grad = weighted_average([r[0] for r in results], weights)
    params = M.sgd_step(state.params, grad, cfg.server_lr)
    flops = sum(r[2] for r in results)
    return params, _log(state, cfg, rnd, ids, params, flops)


def meta_lr(cfg: FedConfig, rnd: int) -> float:
    """Linear decay from ``meta_lr_start`` at round 0 to ``meta_lr_end`` at round R-1."""
    if cfg.rounds <= 1:
        return cfg.meta_lr_start
    return cfg.meta_lr_start + (cfg.meta_lr_end - cfg.meta_lr_start) * rnd / (cfg.rounds - 1)


def reptile_round(state: FedState, cfg: FedConfig, rnd: int, alpha: float | None = None):
    ids = _participants(state, cfg, rnd)

    def client(uid):
        rng = stream(cfg.seed, "client", rnd, uid)
        return sgd_steps(state.spec, state.params, state.train[uid],
                         cfg.inner_steps, cfg.inner_batch, cfg.client_lr, rng)

    results = _map(client, ids, state.pool)
    alpha = meta_lr(cfg, rnd) if alpha is None else alpha
    deltas = [p - state.params for p, _ in results]
    params = state.params + alpha * weighted_average(deltas, [1] * len(deltas))
    flops = sum(f for _, f in results)
    return params, _log(state, cfg, rnd, ids, params, flops,
                        mean_pairwise_distance([p for p, _ in results]))


ROUND_ENGINES: dict[str, Callable] = {
    "fedavg": fedavg_round,
    "minibatch_sgd": minibatch_sgd_round,
    "reptile": reptile_round,
}


# -- evaluation --------------------------------------------------------------

def evaluate(spec: ModelSpec, params: np.ndarray, test: FederatedDataset,
             ids: Iterable[str] | None = None) -> list[EvalEntry]:
    ids = test.device_ids if ids is None else ids
    return [(uid, M.accuracy_top1(spec, params, test[uid].x, test[uid].y), len(test[uid]))
            for uid in ids]


def evaluate_personalized(spec: ModelSpec, params: np.ndarray, train: FederatedDataset,
                          test: FederatedDataset, finetune_steps: int = 50,
                          finetune_batch: int = 5, lr: float = 0.01, seed: int = 0,
                          pool: Executor | None = None) -> list[EvalEntry]:
    """Fine-tune a copy of ``params`` on each device's train split, score its test split."""

    def one(uid):
        local = params
        if finetune_steps > 0 and uid in train.devices:
            rng = stream(seed, "finetune", uid)
            local, _ = sgd_steps(spec, params, train[uid], finetune_steps, finetune_batch, lr, rng)
        elif finetune_steps > 0:
            logger.warning("device %s has no train split; evaluated without fine-tuning", uid)
        return uid, M.accuracy_top1(spec, local, test[uid].x, test[uid].y), len(test[uid])

    return _map(one, test.device_ids, pool)


def run_rounds(state: FedState, cfg: FedConfig, algorithm: str,
               eval_data: FederatedDataset | None = None,
               sink: Callable[[RoundLog], None] | None = None) -> FedState:
    """Drive ``cfg.rounds`` rounds, evaluating every ``eval_every`` rounds."""
    engine = ROUND_ENGINES[algorithm]
    eval_ids = None
    if eval_data is not None and cfg.eval_fraction < 1:
        k = max(1, round(cfg.eval_fraction * len(eval_data)))
        picked = stream(cfg.seed, "eval").choice(len(eval_data), size=k, replace=False)
        ids = eval_data.device_ids
        eval_ids = [ids[i] for i in sorted(picked)]
    for rnd in range(cfg.rounds):
        params, log = engine(state, cfg, rnd)
        if eval_data is not None and ((rnd + 1) % cfg.eval_every == 0 or rnd == cfg.rounds - 1):
            log.eval = evaluate(state.spec, params, eval_data, eval_ids)
        state = state.advance(params, log)
        if sink is not None:
            sink(log)
    return state


# -- baseline pipelines ------------------------------------------------------

def _fit(spec, data: DeviceData, epochs, batch_size, lr, seed, uid, init):
    rng = stream(seed, "local", uid)
    params, _, _, _ = local_update(spec, init, data, epochs, batch_size, lr, rng) \
        if epochs > 0 else (init, 0, 0, 0.0)
    return params


def train_local(train: FederatedDataset, val: FederatedDataset | None, spec: ModelSpec,
                lr_grid: Sequence[float], epochs: int, batch_size: int, seed: int = 0,
                init: np.ndarray | None = None, pool: Executor | None = None) -> dict:
    """Fit an independent model per device, choosing the lr by validation accuracy.

    Returns ``{device_id: (params, lr)}``. Ties go to the smaller lr; a
    learning rate whose training blows up numerically scores -1.
    """
    grid = sorted(set(float(lr) for lr in lr_grid))
    if not grid:
        raise ConfigError("lr_grid must be nonempty")
    init = M.init_params(spec) if init is None else init

    def one(uid):
        dev = train[uid]
        score_on = val[uid] if val is not None and uid in val.devices else None
        if score_on is None and len(grid) > 1:
            logger.warning("device %s has no validation split; selecting lr on train accuracy", uid)
            score_on = dev
        best = None
        for lr in grid:
            try:
                params = _fit(spec, dev, epochs, batch_size, lr, seed, uid, init)
            except NumericError:
                continue
            score = M.accuracy_top1(spec, params, score_on.x, score_on.y) if len(grid) > 1 else 0.0
            if best is None or score > best[0]:
                best = (score, params, lr)
        if best is None:
            logger.warning("device %s diverged for every lr; keeping initial params", uid)
            return uid, (init, grid[0])
        return uid, (best[1], best[2])

    return dict(_map(one, train.device_ids, pool))


def train_global_iid(train: FederatedDataset, spec: ModelSpec, epochs: int, lr: float,
                     batch_size: int, seed: int = 0, init: np.ndarray | None = None) -> np.ndarray:
    init = M.init_params(spec) if init is None else init
    if epochs == 0:
        return init
    pooled = mix_iid(train, seed)
    return _fit(spec, pooled[IID_DEVICE], epochs, batch_size, lr, seed, IID_DEVICE, init)
