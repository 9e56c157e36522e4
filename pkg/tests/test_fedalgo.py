from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from fedsim import dataset as D
from fedsim import fedalgo as F
from fedsim import model as M
from fedsim.errors import ConfigError
from fedsim.model import ModelSpec
from fedsim.rng import stream
from fedsim.synthgen import SynthConfig, generate_synthetic

from conftest import make_dataset, ref_softmax_ce_linear

SPEC = ModelSpec("linear", 3, 3)


def _state(ds, params=None, spec=SPEC, pool=None):
    params = np.zeros(spec.num_params) if params is None else params
    return F.FedState(spec, params, ds, pool=pool)


def central_gd_step(ds, W, lr):
    """One full-batch GD step on the sample-weighted global loss (loop reference)."""
    x = np.concatenate([ds[u].x for u in ds])
    y = np.concatenate([ds[u].y for u in ds])
    _, grad = ref_softmax_ce_linear(W.reshape(SPEC.num_classes, -1), x, y)
    return W - lr * grad.ravel()


def test_select_all_and_determinism():
    ds = make_dataset([3] * 100)
    assert F.select_clients(ds, 100, 0, 1) == ds.device_ids
    assert F.select_clients(ds, 10, 4, 2) == F.select_clients(ds, 10, 4, 2)
    with pytest.raises(ConfigError):
        F.select_clients(ds, 101, 0, 0)


def test_select_rounds_differ():
    ds = make_dataset([3] * 100)
    same = sum(F.select_clients(ds, 10, 1, s) == F.select_clients(ds, 10, 2, s) for s in range(20))
    assert same == 0


def test_select_in_canonical_order():
    ds = make_dataset([3] * 50)
    order = {u: i for i, u in enumerate(ds.device_ids)}
    picked = F.select_clients(ds, 7, 3, 9)
    assert [order[u] for u in picked] == sorted(order[u] for u in picked)


def test_local_update_full_batch_is_one_step():
    dev = make_dataset([6])["u000"]
    p0 = np.random.default_rng(0).normal(size=SPEC.num_params)
    p, n, flops, _ = F.local_update(SPEC, p0, dev, 1, 10, 0.3, stream(0, "c"))
    expected = M.sgd_step(p0, M.gradient(SPEC, p0, dev.x, dev.y).grad, 0.3)
    assert n == 6 and np.allclose(p, expected, atol=1e-14)
    assert flops == SPEC.gradient_flops(6) + SPEC.update_flops


def test_local_update_zero_lr_and_flop_additivity():
    dev = make_dataset([13])["u000"]
    p0 = np.ones(SPEC.num_params)
    p, _, f1, _ = F.local_update(SPEC, p0, dev, 1, 4, 0.0, stream(0, "c"))
    assert np.array_equal(p, p0) and f1 > 0
    _, _, f2, _ = F.local_update(SPEC, p0, dev, 2, 4, 0.1, stream(0, "c"))
    assert f2 == 2 * f1


def test_weighted_average_example():
    assert F.weighted_average([np.array([0.0]), np.array([4.0])], [1, 3])[0] == 3.0


def test_identical_clients_fixed_point():
    ds = make_dataset([4, 5, 6])
    p0 = np.random.default_rng(1).normal(size=SPEC.num_params)
    cfg = F.FedConfig(clients_per_round=3, client_lr=1e-300, batch_size=100)
    params, _ = F.fedavg_round(_state(ds, p0), cfg, 0)
    assert np.allclose(params, p0, rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_fedavg_equals_central_gd(seed):
    rng = np.random.default_rng(seed)
    ds = make_dataset(rng.integers(1, 9, size=4).tolist(), seed=seed)
    p0 = rng.normal(size=SPEC.num_params)
    cfg = F.FedConfig(clients_per_round=4, local_epochs=1, batch_size=50, client_lr=0.2)
    params, _ = F.fedavg_round(_state(ds, p0), cfg, 0)
    assert np.max(np.abs(params - central_gd_step(ds, p0, 0.2))) < 1e-10


def test_minibatch_full_fraction_equals_central_gd_and_fedavg():
    ds = make_dataset([3, 8, 5], seed=2)
    p0 = np.random.default_rng(3).normal(size=SPEC.num_params)
    mb = F.FedConfig(clients_per_round=3, data_fraction=1.0, server_lr=0.4, client_lr=0.4)
    fa = F.FedConfig(clients_per_round=3, local_epochs=1, batch_size=100, client_lr=0.4)
    p_mb, _ = F.minibatch_sgd_round(_state(ds, p0), mb, 0)
    p_fa, _ = F.fedavg_round(_state(ds, p0), fa, 0)
    assert np.max(np.abs(p_mb - central_gd_step(ds, p0, 0.4))) < 1e-10
    assert np.max(np.abs(p_mb - p_fa)) < 1e-10


def test_minibatch_fraction_uses_at_least_one_sample():
    ds = make_dataset([3, 4], seed=2)
    cfg = F.FedConfig(clients_per_round=2, data_fraction=0.01, server_lr=0.1)
    _, log = F.minibatch_sgd_round(_state(ds), cfg, 0)
    assert log.cumulative_flops == 2 * SPEC.gradient_flops(1)


def test_minibatch_identical_gradients():
    # two devices holding the same samples produce the same gradient
    base = make_dataset([5], seed=4)["u000"]
    ds = D.FederatedDataset({"a": base, "b": base}, 3, 3)
    p0 = np.random.default_rng(0).normal(size=SPEC.num_params)
    cfg = F.FedConfig(clients_per_round=2, data_fraction=1.0, server_lr=0.5)
    params, _ = F.minibatch_sgd_round(_state(ds, p0), cfg, 0)
    g = M.gradient(SPEC, p0, base.x, base.y).grad
    assert np.allclose(params, p0 - 0.5 * g, atol=1e-14)


def test_reptile_schedule():
    cfg = F.FedConfig(rounds=5, meta_lr_start=2.0, meta_lr_end=0.0)
    assert [F.meta_lr(cfg, r) for r in range(5)] == [2.0, 1.5, 1.0, 0.5, 0.0]
    assert F.meta_lr(F.FedConfig(rounds=1), 0) == 2.0


def test_reptile_endpoints():
    ds = make_dataset([12], seed=1)
    p0 = np.random.default_rng(5).normal(size=SPEC.num_params)
    cfg = F.FedConfig(clients_per_round=1, inner_steps=4, inner_batch=3, client_lr=0.1)
    theta_k, _ = F.sgd_steps(SPEC, p0, ds["u000"], 4, 3, 0.1, stream(0, "client", 0, "u000"))
    p1, _ = F.reptile_round(_state(ds, p0), cfg, 0, alpha=1.0)
    assert np.max(np.abs(p1 - theta_k)) <= 1e-12
    p0_again, _ = F.reptile_round(_state(ds, p0), cfg, 0, alpha=0.0)
    assert np.max(np.abs(p0_again - p0)) <= 1e-12


def test_convex_hull_and_monotone_costs():
    ds = make_dataset([5, 9, 14, 3, 7, 11], seed=6)
    logs = []
    spec = SPEC
    cfg = F.FedConfig(clients_per_round=3, local_epochs=2, batch_size=4, client_lr=0.3, rounds=6)
    state = _state(ds)
    for r in range(cfg.rounds):
        ids = F.select_clients(ds, 3, r, cfg.seed)
        client_params = [F.local_update(spec, state.params, ds[u], 2, 4, 0.3,
                                        stream(cfg.seed, "client", r, u))[0] for u in sorted(ids)]
        params, log = F.fedavg_round(state, cfg, r)
        lo, hi = np.min(client_params, axis=0), np.max(client_params, axis=0)
        assert np.all(params >= lo - 1e-12) and np.all(params <= hi + 1e-12)
        state = state.advance(params, log)
        logs.append(log)
    for a, b in zip(logs, logs[1:]):
        assert b.cumulative_flops > a.cumulative_flops
        assert b.cumulative_bytes_up > a.cumulative_bytes_up
        assert b.cumulative_bytes_down > a.cumulative_bytes_down


def test_single_client_round_is_local_sgd():
    ds = make_dataset([8, 6, 9], seed=7)
    cfg = F.FedConfig(clients_per_round=1, local_epochs=3, batch_size=2, client_lr=0.1)
    state = _state(ds)
    (uid,) = F.select_clients(ds, 1, 0, cfg.seed)
    local, *_ = F.local_update(SPEC, state.params, ds[uid], 3, 2, 0.1, stream(cfg.seed, "client", 0, uid))
    params, _ = F.fedavg_round(state, cfg, 0)
    assert np.array_equal(params, local)


@pytest.mark.parametrize("algo", ["fedavg", "minibatch_sgd", "reptile"])
def test_logs_identical_across_worker_counts(algo):
    ds = make_dataset([5, 9, 14, 3, 7, 11, 20, 4], seed=8)
    cfg = F.FedConfig(clients_per_round=4, local_epochs=2, batch_size=3, rounds=4,
                      data_fraction=0.5, client_lr=0.05, server_lr=0.05)
    seq, par = [], []
    s1 = F.run_rounds(_state(ds), cfg, algo, ds, seq.append)
    with ThreadPoolExecutor(4) as pool:
        s2 = F.run_rounds(_state(ds, pool=pool), cfg, algo, ds, par.append)
    assert np.array_equal(s1.params, s2.params)
    assert [l.as_dict() for l in seq] == [l.as_dict() for l in par]


def test_uniform_aggregation_switch():
    ds = make_dataset([2, 10], seed=1)
    p0 = np.zeros(SPEC.num_params)
    cfg = F.FedConfig(clients_per_round=2, batch_size=100, client_lr=0.5, aggregation="uniform")
    params, _ = F.fedavg_round(_state(ds, p0), cfg, 0)
    steps = [M.sgd_step(p0, M.gradient(SPEC, p0, ds[u].x, ds[u].y).grad, 0.5) for u in ds]
    assert np.allclose(params, (steps[0] + steps[1]) / 2, atol=1e-14)


def test_run_rounds_eval_schedule():
    ds = make_dataset([5, 6, 7], seed=2)
    logs = []
    F.run_rounds(_state(ds), F.FedConfig(clients_per_round=2, rounds=5, eval_every=2), "fedavg",
                 ds, logs.append)
    assert [l.eval is not None for l in logs] == [False, True, False, True, True]
    assert [l.round for l in logs] == list(range(5))


# -- pipelines ---------------------------------------------------------------

def test_train_local_singleton_and_dedup():
    ds = make_dataset([10, 12], seed=3)
    train, val, _ = D.split_train_val_test(ds, seed=0)
    fitted = F.train_local(train, val, SPEC, [0.05], 2, 3, seed=1)
    assert {lr for _, lr in fitted.values()} == {0.05}
    dup = F.train_local(train, val, SPEC, [0.05, 0.05, 0.5, 0.5], 2, 3, seed=1)
    single = F.train_local(train, val, SPEC, [0.05, 0.5], 2, 3, seed=1)
    for uid in dup:
        assert dup[uid][1] == single[uid][1]
        assert np.array_equal(dup[uid][0], single[uid][0])


def _separable_device(n=20, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    x[:, 0] += np.where(np.arange(n) % 2 == 0, 3.0, -3.0)
    y = (x[:, 0] > 0).astype(int)
    return x, y


def test_train_local_picks_perfect_lr_on_separable_device():
    spec = ModelSpec("linear", 2, 2)
    x, y = _separable_device()
    train = D.FederatedDataset.from_arrays({"a": (x[:14], y[:14])}, 2, 2)
    val = D.FederatedDataset.from_arrays({"a": (x[14:], y[14:])}, 2, 2)
    grid = [1e-6, 1e-2, 1.0]
    fitted = F.train_local(train, val, spec, grid, 5, 2, seed=0)
    params, lr = fitted["a"]
    # enumerate: best validation accuracy over the grid, smallest lr among ties
    scores = {g: M.accuracy_top1(spec, F.train_local(train, val, spec, [g], 5, 2, 0)["a"][0],
                                 x[14:], y[14:]) for g in grid}
    assert max(scores.values()) == 1.0
    assert lr == min(g for g in grid if scores[g] == 1.0)
    assert M.accuracy_top1(spec, params, x[14:], y[14:]) == 1.0


def test_train_local_without_val_falls_back(caplog):
    ds = make_dataset([6], seed=1)
    fitted = F.train_local(ds, None, SPEC, [0.1, 0.2], 1, 2)
    assert "u000" in fitted
    assert "no validation split" in caplog.text


def test_global_iid_equals_local_on_pooled_device():
    ds = make_dataset([7, 9, 4], seed=5)
    params = F.train_global_iid(ds, SPEC, 2, 0.1, 4, seed=3)
    pooled = D.mix_iid(ds, 3)
    fitted = F.train_local(pooled, None, SPEC, [0.1], 2, 4, seed=3)
    assert np.array_equal(params, fitted[D.IID_DEVICE][0])


def test_global_iid_zero_epochs_returns_init():
    ds = make_dataset([7, 9], seed=5)
    init = np.arange(SPEC.num_params, dtype=float)
    assert np.array_equal(F.train_global_iid(ds, SPEC, 0, 0.1, 4, init=init), init)


def test_global_iid_reduces_loss_on_synthetic_preset():
    ds = generate_synthetic(SynthConfig(num_tasks=1000, feature_dim=60, num_classes=5, seed=0))
    train, _, _ = D.split_train_val_test(ds, seed=0)
    spec = ModelSpec("linear", 60, 5)
    pooled = D.mix_iid(train, 0)["iid_all"]
    init = np.zeros(spec.num_params)
    params = F.train_global_iid(train, spec, 3, 0.01, 10, seed=0)
    assert M.forward_loss(spec, params, pooled.x, pooled.y)[0] < M.forward_loss(spec, init, pooled.x, pooled.y)[0]


def test_personalized_no_finetune_is_plain_eval():
    ds = make_dataset([10, 15], seed=9)
    train, _, test = D.split_train_val_test(ds, seed=0)
    p = np.random.default_rng(0).normal(size=SPEC.num_params)
    plain = F.evaluate(SPEC, p, test)
    assert F.evaluate_personalized(SPEC, p, train, test, finetune_steps=0) == plain
    assert F.evaluate_personalized(SPEC, p, train, test, finetune_steps=50, lr=0.0) == plain
