import json

import numpy as np
import pytest

from fsddi.data import DataConfig, generate_dataset, partition
from fsddi.errors import ConfigurationError, DivergenceError, ProtocolError
from fsddi.fed import (ClientData, ClientUpdate, RoundConfig, ServerState, fedavg_aggregate,
                       fedavg_round, local_train, make_clients, run_federated, scaffold_round)
from fsddi.nn import SegNetConfig, backward, init_params
from fsddi.rng import stream

NET = SegNetConfig(height=8, width=12, channels=(2, 4, 2))


def toy_client(k, n, seed):
    rng = np.random.default_rng(seed)
    images = rng.uniform(size=(n, 8, 12))
    masks = rng.integers(0, 5, size=(n, 8, 12)).astype(np.uint8)
    return ClientData(k, np.arange(100 * k, 100 * k + n), images, masks)


def mean_grad(params, images, masks):
    w = np.full(masks.shape, 1.0 / masks.size)
    return backward(params, images, masks, w).values


@pytest.fixture
def w0():
    return init_params(NET, seed=1)


def test_zero_lr_gives_zero_delta(w0):
    u = local_train(toy_client(0, 5, 0), w0, RoundConfig(local_epochs=2), 0.0, stream(0, "t"))
    assert np.all(u.delta == 0)


def test_single_sample_is_one_step(w0):
    c = toy_client(0, 1, 0)
    u = local_train(c, w0, RoundConfig(batch_size=16), 0.1, stream(0, "t"))
    assert u.steps == 1
    np.testing.assert_allclose(u.delta, -0.1 * mean_grad(w0, c.images, c.targets), atol=1e-14)


def test_identical_clients_identical_updates(w0):
    a, b = toy_client(0, 6, 4), toy_client(0, 6, 4)
    cfg = RoundConfig(batch_size=4, local_epochs=2)
    ua = local_train(a, w0, cfg, 0.1, stream(9, "s"))
    ub = local_train(b, w0, cfg, 0.1, stream(9, "s"))
    assert np.array_equal(ua.delta, ub.delta)


def test_empty_client_rejected(w0):
    with pytest.raises(ConfigurationError):
        local_train(toy_client(0, 0, 0), w0, RoundConfig(), 0.1, stream(0, "t"))


def test_aggregate_arithmetic(w0):
    p = w0.size
    s = ServerState(w0)
    out = fedavg_aggregate(s, [ClientUpdate(0, np.full(p, 0.5), 2), ClientUpdate(1, np.full(p, 0.5), 7)])
    np.testing.assert_allclose(out.params.values, w0.values + 0.5, atol=1e-15)
    out = fedavg_aggregate(s, [ClientUpdate(0, np.zeros(p), 1), ClientUpdate(1, np.full(p, 4.0), 3)])
    np.testing.assert_allclose(out.params.values, w0.values + 3.0, atol=1e-15)
    assert out.round == 1


def test_aggregate_affine_consistency(w0):
    target = np.random.default_rng(0).normal(size=w0.size)
    ups = [ClientUpdate(k, target - w0.values, n) for k, n in enumerate([3, 1, 8])]
    out = fedavg_aggregate(ServerState(w0), ups)
    np.testing.assert_allclose(out.params.values, target, rtol=0, atol=1e-14)


def test_aggregate_order_invariant_bitwise(w0):
    rng = np.random.default_rng(1)
    ups = [ClientUpdate(k, rng.normal(size=w0.size), int(rng.integers(1, 50))) for k in range(7)]
    a = fedavg_aggregate(ServerState(w0), ups).params.values
    b = fedavg_aggregate(ServerState(w0), ups[::-1]).params.values
    c = fedavg_aggregate(ServerState(w0), [ups[i] for i in rng.permutation(7)]).params.values
    assert np.array_equal(a, b) and np.array_equal(a, c)


def test_aggregate_shape_mismatch(w0):
    with pytest.raises(ProtocolError):
        fedavg_aggregate(ServerState(w0), [ClientUpdate(0, np.zeros(3), 1)])


def test_fedavg_equals_centralized_step(w0):
    clients = [toy_client(k, 4, k) for k in range(5)]
    cfg = RoundConfig(batch_size=None, local_epochs=1, lr=0.3, lr_decay=1.0)
    server, _ = fedavg_round(ServerState(w0, lr0=0.3), clients, cfg)
    images = np.concatenate([c.images for c in clients])
    masks = np.concatenate([c.targets for c in clients])
    central = w0.values - 0.3 * mean_grad(w0, images, masks)
    assert np.max(np.abs(server.params.values - central)) <= 1e-10


def test_single_client_equals_local_training(w0):
    c = toy_client(0, 9, 2)
    cfg = RoundConfig(batch_size=4, local_epochs=3, lr=0.2)
    server, _ = fedavg_round(ServerState(w0, lr0=0.2), [c], cfg, seed=5)
    u = local_train(c, w0, cfg, 0.2, stream(5, "shuffle:main", 0, 0))
    assert np.array_equal(server.params.values, w0.values + u.delta)


def test_scaffold_first_round_matches_fedavg(w0):
    clients = [toy_client(k, 5, k) for k in range(4)]
    cfg = RoundConfig(batch_size=None, lr=0.2)
    fa, _ = fedavg_round(ServerState(w0, lr0=0.2), clients, cfg)
    sc, _ = scaffold_round(ServerState(w0, lr0=0.2), clients, cfg)
    assert np.max(np.abs(fa.params.values - sc.params.values)) <= 1e-12


def test_scaffold_control_is_client_gradient(w0):
    # one full-batch step: c_k+ = c_k - c + (w - w_k)/lr is the local gradient at w
    clients = [toy_client(k, 3, 10 + k) for k in range(3)]
    cfg = RoundConfig(batch_size=None, lr=0.1)
    sc, _ = scaffold_round(ServerState(w0, lr0=0.1), clients, cfg)
    mask = w0.network.trainable
    grads = []
    for c in clients:
        g = np.where(mask, mean_grad(w0, c.images, c.targets), 0.0)
        np.testing.assert_allclose(sc.client_controls[c.client_id], g, atol=1e-12)
        grads.append(g)
    np.testing.assert_allclose(sc.control, np.mean(grads, axis=0), atol=1e-12)


def test_scaffold_identical_clients_have_no_correction(w0):
    clients = [toy_client(k, 4, 7) for k in range(3)]
    for k, c in enumerate(clients):
        c.client_id = k
    cfg = RoundConfig(batch_size=None, local_epochs=2, lr=0.1)
    s = ServerState(w0, lr0=0.1)
    for _ in range(4):
        s, _ = scaffold_round(s, clients, cfg)
        # full-batch steps do not depend on the shuffle, so corrections c - c_k stay zero
        for ck in s.client_controls.values():
            assert np.max(np.abs(s.control - ck)) <= 1e-10 * max(1.0, np.abs(ck).max())


def test_run_zero_rounds_returns_init(w0):
    res = run_federated([toy_client(0, 3, 0)], w0, RoundConfig(rounds=0))
    assert np.array_equal(res.final.values, w0.values)
    assert res.log == []


def test_run_is_deterministic(w0):
    clients = [toy_client(k, 6, k) for k in range(3)]
    cfg = RoundConfig(batch_size=4, lr=0.1, rounds=3)
    a = run_federated(clients, w0, cfg, seed=2)
    b = run_federated(clients, w0, cfg, seed=2)
    c = run_federated(clients, w0, cfg, seed=2, threads=3)
    strip = lambda log: json.dumps([{k: v for k, v in r.items() if k != "wall_ms"} for r in log])
    assert strip(a.log) == strip(b.log) == strip(c.log)
    assert np.array_equal(a.final.values, c.final.values)


def test_loss_non_increasing_on_iid_smoke():
    ds = generate_dataset(DataConfig(train_size=40, val_size=4, test_size=4, height=32, width=48))
    sp = partition(ds, "iid", K=4)
    clients = make_clients(ds.train, sp.clients)
    w = init_params(SegNetConfig(height=32, width=48, channels=(4, 8, 4)), seed=0)
    res = run_federated(clients, w, RoundConfig(lr=0.032, batch_size=None, rounds=10))
    losses = [r["train_loss"] for r in res.log]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_divergence_names_client_and_batch(w0):
    c = toy_client(3, 4, 0)
    with pytest.raises(DivergenceError) as info:
        run_federated([c], w0, RoundConfig(lr=1e300, rounds=3))
    assert info.value.client == 3 and info.value.batch is not None
    assert info.value.round is not None


def test_lr_schedule():
    cfg = RoundConfig(lr=1.0, lr_decay=0.5)
    assert cfg.lr_at(3) == 0.125
    with pytest.raises(ConfigurationError):
        RoundConfig(optimizer="adam")


def test_checkpoints_and_best(w0):
    clients = [toy_client(0, 4, 0)]
    scores = iter([0.1, 0.5, 0.3, 0.2])
    res = run_federated(clients, w0, RoundConfig(rounds=3, lr=0.1),
                        evaluate=lambda p: next(scores), checkpoints=(0, 2))
    assert res.best_round == 1 and res.best_score == 0.5
    assert sorted(res.checkpoints) == [0, 2]
    assert np.array_equal(res.checkpoints[0].values, w0.values)
