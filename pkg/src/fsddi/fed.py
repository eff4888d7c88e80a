"""Federated round engine: local SGD, FedAvg aggregation and SCAFFOLD.

Clients are plain :class:`ClientData` records (images plus integer
targets). A target array is either a per-pixel mask ``(n, H, W)`` for the
segmentation net or a label vector ``(n,)`` for the domain classifier;
the loss is the mean per-sample cross-entropy in both cases.
"""
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, DivergenceError, NumericOverflowError, ProtocolError
from .nn import ModelParams, cross_entropy, sgd_step
from .rng import stream

log = logging.getLogger(__name__)

OPTIMIZERS = ("fedavg", "scaffold")


@dataclass
class RoundConfig:
    local_epochs: int = 1
    batch_size: Optional[int] = 16  # None: full local batch
    lr: float = 0.32
    lr_decay: float = 0.9975
    weight_decay: float = 0.0
    rounds: int = 120
    optimizer: str = "fedavg"

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ConfigurationError("local_epochs must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ConfigurationError("lr_decay must lie in (0, 1]")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigurationError("lr and weight_decay must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1 or null")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}")
        if self.rounds < 0:
            raise ConfigurationError("rounds must be >= 0")

    def lr_at(self, t):
        return self.lr * self.lr_decay ** t


@dataclass
class ClientData:
    client_id: int
    sample_ids: np.ndarray
    images: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.sample_ids)


@dataclass
class ClientUpdate:
    client_id: int
    delta: np.ndarray
    n: int
    steps: int = 0
    train_loss: float = float("nan")
    delta_control: Optional[np.ndarray] = None


@dataclass
class ServerState:
    params: ModelParams
    round: int = 0
    lr0: float = 0.32
    decay: float = 1.0
    control: Optional[np.ndarray] = None
    client_controls: dict = field(default_factory=dict)

    @property
    def lr(self):
        return self.lr0 * self.decay ** self.round


def make_clients(samples, client_ids, targets=None):
    """Client records for every shard of ``client_ids`` (lists of sample ids).

    ``targets`` maps sample id -> label for classification; by default the
    sample masks are the targets.
    """
    clients = []
    for k, ids in enumerate(client_ids):
        ids = np.asarray(ids, dtype=np.int64)
        pos = samples.position(ids) if len(ids) else np.zeros(0, dtype=np.intp)
        if targets is None:
            tgt = samples.masks[pos]
        else:
            tgt = np.array([targets[int(s)] for s in ids], dtype=np.int64)
        clients.append(ClientData(k, ids, samples.images[pos], tgt))
    return clients


def local_train(client, w_init, cfg, lr, rng, correction=None, trace=None):
    """``E`` epochs of mini-batch SGD from ``w_init`` on one client.

    Returns ``w_k - w_init`` together with the sample count and the number
    of optimizer steps taken.
    """
    n = len(client)
    if n == 0:
        raise ConfigurationError(f"client {client.client_id} has no samples")
    params = w_init.copy()
    net = params.network
    bs = n if cfg.batch_size is None else min(cfg.batch_size, n)
    steps = 0
    loss_sum = 0.0
    for epoch in range(cfg.local_epochs):
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, bs)):
            idx = np.sort(order[start:start + bs])
            if trace is not None:
                trace.append((client.client_id, client.sample_ids[idx].tolist()))
            x = client.images[idx]
            y = client.targets[idx]
            try:
                tape = net.forward(params.values, x, mode="train", track_buffers=True)
                loss, dlogits = cross_entropy(tape.output, y, np.full(y.shape, 1.0 / y.size))
                if not np.isfinite(loss):
                    raise FloatingPointError("non-finite loss")
                grad = tape.backward(dlogits)
            except (FloatingPointError, NumericOverflowError) as exc:
                raise DivergenceError(
                    f"client {client.client_id} diverged at epoch {epoch} batch {b}: {exc}",
                    client=client.client_id, batch=b) from exc
            sgd_step(params, grad, lr, cfg.weight_decay, correction)
            if tape.buffers:
                net.write_buffers(params.values, tape.buffers)
            steps += 1
            loss_sum += loss
    return ClientUpdate(client.client_id, params.values - w_init.values, n, steps,
                        loss_sum / max(steps, 1))


def fedavg_aggregate(server, updates):
    """``w + sum_k (n_k / N) dw_k`` folded in ascending client-id order."""
    if not updates:
        return replace(server, round=server.round + 1)
    p = server.params.size
    for u in updates:
        if u.delta.shape != (p,):
            raise ProtocolError(f"client {u.client_id} sent {u.delta.shape}, expected ({p},)")
    N = sum(u.n for u in updates)
    if N <= 0:
        raise ProtocolError("aggregate sample count must be positive")
    acc = np.zeros(p)
    for u in sorted(updates, key=lambda u: u.client_id):
        acc += (u.n / N) * u.delta
    new = server.params.with_values(server.params.values + acc)
    return replace(server, params=new, round=server.round + 1)


def _parallel_map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _client_rng(seed, tag, t, k):
    return stream(seed, "shuffle:" + tag, t, k)


def fedavg_round(server, clients, cfg, seed=0, tag="main", threads=1, trace=None):
    lr = server.lr
    t = server.round
    active = [c for c in clients if len(c)]

    def work(c):
        local_trace = [] if trace is not None else None
        u = local_train(c, server.params, cfg, lr, _client_rng(seed, tag, t, c.client_id),
                        trace=local_trace)
        return u, local_trace

    results = _parallel_map(work, active, threads)
    if trace is not None:
        for _, tr in results:
            trace.extend((t,) + entry for entry in tr)
    updates = [u for u, _ in results]
    return fedavg_aggregate(server, updates), updates


def scaffold_round(server, clients, cfg, seed=0, tag="main", threads=1, trace=None):
    """One SCAFFOLD round with the difference-quotient control update.

    Local steps follow ``w -= lr (g + c - c_k)``; afterwards
    ``c_k+ = c_k - c + (w_t - w_k) / (S lr)`` with ``S`` local steps. The
    server averages model and control deltas uniformly over participants.
    """
    p = server.params.size
    mask = server.params.network.trainable
    c = server.control if server.control is not None else np.zeros(p)
    ck_all = dict(server.client_controls)
    lr = server.lr
    t = server.round
    active = [cl for cl in clients if len(cl)]

    def work(cl):
        ck = ck_all.get(cl.client_id, np.zeros(p))
        local_trace = [] if trace is not None else None
        u = local_train(cl, server.params, cfg, lr, _client_rng(seed, tag, t, cl.client_id),
                        correction=c - ck, trace=local_trace)
        if lr > 0:
            ck_new = ck - c - u.delta / (u.steps * lr)
        else:
            ck_new = ck.copy()
        ck_new = np.where(mask, ck_new, 0.0)
        u.delta_control = ck_new - ck
        return u, ck_new, local_trace

    results = _parallel_map(work, active, threads)
    if trace is not None:
        for _, _, tr in results:
            trace.extend((t,) + entry for entry in tr)
    updates = [u for u, _, _ in results]
    if not updates:
        return replace(server, round=t + 1), updates
    K = len(updates)
    dw = np.zeros(p)
    dc = np.zeros(p)
    for u, ck_new, _ in sorted(results, key=lambda r: r[0].client_id):
        if u.delta.shape != (p,):
            raise ProtocolError(f"client {u.client_id} sent {u.delta.shape}, expected ({p},)")
        dw += u.delta
        dc += u.delta_control
        ck_all[u.client_id] = ck_new
    new = server.params.with_values(server.params.values + dw / K)
    return replace(server, params=new, round=t + 1, control=c + dc / K,
                   client_controls=ck_all), updates


@dataclass
class FedResult:
    best: ModelParams
    final: ModelParams
    log: list
    best_round: int
    best_score: float
    checkpoints: dict
    server: ServerState


def run_federated(clients, init, cfg, rounds=None, seed=0, evaluate: Callable = None,
                  start_round=0, threads=1, tag="main", trace=None, checkpoints=(),
                  server=None):
    """Run ``rounds`` federated rounds starting at global round ``start_round``.

    ``evaluate(params) -> float`` scores a model on held-out data (validation
    mIoU); the best-scoring model is returned alongside the final one.
    ``checkpoints`` lists absolute round counts at which to keep a copy of
    the global model.
    """
    rounds = cfg.rounds if rounds is None else rounds
    if server is None:
        server = ServerState(init.copy(), start_round, cfg.lr, cfg.lr_decay)
    step = scaffold_round if cfg.optimizer == "scaffold" else fedavg_round
    best, best_round, best_score = server.params, server.round, -np.inf
    if evaluate is not None:
        best_score = evaluate(server.params)
    saved = {}
    if server.round in checkpoints:
        saved[server.round] = server.params.copy()
    log_rows = []
    for _ in range(rounds):
        t0 = time.perf_counter()
        lr = server.lr
        try:
            server, updates = step(server, clients, cfg, seed=seed, tag=tag, threads=threads,
                                   trace=trace)
        except DivergenceError as exc:
            exc.round = server.round
            raise
        n_tot = sum(u.n for u in updates)
        train_loss = sum(u.n * u.train_loss for u in updates) / n_tot if n_tot else float("nan")
        score = evaluate(server.params) if evaluate is not None else float("nan")
        if evaluate is not None and score > best_score:
            best, best_round, best_score = server.params, server.round, score
        if server.round in checkpoints:
            saved[server.round] = server.params.copy()
        log_rows.append({"round": server.round, "lr": lr, "train_loss": train_loss,
                         "val_miou": score, "wall_ms": (time.perf_counter() - t0) * 1e3,
                         "optimizer": cfg.optimizer, "tag": tag})
        log.debug("%s round %d lr %.4g loss %.4f val %.4f", tag, server.round, lr, train_loss,
                  score)
    if evaluate is None:
        best, best_round, best_score = server.params, server.round, float("nan")
    return FedResult(best, server.params, log_rows, best_round, best_score, saved, server)


def write_round_log(rows, path, append=False):
    keys = ("round", "lr", "train_loss", "val_miou", "wall_ms", "optimizer")
    with open(path, "a" if append else "w") as fh:
        for row in rows:
            obj = {k: row[k] for k in keys}
            if "tag" in row:
                obj["tag"] = row["tag"]
            for k in ("train_loss", "val_miou"):
                if isinstance(obj[k], float) and not np.isfinite(obj[k]):
                    obj[k] = None
            fh.write(json.dumps(obj) + "\n")
