"""Cooperative training strategies over simulated client/server actors.

Four strategies share one engine:

* ``sequential``  -- one shared server model; clients' feature batches are
  consumed strictly in a deterministic arrival order.
* ``averaging``   -- per-client server models trained in parallel, with
  cross-layer parameter averaging at every round barrier.
* ``distributed`` -- averaging with aggregation disabled (no communication
  between clients).
* ``centralized`` -- the same split pipeline on a single actor holding the
  union of the data.

Client-side updates never see server gradients: the feature batch crossing
the boundary is detached, which makes the client trajectory a pure function
of (client data, client seed, schedule).
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .data import AugmentConfig, Dataset, augment_batch, iid_partition
from .errors import ConfigError, NumericError
from .model import BaseNetworkSpec, ClientModel, ServerModel, build_base, split
from .optim import CosineSchedule, adam_step, cosine_lr
from .seeding import derive_rng, derive_seed
from .tensor import Tensor

STRATEGIES = ("sequential", "averaging", "centralized", "distributed")


@dataclass
class TrainConfig:
    strategy: str
    clients: int
    end_layers: tuple[int, ...]
    rounds: int
    local_epochs: int = 1
    batch_size: int = 64
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    t_max: int | None = None
    server_lr_divisor: float | None = None  # sequential only; defaults to N
    seed: int = 0
    eval_every: int = 1
    workers: int = 1
    augment: bool = True
    max_batches: int | None = None  # dry-run cap on batches per client per epoch

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.clients < 1:
            raise ConfigError("clients must be >= 1")
        self.end_layers = tuple(int(v) for v in self.end_layers)
        if len(self.end_layers) != self.clients:
            raise ConfigError("end_layers must list one cut per client")
        if self.rounds < 1 or self.local_epochs < 1:
            raise ConfigError("rounds and local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.server_lr_divisor is not None and self.server_lr_divisor <= 0:
            raise ConfigError("server_lr_divisor must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def schedule(self) -> CosineSchedule:
        return CosineSchedule(self.lr_max, self.lr_min, self.t_max or self.rounds)

    @property
    def divisor(self) -> float:
        return self.server_lr_divisor if self.server_lr_divisor is not None else float(self.clients)


@dataclass
class FeatureBatch:
    """Detached cut-layer activations crossing the client->server boundary."""

    client_id: int
    h: np.ndarray
    labels: np.ndarray
    entry_layer: int
    arrival_seq: int = -1


@dataclass
class RoundLog:
    round: int
    lr: float
    server_lr: float
    client_loss: dict[int, float]
    server_loss: dict[int, float]
    client_acc: dict[int, float] = field(default_factory=dict)
    server_acc: dict[int, float] = field(default_factory=dict)
    messages: int = 0
    bytes: int = 0
    wall_clock: float = 0.0

    def to_json_dict(self) -> dict:
        """Deterministic serialization; wall_clock is deliberately omitted so
        logs are byte-reproducible across runs."""
        return {
            "round": self.round,
            "lr": self.lr,
            "server_lr": self.server_lr,
            "client_loss": {str(k): v for k, v in sorted(self.client_loss.items())},
            "server_loss": {str(k): v for k, v in sorted(self.server_loss.items())},
            "client_acc": {str(k): v for k, v in sorted(self.client_acc.items())},
            "server_acc": {str(k): v for k, v in sorted(self.server_acc.items())},
            "messages": self.messages,
            "bytes": self.bytes,
        }


@dataclass
class TrainResult:
    config: TrainConfig
    clients: dict[int, ClientModel]
    servers: dict[int, ServerModel]  # per-client servers; sequential maps all ids to one
    shared_server: ServerModel | None
    logs: list[RoundLog]
    partition: dict[int, list[int]]
    total_messages: int = 0
    total_bytes: int = 0


# ---------------------------------------------------------------------------
# Local steps

def _client_batches(
    cfg: TrainConfig, ds: Dataset, indices: list[int], client_id: int, round_idx: int
):
    """Deterministic (epoch, batch) index slices for one client's round."""
    out = []
    for epoch in range(cfg.local_epochs):
        order = derive_rng("order", cfg.seed, client_id, round_idx, epoch).permutation(
            len(indices)
        )
        idx = np.asarray(indices)[order]
        n_batches = (len(idx) + cfg.batch_size - 1) // cfg.batch_size
        if cfg.max_batches is not None:
            n_batches = min(n_batches, cfg.max_batches)
        for b in range(n_batches):
            out.append((epoch, b, idx[b * cfg.batch_size : (b + 1) * cfg.batch_size]))
    return out


_AUG = AugmentConfig()


def _load_batch(cfg, ds, client_id, round_idx, epoch, batch_idx, idx):
    if cfg.augment:
        rng = derive_rng("augment", cfg.seed, client_id, round_idx, epoch, batch_idx)
        x = augment_batch(ds.images[idx], _AUG, rng, ds.mean, ds.std)
    else:
        x = ds.normalized(idx)
    return x, ds.labels[idx]


def _client_steps(cfg, client_id: int, client: ClientModel, ds, indices, round_idx, lr,
                  losses: list[float]):
    """Generator: one local client update per yield, emitting the detached
    feature batch produced by that step.  Appends per-step losses."""
    for epoch, b, idx in _client_batches(cfg, ds, indices, client_id, round_idx):
        x, y = _load_batch(cfg, ds, client_id, round_idx, epoch, b, idx)
        h, logits = client.forward(Tensor(x), training=True)
        try:
            loss = ops.softmax_cross_entropy(logits, y)
        except NumericError as exc:
            raise NumericError(
                f"client loss diverged at round {round_idx}, client {client_id}"
            ) from exc
        client.params.zero_grad()
        loss.backward()
        adam_step(client.params, client.adam, lr)
        losses.append(float(loss.values))
        yield FeatureBatch(
            client_id=client_id, h=h.values.copy(), labels=y.copy(),
            entry_layer=client.end_layer,
        )


def _server_step(server: ServerModel, fb: FeatureBatch, lr: float, round_idx: int) -> float:
    logits = server.forward(Tensor(fb.h), training=True, entry=fb.entry_layer)
    try:
        loss = ops.softmax_cross_entropy(logits, fb.labels)
    except NumericError as exc:
        raise NumericError(
            f"server loss diverged at round {round_idx}, client {fb.client_id}"
        ) from exc
    server.params.zero_grad()
    loss.backward()
    # partial: under skip-entry, layers below the batch's entry depth get no
    # gradient from this batch and are left untouched.
    adam_step(server.params, server.adam, lr, partial=True)
    return float(loss.values)


# ---------------------------------------------------------------------------
# Aggregation

def cross_layer_aggregate(
    servers: dict[int, ServerModel], end_layers: dict[int, int], depth: int
) -> None:
    """Average each main layer over the clients whose server part holds it.

    Layer l is held by exactly the clients with end layer < l; the server
    output head is treated as layer depth+1, held by every client.  The mean
    is taken in ascending client-id order (fixed reduction order) and written
    back to every member.  Adam moments are left per-replica.
    """
    for layer in range(1, depth + 2):
        if layer <= depth:
            members = sorted(i for i, l in end_layers.items() if l < layer)
            prefix = f"layer{layer}."
        else:
            members = sorted(end_layers)
            prefix = "head.server."
        if not members:
            continue
        paths = [p for p in servers[members[0]].params.paths() if p.startswith(prefix)]
        for path in paths:
            for i in members:
                if path not in servers[i].params:
                    raise ConfigError(
                        f"cross_layer_aggregate: member {i} misses parameter {path!r}"
                    )
            mean = servers[members[0]].params[path].values.copy()
            for i in members[1:]:
                mean += servers[i].params[path].values
            mean /= len(members)
            for i in members:
                servers[i].params[path].values[...] = mean


# ---------------------------------------------------------------------------
# Evaluation

def evaluate_pair(
    client: ClientModel, server: ServerModel | None, ds: Dataset, batch_size: int = 256
) -> tuple[float, float | None]:
    """Eval-mode accuracy at the client head and along the server path."""
    correct_c = 0
    correct_s = 0
    for lo in range(0, len(ds), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(ds)))
        x = Tensor(ds.normalized(idx))
        y = ds.labels[idx]
        h, logits_c = client.forward(x, training=False)
        correct_c += int((logits_c.values.argmax(axis=1) == y).sum())
        if server is not None:
            logits_s = server.forward(h.detach(), training=False, entry=client.end_layer)
            correct_s += int((logits_s.values.argmax(axis=1) == y).sum())
    acc_c = correct_c / len(ds)
    return acc_c, (correct_s / len(ds) if server is not None else None)


# ---------------------------------------------------------------------------
# Strategy drivers

def _make_models(cfg: TrainConfig, spec: BaseNetworkSpec):
    base = build_base(spec, cfg.seed)
    clients: dict[int, ClientModel] = {}
    servers: dict[int, ServerModel] = {}
    for i in range(1, cfg.clients + 1):
        l = cfg.end_layers[i - 1]
        c, s = split(base, l, spec, derive_seed(cfg.seed, "client_head", i))
        clients[i] = c
        servers[i] = s
    return base, clients, servers


def _check_layers(cfg: TrainConfig, spec: BaseNetworkSpec) -> None:
    for l in cfg.end_layers:
        if not 1 <= l <= spec.depth:
            raise ConfigError(f"end layer {l} out of range [1, {spec.depth}]")


def run_sequential(
    cfg: TrainConfig,
    train_ds: Dataset,
    test_ds: Dataset | None,
    spec: BaseNetworkSpec,
    server_updates: bool = True,
) -> TrainResult:
    """One shared server model consuming feature batches in arrival order.

    The shared server spans layers min(end_layers)+1..L; a feature batch
    from a deeper cut enters at its own cut depth (skip-entry), so widths
    match by construction.  The arrival order is a per-round seed-derived
    round-robin over clients at batch granularity.
    """
    _check_layers(cfg, spec)
    base, clients, _ = _make_models(cfg, spec)
    entry = min(cfg.end_layers)
    _, shared = split(base, entry, spec, derive_seed(cfg.seed, "unused_head"))
    sched = cfg.schedule
    logs: list[RoundLog] = []
    partition = iid_partition(len(train_ds), cfg.clients, cfg.seed)
    arrival = 0
    total_msgs = 0
    total_bytes = 0
    for t in range(cfg.rounds):
        t0 = time.perf_counter()
        lr = cosine_lr(sched, t)
        server_lr = lr / cfg.divisor
        closs: dict[int, list[float]] = {i: [] for i in clients}
        sloss: dict[int, list[float]] = {i: [] for i in clients}
        gens = {
            i: _client_steps(cfg, i, clients[i], train_ds, partition[i], t, lr, closs[i])
            for i in clients
        }
        order = derive_rng("interleave", cfg.seed, t).permutation(sorted(clients)).tolist()
        live = list(order)
        while live:
            still = []
            for i in live:
                fb = next(gens[i], None)
                if fb is None:
                    continue
                still.append(i)
                fb.arrival_seq = arrival
                arrival += 1
                total_msgs += 1
                total_bytes += fb.h.nbytes + fb.labels.nbytes
                if server_updates:
                    sloss[i].append(_server_step(shared, fb, server_lr, t))
            live = still
        log = RoundLog(
            round=t, lr=lr, server_lr=server_lr,
            client_loss={i: float(np.mean(v)) for i, v in closs.items() if v},
            server_loss={i: float(np.mean(v)) for i, v in sloss.items() if v},
            messages=total_msgs, bytes=total_bytes,
        )
        if test_ds is not None and (t + 1) % cfg.eval_every == 0:
            for i in sorted(clients):
                acc_c, acc_s = evaluate_pair(clients[i], shared, test_ds)
                log.client_acc[i] = acc_c
                log.server_acc[i] = acc_s
        log.wall_clock = time.perf_counter() - t0
        logs.append(log)
    return TrainResult(
        config=cfg, clients=clients, servers={i: shared for i in clients},
        shared_server=shared, logs=logs, partition=partition,
        total_messages=total_msgs, total_bytes=total_bytes,
    )


def _train_pair_round(cfg, i, client, server, ds, indices, t, lr, closs, sloss,
                      communicate: bool):
    """One client's full round against its own server; returns message stats."""
    msgs = 0
    nbytes = 0
    for fb in _client_steps(cfg, i, client, ds, indices, t, lr, closs):
        if communicate:
            msgs += 1
            nbytes += fb.h.nbytes + fb.labels.nbytes
        sloss.append(_server_step(server, fb, lr, t))
    return msgs, nbytes


def _run_parallel_rounds(
    cfg: TrainConfig,
    train_ds: Dataset,
    test_ds: Dataset | None,
    spec: BaseNetworkSpec,
    aggregate: bool,
    communicate: bool,
) -> TrainResult:
    _check_layers(cfg, spec)
    _, clients, servers = _make_models(cfg, spec)
    end_layers = {i: clients[i].end_layer for i in clients}
    sched = cfg.schedule
    partition = iid_partition(len(train_ds), cfg.clients, cfg.seed)
    logs: list[RoundLog] = []
    total_msgs = 0
    total_bytes = 0
    for t in range(cfg.rounds):
        t0 = time.perf_counter()
        lr = cosine_lr(sched, t)
        closs: dict[int, list[float]] = {i: [] for i in clients}
        sloss: dict[int, list[float]] = {i: [] for i in clients}

        def work(i):
            return _train_pair_round(
                cfg, i, clients[i], servers[i], train_ds, partition[i], t, lr,
                closs[i], sloss[i], communicate,
            )

        ids = sorted(clients)
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                stats = list(pool.map(work, ids))
        else:
            stats = [work(i) for i in ids]
        for msgs, nbytes in stats:
            total_msgs += msgs
            total_bytes += nbytes
        if aggregate:
            cross_layer_aggregate(servers, end_layers, spec.depth)
            # Broadcast of averaged layers counts as server-internal traffic,
            # not client communication; counters track the client boundary.
        log = RoundLog(
            round=t, lr=lr, server_lr=lr,
            client_loss={i: float(np.mean(v)) for i, v in closs.items() if v},
            server_loss={i: float(np.mean(v)) for i, v in sloss.items() if v},
            messages=total_msgs, bytes=total_bytes,
        )
        if test_ds is not None and (t + 1) % cfg.eval_every == 0:
            for i in ids:
                acc_c, acc_s = evaluate_pair(clients[i], servers[i], test_ds)
                log.client_acc[i] = acc_c
                log.server_acc[i] = acc_s
        log.wall_clock = time.perf_counter() - t0
        logs.append(log)
    return TrainResult(
        config=cfg, clients=clients, servers=servers, shared_server=None,
        logs=logs, partition=partition,
        total_messages=total_msgs, total_bytes=total_bytes,
    )


def run_averaging(cfg, train_ds, test_ds, spec, aggregate: bool = True) -> TrainResult:
    """Per-client server models with cross-layer aggregation at round barriers."""
    return _run_parallel_rounds(cfg, train_ds, test_ds, spec,
                                aggregate=aggregate, communicate=True)


def run_distributed(cfg, train_ds, test_ds, spec) -> TrainResult:
    """Fully independent clients: private server parts, zero communication."""
    return _run_parallel_rounds(cfg, train_ds, test_ds, spec,
                                aggregate=False, communicate=False)


def run_centralized(cfg, train_ds, test_ds, spec) -> TrainResult:
    """Single actor training the split pipeline on the union of all data.

    Requires a homogeneous end-layer configuration (the client head needs a
    single attachment point).
    """
    if len(set(cfg.end_layers)) != 1:
        raise ConfigError("centralized training requires a homogeneous end layer")
    mono = TrainConfig(
        strategy="centralized", clients=1, end_layers=(cfg.end_layers[0],),
        rounds=cfg.rounds, local_epochs=cfg.local_epochs, batch_size=cfg.batch_size,
        lr_max=cfg.lr_max, lr_min=cfg.lr_min, t_max=cfg.t_max,
        seed=cfg.seed, eval_every=cfg.eval_every, workers=cfg.workers,
        augment=cfg.augment, max_batches=cfg.max_batches,
    )
    return _run_parallel_rounds(mono, train_ds, test_ds, spec,
                                aggregate=False, communicate=False)


def run_strategy(cfg: TrainConfig, train_ds, test_ds, spec) -> TrainResult:
    if cfg.strategy == "sequential":
        return run_sequential(cfg, train_ds, test_ds, spec)
    if cfg.strategy == "averaging":
        return run_averaging(cfg, train_ds, test_ds, spec)
    if cfg.strategy == "distributed":
        return run_distributed(cfg, train_ds, test_ds, spec)
    if cfg.strategy == "centralized":
        return run_centralized(cfg, train_ds, test_ds, spec)
    raise ConfigError(f"unknown strategy {cfg.strategy!r}")
