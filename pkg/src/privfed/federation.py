"""Round-based federated training with optional gradient sanitization.

Each round samples a client subset, runs local SGD on each client, and
folds the resulting parameter deltas back into the shared model.  The
privacy placement decides where sanitization happens: per-example noise
inside each client's local loop, or per-client noise applied to whole
updates (at the server by default).  All randomness is addressed through
counter-derived streams, so results do not depend on thread scheduling.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .accountant import PrivacyLedger, ledger_query
from .data import ClientShard, Dataset, sample_batch
from .mechanism import DpConfig, clip_bound_at, clip_per_layer, sanitize_client_update, \
    sanitize_per_example_batch
from .streams import RandomStream

AGGREGATIONS = ("fedsgd", "fedavg")


@dataclass(frozen=True)
class FederationConfig:
    total_clients: int
    clients_per_round: int
    rounds: int
    local_iterations: int
    batch_size: int
    learning_rate: float
    aggregation: str = "fedsgd"
    dp: DpConfig = field(default_factory=DpConfig)
    master_seed: int = 0
    # Per-client noise is normally the server's job; flip this to have
    # clients noise their own updates before sending (the server then
    # averages without re-noising).  The accounting is identical, only
    # what an eavesdropper sees in transit changes.
    noise_at_client: bool = False

    def __post_init__(self):
        if self.total_clients < 1:
            raise ValueError("need at least one client")
        if not 1 <= self.clients_per_round <= self.total_clients:
            raise ValueError(f"clients_per_round must lie in [1, {self.total_clients}]")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_iterations < 1:
            raise ValueError("local_iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    participants: tuple[int, ...]
    accuracy: float
    update_norms: tuple[float, ...]  # mean per-layer L2 of the updates clients sent
    epsilon: float
    clip_bound: float
    wall_ms: float


@dataclass(frozen=True)
class TrainingResult:
    model: nn.ModelParams
    records: tuple[RoundRecord, ...]
    ledger: PrivacyLedger


def sample_clients(total: int, count: int, stream: RandomStream) -> tuple[int, ...]:
    """Uniform subset of `count` distinct client ids, ascending."""
    if not 1 <= count <= total:
        raise ValueError(f"count must lie in [1, {total}], got {count}")
    ids = stream.generator().choice(total, size=count, replace=False)
    return tuple(sorted(int(i) for i in ids))


def local_train_plain(model: nn.ModelParams, shard: ClientShard, iterations: int,
                      batch_size: int, lr: float, stream: RandomStream) -> nn.GradientUpdate:
    """Local mini-batch SGD in the clear; returns the parameter delta."""
    current = model
    for step in range(iterations):
        xs, ys = sample_batch(shard, batch_size, stream.child("batch", step))
        grads = [nn.example_loss_gradient(current, xs[j], int(ys[j]))[1] for j in range(batch_size)]
        current = nn.sgd_step(current, nn.grad_mean(grads), lr)
    return nn.model_delta(current, model)


def local_train_private(model: nn.ModelParams, shard: ClientShard, iterations: int,
                        batch_size: int, lr: float, bound: float, sigma: float,
                        stream: RandomStream) -> nn.GradientUpdate:
    """Local SGD with per-example clipping and noising before each average."""
    current = model
    for step in range(iterations):
        xs, ys = sample_batch(shard, batch_size, stream.child("batch", step))
        clipped = [
            clip_per_layer(nn.example_loss_gradient(current, xs[j], int(ys[j]))[1], bound)
            for j in range(batch_size)
        ]
        noisy_mean = sanitize_per_example_batch(clipped, bound, sigma, stream.child("noise", step))
        current = nn.sgd_step(current, noisy_mean, lr)
    return nn.model_delta(current, model)


def aggregate_fedsgd(model: nn.ModelParams, updates) -> nn.ModelParams:
    """Apply the average update to the shared model."""
    return nn.apply_update(model, nn.grad_mean(updates))


def aggregate_fedavg(models) -> nn.ModelParams:
    """Average full parameter sets (equivalent to fedsgd up to rounding)."""
    models = list(models)
    if not models:
        raise ValueError("cannot average an empty list of models")
    first = models[0]
    stacked = [nn.trainable_layers(m) for m in models]
    if any(len(s) != len(stacked[0]) for s in stacked):
        raise ValueError("models have different layer counts")
    n = len(models)
    mean_layers = []
    for m in range(len(stacked[0])):
        w = stacked[0][m].w.copy()
        b = stacked[0][m].b.copy()
        for s in stacked[1:]:
            if s[m].w.shape != w.shape:
                raise ValueError(f"layer shape mismatch: {s[m].w.shape} vs {w.shape}")
            w += s[m].w
            b += s[m].b
        mean_layers.append((w / n, b / n))
    out_layers: list[nn.Layer] = []
    it = iter(mean_layers)
    for layer in first.layers:
        if isinstance(layer, (nn.Dense, nn.Conv2D)):
            w, b = next(it)
            out_layers.append(type(layer)(w, b))
        else:
            out_layers.append(layer)
    return nn.ModelParams(tuple(out_layers), first.input_shape, first.num_classes)


def _check_shards(config: FederationConfig, shards) -> int:
    if len(shards) != config.total_clients:
        raise ValueError(f"{len(shards)} shards for {config.total_clients} clients")
    for shard in shards:
        cap = -(-len(shard) // config.batch_size)  # ceil division
        if config.local_iterations > cap:
            raise ValueError(
                f"client {shard.client_id}: {config.local_iterations} local iterations "
                f"exceed ceil({len(shard)}/{config.batch_size}) = {cap}"
            )
    return sum(len(s) for s in shards)


def run_training(config: FederationConfig, model: nn.ModelParams, shards,
                 validation: Dataset, threads: int = 1) -> TrainingResult:
    """Run the full schedule; returns final model, per-round records, ledger.

    Deterministic given (config, initial model, shards): client work is
    addressed by (round, client id), so neither thread count nor
    completion order can change any result.
    """
    total_examples = _check_shards(config, shards)
    dp = config.dp
    if dp.placement == "per-example":
        q = config.batch_size * config.clients_per_round / total_examples
        if q > 1.0:
            raise ValueError(
                f"global batch {config.batch_size * config.clients_per_round} exceeds "
                f"population {total_examples}"
            )
        scope = "instance"
    elif dp.placement == "per-client":
        q = config.clients_per_round / config.total_clients
        scope = "client"
    else:
        q = 0.0
        scope = "instance"
    ledger = PrivacyLedger(sigma=dp.sigma, delta=dp.delta, scope=scope)

    root = RandomStream(config.master_seed)
    records: list[RoundRecord] = []
    current = model

    for t in range(config.rounds):
        started = time.perf_counter()
        round_stream = root.child("round", t)
        participants = sample_clients(config.total_clients, config.clients_per_round,
                                      round_stream.child("select"))
        bound = clip_bound_at(dp, t, config.rounds) if dp.placement != "none" else 0.0

        def client_job(client_id: int) -> nn.GradientUpdate:
            cstream = round_stream.child("client", client_id)
            shard = shards[client_id]
            if dp.placement == "per-example":
                return local_train_private(current, shard, config.local_iterations,
                                           config.batch_size, config.learning_rate,
                                           bound, dp.sigma, cstream)
            update = local_train_plain(current, shard, config.local_iterations,
                                       config.batch_size, config.learning_rate, cstream)
            if dp.placement == "per-client" and config.noise_at_client:
                update = sanitize_client_update(update, bound, dp.sigma,
                                                cstream.child("sdp-noise"))
            return update

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                sent = list(pool.map(client_job, participants))
        else:
            sent = [client_job(i) for i in participants]

        if dp.placement == "per-client" and not config.noise_at_client:
            final_updates = [
                sanitize_client_update(u, bound, dp.sigma, round_stream.child("sdp", i))
                for i, u in zip(participants, sent)
            ]
        else:
            final_updates = sent

        if config.aggregation == "fedsgd":
            current = aggregate_fedsgd(current, final_updates)
        else:
            current = aggregate_fedavg([nn.apply_update(current, u) for u in final_updates])
        if nn.has_nonfinite(current):
            raise FloatingPointError(f"non-finite parameters after round {t}")

        if dp.placement == "per-example":
            ledger = ledger.extended(q, config.local_iterations)
        elif dp.placement == "per-client":
            ledger = ledger.extended(q, 1)
        epsilon = ledger_query(ledger)

        norms = np.array([u.layer_norms for u in sent])
        accuracy = nn.evaluate_accuracy(current, validation.features, validation.labels)
        records.append(RoundRecord(
            round_index=t,
            participants=participants,
            accuracy=accuracy,
            update_norms=tuple(float(v) for v in norms.mean(axis=0)),
            epsilon=epsilon,
            clip_bound=bound,
            wall_ms=(time.perf_counter() - started) * 1000.0,
        ))

    return TrainingResult(current, tuple(records), ledger)
