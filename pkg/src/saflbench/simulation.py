"""Synchronous (round-based) and semi-asynchronous (event-driven) federated runs."""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from . import protocol as P
from .config import RunConfig
from .data import ClientShard, Dataset, generate_synthetic, load_dataset, partition, train_test_split
from .metrics import MetricsLog, RoundRecord, evaluate_global, transmission_bytes
from .model import ModelSpec, ParamVector, backward, init_model, parameter_count
from .seeding import (
    STREAM_CLIENT_LATENCY,
    STREAM_CLIENT_TRAIN,
    STREAM_SELECT,
    make_rng,
)

THREADS_ENV = "SAFLBENCH_THREADS"


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(eq=False)
class Scenario:
    """Materialised data for a run: train/test split and client shards."""

    train: Dataset
    test: Dataset
    shards: list[ClientShard]


def load_scenario(config: RunConfig) -> Scenario:
    if config.data_source == "file":
        full = load_dataset(config.data_path)
    else:
        full = generate_synthetic(config.classes, config.dim, config.per_class, config.spread, config.data_seed)
    train, test = train_test_split(full, config.test_fraction, config.data_seed)
    shards = partition(train, config.partition_spec(), config.data_seed)
    return Scenario(train, test, shards)


def build_clients(config: RunConfig, scenario: Scenario, initial: ParamVector) -> list[P.ClientState]:
    epochs = config.per_client("local_epochs")
    batch = config.per_client("batch_size")
    lr = config.per_client("client_lr")
    base = config.per_client("base_seconds")
    jitter = config.per_client("jitter_sigma")
    delay = config.per_client("network_delay")
    clients = []
    for shard in scenario.shards:
        i = shard.client_id
        clients.append(
            P.ClientState(
                client_id=i,
                data=scenario.train.subset(shard.indices),
                params=initial,
                local_epochs=epochs[i],
                batch_size=batch[i],
                lr=lr[i],
                latency=P.LatencyProfile(base[i], jitter[i], delay[i]),
                train_rng=make_rng(config.run_seed, STREAM_CLIENT_TRAIN, i),
                latency_rng=make_rng(config.run_seed, STREAM_CLIENT_LATENCY, i),
            )
        )
    return clients


def _client_round(
    config: RunConfig, client: P.ClientState, start: ParamVector
) -> tuple[P.Update, ParamVector, float]:
    """One local round: training result plus its simulated compute time."""
    update, final = P.local_train(
        client,
        start,
        client.train_rng,
        strategy=config.strategy,
        clip_norm=config.clip_norm,
        grad_at_start=config.grad_at_start,
        metadata_bytes=config.metadata_bytes,
    )
    compute = sum(P.draw_epoch_duration(client.latency, client.latency_rng) for _ in range(client.local_epochs))
    return update, final, compute


def _aggregate(config: RunConfig, updates: list[P.Update], w_g: ParamVector) -> ParamVector:
    if config.strategy == "fedsgd":
        return P.aggregate_fedsgd(updates, w_g, config.server_lr)
    return P.aggregate_fedavg(updates)


def _prepare(config: RunConfig, scenario: Scenario | None) -> tuple[Scenario, ModelSpec, ParamVector]:
    if scenario is None:
        scenario = load_scenario(config)
    if len(scenario.shards) != config.num_clients:
        raise ValueError(f"scenario has {len(scenario.shards)} shards for {config.num_clients} clients")
    spec = config.model_spec(scenario.train.dim, scenario.train.num_classes)
    return scenario, spec, init_model(spec, config.run_seed)


def _new_log(config: RunConfig, spec: ModelSpec) -> MetricsLog:
    return MetricsLog(config_digest=config.digest(), total_params=parameter_count(spec))


def run_sfl(config: RunConfig, scenario: Scenario | None = None, models: list | None = None) -> MetricsLog:
    """Synchronous rounds: select K clients, train all from the fresh model, wait, aggregate.

    If ``models`` is given, the global model after each round is appended to it.
    """
    scenario, spec, w_g = _prepare(config, scenario)
    clients = build_clients(config, scenario, w_g)
    select_rng = make_rng(config.run_seed, STREAM_SELECT)
    broadcast = transmission_bytes(parameter_count(spec), "broadcast")
    log = _new_log(config, spec)
    clock = 0.0
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        for t in range(1, config.rounds + 1):
            active = P.select_active(config.num_clients, config.k, select_rng)
            for c in clients:
                c.params, c.base_round = w_g, t - 1
            # Each worker touches only its own client's state and streams.
            results = list(pool.map(lambda i: _client_round(config, clients[i], w_g), active))
            updates = []
            duration = 0.0
            for i, (update, final, compute) in zip(active, results):
                clients[i].params = final
                updates.append(update)
                duration = max(duration, compute + clients[i].latency.network_delay)
            w_g = _aggregate(config, updates, w_g)
            if models is not None:
                models.append(w_g)
            clock += duration
            acc, loss = evaluate_global(w_g, scenario.test)
            log.records.append(
                RoundRecord(
                    round=t,
                    sim_time=clock,
                    accuracy=acc,
                    loss=loss,
                    tau_total=P.accumulated_staleness(updates, t),
                    participants=tuple(active),
                    bytes_up=sum(u.upload_bytes for u in updates),
                    bytes_down=config.num_clients * broadcast,
                )
            )
    return log


def run_safl(
    config: RunConfig, scenario: Scenario | None = None, trace: list | None = None, models: list | None = None
) -> MetricsLog:
    """Semi-asynchronous run: aggregate whenever K uploads are buffered.

    Clients train back to back.  A broadcast model is held as pending and
    adopted when the client next starts a local round; otherwise the client
    continues from its own last weights.  If ``trace`` is given, one
    ``(round, client_id, staleness)`` tuple is appended per consumed update;
    ``models`` collects the global model after each aggregation.
    """
    scenario, spec, w_g = _prepare(config, scenario)
    clients = build_clients(config, scenario, w_g)
    broadcast = transmission_bytes(parameter_count(spec), "broadcast")
    log = _new_log(config, spec)
    queue = P.EventQueue()
    for c in clients:
        queue.push(P.Event(0.0, P.CLIENT_READY, c.client_id))
    buffer: list[P.Update] = []
    t = 0
    while t < config.rounds:
        if not queue:
            raise P.ProtocolError("event queue drained before the run finished")
        event = queue.pop()
        now = event.time
        client = clients[event.client_id]
        if event.kind == P.CLIENT_READY:
            client.adopt_pending()
            update, final, compute = _client_round(config, client, client.params)
            client.params = final
            done = now + compute
            arrival = done + client.latency.network_delay
            queue.push(P.Event(arrival, P.UPLOAD_ARRIVES, client.client_id, update))
            queue.push(P.Event(done, P.CLIENT_READY, client.client_id))
            continue
        if event.kind == P.UPLOAD_ARRIVES:
            buffer.append(dataclasses.replace(event.data, arrival_time=now))
        else:
            round_, params = event.data
            if client.pending_model is None or client.pending_model[0] < round_:
                client.pending_model = (round_, params)
        nxt = queue.peek()
        if nxt is not None and nxt.time == now and nxt.kind != P.CLIENT_READY:
            continue  # settle every delivery at this instant first
        while len(buffer) >= config.k and t < config.rounds:
            buffer.sort(key=lambda u: (u.arrival_time, u.client_id))
            consumed, buffer = buffer[: config.k], buffer[config.k :]
            t += 1
            w_g = _aggregate(config, consumed, w_g)
            if models is not None:
                models.append(w_g)
            if trace is not None:
                trace.extend((t, u.client_id, P.staleness(u, t)) for u in consumed)
            acc, loss = evaluate_global(w_g, scenario.test)
            log.records.append(
                RoundRecord(
                    round=t,
                    sim_time=now,
                    accuracy=acc,
                    loss=loss,
                    tau_total=P.accumulated_staleness(consumed, t),
                    participants=tuple(u.client_id for u in consumed),
                    bytes_up=sum(u.upload_bytes for u in consumed),
                    bytes_down=config.num_clients * broadcast,
                )
            )
            if t < config.rounds:
                for c in clients:
                    queue.push(P.Event(now + c.latency.network_delay, P.BROADCAST_ARRIVES, c.client_id, (t, w_g)))
    return log


def run(config: RunConfig, scenario: Scenario | None = None) -> MetricsLog:
    return run_sfl(config, scenario) if config.mode == "sfl" else run_safl(config, scenario)


def centralized_baseline(
    train: Dataset, test: Dataset, spec: ModelSpec, lr: float, steps: int, seed: int = 0
) -> float:
    """Test accuracy of full-batch gradient descent on the pooled training set."""
    w = init_model(spec, seed)
    batch = train.as_batch()
    for _ in range(steps):
        w = ParamVector(w.values - lr * backward(w, batch).values, spec)
    return evaluate_global(w, test)[0]
