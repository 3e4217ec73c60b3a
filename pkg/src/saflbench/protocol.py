"""Client and server building blocks shared by the synchronous and semi-asynchronous loops."""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .model import Batch, ParamVector, backward, clip_gradient, zeros
from .metrics import transmission_bytes

GRADIENT = "gradient"
WEIGHTS = "weights"
STRATEGY_KIND = {"fedsgd": GRADIENT, "fedavg": WEIGHTS}


class ProtocolError(RuntimeError):
    """An invariant of the federated protocol was violated."""


@dataclass(frozen=True)
class LatencyProfile:
    base_seconds_per_epoch: float
    jitter_sigma: float = 0.0
    network_delay: float = 0.0

    def __post_init__(self) -> None:
        if not self.base_seconds_per_epoch > 0:
            raise ValueError("base_seconds_per_epoch must be positive")
        if self.jitter_sigma < 0 or self.network_delay < 0:
            raise ValueError("jitter_sigma and network_delay must be non-negative")


def draw_epoch_duration(profile: LatencyProfile, rng: np.random.Generator) -> float:
    """Base time scaled by a Log-N(0, jitter_sigma^2) factor.

    A normal variate is consumed even when the jitter is zero, so the stream
    position does not depend on the jitter setting.
    """
    z = rng.standard_normal()
    return profile.base_seconds_per_epoch * math.exp(profile.jitter_sigma * z)


@dataclass(frozen=True, eq=False)
class Update:
    client_id: int
    kind: str
    payload: ParamVector
    sample_count: int
    base_round: int
    arrival_time: float = 0.0
    upload_bytes: int = 0


@dataclass(eq=False)
class ClientState:
    client_id: int
    data: Batch
    params: ParamVector
    local_epochs: int
    batch_size: int | None
    lr: float
    latency: LatencyProfile
    train_rng: np.random.Generator
    latency_rng: np.random.Generator
    base_round: int = 0
    pending_model: tuple[int, ParamVector] | None = None

    @property
    def sample_count(self) -> int:
        return len(self.data)

    def adopt_pending(self) -> None:
        """Swap in the newest broadcast model, if one arrived since the last check."""
        if self.pending_model is not None:
            round_, params = self.pending_model
            if round_ < self.base_round:
                raise ProtocolError(f"client {self.client_id} would move back to round {round_}")
            self.base_round = round_
            self.params = params
            self.pending_model = None


def local_train(
    client: ClientState,
    start_params: ParamVector,
    rng: np.random.Generator,
    *,
    strategy: str,
    clip_norm: float | None = None,
    grad_at_start: bool = False,
    metadata_bytes: int = 0,
) -> tuple[Update, ParamVector]:
    """Run ``client.local_epochs`` epochs of mini-batch SGD from ``start_params``.

    Returns the upload and the final local weights.  For FedSGD the payload is
    the sum over every step of ``|B| / |D_i|`` times the mean batch gradient,
    taken at the current local weights (or at ``start_params`` when
    ``grad_at_start``).  For FedAvg the payload is the final weights.

    A batch size of ``None`` (or one that covers the shard) means full-batch
    steps in the shard's stored row order, with no shuffle drawn.
    """
    kind = STRATEGY_KIND[strategy]
    data = client.data
    n = len(data)
    batch_size = n if client.batch_size is None else min(client.batch_size, n)
    spec = start_params.spec
    w = start_params.copy()
    accum = zeros(spec)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(client.local_epochs):
            if batch_size >= n:
                batches = [data]
            else:
                order = rng.permutation(n)
                batches = [
                    Batch(data.features[order[s : s + batch_size]], data.labels[order[s : s + batch_size]])
                    for s in range(0, n, batch_size)
                ]
            for batch in batches:
                g = backward(w, batch)
                if kind == GRADIENT:
                    g_payload = backward(start_params, batch) if grad_at_start else g
                    accum.values[...] += (len(batch) / n) * g_payload.values
                w.values[...] -= client.lr * g.values
    if kind == GRADIENT:
        payload = clip_gradient(accum, clip_norm) if clip_norm is not None else accum
    else:
        payload = w.copy()
    update = Update(
        client_id=client.client_id,
        kind=kind,
        payload=payload,
        sample_count=n,
        base_round=client.base_round,
        upload_bytes=transmission_bytes(len(payload), kind, metadata_bytes),
    )
    return update, w


def _check_kind(updates: list[Update], kind: str) -> None:
    if not updates:
        raise ProtocolError("cannot aggregate an empty update set")
    for u in updates:
        if u.kind != kind:
            raise ProtocolError(f"expected {kind} updates, client {u.client_id} sent {u.kind}")


def aggregate_fedsgd(updates: list[Update], w_g: ParamVector, eta: float) -> ParamVector:
    """w_g - eta * (unweighted mean of the gradient payloads)."""
    _check_kind(updates, GRADIENT)
    total = np.zeros_like(w_g.values)
    for u in updates:
        total += u.payload.values
    return ParamVector(w_g.values - eta * (total / len(updates)), w_g.spec)


def aggregate_fedavg(updates: list[Update]) -> ParamVector:
    """Sample-count weighted mean of the uploaded weights."""
    _check_kind(updates, WEIGHTS)
    total_samples = sum(u.sample_count for u in updates)
    out = np.zeros_like(updates[0].payload.values)
    for u in updates:
        out += (u.sample_count / total_samples) * u.payload.values
    return ParamVector(out, updates[0].payload.spec)


def staleness(update: Update, t: int) -> int:
    """Rounds the update's base model lagged behind when consumed in round ``t``."""
    if t < update.base_round + 1:
        raise ProtocolError(
            f"update from client {update.client_id} (base round {update.base_round}) consumed at round {t}"
        )
    return t - update.base_round - 1


def accumulated_staleness(consumed: list[Update], t: int) -> int:
    return sum(staleness(u, t) for u in consumed)


def select_active(num_clients: int, k: int, rng: np.random.Generator) -> list[int]:
    """Uniform ``k``-subset of client ids, returned in ascending order."""
    if not 1 <= k <= num_clients:
        raise ValueError(f"k={k} must lie in [1, {num_clients}]")
    return sorted(int(i) for i in rng.choice(num_clients, size=k, replace=False))


# --------------------------------------------------------------------------
# discrete-event queue

UPLOAD_ARRIVES = "upload"
BROADCAST_ARRIVES = "broadcast"
CLIENT_READY = "ready"

# Network deliveries at an instant settle before any client starts a new
# local round at that same instant.
_PHASE = {UPLOAD_ARRIVES: 0, BROADCAST_ARRIVES: 0, CLIENT_READY: 1}


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    client_id: int
    data: Any = None


@dataclass
class EventQueue:
    """Min-queue ordered by (time, phase, push sequence)."""

    _heap: list[tuple[float, int, int, Event]] = field(default_factory=list)
    _counter: itertools.count = field(default_factory=itertools.count)
    now: float = 0.0

    def push(self, event: Event) -> None:
        if event.time < self.now:
            raise ProtocolError(f"event scheduled in the past: {event.time} < {self.now}")
        heapq.heappush(self._heap, (event.time, _PHASE[event.kind], next(self._counter), event))

    def pop(self) -> Event:
        time, _, _, event = heapq.heappop(self._heap)
        self.now = time
        return event

    def peek(self) -> Event | None:
        return self._heap[0][3] if self._heap else None

    def __len__(self) -> int:
        return len(self._heap)
