"""Per-round evaluation, convergence and oscillation statistics, resource accounting."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

from .data import Dataset
from .model import ParamVector, forward_eval

HEADER_BYTES = 64
BYTES_PER_PARAM = 8
NAN_LOSS = -1.0

CSV_HEADER = "round,sim_time,accuracy,loss,tau,participants,bytes_up,bytes_down"


@dataclass(frozen=True)
class RoundRecord:
    round: int
    sim_time: float
    accuracy: float
    loss: float
    tau_total: int
    participants: tuple[int, ...]
    bytes_up: int
    bytes_down: int


@dataclass
class MetricsLog:
    records: list[RoundRecord] = field(default_factory=list)
    config_digest: str = ""
    total_params: int = 0

    def accuracies(self) -> list[float]:
        return [r.accuracy for r in self.records]

    def taus(self) -> list[int]:
        return [r.tau_total for r in self.records]


@dataclass(frozen=True)
class ConvergenceReport:
    target: float
    t_first: int | None
    t_stable: int | None


@dataclass(frozen=True)
class OscillationReport:
    thresholds: tuple[float, ...]
    counts: tuple[int, ...]


@dataclass(frozen=True)
class Totals:
    rounds: int
    final_accuracy: float
    best_accuracy: float
    total_tau: int
    bytes_up: int
    bytes_down: int
    sim_time: float


def evaluate_global(params: ParamVector, test: Dataset) -> tuple[float, float]:
    """Accuracy and mean cross-entropy on ``test``; a non-finite loss becomes -1."""
    loss, correct = forward_eval(params, test.as_batch())
    if not math.isfinite(loss):
        loss = NAN_LOSS
    return correct / len(test), loss


def convergence_epochs(acc: list[float], target: float) -> ConvergenceReport:
    """First round reaching ``target`` and first round after which it never dips below.

    Both are 1-based; ``None`` when the condition is never met.
    """
    if len(acc) == 0:
        raise ValueError("accuracy series is empty")
    t_first = next((i + 1 for i, a in enumerate(acc) if a >= target), None)
    t_stable = None
    for i in range(len(acc) - 1, -1, -1):
        if acc[i] < target:
            break
        t_stable = i + 1
    return ConvergenceReport(target, t_first, t_stable)


def count_oscillations(acc: list[float], ots: float) -> int:
    """Number of round-over-round drops strictly larger than ``ots``."""
    if not ots > 0:
        raise ValueError("oscillation threshold must be positive")
    return sum(1 for prev, cur in zip(acc, acc[1:]) if prev - cur > ots)


def transmission_bytes(num_params: int, kind: str, metadata_bytes: int = 0) -> int:
    """Size of one message on the wire.

    ``kind`` is ``gradient`` or ``weights`` for uploads and ``broadcast`` for
    the server-to-client model push.  Only weight uploads carry the model
    metadata overhead.
    """
    base = num_params * BYTES_PER_PARAM + HEADER_BYTES
    if kind == "weights":
        return base + metadata_bytes
    if kind in ("gradient", "broadcast"):
        return base
    raise ValueError(f"unknown payload kind {kind!r}")


def memory_proxy(num_clients: int, num_params: int, k: int, dataset_bytes: int = 0) -> int:
    """Analytic peak-resident estimate in bytes (not a measurement).

    One model per client plus the global model, a buffer of ``k`` payloads,
    and the raw training data.
    """
    return ((num_clients + 1) * num_params + k * num_params) * BYTES_PER_PARAM + dataset_bytes


def summarize(
    log: MetricsLog, target: float, thresholds: list[float] | tuple[float, ...]
) -> tuple[ConvergenceReport, OscillationReport, Totals]:
    if not log.records:
        raise ValueError("cannot summarize an empty log")
    acc = log.accuracies()
    osc = OscillationReport(tuple(thresholds), tuple(count_oscillations(acc, o) for o in thresholds))
    totals = Totals(
        rounds=len(log.records),
        final_accuracy=acc[-1],
        best_accuracy=max(acc),
        total_tau=sum(log.taus()),
        bytes_up=sum(r.bytes_up for r in log.records),
        bytes_down=sum(r.bytes_down for r in log.records),
        sim_time=log.records[-1].sim_time,
    )
    return convergence_epochs(acc, target), osc, totals


def _fmt(x: float) -> str:
    return format(x, ".9g")


def to_csv(log: MetricsLog) -> str:
    out = io.StringIO()
    out.write(CSV_HEADER + "\n")
    for r in log.records:
        cells = [
            str(r.round),
            _fmt(r.sim_time),
            _fmt(r.accuracy),
            _fmt(r.loss),
            str(r.tau_total),
            "|".join(str(p) for p in r.participants),
            str(r.bytes_up),
            str(r.bytes_down),
        ]
        out.write(",".join(cells) + "\n")
    return out.getvalue()


def from_csv(text: str) -> MetricsLog:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CSV_HEADER:
        raise ValueError("not a metrics CSV (header mismatch)")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != 8:
            raise ValueError(f"line {lineno}: expected 8 fields, found {len(cells)}")
        try:
            records.append(
                RoundRecord(
                    round=int(cells[0]),
                    sim_time=float(cells[1]),
                    accuracy=float(cells[2]),
                    loss=float(cells[3]),
                    tau_total=int(cells[4]),
                    participants=tuple(int(p) for p in cells[5].split("|")) if cells[5] else (),
                    bytes_up=int(cells[6]),
                    bytes_down=int(cells[7]),
                )
            )
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return MetricsLog(records)
