"""Datasets, flat-file IO, stratified splitting and client partitioning."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Batch
from .seeding import STREAM_PARTITION, STREAM_SPLIT, STREAM_SYNTHETIC, make_rng

SCHEMES = ("iid", "shards", "unbalanced_dirichlet", "hetero_dirichlet")


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class PartitionError(ValueError):
    """The requested partition cannot be realised on the given dataset."""


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError("features must be [N x d] and labels [N]")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if y.shape[0] < self.num_classes:
            raise ValueError(f"dataset has {y.shape[0]} rows, fewer than {self.num_classes} classes")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError("label out of range")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> Batch:
        return Batch(self.features[indices], self.labels[indices])

    def as_batch(self) -> Batch:
        return Batch(self.features, self.labels)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str
    num_clients: int
    labels_per_client: int | None = None
    alpha: float | None = None
    sigma: float | None = None

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise PartitionError(f"unknown partition scheme {self.scheme!r}")
        if self.num_clients < 2:
            raise PartitionError("num_clients must be >= 2")
        if self.scheme == "shards" and (self.labels_per_client is None or self.labels_per_client < 1):
            raise PartitionError("labels_per_client must be a positive integer")
        if self.scheme in ("unbalanced_dirichlet", "hetero_dirichlet"):
            if self.alpha is None or not self.alpha > 0:
                raise PartitionError("alpha must be positive")
        if self.scheme == "unbalanced_dirichlet" and (self.sigma is None or not self.sigma > 0):
            raise PartitionError("sigma must be positive")


@dataclass(frozen=True, eq=False)
class ClientShard:
    client_id: int
    indices: np.ndarray

    def __len__(self) -> int:
        return self.indices.shape[0]


# --------------------------------------------------------------------------
# generation and IO


def _class_means(num_classes: int, dim: int) -> np.ndarray:
    """Unit-norm class centres, independent of any seed."""
    if num_classes <= dim:
        return np.eye(num_classes, dim)
    if dim == 2:
        angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
        return np.stack([np.cos(angles), np.sin(angles)], axis=1)
    directions = make_rng(0, STREAM_SYNTHETIC, num_classes, dim).standard_normal((num_classes, dim))
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def generate_synthetic(num_classes: int, dim: int, per_class: int, spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian blobs, one per class, rows grouped by class."""
    if num_classes < 2 or per_class < 2:
        raise ValueError("need num_classes >= 2 and per_class >= 2")
    if not spread > 0:
        raise ValueError("spread must be positive")
    rng = make_rng(seed, STREAM_SYNTHETIC)
    means = _class_means(num_classes, dim)
    labels = np.repeat(np.arange(num_classes), per_class)
    features = means[labels] + spread * rng.standard_normal((labels.shape[0], dim))
    return Dataset(features, labels, num_classes)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    lines = [f"#dataset v1 rows={len(ds)} dim={ds.dim} classes={ds.num_classes}"]
    for label, row in zip(ds.labels.tolist(), ds.features.tolist()):
        lines.append(",".join([str(label), *(repr(v) for v in row)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str) -> tuple[int, int, int]:
    parts = line.split()
    if len(parts) != 5 or parts[0] != "#dataset" or parts[1] != "v1":
        raise DatasetFormatError("malformed header, expected '#dataset v1 rows=<N> dim=<d> classes=<c>'", 1)
    fields = {}
    for part, key in zip(parts[2:], ("rows", "dim", "classes")):
        name, _, value = part.partition("=")
        if name != key or not value.isdigit():
            raise DatasetFormatError(f"malformed header field {part!r}", 1)
        fields[key] = int(value)
    return fields["rows"], fields["dim"], fields["classes"]


def load_dataset(path: str | Path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError("empty dataset file")
    rows, dim, classes = _parse_header(lines[0])
    body = lines[1:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != rows:
        raise DatasetFormatError(f"header declares {rows} rows but file has {len(body)}", 1)
    features = np.empty((rows, dim))
    labels = np.empty(rows, dtype=np.int64)
    for i, line in enumerate(body):
        lineno = i + 2
        cells = line.split(",")
        if len(cells) != dim + 1:
            raise DatasetFormatError(f"expected {dim + 1} fields, found {len(cells)}", lineno)
        try:
            label = int(cells[0])
            features[i] = [float(c) for c in cells[1:]]
        except ValueError as exc:
            raise DatasetFormatError(f"unparseable value ({exc})", lineno) from None
        if not 0 <= label < classes:
            raise DatasetFormatError(f"label out of range: {label} not in [0, {classes})", lineno)
        labels[i] = label
    try:
        return Dataset(features, labels, classes)
    except ValueError as exc:
        raise DatasetFormatError(str(exc)) from None


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split; each class contributes round(n_c * test_fraction) test rows.

    Rows keep their original relative order on both sides.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = make_rng(seed, STREAM_SPLIT)
    test_mask = np.zeros(len(ds), dtype=bool)
    for c in range(ds.num_classes):
        rows = np.flatnonzero(ds.labels == c)
        n_test = math.floor(rows.shape[0] * test_fraction + 0.5)
        test_mask[rng.permutation(rows)[:n_test]] = True
    if test_mask.all() or not test_mask.any():
        raise ValueError(f"test_fraction={test_fraction} leaves one side of the split empty")
    make = lambda mask: Dataset(ds.features[mask], ds.labels[mask], ds.num_classes)  # noqa: E731
    try:
        return make(~test_mask), make(test_mask)
    except ValueError as exc:
        raise ValueError(f"split is too small: {exc}") from None


# --------------------------------------------------------------------------
# sampling primitives


def sample_dirichlet(alpha: np.ndarray | list[float], rng: np.random.Generator) -> np.ndarray:
    """Dirichlet draw by normalised Gamma variates, computed in log space.

    Uses Gamma(a) = Gamma(a + 1) * U**(1/a) so that tiny concentrations do not
    underflow every component to zero.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or alpha.shape[0] < 1 or not np.all(alpha > 0):
        raise ValueError("alpha must be a non-empty vector of positive reals")
    g = rng.standard_gamma(alpha + 1.0)
    u = rng.random(alpha.shape[0])
    log_g = np.log(g) + np.log1p(-u) / alpha
    log_g -= log_g.max()
    p = np.exp(log_g)
    return p / p.sum()


def sample_lognormal(sigma: float, rng: np.random.Generator) -> float:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return math.exp(sigma * rng.standard_normal())


def allocate_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder rounding of ``proportions * total``.

    Floors first, then hands the leftover units to the largest fractional
    parts; ties go to the lower index.
    """
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    leftover = int(total - counts.sum())
    if leftover > 0:
        frac = raw - counts
        order = np.lexsort((np.arange(frac.shape[0]), -frac))
        counts[order[:leftover]] += 1
    return counts


# --------------------------------------------------------------------------
# partitioning


def _repair_empty(assigned: list[list[int]]) -> None:
    """Move one row from the currently largest client into each empty one."""
    for i, rows in enumerate(assigned):
        if rows:
            continue
        sizes = [len(r) for r in assigned]
        donor = int(np.argmax(sizes))
        if sizes[donor] < 2:
            raise PartitionError(f"client {i} received no samples and no client can spare one")
        rows.append(assigned[donor].pop())


def _iid(ds: Dataset, spec: PartitionSpec, rng: np.random.Generator) -> list[list[int]]:
    assigned: list[list[int]] = [[] for _ in range(spec.num_clients)]
    for c in range(ds.num_classes):
        rows = rng.permutation(np.flatnonzero(ds.labels == c))
        per_client = rows.shape[0] // spec.num_clients
        for i in range(spec.num_clients):
            assigned[i].extend(rows[i * per_client : (i + 1) * per_client].tolist())
    return assigned


def _shards(ds: Dataset, spec: PartitionSpec, rng: np.random.Generator) -> list[list[int]]:
    n_labels = spec.labels_per_client
    m = spec.num_clients
    if n_labels > ds.num_classes:
        raise PartitionError(
            f"labels_per_client={n_labels} exceeds the {ds.num_classes} classes in the dataset"
        )
    total_slices = m * n_labels
    # Spread slices over classes as evenly as possible; the classes receiving
    # one extra slice are picked by the seeded stream.
    slices_per_class = np.full(ds.num_classes, total_slices // ds.num_classes)
    extra = total_slices - int(slices_per_class.sum())
    slices_per_class[rng.permutation(ds.num_classes)[:extra]] += 1
    counts = ds.class_counts()
    used = slices_per_class > 0
    slice_size = int(np.min(counts[used] // slices_per_class[used]))
    if slice_size < 1:
        raise PartitionError(
            f"{total_slices} label slices requested but some class has fewer rows than slices"
        )
    slices: list[np.ndarray] = []
    for c in range(ds.num_classes):
        rows = rng.permutation(np.flatnonzero(ds.labels == c))
        for s in range(int(slices_per_class[c])):
            slices.append(rows[s * slice_size : (s + 1) * slice_size])
    # Slices are ordered by label and each class owns at most m of them, so a
    # round-robin deal never hands one client two slices of the same label.
    client_order = rng.permutation(m)
    assigned: list[list[int]] = [[] for _ in range(m)]
    for k, rows in enumerate(slices):
        assigned[int(client_order[k % m])].extend(rows.tolist())
    return assigned


def _unbalanced_dirichlet(ds: Dataset, spec: PartitionSpec, rng: np.random.Generator) -> list[list[int]]:
    class_mix = sample_dirichlet(np.full(ds.num_classes, spec.alpha), rng)
    weights = np.array([sample_lognormal(spec.sigma, rng) for _ in range(spec.num_clients)])
    weights /= weights.sum()
    counts = ds.class_counts()
    # Largest total that keeps the shared class mix within every class's supply.
    with np.errstate(divide="ignore"):
        budget = int(np.floor(np.min(np.where(class_mix > 0, counts / class_mix, np.inf))))
    per_class_totals = np.minimum(allocate_counts(class_mix, budget), counts)
    assigned: list[list[int]] = [[] for _ in range(spec.num_clients)]
    for c in range(ds.num_classes):
        rows = rng.permutation(np.flatnonzero(ds.labels == c))
        start = 0
        for i, n in enumerate(allocate_counts(weights, int(per_class_totals[c])).tolist()):
            assigned[i].extend(rows[start : start + n].tolist())
            start += n
    return assigned


def _hetero_dirichlet(ds: Dataset, spec: PartitionSpec, rng: np.random.Generator) -> list[list[int]]:
    mixes = np.stack(
        [sample_dirichlet(np.full(ds.num_classes, spec.alpha), rng) for _ in range(spec.num_clients)]
    )
    assigned: list[list[int]] = [[] for _ in range(spec.num_clients)]
    for c in range(ds.num_classes):
        rows = rng.permutation(np.flatnonzero(ds.labels == c))
        column = mixes[:, c]
        share = column / column.sum() if column.sum() > 0 else np.full(spec.num_clients, 1.0 / spec.num_clients)
        start = 0
        for i, n in enumerate(allocate_counts(share, rows.shape[0]).tolist()):
            assigned[i].extend(rows[start : start + n].tolist())
            start += n
    return assigned


_BUILDERS = {
    "iid": _iid,
    "shards": _shards,
    "unbalanced_dirichlet": _unbalanced_dirichlet,
    "hetero_dirichlet": _hetero_dirichlet,
}


def partition(ds: Dataset, spec: PartitionSpec, seed: int) -> list[ClientShard]:
    """Split ``ds`` row indices across ``spec.num_clients`` disjoint, non-empty shards."""
    rng = make_rng(seed, STREAM_PARTITION)
    assigned = _BUILDERS[spec.scheme](ds, spec, rng)
    _repair_empty(assigned)
    return [ClientShard(i, np.array(sorted(rows), dtype=np.int64)) for i, rows in enumerate(assigned)]


def format_partition(shards: list[ClientShard]) -> str:
    return "".join(
        f"{s.client_id}:{','.join(str(i) for i in s.indices.tolist())}\n" for s in shards
    )


def parse_partition(text: str) -> list[ClientShard]:
    shards = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        head, sep, body = line.partition(":")
        if not sep:
            raise DatasetFormatError("expected '<client_id>:<indices>'", lineno)
        try:
            indices = np.array([int(v) for v in body.split(",")], dtype=np.int64)
            shards.append(ClientShard(int(head), indices))
        except ValueError:
            raise DatasetFormatError("non-integer client id or row index", lineno) from None
    return shards
