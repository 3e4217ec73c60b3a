"""Run configuration: an INI-style key=value document with a fixed schema.

Example::

    [run]
    mode = safl
    strategy = fedsgd
    clients = 20
    k = 5
    rounds = 200
    server_lr = 0.5

    [partition]
    scheme = hetero_dirichlet
    alpha = 0.1

Per-client settings (``[clients]`` and ``[latency]``) accept either one value
or a comma-separated list with one entry per client.  ``target_accuracy = auto``
resolves to 90% of a centralized full-batch baseline trained on the same data.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .data import SCHEMES, PartitionError, PartitionSpec
from .model import ARCHITECTURES, ModelError, ModelSpec

MODES = ("sfl", "safl")
STRATEGIES = ("fedsgd", "fedavg")


class ConfigError(ValueError):
    def __init__(self, field: str, message: str) -> None:
        self.field = field
        super().__init__(f"{field}: {message}")


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def inner(text: str) -> Any:
        return None if text.strip().lower() in ("", "none") else parse(text)

    return inner


def _scalar_or_list(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def inner(text: str) -> Any:
        parts = [p.strip() for p in text.split(",")]
        values = tuple(parse(p) for p in parts)
        return values[0] if len(values) == 1 else values

    return inner


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


def _target(text: str) -> float | None:
    return None if text.strip().lower() == "auto" else float(text)


def _batch_size(text: str) -> int | None:
    return None if text.strip().lower() in ("full", "0", "none") else int(text)


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    mode: str = "sfl"
    strategy: str = "fedsgd"
    num_clients: int = 10
    k: int = 10
    rounds: int = 10
    server_lr: float = 0.1
    clip_norm: float | None = None
    grad_at_start: bool = False
    metadata_bytes: int = 0
    data_seed: int = 0
    run_seed: int = 0
    architecture: str = "softmax"
    hidden_width: int | None = None
    data_source: str = "synthetic"
    data_path: str | None = None
    classes: int = 10
    dim: int = 16
    per_class: int = 100
    spread: float = 0.5
    test_fraction: float = 0.2
    scheme: str = "iid"
    labels_per_client: int | None = None
    alpha: float | None = None
    sigma: float | None = None
    local_epochs: int | tuple[int, ...] = 1
    batch_size: int | None | tuple[int | None, ...] = None
    client_lr: float | tuple[float, ...] = 0.1
    base_seconds: float | tuple[float, ...] = 1.0
    jitter_sigma: float | tuple[float, ...] = 0.0
    network_delay: float | tuple[float, ...] = 0.0
    target_accuracy: float | None = 0.5
    oscillation_thresholds: tuple[float, ...] = (0.05, 0.10, 0.15)

    def __post_init__(self) -> None:
        validate(self)

    def replace(self, **changes: Any) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def per_client(self, name: str) -> list[Any]:
        value = getattr(self, name)
        if isinstance(value, tuple):
            return list(value)
        return [value] * self.num_clients

    def model_spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        if self.architecture == "mlp":
            return ModelSpec.mlp(input_dim, num_classes, self.hidden_width)
        return ModelSpec.softmax(input_dim, num_classes)

    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(self.scheme, self.num_clients, self.labels_per_client, self.alpha, self.sigma)

    def to_text(self) -> str:
        """Canonical document form; parsing it back yields an equal config."""
        sections: dict[str, list[str]] = {}
        for section, key, attr, _ in _SCHEMA:
            value = getattr(self, attr)
            sections.setdefault(section, []).append(f"{key} = {_render(value, attr)}")
        return "\n".join(f"[{s}]\n" + "\n".join(lines) + "\n" for s, lines in sections.items())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def _render(value: Any, attr: str = "") -> str:
    if value is None:
        return "auto" if attr == "target_accuracy" else "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_SCHEMA: list[tuple[str, str, str, Callable[[str], Any]]] = [
    ("run", "name", "name", str),
    ("run", "mode", "mode", str),
    ("run", "strategy", "strategy", str),
    ("run", "clients", "num_clients", int),
    ("run", "k", "k", int),
    ("run", "rounds", "rounds", int),
    ("run", "server_lr", "server_lr", float),
    ("run", "clip_norm", "clip_norm", _optional(float)),
    ("run", "grad_at_start", "grad_at_start", _bool),
    ("run", "metadata_bytes", "metadata_bytes", int),
    ("seeds", "data_seed", "data_seed", int),
    ("seeds", "run_seed", "run_seed", int),
    ("model", "architecture", "architecture", str),
    ("model", "hidden_width", "hidden_width", _optional(int)),
    ("data", "source", "data_source", str),
    ("data", "path", "data_path", _optional(str)),
    ("data", "classes", "classes", int),
    ("data", "dim", "dim", int),
    ("data", "per_class", "per_class", int),
    ("data", "spread", "spread", float),
    ("data", "test_fraction", "test_fraction", float),
    ("partition", "scheme", "scheme", str),
    ("partition", "labels_per_client", "labels_per_client", _optional(int)),
    ("partition", "alpha", "alpha", _optional(float)),
    ("partition", "sigma", "sigma", _optional(float)),
    ("clients", "local_epochs", "local_epochs", _scalar_or_list(int)),
    ("clients", "batch_size", "batch_size", _scalar_or_list(_batch_size)),
    ("clients", "lr", "client_lr", _scalar_or_list(float)),
    ("latency", "base_seconds", "base_seconds", _scalar_or_list(float)),
    ("latency", "jitter_sigma", "jitter_sigma", _scalar_or_list(float)),
    ("latency", "network_delay", "network_delay", _scalar_or_list(float)),
    ("metrics", "target_accuracy", "target_accuracy", _target),
    ("metrics", "oscillation_thresholds", "oscillation_thresholds", _float_list),
]
_KEYS = {(section, key): (attr, parse) for section, key, attr, parse in _SCHEMA}
_LABELS = {attr: f"{section}.{key}" for section, key, attr, _ in _SCHEMA}


def _check_choice(field: str, value: str, choices: tuple[str, ...]) -> None:
    if value not in choices:
        raise ConfigError(field, f"must be one of {', '.join(choices)}, got {value!r}")


def _check_per_client(cfg: RunConfig, field: str, predicate: Callable[[Any], bool], rule: str) -> None:
    value = getattr(cfg, field)
    label = _LABELS[field]
    values = value if isinstance(value, tuple) else (value,)
    if isinstance(value, tuple) and len(value) != cfg.num_clients:
        raise ConfigError(label, f"has {len(value)} entries for {cfg.num_clients} clients")
    for v in values:
        if not predicate(v):
            raise ConfigError(label, f"{rule}, got {v!r}")


def validate(cfg: RunConfig) -> None:
    _check_choice("run.mode", cfg.mode, MODES)
    _check_choice("run.strategy", cfg.strategy, STRATEGIES)
    _check_choice("model.architecture", cfg.architecture, ARCHITECTURES)
    _check_choice("data.source", cfg.data_source, ("synthetic", "file"))
    _check_choice("partition.scheme", cfg.scheme, SCHEMES)
    if cfg.num_clients < 2:
        raise ConfigError("run.clients", "must be >= 2")
    if not 1 <= cfg.k <= cfg.num_clients:
        raise ConfigError("run.k", f"must lie in [1, clients={cfg.num_clients}], got {cfg.k}")
    if cfg.rounds < 1:
        raise ConfigError("run.rounds", "must be >= 1")
    if not cfg.server_lr > 0:
        raise ConfigError("run.server_lr", "must be positive")
    if cfg.clip_norm is not None and not cfg.clip_norm > 0:
        raise ConfigError("run.clip_norm", "must be positive when set")
    if cfg.metadata_bytes < 0:
        raise ConfigError("run.metadata_bytes", "must be non-negative")
    for field in ("data_seed", "run_seed"):
        if getattr(cfg, field) < 0:
            raise ConfigError(f"seeds.{field}", "must be non-negative")
    if cfg.data_source == "file" and not cfg.data_path:
        raise ConfigError("data.path", "required when data.source = file")
    if cfg.data_source == "synthetic":
        if cfg.classes < 2:
            raise ConfigError("data.classes", "must be >= 2")
        if cfg.dim < 1:
            raise ConfigError("data.dim", "must be >= 1")
        if cfg.per_class < 2:
            raise ConfigError("data.per_class", "must be >= 2")
        if not cfg.spread > 0:
            raise ConfigError("data.spread", "must be positive")
    if not 0 < cfg.test_fraction < 1:
        raise ConfigError("data.test_fraction", "must lie in (0, 1)")
    if cfg.scheme == "shards" and (cfg.labels_per_client is None or cfg.labels_per_client < 1):
        raise ConfigError("partition.labels_per_client", "must be a positive integer for shards")
    if cfg.scheme in ("unbalanced_dirichlet", "hetero_dirichlet") and not (cfg.alpha is not None and cfg.alpha > 0):
        raise ConfigError("partition.alpha", f"must be positive, got {cfg.alpha!r}")
    if cfg.scheme == "unbalanced_dirichlet" and not (cfg.sigma is not None and cfg.sigma > 0):
        raise ConfigError("partition.sigma", f"must be positive, got {cfg.sigma!r}")
    try:
        cfg.model_spec(max(cfg.dim, 1), max(cfg.classes, 2))
    except ModelError as exc:
        raise ConfigError("model", str(exc)) from None
    try:
        cfg.partition_spec()
    except PartitionError as exc:
        raise ConfigError("partition", str(exc)) from None
    _check_per_client(cfg, "local_epochs", lambda v: isinstance(v, int) and v >= 1, "must be >= 1")
    _check_per_client(cfg, "batch_size", lambda v: v is None or v >= 1, "must be >= 1 or 'full'")
    _check_per_client(cfg, "client_lr", lambda v: v > 0, "must be positive")
    _check_per_client(cfg, "base_seconds", lambda v: v > 0, "must be positive")
    _check_per_client(cfg, "jitter_sigma", lambda v: v >= 0, "must be non-negative")
    _check_per_client(cfg, "network_delay", lambda v: v >= 0, "must be non-negative")
    if cfg.target_accuracy is not None and not 0 <= cfg.target_accuracy <= 1:
        raise ConfigError("metrics.target_accuracy", "must lie in [0, 1]")
    if not cfg.oscillation_thresholds or any(not o > 0 for o in cfg.oscillation_thresholds):
        raise ConfigError("metrics.oscillation_thresholds", "need at least one positive threshold")


def _make_parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str  # keys are case-sensitive
    return parser


def _read(text: str) -> configparser.ConfigParser:
    parser = _make_parser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", str(exc).splitlines()[0]) from None
    return parser


def _typed(section: str, key: str, raw: str) -> tuple[str, Any]:
    entry = _KEYS.get((section, key))
    if entry is None:
        raise ConfigError(f"{section}.{key}", "unknown key")
    attr, parse = entry
    try:
        return attr, parse(raw)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}", str(exc)) from None


def _base_values(parser: configparser.ConfigParser) -> dict[str, Any]:
    known = {section for section, _, _, _ in _SCHEMA}
    values: dict[str, Any] = {}
    for section in parser.sections():
        if section.startswith("variant:"):
            continue
        if section not in known:
            raise ConfigError(section, "unknown section")
        for key, raw in parser.items(section):
            attr, value = _typed(section, key, raw)
            values[attr] = value
    return values


def parse_config(text: str) -> RunConfig:
    parser = _read(text)
    variants = [s for s in parser.sections() if s.startswith("variant:")]
    if variants:
        raise ConfigError(variants[0], "variant sections belong in a compare spec")
    return RunConfig(**_base_values(parser))


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# Fields every member of a comparison must share.
SHARED_FIELDS = (
    "num_clients", "data_seed", "data_source", "data_path", "classes", "dim", "per_class",
    "spread", "test_fraction", "scheme", "labels_per_client", "alpha", "sigma",
)


def parse_compare(text: str) -> list[tuple[str, RunConfig]]:
    """A base config plus ``[variant:LABEL]`` sections of ``section.key = value`` overrides."""
    parser = _read(text)
    base = _base_values(parser)
    members = []
    for section in parser.sections():
        if not section.startswith("variant:"):
            continue
        label = section[len("variant:"):]
        if not label or "," in label:
            raise ConfigError(section, "variant label must be non-empty and contain no commas")
        values = dict(base)
        for key, raw in parser.items(section):
            sec, dot, name = key.partition(".")
            if not dot:
                raise ConfigError(f"{section}.{key}", "override keys take the form section.key")
            attr, value = _typed(sec, name, raw)
            values[attr] = value
        members.append((label, RunConfig(**values)))
    if len(members) < 2:
        raise ConfigError("compare", "need at least two [variant:LABEL] sections")
    first_label, first = members[0]
    for label, cfg in members[1:]:
        for name in SHARED_FIELDS:
            if getattr(cfg, name) != getattr(first, name):
                raise ConfigError(
                    _LABELS[name], f"variant {label!r} differs from {first_label!r}; compared runs must share it"
                )
    return members


def load_compare(path: str | Path) -> list[tuple[str, RunConfig]]:
    return parse_compare(Path(path).read_text(encoding="utf-8"))
