"""Presets, summaries and the multi-seed FedSGD/FedAvg gap study."""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from typing import Any

from .config import RunConfig, parse_compare
from .metrics import MetricsLog, memory_proxy, summarize
from .simulation import Scenario, centralized_baseline, load_scenario, run

AUTO_TARGET_FRACTION = 0.9
BASELINE_LR = 0.5
BASELINE_STEPS = 300

# Semi-asynchronous, strongly non-IID scenario in which the FedSGD/FedAvg gap
# shows up at desk scale.  Local training is gentle (lr 0.01, batch 32) while
# the FedSGD server step is large (2.0).
GAP_DEMO = """\
[run]
name = gap-demo
mode = safl
strategy = fedsgd
clients = 20
k = 5
rounds = 200
server_lr = 2.0

[seeds]
data_seed = 0
run_seed = 0

[model]
architecture = softmax

[data]
source = synthetic
classes = 10
dim = 16
per_class = 500
spread = 0.5
test_fraction = 0.2

[partition]
scheme = hetero_dirichlet
alpha = 0.1

[clients]
local_epochs = 2
batch_size = 32
lr = 0.01

[latency]
base_seconds = 1.0
jitter_sigma = 1.0
network_delay = 0.0

[metrics]
target_accuracy = auto
oscillation_thresholds = 0.01, 0.05, 0.15

[variant:SS]
run.mode = sfl
run.strategy = fedsgd

[variant:SA]
run.mode = sfl
run.strategy = fedavg

[variant:AS]
run.mode = safl
run.strategy = fedsgd

[variant:AA]
run.mode = safl
run.strategy = fedavg
"""

PRESETS = {"gap-demo": GAP_DEMO}


def preset_members(name: str) -> list[tuple[str, RunConfig]]:
    try:
        return parse_compare(PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}") from None


def resolve_target(config: RunConfig, scenario: Scenario) -> float:
    """The configured target accuracy, or 90% of the centralized baseline for ``auto``."""
    if config.target_accuracy is not None:
        return config.target_accuracy
    spec = config.model_spec(scenario.train.dim, scenario.train.num_classes)
    baseline = centralized_baseline(scenario.train, scenario.test, spec, BASELINE_LR, BASELINE_STEPS, config.data_seed)
    return AUTO_TARGET_FRACTION * baseline


def summary_document(config: RunConfig, log: MetricsLog, target: float, scenario: Scenario) -> dict[str, Any]:
    conv, osc, totals = summarize(log, target, config.oscillation_thresholds)
    dataset_bytes = int(scenario.train.features.nbytes + scenario.train.labels.nbytes)
    return {
        "name": config.name,
        "config_digest": log.config_digest,
        "mode": config.mode,
        "strategy": config.strategy,
        "total_params": log.total_params,
        "convergence": {"target_accuracy": target, "T_f": conv.t_first, "T_s": conv.t_stable},
        "oscillations": {format(o, "g"): c for o, c in zip(osc.thresholds, osc.counts)},
        "totals": {
            "rounds": totals.rounds,
            "final_accuracy": totals.final_accuracy,
            "best_accuracy": totals.best_accuracy,
            "total_tau": totals.total_tau,
            "bytes_up": totals.bytes_up,
            "bytes_down": totals.bytes_down,
            "sim_time": totals.sim_time,
        },
        "memory_proxy_bytes": {
            "value": memory_proxy(config.num_clients, log.total_params, config.k, dataset_bytes),
            "note": "analytic estimate, not a measurement",
        },
    }


@dataclass(frozen=True)
class SeedOutcome:
    seed: int
    target: float
    t_first: dict[str, int | None]
    final_accuracy: dict[str, float]
    oscillations: dict[str, tuple[int, ...]]


def gap_study(seeds: list[int] | range, rounds: int | None = None) -> list[SeedOutcome]:
    """Run the gap-demo scenario in SAFL with both strategies for each seed.

    Each seed drives both the data/partition and the run streams.  The target
    accuracy is shared across seeds: 90% of the median centralized baseline.
    """
    base = dict(preset_members("gap-demo"))["AS"]
    if rounds is not None:
        base = base.replace(rounds=rounds)
    scenarios = {}
    baselines = []
    for s in seeds:
        cfg = base.replace(data_seed=s, run_seed=s)
        scenarios[s] = load_scenario(cfg)
        baselines.append(resolve_target(cfg, scenarios[s]) / AUTO_TARGET_FRACTION)
    target = AUTO_TARGET_FRACTION * statistics.median(baselines)
    outcomes = []
    for s in seeds:
        t_first, final, osc = {}, {}, {}
        for strategy in ("fedsgd", "fedavg"):
            cfg = base.replace(data_seed=s, run_seed=s, strategy=strategy)
            conv, o, totals = summarize(run(cfg, scenarios[s]), target, cfg.oscillation_thresholds)
            t_first[strategy] = conv.t_first
            final[strategy] = totals.final_accuracy
            osc[strategy] = o.counts
        outcomes.append(SeedOutcome(s, target, t_first, final, osc))
    return outcomes
