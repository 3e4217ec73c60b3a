"""Command-line front end: ``saflbench {partition,run,compare,report}``.

Exit codes: 0 when every requested artifact was written, 2 for configuration
errors (including infeasible partitions), 1 for I/O errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_compare, load_config
from .data import DatasetFormatError, PartitionError, format_partition
from .experiments import preset_members, resolve_target, summary_document
from .metrics import from_csv, summarize, to_csv
from .simulation import load_scenario, run, worker_count

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2


class CliError(Exception):
    def __init__(self, message: str, code: int) -> None:
        super().__init__(message)
        self.code = code


def _with_seed(config: RunConfig, seed: int | None) -> RunConfig:
    return config if seed is None else config.replace(run_seed=seed)


def _single_config(args: argparse.Namespace) -> RunConfig:
    if args.preset:
        config = dict(preset_members(args.preset))["AS"]
    elif args.config:
        config = load_config(args.config)
    else:
        raise CliError("one of --config or --preset is required", EXIT_CONFIG)
    return _with_seed(config, args.seed)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _json(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def cmd_partition(args: argparse.Namespace) -> int:
    config = _single_config(args)
    scenario = load_scenario(config)
    out = Path(args.out) / f"{config.name}.partition"
    _write(out, format_partition(scenario.shards))
    print(f"{'client':>6} {'size':>6} {'labels':>6}")
    for shard in scenario.shards:
        labels = np.unique(scenario.train.labels[shard.indices]).shape[0]
        print(f"{shard.client_id:>6} {len(shard):>6} {labels:>6}")
    print(f"wrote {out}")
    return EXIT_OK


def _execute(config: RunConfig) -> tuple[str, dict]:
    scenario = load_scenario(config)
    log = run(config, scenario)
    target = resolve_target(config, scenario)
    return to_csv(log), summary_document(config, log, target, scenario)


def cmd_run(args: argparse.Namespace) -> int:
    config = _single_config(args)
    csv_text, summary = _execute(config)
    out = Path(args.out)
    _write(out / f"{config.name}.csv", csv_text)
    _write(out / f"{config.name}.summary.json", _json(summary))
    conv = summary["convergence"]
    print(
        f"{config.name}: final accuracy {summary['totals']['final_accuracy']:.4f}, "
        f"T_f={conv['T_f']}, T_s={conv['T_s']}, total tau={summary['totals']['total_tau']}"
    )
    return EXIT_OK


COMPARE_COLUMNS = ["label", "mode", "strategy", "best_accuracy", "final_accuracy", "target", "T_f", "T_s"]


def _compare_rows(members: list[tuple[str, RunConfig]], summaries: list[dict]) -> tuple[list[str], list[list[str]]]:
    thresholds = list(summaries[0]["oscillations"])
    header = COMPARE_COLUMNS + [f"O_{t}" for t in thresholds] + ["total_tau", "bytes_up", "bytes_down", "sim_time"]
    rows = []
    for (label, cfg), s in zip(members, summaries):
        tot, conv = s["totals"], s["convergence"]
        rows.append(
            [
                label,
                cfg.mode,
                cfg.strategy,
                format(tot["best_accuracy"], ".9g"),
                format(tot["final_accuracy"], ".9g"),
                format(conv["target_accuracy"], ".9g"),
                "" if conv["T_f"] is None else str(conv["T_f"]),
                "" if conv["T_s"] is None else str(conv["T_s"]),
                *(str(s["oscillations"][t]) for t in thresholds),
                str(tot["total_tau"]),
                str(tot["bytes_up"]),
                str(tot["bytes_down"]),
                format(tot["sim_time"], ".9g"),
            ]
        )
    return header, rows


def _aligned(header: list[str], rows: list[list[str]]) -> str:
    table = [header] + [[c or "-" for c in r] for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    return "".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) + "\n" for r in table)


def cmd_compare(args: argparse.Namespace) -> int:
    if args.preset:
        members = preset_members(args.preset)
        name = args.preset
    elif args.config:
        members = load_compare(args.config)
        name = Path(args.config).stem
    else:
        raise CliError("one of --config or --preset is required", EXIT_CONFIG)
    members = [(label, _with_seed(cfg, args.seed)) for label, cfg in members]
    configs = [cfg for _, cfg in members]
    workers = min(worker_count(), len(configs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_execute, configs))
    else:
        results = [_execute(cfg) for cfg in configs]
    out = Path(args.out)
    for (label, _), (csv_text, summary) in zip(members, results):
        _write(out / f"{name}.{label}.csv", csv_text)
        _write(out / f"{name}.{label}.summary.json", _json(summary))
    header, rows = _compare_rows(members, [s for _, s in results])
    _write(out / f"{name}.compare.csv", "".join(",".join(r) + "\n" for r in [header] + rows))
    text = _aligned(header, rows)
    _write(out / f"{name}.compare.txt", text)
    print(text, end="")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    try:
        log = from_csv(Path(args.csv).read_text(encoding="utf-8"))
    except ValueError as exc:
        raise CliError(f"{args.csv}: {exc}", EXIT_CONFIG) from None
    if not log.records:
        raise CliError(f"{args.csv}: no rounds recorded", EXIT_CONFIG)
    config = load_config(args.config) if args.config else RunConfig()
    target = args.target if args.target is not None else config.target_accuracy
    if target is None:
        raise CliError("target accuracy is 'auto'; pass --target for a bare CSV", EXIT_CONFIG)
    thresholds = tuple(args.thresholds) if args.thresholds else config.oscillation_thresholds
    conv, osc, totals = summarize(log, target, thresholds)
    doc = {
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
    }
    text = _json(doc)
    if args.out:
        _write(Path(args.out) / f"{Path(args.csv).stem}.report.json", text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saflbench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="run configuration (or compare spec) file")
        p.add_argument("--preset", choices=["gap-demo"], help="use a built-in configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override seeds.run_seed")

    common(sub.add_parser("partition", help="partition the training data and write the shard file"))
    common(sub.add_parser("run", help="simulate one configuration"))
    common(sub.add_parser("compare", help="simulate every variant of a compare spec"))
    report = sub.add_parser("report", help="re-summarize an existing metrics CSV")
    report.add_argument("csv")
    report.add_argument("--config", help="take target accuracy and thresholds from this config")
    report.add_argument("--target", type=float)
    report.add_argument("--thresholds", type=float, nargs="+")
    report.add_argument("--out", help="also write the report JSON here")
    return parser


COMMANDS = {"partition": cmd_partition, "run": cmd_run, "compare": cmd_compare, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, PartitionError, DatasetFormatError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
