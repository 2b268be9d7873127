"""Command-line interface: ``defense-vgae {train,attack,defend,experiment,report}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .attacks import dice_untargeted_attack, random_flip_attack, targeted_surrogate_attack, write_perturbation
from .datasets import save_generic
from .experiment import (
    CSV_HEADER,
    ConfigError,
    ExperimentConfig,
    ExperimentRunner,
    curve_rows,
    fit_method,
    format_table,
    make_row,
    merge_reports,
    run_experiment,
    write_csv,
)
from .gcn import predict_logits, train_gcn
from .graph import GraphError, density

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

logger = logging.getLogger("defense_vgae")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; this CLI reserves 2 for runtime failures.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, default=default, help="override the config's seed list")
    parser.add_argument("--out", default=argparse.SUPPRESS if suppress else "out", help="output directory")
    parser.add_argument(
        "--resume", action="store_true", default=argparse.SUPPRESS if suppress else False,
        help="skip experiment cells already present in the output report",
    )
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="defense-vgae", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one method on the (possibly attacked) dataset")
    _global_flags(p, suppress=True)
    p.add_argument("--method", help="override the config's method")

    p = sub.add_parser("attack", help="write perturbation files and score an undefended GCN on them")
    _global_flags(p, suppress=True)
    p.add_argument("--attack", help="override the config's attack")
    p.add_argument("--budget", type=float, action="append", help="budget (repeatable); dice takes a rate")

    p = sub.add_parser("defend", help="run a defense and export the purified graph")
    _global_flags(p, suppress=True)
    p.add_argument("--method", help="defense to run (default: vgae-defense)")

    p = sub.add_parser("experiment", help="run the method x budget x seed grid")
    _global_flags(p, suppress=True)

    p = sub.add_parser("report", help="merge report CSVs and print a method x budget table")
    _global_flags(p, suppress=True)
    p.add_argument("reports", nargs="+", help="report.csv files")
    p.add_argument("--curve", help="also write per-budget mean accuracy to this CSV")
    return parser


def load_config(args, **overrides) -> ExperimentConfig:
    if not args.config:
        raise UsageError(f"{args.command} needs --config")
    try:
        with open(args.config) as fh:
            payload = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {args.config}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError("config must be a JSON object")
    if args.seed is not None:
        payload.pop("seed", None)
        payload["seeds"] = [args.seed]
    for key, value in overrides.items():
        if value is not None:
            payload.pop(key.rstrip("s"), None)
            payload[key] = value
    return ExperimentConfig.from_dict(payload)


def _single(cfg: ExperimentConfig, what: str):
    values = getattr(cfg, what)
    if len(values) != 1:
        raise ConfigError(f"this command runs one {what[:-1]}; config lists {len(values)}")
    return values[0]


def _emit(rows, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    write_csv(path, rows)
    writer = csv.DictWriter(sys.stdout, fieldnames=CSV_HEADER, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)


def _fit_one(cfg: ExperimentConfig, runner: ExperimentRunner, method: str, budget, seed: int):
    """Fit ``method`` on the single attacked graph of (budget, seed); return fit and report row."""
    start = time.perf_counter()
    graph, target = runner.attacked_graph(budget, seed)
    fitted = fit_method(method, graph, seed, cfg)
    ids = np.array([target]) if target is not None else graph.split.test_ids
    acc = float(np.mean(np.argmax(fitted.logits[ids], axis=1) == graph.labels[ids]))
    row = make_row(
        runner.dataset_name, method, cfg.attack, budget, seed, acc, time.perf_counter() - start,
        fitted.chosen_ratio, density(fitted.graph.adjacency),
    )
    return fitted, row


def cmd_train(args) -> int:
    cfg = load_config(args, methods=[args.method] if args.method else None)
    method = _single(cfg, "methods")
    runner = ExperimentRunner(cfg)
    out = Path(args.out)
    if cfg.attack == "surrogate-greedy":
        # one poisoned graph per target: no single model to checkpoint
        rows = [runner.run_cell(method, b, s) for b in cfg.budgets for s in cfg.seeds]
    else:
        budget, seed = _single(cfg, "budgets"), _single(cfg, "seeds")
        fitted, row = _fit_one(cfg, runner, method, budget, seed)
        out.mkdir(parents=True, exist_ok=True)
        fitted.model.save(out / "model.json")
        rows = [row]
    _emit(rows, out / "train.csv")
    return EXIT_OK


def cmd_defend(args) -> int:
    cfg = load_config(args, methods=[args.method or "vgae-defense"])
    method = _single(cfg, "methods")
    budget, seed = _single(cfg, "budgets"), _single(cfg, "seeds")
    if cfg.attack == "surrogate-greedy":
        raise ConfigError("defend works on one graph; use 'experiment' for targeted suites")
    runner = ExperimentRunner(cfg)
    fitted, row = _fit_one(cfg, runner, method, budget, seed)
    out = Path(args.out)
    save_generic(fitted.graph, out / "defended")
    fitted.model.save(out / "model.json")
    _emit([row], out / "defend.csv")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = load_config(args, attack=args.attack, budgets=args.budget)
    if cfg.attack == "none" or cfg.attack.startswith("replay:"):
        raise ConfigError("attack needs attack = random, dice or surrogate-greedy")
    runner = ExperimentRunner(cfg)
    graph = runner.graph
    out = Path(args.out)
    pdir = out / "perturbations"
    pdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in cfg.seeds:
        train_cfg = cfg.train_config(seed)
        for budget in cfg.budgets:
            tag = f"{cfg.attack}_b{budget:g}_s{seed}"
            start = time.perf_counter()
            if cfg.attack == "surrogate-greedy":
                hits = []
                for target in runner.targets(seed):
                    res = targeted_surrogate_attack(graph, int(target), int(budget), runner.surrogate(seed), seed)
                    write_perturbation(pdir / f"{tag}_t{target}.txt", res.perturbation, res.attack, res.budget, int(target))
                    model, _ = train_gcn(res.attacked_graph, train_cfg)
                    logits = predict_logits(model, res.attacked_graph)
                    hits.append(int(np.argmax(logits[target]) == graph.labels[target]))
                acc = float(np.mean(hits))
                attacked_density = None
            else:
                if cfg.attack == "random":
                    res = random_flip_attack(graph, int(budget), seed)
                else:
                    res = dice_untargeted_attack(graph, float(budget), seed)
                write_perturbation(pdir / f"{tag}.txt", res.perturbation, res.attack, res.budget)
                model, _ = train_gcn(res.attacked_graph, train_cfg)
                logits = predict_logits(model, res.attacked_graph)
                test = graph.split.test_ids
                acc = float(np.mean(np.argmax(logits[test], axis=1) == graph.labels[test]))
                attacked_density = density(res.attacked_graph.adjacency)
            rows.append(make_row(runner.dataset_name, "gcn", cfg.attack, budget, seed, acc, time.perf_counter() - start, None,
                                 attacked_density))
    _emit(rows, out / "attack.csv")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = load_config(args)
    rows = run_experiment(cfg, args.out, resume=args.resume)
    failed = sum(r["accuracy"] == "failed" for r in rows)
    print(f"{len(rows)} cells written to {Path(args.out) / 'report.csv'} ({failed} failed)")
    return EXIT_OK


def cmd_report(args) -> int:
    for path in args.reports:
        if not Path(path).is_file():
            raise ConfigError(f"report not found: {path}")
    rows = merge_reports(args.reports)
    sys.stdout.write(format_table(rows))
    if args.curve:
        curve = curve_rows(rows)
        with open(args.curve, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["dataset", "attack", "method", "budget", "mean_accuracy"], lineterminator="\n"
            )
            writer.writeheader()
            writer.writerows(curve)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "defend": cmd_defend,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GraphError, FloatingPointError, RuntimeError, ValueError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
