"""Config-driven experiment runner and CSV/JSON report handling."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .attacks import (
    apply_perturbation,
    dice_untargeted_attack,
    random_flip_attack,
    read_perturbation,
    targeted_surrogate_attack,
    train_surrogate,
)
from .datasets import load_dataset
from .defense import DefenseConfig, defense_vgae, gcn_jaccard_defense, gcn_svd_defense
from .gcn import GcnModel, TrainConfig, predict_logits, train_gcn
from .graph import Graph, density
from .nn import make_rng

logger = logging.getLogger(__name__)

CSV_HEADER = (
    "dataset",
    "method",
    "attack",
    "budget",
    "seed",
    "accuracy",
    "wall_time_s",
    "chosen_ratio",
    "achieved_density",
)
METHODS = ("gcn", "jaccard", "svd", "vgae-defense")
ATTACKS = ("none", "random", "surrogate-greedy", "dice")
AGGREGATE_SEED = "mean"
FAILED = "failed"


class ConfigError(ValueError):
    """Invalid experiment configuration (maps to exit code 1)."""


@dataclass
class ExperimentConfig:
    dataset: dict
    methods: list[str] = field(default_factory=lambda: ["gcn"])
    attack: str = "none"
    budgets: list[float] = field(default_factory=lambda: [0])
    seeds: list[int] = field(default_factory=lambda: [0])
    targets: int = 50
    train: dict = field(default_factory=dict)
    method_params: dict = field(default_factory=dict)
    attack_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.dataset, dict) or "format" not in self.dataset:
            raise ConfigError("config needs a 'dataset' object with a 'format' key")
        if not self.methods:
            raise ConfigError("at least one method is required")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
        if self.attack.startswith("replay:"):
            if not Path(self.attack[len("replay:") :]).is_file():
                raise ConfigError(f"perturbation file not found: {self.attack[len('replay:'):]}")
        elif self.attack not in ATTACKS:
            raise ConfigError(f"unknown attack {self.attack!r}; expected one of {ATTACKS} or replay:<file>")
        if not self.budgets or any(b < 0 for b in self.budgets):
            raise ConfigError("budgets must be a nonempty list of non-negative numbers")
        if self.attack == "dice" and any(not 0 < b <= 1 for b in self.budgets):
            raise ConfigError("dice budgets are edge rates in (0, 1]")
        if self.attack in ("random", "surrogate-greedy") and any(float(b) != int(b) for b in self.budgets):
            raise ConfigError(f"{self.attack} budgets must be integers")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.targets < 1:
            raise ConfigError("targets must be >= 1")
        try:
            self.train_config(0)
            TrainConfig(**self.attack_params)
            for m in self.methods:
                if m == "vgae-defense":
                    self.defense_config(0)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        path = self.dataset.get("path")
        if self.dataset["format"] != "synthetic" and (path is None or not Path(path).exists()):
            raise ConfigError(f"dataset path does not exist: {path}")

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        if not isinstance(payload, dict):
            raise ConfigError("config must be a JSON object")
        data = dict(payload)
        if "method" in data:
            data["methods"] = [data.pop("method")]
        if "budget" in data:
            data["budgets"] = [data.pop("budget")]
        if "seed" in data:
            data["seeds"] = [data.pop("seed")]
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                payload = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(payload)

    def to_dict(self) -> dict:
        return asdict(self)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": seed})

    def defense_config(self, seed: int) -> DefenseConfig:
        params = dict(self.method_params.get("vgae-defense", {}))
        if "ratio_grid" in params:
            params["ratio_grid"] = tuple(params["ratio_grid"])
        return DefenseConfig(**{**params, "seed": seed})


# -- methods ------------------------------------------------------------------------


@dataclass
class Fitted:
    graph: Graph
    logits: np.ndarray
    model: GcnModel
    chosen_ratio: float | None = None


def fit_method(method: str, graph: Graph, seed: int, cfg: ExperimentConfig) -> Fitted:
    """Train ``method`` from scratch on ``graph``; return the graph it classified and its logits."""
    train_cfg = cfg.train_config(seed)
    params = cfg.method_params.get(method, {})
    chosen = None
    if method == "gcn":
        used = graph
    elif method == "jaccard":
        used = gcn_jaccard_defense(graph, float(params.get("threshold", 0.0)))
    elif method == "svd":
        used = gcn_svd_defense(graph, int(params.get("rank", 10)), seed=seed, method=params.get("svd_method", "auto"))
    elif method == "vgae-defense":
        defended, model = defense_vgae(graph, cfg.defense_config(seed), train_cfg)
        return Fitted(defended.graph, predict_logits(model, defended.graph), model, defended.chosen_ratio)
    else:
        raise ConfigError(f"unknown method {method!r}")
    model, _ = train_gcn(used, train_cfg)
    return Fitted(used, predict_logits(model, used), model, chosen)


def select_targets(graph: Graph, count: int, seed: int, train_cfg: TrainConfig) -> np.ndarray:
    """Seeded sample of test nodes that a GCN trained on the clean graph classifies correctly."""
    model, _ = train_gcn(graph, train_cfg)
    logits = predict_logits(model, graph)
    test = graph.split.test_ids
    correct = test[np.argmax(logits[test], axis=1) == graph.labels[test]]
    if correct.size == 0:
        raise RuntimeError("no correctly classified test node to attack")
    rng = make_rng(seed)
    return np.sort(rng.choice(correct, size=min(count, correct.size), replace=False))


# -- cells --------------------------------------------------------------------------


def format_budget(value) -> str:
    value = float(value)
    return str(int(value)) if value.is_integer() else repr(value)


def _fmt(value, spec: str) -> str:
    return "" if value is None else format(value, spec)


def make_row(dataset, method, attack, budget, seed, accuracy, wall, chosen=None, achieved=None) -> dict:
    return {
        "dataset": dataset,
        "method": method,
        "attack": attack,
        "budget": format_budget(budget),
        "seed": str(seed),
        "accuracy": FAILED if accuracy is None else format(accuracy, ".6f"),
        "wall_time_s": format(wall, ".3f"),
        "chosen_ratio": _fmt(chosen, "g"),
        "achieved_density": _fmt(achieved, ".6e"),
    }


def row_key(row: dict) -> tuple:
    return (row["dataset"], row["method"], row["attack"], row["budget"], row["seed"])


class ExperimentRunner:
    """Runs the method x budget x seed grid of one config on one dataset.

    Attacked graphs are produced first and every method retrains from scratch
    on them, so no victim ever sees the clean graph when an attack is set.
    """

    def __init__(self, cfg: ExperimentConfig, graph: Graph | None = None):
        self.cfg = cfg
        self.graph = graph if graph is not None else load_dataset(cfg.dataset)
        self.dataset_name = cfg.dataset.get("name") or self.graph.name
        self._targets: dict[int, np.ndarray] = {}
        self._surrogates: dict[int, np.ndarray] = {}

    @property
    def attack_label(self) -> str:
        return self.cfg.attack

    def cells(self) -> list[tuple[str, float, int]]:
        return [(m, b, s) for m in self.cfg.methods for b in self.cfg.budgets for s in self.cfg.seeds]

    def cell_key(self, method, budget, seed) -> tuple:
        return (self.dataset_name, method, self.attack_label, format_budget(budget), str(seed))

    def targets(self, seed: int) -> np.ndarray:
        if seed not in self._targets:
            self._targets[seed] = select_targets(self.graph, self.cfg.targets, seed, self.cfg.train_config(seed))
        return self._targets[seed]

    def surrogate(self, seed: int) -> np.ndarray:
        if seed not in self._surrogates:
            # attack_params holds training overrides for the attacker's surrogate
            cfg = TrainConfig(**{**self.cfg.attack_params, "seed": seed})
            self._surrogates[seed] = train_surrogate(self.graph, seed=seed, cfg=cfg)
        return self._surrogates[seed]

    def attacked_graph(self, budget, seed: int) -> tuple[Graph, int | None]:
        """Graph to train on plus an optional target node (for replayed targeted files)."""
        attack = self.cfg.attack
        if attack == "none":
            return self.graph, None
        if attack == "random":
            return random_flip_attack(self.graph, int(budget), seed).attacked_graph, None
        if attack == "dice":
            return dice_untargeted_attack(self.graph, float(budget), seed).attacked_graph, None
        if attack.startswith("replay:"):
            perturbation, meta = read_perturbation(attack[len("replay:") :])
            target = int(meta["target"]) if "target" in meta else None
            return apply_perturbation(self.graph, perturbation), target
        raise ConfigError(f"attack {attack!r} has no single attacked graph")

    def run_cell(self, method: str, budget, seed: int) -> dict:
        start = time.perf_counter()
        chosen = achieved = None
        if self.cfg.attack == "surrogate-greedy":
            accuracy, chosen, achieved = self._run_targeted(method, int(budget), seed)
        else:
            graph, target = self.attacked_graph(budget, seed)
            fitted = fit_method(method, graph, seed, self.cfg)
            ids = np.array([target]) if target is not None else graph.split.test_ids
            accuracy = float(np.mean(np.argmax(fitted.logits[ids], axis=1) == graph.labels[ids]))
            chosen, achieved = fitted.chosen_ratio, density(fitted.graph.adjacency)
        wall = time.perf_counter() - start
        return make_row(self.dataset_name, method, self.attack_label, budget, seed, accuracy, wall, chosen, achieved)

    def _run_targeted(self, method: str, budget: int, seed: int):
        """Mean post-retraining accuracy over the selected targets, one poisoned graph per target."""
        xw = self.surrogate(seed)
        hits, ratios, densities = [], [], []
        cache: dict[tuple, Fitted] = {}
        for target in self.targets(seed):
            result = targeted_surrogate_attack(self.graph, int(target), budget, surrogate=xw, seed=seed)
            key = result.perturbation.flips
            if key not in cache:
                cache[key] = fit_method(method, result.attacked_graph, seed, self.cfg)
            fitted = cache[key]
            hits.append(int(np.argmax(fitted.logits[target]) == self.graph.labels[target]))
            densities.append(density(fitted.graph.adjacency))
            if fitted.chosen_ratio is not None:
                ratios.append(fitted.chosen_ratio)
        chosen = float(np.median(ratios)) if ratios else None
        return float(np.mean(hits)), chosen, float(np.mean(densities))

    def run(self, existing: list[dict] | None = None, on_row: Callable[[list[dict]], None] | None = None) -> list[dict]:
        """Execute every missing cell; failed cells become ``failed`` rows and the run goes on."""
        done = {row_key(r): r for r in (existing or []) if r["seed"] != AGGREGATE_SEED and r["accuracy"] != FAILED}
        rows = []
        for method, budget, seed in self.cells():
            key = self.cell_key(method, budget, seed)
            if key in done:
                rows.append(done[key])
                continue
            try:
                row = self.run_cell(method, budget, seed)
            except ConfigError:
                raise
            except Exception as exc:  # a failed cell must not stop the grid
                logger.error("cell %s failed: %s", key, exc)
                row = make_row(*key[:5], None, 0.0)
            rows.append(row)
            if on_row is not None:
                on_row(rows)
        return rows


# -- reports ------------------------------------------------------------------------


def aggregate(rows: list[dict]) -> list[dict]:
    """One ``seed = mean`` row per (dataset, method, attack, budget), in first-seen order."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        if row["seed"] == AGGREGATE_SEED:
            continue
        groups.setdefault(row_key(row)[:4], []).append(row)
    out = []
    for key, members in groups.items():
        ok = [r for r in members if r["accuracy"] != FAILED]
        acc = float(np.mean([float(r["accuracy"]) for r in ok])) if ok else None
        wall = float(np.sum([float(r["wall_time_s"]) for r in members]))
        ratios = [float(r["chosen_ratio"]) for r in ok if r["chosen_ratio"]]
        dens = [float(r["achieved_density"]) for r in ok if r["achieved_density"]]
        out.append(
            make_row(
                *key,
                AGGREGATE_SEED,
                acc,
                wall,
                float(np.mean(ratios)) if ratios else None,
                float(np.mean(dens)) if dens else None,
            )
        )
    return out


def write_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    tmp.replace(path)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ConfigError(f"{path}: header {reader.fieldnames} does not match the report schema")
        return list(reader)


def write_report(out_dir, cfg: ExperimentConfig, rows: list[dict]) -> tuple[Path, Path]:
    """Write ``report.csv`` (cells then aggregates) and ``report.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    aggregates = aggregate(rows)
    csv_path = out_dir / "report.csv"
    write_csv(csv_path, rows + aggregates)
    json_path = out_dir / "report.json"
    payload = {"columns": list(CSV_HEADER), "config": cfg.to_dict(), "rows": rows, "aggregates": aggregates}
    json_path.write_text(json.dumps(payload, indent=2) + "\n")
    return csv_path, json_path


def run_experiment(cfg: ExperimentConfig, out_dir, resume: bool = False, graph: Graph | None = None) -> list[dict]:
    out_dir = Path(out_dir)
    existing = read_csv(out_dir / "report.csv") if resume and (out_dir / "report.csv").exists() else None
    runner = ExperimentRunner(cfg, graph)
    rows = runner.run(existing, on_row=lambda partial: write_report(out_dir, cfg, partial))
    write_report(out_dir, cfg, rows)
    return rows


def _budget_sort_key(value: str):
    try:
        return (0, float(value))
    except ValueError:
        return (1, value)


def pivot(rows: list[dict]) -> dict[tuple, dict]:
    """Mean accuracy per (dataset, attack) section, method row and budget column."""
    sections: dict[tuple, dict] = {}
    for row in rows:
        if row["seed"] == AGGREGATE_SEED or row["accuracy"] == FAILED:
            continue
        cell = sections.setdefault((row["dataset"], row["attack"]), {}).setdefault(row["method"], {})
        cell.setdefault(row["budget"], []).append(float(row["accuracy"]))
    return {
        sec: {m: {b: float(np.mean(v)) for b, v in cells.items()} for m, cells in methods.items()}
        for sec, methods in sections.items()
    }


def format_table(rows: list[dict]) -> str:
    lines = []
    for (dataset, attack), methods in pivot(rows).items():
        budgets = sorted({b for cells in methods.values() for b in cells}, key=_budget_sort_key)
        width = max(len("method"), *(len(m) for m in methods))
        lines.append(f"dataset={dataset} attack={attack}")
        lines.append("  ".join(["method".ljust(width)] + [b.rjust(8) for b in budgets]))
        for method, cells in methods.items():
            values = [(f"{100 * cells[b]:.1f}" if b in cells else "-").rjust(8) for b in budgets]
            lines.append("  ".join([method.ljust(width)] + values))
        lines.append("")
    return "\n".join(lines).rstrip() + "\n" if lines else "(no completed rows)\n"


def curve_rows(rows: list[dict]) -> list[dict]:
    out = []
    for (dataset, attack), methods in pivot(rows).items():
        for method, cells in methods.items():
            for budget in sorted(cells, key=_budget_sort_key):
                out.append(
                    {"dataset": dataset, "attack": attack, "method": method, "budget": budget,
                     "mean_accuracy": format(cells[budget], ".6f")}
                )
    return out


def merge_reports(paths) -> list[dict]:
    merged: list[dict] = []
    for path in paths:
        merged.extend(read_csv(path))
    return merged


def is_close_row(a: dict, b: dict) -> bool:
    """Rows equal in every column except wall time."""
    return all(a[c] == b[c] for c in CSV_HEADER if c != "wall_time_s")


__all__ = [
    "AGGREGATE_SEED",
    "ATTACKS",
    "CSV_HEADER",
    "ConfigError",
    "ExperimentConfig",
    "ExperimentRunner",
    "METHODS",
    "aggregate",
    "curve_rows",
    "fit_method",
    "format_table",
    "merge_reports",
    "pivot",
    "read_csv",
    "run_experiment",
    "select_targets",
    "write_csv",
    "write_report",
]
