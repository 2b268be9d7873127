"""Acceptance checks, one PASS/FAIL/SKIP line per criterion.

Real-data checks read Cora / Citeseer from the directories named by
``DEFENSEVGAE_CORA`` / ``DEFENSEVGAE_CITESEER`` (either ``<name>.content`` +
``<name>.cites`` or the ``ind.<name>.*`` files) and skip when unset.
Checks that compare methods against each other also run on the Cora-shaped
synthetic stand-in; those lines are tagged ``[synthetic]``. Absolute accuracy
targets are only asserted on real data.

Run directly with ``python3 tests/test_acceptance.py`` or through pytest; the
summary lines are printed at the end of the session.
"""

from __future__ import annotations

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from defense_vgae.datasets import load_planetoid_index, load_planetoid_raw, synthetic_citation_graph
from defense_vgae.defense import DefenseConfig, defense_vgae, low_rank_approximation, sparsify
from defense_vgae.experiment import ExperimentConfig, ExperimentRunner
from defense_vgae.gcn import TrainConfig, evaluate, train_gcn
from defense_vgae.graph import DataSplit, build_graph, normalize_adjacency
from defense_vgae.linkpred import held_out_auc
from defense_vgae.nn import masked_cross_entropy
from defense_vgae.vgae import kl_term, vgae_loss

pytestmark = pytest.mark.acceptance

ROOT = Path(__file__).resolve().parent.parent
RESULTS: list[str] = []
N_TARGETS = int(os.environ.get("DEFENSEVGAE_TARGETS", "50"))


def record(criterion: str, ok: bool | None, detail: str) -> None:
    status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
    RESULTS.append(f"{status} {criterion}: {detail}")


def real_spec(name: str) -> dict | None:
    path = os.environ.get(f"DEFENSEVGAE_{name.upper()}")
    if not path:
        return None
    fmt = "planetoid-index" if (Path(path) / f"ind.{name}.x").is_file() else "planetoid"
    return {"format": fmt, "path": path, "name": name}


def load_real(name: str):
    spec = real_spec(name)
    if spec is None:
        return None
    if spec["format"] == "planetoid-index":
        return load_planetoid_index(spec["path"], name)
    return load_planetoid_raw(spec["path"], name)


@pytest.fixture(scope="module")
def synthetic():
    return synthetic_citation_graph(seed=0, name="synthetic-cora")


def real_or_skip(name: str, criterion: str):
    graph = load_real(name)
    if graph is None:
        record(criterion, None, f"DEFENSEVGAE_{name.upper()} not set; {name} is not bundled")
        pytest.skip(f"{name} data not available")
    return graph


# -- 1. clean GCN baseline -------------------------------------------------------------


@pytest.mark.parametrize("name, expected", [("cora", 0.804), ("citeseer", 0.681)])
def test_c1_clean_gcn(name, expected):
    graph = real_or_skip(name, f"C1 {name}")
    start = time.perf_counter()
    model, _ = train_gcn(graph, TrainConfig())
    elapsed = time.perf_counter() - start
    acc = evaluate(model, graph, graph.split.test_ids)
    ok = abs(acc - expected) <= 0.025 and elapsed < 120
    record(f"C1 {name}", ok, f"test accuracy {acc:.4f} (target {expected} +/- 0.025), {elapsed:.1f}s (< 120s)")
    assert ok


def test_c1_runtime_synthetic(synthetic):
    start = time.perf_counter()
    model, _ = train_gcn(synthetic, TrainConfig())
    elapsed = time.perf_counter() - start
    acc = evaluate(model, synthetic, synthetic.split.test_ids)
    ok = elapsed < 120
    record("C1 [synthetic]", ok, f"runtime {elapsed:.2f}s (< 120s); accuracy {acc:.4f} reported only")
    assert ok


# -- 2. clean-defense fidelity ----------------------------------------------------------


def clean_fidelity(graph, label):
    gcn_model, _ = train_gcn(graph, TrainConfig())
    gcn_acc = evaluate(gcn_model, graph, graph.split.test_ids)
    start = time.perf_counter()
    defended, model = defense_vgae(graph, DefenseConfig(fixed_ratio=20), TrainConfig())
    # VGAE fit plus reconstruction and retraining, an upper bound on the VGAE time
    vgae_time = time.perf_counter() - start
    acc = evaluate(model, defended.graph, graph.split.test_ids)
    gap = gcn_acc - acc
    ok = gap <= 0.03 and vgae_time < 600
    record(
        f"C2 {label}",
        ok,
        f"GCN {gcn_acc:.4f}, DefenseVGAE@20 {acc:.4f}, drop {100 * gap:.1f} points (<= 3); VGAE {vgae_time:.1f}s (< 600s)",
    )
    return ok


def test_c2_clean_fidelity_cora():
    assert clean_fidelity(real_or_skip("cora", "C2 cora"), "cora")


# The drop on the synthetic stand-in is larger than 3 points; see the README.
@pytest.mark.xfail(strict=True, reason="ratio-20 reconstruction loses more than 3 points on the synthetic stand-in")
def test_c2_clean_fidelity_synthetic(synthetic):
    assert clean_fidelity(synthetic, "[synthetic]")


# -- 3. defense efficacy ------------------------------------------------------------------

SYNTHETIC_SPEC = {"format": "synthetic", "name": "synthetic-cora"}


def targeted_accuracy(dataset: dict, graph, method: str, method_params: dict | None = None):
    cfg = ExperimentConfig.from_dict(
        {"dataset": dataset, "seeds": [0], "attack": "surrogate-greedy", "budgets": [5], "targets": N_TARGETS,
         "methods": [method], "method_params": method_params or {}}
    )
    runner = ExperimentRunner(cfg, graph)
    row = runner.run_cell(method, 5, 0)
    return float(row["accuracy"]), row["chosen_ratio"], len(runner.targets(0))


def targeted_efficacy(dataset, graph, label, fixed_ratio=None):
    gcn_acc, _, n = targeted_accuracy(dataset, graph, "gcn")
    params = {"vgae-defense": {"fixed_ratio": fixed_ratio}} if fixed_ratio else None
    ours_acc, ratio, _ = targeted_accuracy(dataset, graph, "vgae-defense", params)
    how = f"fixed ratio {fixed_ratio}" if fixed_ratio else f"ratio search, median chosen {ratio}"
    ok = ours_acc - gcn_acc >= 0.10
    record(
        f"C3 {label} targeted" + (f" @{fixed_ratio}" if fixed_ratio else ""),
        ok,
        f"{n} targets, budget 5: GCN {gcn_acc:.3f}, DefenseVGAE ({how}) {ours_acc:.3f}, gain {ours_acc - gcn_acc:+.3f} (need +0.10)",
    )
    return ok


def dice_efficacy(dataset, graph, label):
    cfg = ExperimentConfig.from_dict(
        {"dataset": dataset, "seeds": [0], "attack": "dice", "budgets": [0.05], "methods": ["gcn", "vgae-defense"]}
    )
    runner = ExperimentRunner(cfg, graph)
    undefended = float(runner.run_cell("gcn", 0.05, 0)["accuracy"])
    defended = float(runner.run_cell("vgae-defense", 0.05, 0)["accuracy"])
    ok = defended >= undefended
    record(f"C3 {label} dice", ok, f"rate 5%: GCN {undefended:.4f}, DefenseVGAE {defended:.4f}")
    return ok


def test_c3_targeted_cora():
    graph = real_or_skip("cora", "C3 cora targeted")
    assert targeted_efficacy(real_spec("cora"), graph, "cora")


def test_c3_dice_cora():
    graph = real_or_skip("cora", "C3 cora dice")
    assert dice_efficacy(real_spec("cora"), graph, "cora")


def test_c3_targeted_synthetic(synthetic):
    assert targeted_efficacy(SYNTHETIC_SPEC, synthetic, "[synthetic]")


# A fixed ratio of 20 keeps fewer targets than the searched ratio on the stand-in; see the README.
@pytest.mark.xfail(strict=True, reason="fixed ratio 20 gains less than 10 points on the synthetic stand-in")
def test_c3_targeted_fixed_ratio_synthetic(synthetic):
    assert targeted_efficacy(SYNTHETIC_SPEC, synthetic, "[synthetic]", fixed_ratio=20)


def test_c3_dice_synthetic(synthetic):
    assert dice_efficacy(SYNTHETIC_SPEC, synthetic, "[synthetic]")


# -- 4. gradient suites ---------------------------------------------------------------------


def test_c4_gradient_suites():
    start = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
         str(ROOT / "tests" / "test_gradients.py"),
         str(ROOT / "tests" / "test_nn.py::test_cross_entropy_gradient_finite_difference")],
        capture_output=True, text=True, cwd=ROOT,
    )
    elapsed = time.perf_counter() - start
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and elapsed < 60
    record("C4", ok, f"finite-difference suites: {summary}; {elapsed:.1f}s (< 60s)")
    assert ok, proc.stdout[-2000:]


# -- 5. sparsifier oracle -------------------------------------------------------------------


def brute_force_top_k(scores, target_density):
    n = scores.shape[0]
    ranked = sorted((-scores[i, j], i, j) for i in range(n) for j in range(i + 1, n))
    k = min(int(np.floor(target_density * n * n / 2 + 0.5)), len(ranked))
    out = np.zeros((n, n))
    for _, i, j in ranked[:k]:
        out[i, j] = out[j, i] = 1
    return out


def test_c5_sparsifier_oracle():
    rng = np.random.default_rng(5)
    mismatches = 0
    for trial in range(200):
        n = int(rng.integers(2, 51))
        raw = rng.integers(0, 3, (n, n)).astype(float) if trial % 2 else rng.standard_normal((n, n))
        scores = np.triu(raw, 1) + np.triu(raw, 1).T
        target = float(rng.uniform(0.01, 0.7))
        mismatches += not np.array_equal(sparsify(scores, target).toarray(), brute_force_top_k(scores, target))
    record("C5", mismatches == 0, f"{200 - mismatches}/200 matrices match the brute-force oracle exactly (half with ties)")
    assert mismatches == 0


# -- 6. SVD oracle ------------------------------------------------------------------------------


def test_c6_randomized_svd_oracle():
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((30, 30))
        m = m + m.T
        s = np.linalg.svd(m, compute_uv=False)
        for k in (1, 5, 10):
            err = np.linalg.norm(m - low_rank_approximation(m, k, seed=seed, method="randomized"))
            worst = max(worst, abs(err - np.sqrt(np.sum(s[k:] ** 2))))
    ok = worst < 1e-6
    record("C6", ok, f"max |randomized - dense| rank-k Frobenius error {worst:.2e} over 10 matrices, k in {{1,5,10}} (< 1e-6)")
    assert ok


# -- 7. closed forms ------------------------------------------------------------------------------


def test_c7_closed_forms():
    two = build_graph([(0, 1)], np.eye(2), [0, 1], DataSplit([], [], []))
    a_hat = normalize_adjacency(two).toarray()
    checks = {
        "two-node normalization 0.5": float(np.max(np.abs(a_hat - 0.5))),
        "KL at prior": abs(kl_term(np.zeros((3, 2)), np.zeros((3, 2)))),
        "ln 2 reconstruction": abs(
            vgae_loss(np.full((2, 2), 0.5), np.eye(2), np.zeros((2, 1)), np.zeros((2, 1))).reconstruction - np.log(2)
        ),
        "uniform softmax ln C": abs(masked_cross_entropy(np.zeros((3, 5)), np.arange(3), [0, 1, 2])[0] - np.log(5)),
    }
    worst = max(checks.values())
    ok = worst <= 1e-9
    record("C7", ok, ", ".join(f"{k} err {v:.1e}" for k, v in checks.items()))
    assert ok


# -- 8. link quality ------------------------------------------------------------------------------


def link_quality(graph, label):
    auc = held_out_auc(graph, fraction=0.1, seed=0)
    ok = auc >= 0.85
    record(f"C8 {label}", ok, f"held-out edge ROC-AUC {auc:.4f} (>= 0.85)")
    return ok


def test_c8_link_quality_cora():
    assert link_quality(real_or_skip("cora", "C8 cora"), "cora")


# Edges in the stand-in are only 60% within-class; a label oracle scores about 0.79 AUC.
@pytest.mark.xfail(strict=True, reason="synthetic stand-in caps held-out AUC below 0.85")
def test_c8_link_quality_synthetic(synthetic):
    assert link_quality(synthetic, "[synthetic]")


def test_c8_link_quality_homophilous_synthetic():
    graph = synthetic_citation_graph(seed=0, homophily=0.95, n_classes=20, name="homophilous")
    assert link_quality(graph, "[synthetic, homophily 0.95]")


# -- 9. determinism -------------------------------------------------------------------------------


def test_c9_determinism():
    dataset = {"format": "synthetic", "name": "small",
               "params": {"n_nodes": 400, "n_classes": 4, "n_features": 150, "n_edges": 800, "seed": 3}}
    cells = [
        ("dice", 0.05, ["gcn", "jaccard", "svd", "vgae-defense"]),
        ("random", 20, ["gcn"]),
        ("surrogate-greedy", 3, ["gcn", "vgae-defense"]),
    ]
    compared = 0
    for attack, budget, methods in cells:
        cfg = ExperimentConfig.from_dict(
            {"dataset": dataset, "attack": attack, "budgets": [budget], "seeds": [7], "targets": 3, "methods": methods,
             "method_params": {"vgae-defense": {"ratio_grid": [1, 2], "vgae_epochs": 60}}}
        )
        for method in methods:
            a = ExperimentRunner(cfg).run_cell(method, budget, 7)
            b = ExperimentRunner(cfg).run_cell(method, budget, 7)
            a.pop("wall_time_s"), b.pop("wall_time_s")
            if a != b:
                record("C9", False, f"{method}/{attack} rows differ: {a} vs {b}")
                pytest.fail("non-deterministic row")
            compared += 1
    record("C9", True, f"{compared} experiment cells re-run with identical rows (wall time excluded)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", *sys.argv[1:]]))
