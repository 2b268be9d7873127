import hashlib
import json
import subprocess
import sys

import pytest

from defense_vgae.cli import main
from defense_vgae.experiment import CSV_HEADER, read_csv

SMALL = {"format": "synthetic", "name": "toy",
         "params": {"n_nodes": 300, "n_classes": 3, "n_features": 120, "n_edges": 600, "seed": 7}}


@pytest.fixture
def write_config(tmp_path):
    def write(**kw):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"dataset": SMALL, "train": {"epochs": 60}, **kw}))
        return str(path)

    return write


def test_train_writes_row_and_checkpoint(tmp_path, write_config, capsys):
    code = main(["--config", write_config(method="gcn"), "--out", str(tmp_path / "o"), "train"])
    assert code == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == ",".join(CSV_HEADER)
    (row,) = read_csv(tmp_path / "o" / "train.csv")
    assert row["method"] == "gcn" and 0 <= float(row["accuracy"]) <= 1
    assert json.loads((tmp_path / "o" / "model.json").read_text())["kind"] == "gcn"


def test_flags_accepted_after_subcommand(tmp_path, write_config):
    assert main(["train", "--config", write_config(method="gcn"), "--seed", "4", "--out", str(tmp_path / "o")]) == 0
    assert read_csv(tmp_path / "o" / "train.csv")[0]["seed"] == "4"


def test_attack_budget_zero_matches_clean_training(tmp_path, write_config):
    cfg = write_config(method="gcn", attack="random", budget=0)
    assert main(["attack", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    (pfile,) = (tmp_path / "a" / "perturbations").iterdir()
    assert [l for l in pfile.read_text().splitlines() if not l.startswith("#")] == []
    clean = write_config(method="gcn")
    assert main(["train", "--config", clean, "--out", str(tmp_path / "t")]) == 0
    attacked_acc = read_csv(tmp_path / "a" / "attack.csv")[0]["accuracy"]
    assert attacked_acc == read_csv(tmp_path / "t" / "train.csv")[0]["accuracy"]


def test_dice_file_hash_is_reproducible(tmp_path, write_config):
    cfg = write_config(attack="dice", budget=0.05)
    digests = []
    for run in ("r1", "r2"):
        assert main(["attack", "--config", cfg, "--seed", "11", "--out", str(tmp_path / run)]) == 0
        (pfile,) = (tmp_path / run / "perturbations").iterdir()
        digests.append(hashlib.sha256(pfile.read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_targeted_attack_files_one_per_target(tmp_path, write_config):
    cfg = write_config(attack="surrogate-greedy", budgets=[1, 2], targets=3)
    assert main(["attack", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    files = sorted(p.name for p in (tmp_path / "o" / "perturbations").iterdir())
    assert len(files) == 6
    assert len(read_csv(tmp_path / "o" / "attack.csv")) == 2


def test_defend_exports_generic_graph(tmp_path, write_config):
    cfg = write_config(method_params={"vgae-defense": {"fixed_ratio": 2, "vgae_epochs": 20}})
    assert main(["defend", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    exported = {p.name for p in (tmp_path / "d" / "defended").iterdir()}
    assert exported == {"edges.txt", "features.csv", "labels.txt", "split.json"}
    (row,) = read_csv(tmp_path / "d" / "defend.csv")
    assert row["method"] == "vgae-defense" and row["chosen_ratio"] == "2"


def test_experiment_and_report(tmp_path, write_config, capsys):
    cfg = write_config(methods=["gcn", "jaccard"], attack="random", budgets=[1, 4], seeds=[0, 1])
    out = tmp_path / "e"
    assert main(["experiment", "--config", cfg, "--out", str(out)]) == 0
    assert len(read_csv(out / "report.csv")) == 12
    before = (out / "report.csv").read_bytes()
    assert main(["experiment", "--config", cfg, "--out", str(out), "--resume"]) == 0
    assert (out / "report.csv").read_bytes() == before
    capsys.readouterr()
    assert main(["report", str(out / "report.csv"), "--curve", str(tmp_path / "curve.csv")]) == 0
    table = capsys.readouterr().out
    assert "gcn" in table and "jaccard" in table
    assert len((tmp_path / "curve.csv").read_text().splitlines()) == 5


def test_unknown_dataset_path_exits_1_without_output(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"dataset": {"format": "planetoid", "path": str(tmp_path / "nowhere"), "name": "cora"}}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize(
    "argv",
    [["train"], ["nonsense"], ["report"], ["train", "--config", "/no/such/file.json"], ["train", "--seed", "x"]],
)
def test_usage_errors_exit_1(argv):
    assert main_exit(argv) == 1


def test_invalid_json_exits_1(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    assert main(["train", "--config", str(path)]) == 1


def test_report_schema_mismatch_exits_1(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("a,b\n1,2\n")
    assert main(["report", str(path)]) == 1


def test_runtime_failure_exits_2(tmp_path):
    data = tmp_path / "g"
    data.mkdir()
    (data / "edges.txt").write_text("0 1\n1 7\n")  # node 7 does not exist
    (data / "labels.txt").write_text("0\n1\n0\n1\n")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dataset": {"format": "generic", "path": str(data)}}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "defense_vgae.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for command in ("train", "attack", "defend", "experiment", "report"):
        assert command in proc.stdout


def main_exit(argv):
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code
