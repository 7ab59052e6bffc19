import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from asymdistill.cli import main
from asymdistill.data import load_manifest, load_tiles

TINY_EXPERIMENT = {"epochs": 1, "batch_size": 32, "encoder": {"name": "desk_cnn_tiny"}, "expander": {"width": 32}}
TINY_DATA = {"synthetic": {"n_train": 64, "n_test": 32, "img_px": 32}}


def _write_yaml(path: Path, obj) -> Path:
    path.write_text(yaml.safe_dump(obj))
    return path


def _last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def _tree_digest(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def run_yaml(tmp_path_factory):
    d = tmp_path_factory.mktemp("cfg")
    return _write_yaml(
        d / "run.yaml",
        {"experiment": TINY_EXPERIMENT, "data": TINY_DATA, "probes": [{"task": "tissue", "view": "sparse", "epochs": 1}]},
    )


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["eval"]) == 2
    assert main(["no-such-command"]) == 2
    assert main(["synth-data", "--n", "8", "--classes", "9", "--out", str(tmp_path)]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "absent.ckpt")]) == 2


def test_console_script_exit_code():
    proc = subprocess.run([sys.executable, "-m", "asymdistill.cli", "eval"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "--checkpoint" in proc.stderr


def test_synth_data_balanced_round_trip_and_reproducible(tmp_path, capsys):
    assert main(["synth-data", "--n", "400", "--n-test", "8", "--img-px", "32", "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    out = _last_json(capsys)
    assert out["per_class"] == [100, 100, 100, 100]
    manifest = load_manifest(tmp_path / "a" / "manifest.csv")
    assert manifest.splits == ["test", "train"]
    assert len(load_tiles(manifest, "train", "downsample")) == 400
    assert main(["synth-data", "--n", "400", "--n-test", "8", "--img-px", "32", "--seed", "3", "--out", str(tmp_path / "b")]) == 0
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_train_ssl_twice_identical(tmp_path, run_yaml, capsys):
    args = ["train-ssl", "--config", str(run_yaml), "--seed", "1"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    first = _last_json(capsys)
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    second = _last_json(capsys)
    assert first["config_hash"] == second["config_hash"]
    da, db = Path(first["run_dir"]), Path(second["run_dir"])
    for name in ("checkpoint.ckpt", "metrics.csv", "probe_tissue_sparse.ckpt"):
        assert (da / name).read_bytes() == (db / name).read_bytes()
    assert first["accuracy"] == second["accuracy"]


def test_probe_eval_cka_gradcam_chain(tmp_path, run_yaml, capsys):
    assert main(["train-ssl", "--config", str(run_yaml), "--out", str(tmp_path)]) == 0
    run_dir = Path(_last_json(capsys)["run_dir"])
    ckpt = str(run_dir / "checkpoint.ckpt")
    assert main(["eval", "--checkpoint", ckpt]) == 2
    assert main(["train-probe", "--checkpoint", ckpt, "--task", "cell", "--view", "dense", "--epochs", "1"]) == 0
    head = _last_json(capsys)["head"]
    assert main(["eval", "--checkpoint", ckpt, "--head", head, "--task", "cell", "--view", "dense"]) == 0
    ev = _last_json(capsys)
    assert 0.0 <= ev["accuracy"] <= 1.0 and ev["split"] == "test"
    assert main(["cka", "--checkpoint-a", ckpt, "--checkpoint-b", ckpt, "--n-images", "16"]) == 0
    assert _last_json(capsys)["diagonal_mean"] == pytest.approx(1.0)
    png = tmp_path / "cam.png"
    assert main(["gradcam", "--checkpoint", ckpt, "--head", head, "--layer", "conv2", "--out", str(png)]) == 0
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


@pytest.fixture(scope="module")
def sweep_root(tmp_path_factory):
    d = tmp_path_factory.mktemp("sweep")
    grid = _write_yaml(
        d / "sweep.yaml",
        {
            "base": {"experiment": TINY_EXPERIMENT, "data": TINY_DATA, "probes": [{"task": "tissue", "view": "sparse", "epochs": 1}]},
            "grid": {"loss": ["vicreg", "simclr"], "asymmetric": [True, False], "shared_weights": [True, False]},
            "supervised": [{"task": "tissue", "view": "dense"}],
        },
    )
    root = d / "runs"
    assert main(["sweep", "--grid", str(grid), "--out", str(root)]) == 0
    return grid, root


def test_sweep_enumerates_nine_runs(sweep_root):
    _, root = sweep_root
    runs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "summary.json").exists())
    assert len(runs) == 9
    assert all(json.loads((p / "summary.json").read_text())["status"] == "ok" for p in runs)
    table = (root / "report" / "accuracy_table.md").read_text().splitlines()
    assert len(table) == 2 + 9
    assert table[0].startswith("| Model | Asymmetric | Shared Weights")


def test_sweep_rerun_skips(sweep_root, capsys):
    grid, root = sweep_root
    before = {p.name: (p / "checkpoint.ckpt").stat().st_mtime_ns for p in root.iterdir() if (p / "checkpoint.ckpt").exists()}
    assert main(["sweep", "--grid", str(grid), "--out", str(root)]) == 0
    summary = json.loads((root / "sweep_summary.json").read_text())
    runs = summary["runs"] if isinstance(summary, dict) else summary
    assert all(r.get("skipped") for r in runs)
    after = {p.name: (p / "checkpoint.ckpt").stat().st_mtime_ns for p in root.iterdir() if (p / "checkpoint.ckpt").exists()}
    assert before == after


def test_report_reproduces_sweep_table(sweep_root, tmp_path):
    _, root = sweep_root
    assert main(["report", "--runs", str(root), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "accuracy_table.csv").read_bytes() == (root / "report" / "accuracy_table.csv").read_bytes()
    ssl_rows = [r for r in (tmp_path / "rep" / "accuracy_table.csv").read_text().splitlines()[1:] if not r.startswith("Supervised")]
    assert len(ssl_rows) == 8


def test_failed_run_recorded_and_nonzero(tmp_path):
    grid = _write_yaml(
        tmp_path / "bad.yaml",
        {
            "base": {"experiment": TINY_EXPERIMENT, "data": TINY_DATA, "probes": [{"task": "tissue", "view": "sparse", "epochs": 1}]},
            "grid": {"fraction": [1.0, 0.1]},
        },
    )
    assert main(["sweep", "--grid", str(grid), "--out", str(tmp_path / "runs"), "--jobs", "2"]) == 1
    statuses = sorted(json.loads(p.read_text())["status"] for p in (tmp_path / "runs").glob("*/summary.json"))
    assert statuses == ["failed", "ok"]
