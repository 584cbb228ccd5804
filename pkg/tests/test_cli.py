import json
import subprocess
import sys
from pathlib import Path

import pytest

from gcnfuse import cli

SMALL_SYNTH = ["--per-class", "12", "--image-size", "16", "--seed", "3"]
FAST = ["--iters", "5", "--folds", "2", "--encoder-epochs", "1", "--feature-dim", "8", "--arch", "6"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out.strip(), err


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "runs"))
    return tmp_path / "runs"


@pytest.fixture
def dataset(out, capsys):
    code, path, _ = run(capsys, "synth", *SMALL_SYNTH)
    assert code == 0
    return path


def test_defaults_without_args(monkeypatch):
    monkeypatch.delenv(cli.OUT_ENV, raising=False)
    cfg = cli.parse_config(["cv"])
    assert cfg == cli.RunConfig(command="cv")
    assert (cfg.alpha, cfg.aggregation, cfg.hidden, cfg.iters, cfg.folds, cfg.out) == (0.6, "mean", (50, 20), 150, 5, "runs")


def test_env_sets_output_root(out):
    assert cli.parse_config(["cv"]).out == str(out)


def test_out_of_range_alpha(capsys, out):
    code, _, err = run(capsys, "cv", "--alpha", "1.5")
    assert code == cli.EXIT_USAGE and "--alpha 1.5" in err and "[-1, 1]" in err


def test_unknown_flag_and_key(capsys, tmp_path, out):
    code, _, err = run(capsys, "cv", "--bogus", "1")
    assert code == cli.EXIT_USAGE and "--bogus" in err
    (tmp_path / "c.cfg").write_text("bogus = 1\n")
    code, _, err = run(capsys, "cv", "--config", str(tmp_path / "c.cfg"))
    assert code == cli.EXIT_USAGE and "bogus" in err


def test_flag_beats_file_beats_default(tmp_path, out):
    (tmp_path / "c.cfg").write_text("# settings\nalpha = 0.7\nlr = 0.02\niters=9\n")
    cfg = cli.parse_config(["cv", "--config", str(tmp_path / "c.cfg"), "--alpha", "0.8"])
    assert (cfg.alpha, cfg.lr, cfg.iters, cfg.folds) == (0.8, 0.02, 9, 5)


def test_eval_without_model_is_input_error(capsys, out):
    code, _, err = run(capsys, "eval")
    assert code == cli.EXIT_INPUT and "--model" in err


def test_missing_data_is_input_error(capsys, tmp_path, out):
    code, _, err = run(capsys, "cv", "--data", str(tmp_path / "nowhere"))
    assert code == cli.EXIT_INPUT and "nowhere" in err


def test_computation_failure_is_distinct(capsys, dataset, out):
    # 12 per class cannot fill 13 stratified folds
    code, _, err = run(capsys, "cv", "--data", dataset, "--folds", "13", *FAST[:2])
    assert code == cli.EXIT_COMPUTE and "computation error" in err


def test_synth_then_cv(capsys, dataset, out):
    code, path, _ = run(capsys, "cv", "--data", dataset, *FAST)
    assert code == 0
    run_dir = Path(path)
    assert run_dir.parent == out and run_dir.name.startswith("cv-")
    summary = (run_dir / "summary.txt").read_text()
    assert "mean accuracy" in summary
    echoed = json.loads((run_dir / "config.json").read_text())
    assert echoed["command"] == "cv" and echoed["iters"] == 5 and echoed["arch"] == "6"
    assert cli.RunConfig(**echoed, out=str(out)).run_id() == run_dir.name


def test_same_seed_same_outputs(capsys, dataset, out, tmp_path, monkeypatch):
    args = ["cv", "--data", dataset, *FAST]
    _, first, _ = run(capsys, *args)
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "again"))
    _, second, _ = run(capsys, *args)
    a, b = Path(first), Path(second)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_pipeline_commands(capsys, dataset, out):
    code, enc_dir, _ = run(capsys, "encode", "--data", dataset, "--encoder-epochs", "1", "--feature-dim", "8")
    assert code == 0 and (Path(enc_dir) / "features.csv").exists()
    feats = str(Path(enc_dir) / "features.csv")
    code, graph_dir, _ = run(capsys, "build-graph", "--data", dataset, "--features", feats, "--alpha", "0.5")
    assert code == 0 and "edges" in (Path(graph_dir) / "summary.txt").read_text()
    graph = str(Path(graph_dir) / "graph")
    code, train_dir, _ = run(capsys, "train", "--graph", graph, "--iters", "5", "--arch", "6")
    assert code == 0
    model = str(Path(train_dir) / "model.txt")
    code, eval_dir, _ = run(capsys, "eval", "--graph", graph, "--model", model)
    assert code == 0 and (Path(eval_dir) / "report.json").exists()
    code, sal_dir, _ = run(capsys, "saliency", "--data", dataset, "--encoder", str(Path(enc_dir) / "encoder.npz"),
                           "--index", "2", "--target-class", "1")
    assert code == 0 and (Path(sal_dir) / "figures" / "saliency.png").exists()
    code, _, err = run(capsys, "saliency", "--data", dataset, "--encoder", str(Path(enc_dir) / "encoder.npz"),
                       "--target-class", "4")
    assert code == cli.EXIT_USAGE and "--target-class" in err


def test_sweep_command(capsys, dataset, out):
    code, path, _ = run(capsys, "sweep", "--data", dataset, "--features", str(Path(dataset) / "latent.csv"),
                        "--alphas", "0.4,0.8", "--aggregations", "mean,max", "--iters", "3", "--folds", "2",
                        "--arch", "4", "--no-figures")
    assert code == 0
    lines = (Path(path) / "sweep.csv").read_text().splitlines()
    assert lines[0] == "alpha,aggregation,accuracy,accuracy_std,seeds,density" and len(lines) == 5


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gcnfuse", "cv", "--aggregation", "median"],
                          capture_output=True, text=True, env={"GCNFUSE_OUT": str(tmp_path)})
    assert proc.returncode == cli.EXIT_USAGE and "median" in proc.stderr
