import json
import subprocess
import sys

import numpy as np
import pytest

from mvtrack import fileio
from mvtrack.cli import OUTPUT_DIR_ENV, main
from mvtrack.embed import init_model
from pipeline import SMALL, TRAIN, output_files, run_pipeline


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    return (a, run_pipeline(a)), (b, run_pipeline(b))


def test_all_commands_succeed(runs):
    (_, codes), _ = runs
    assert all(c == 0 for c in codes.values()), codes


def test_reruns_are_bit_identical(runs):
    (a, _), (b, _) = runs
    fa, fb = output_files(a), output_files(b)
    assert fa.keys() == fb.keys()
    assert any(k.startswith("features/") or "/features/" in k for k in fa)
    for k in fa:
        assert fa[k] == fb[k], k


def test_outputs_are_readable(runs):
    (a, _), _ = runs
    assert fileio.read_mot_file(a / "track" / "results.txt")
    keys, emb = fileio.read_embeddings(a / "sim" / "det.emb")
    assert len(keys) == len(fileio.read_mot_file(a / "sim" / "det.txt"))
    m = json.loads((a / "eval" / "metrics.json").read_text())
    assert 0.0 <= m["idf1"] <= 1.0
    _, doc = fileio.load_checkpoint(a / "train" / "checkpoint.json")
    assert doc["metadata"]["strategy"] == "hard"
    rows = (a / "train" / "loss.csv").read_text().splitlines()
    assert rows[0].startswith("epoch,iteration")
    # 4 identities x 12 frames, batch 4 frames -> 3 iterations per epoch, 2 epochs
    assert len(rows) - 1 == 2 * 3
    assert "seed=3" in (a / "sim" / "config.txt").read_text()


def test_noiseless_detections_equal_gt(tmp_path):
    assert main(["simulate", "--noiseless", "--out", str(tmp_path)] + SMALL) == 0
    gt = fileio.read_mot_file(tmp_path / "gt.txt")
    det = fileio.read_mot_file(tmp_path / "det.txt")
    assert [m.box for m in gt] == [m.box for m in det]
    assert main(["evaluate", "--gt", str(tmp_path / "gt.txt"), "--results",
                 str(tmp_path / "gt.txt"), "--out", str(tmp_path / "e")]) == 0
    m = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert m["mota"] == 1.0 and m["idf1"] == 1.0 and m["ids"] == 0


def test_zero_epochs_checkpoint_is_initial_model(tmp_path):
    assert main(["simulate", "--features", "--out", str(tmp_path / "s")] + SMALL) == 0
    assert main(["train", "--scenario", str(tmp_path / "s"), "--out", str(tmp_path / "t"),
                 "--set", "epochs=0", "--set", "update_strategy=easy"] + TRAIN[2:]) == 0
    model, doc = fileio.load_checkpoint(tmp_path / "t" / "checkpoint.json")
    assert doc["metadata"]["strategy"] == "easy"
    from mvtrack.mtcl import TrainConfig, new_model
    cfg = fileio.load_config(tmp_path / "t" / "config.txt").train
    assert isinstance(cfg, TrainConfig)
    ref = new_model(cfg, 4)
    for name, p in ref.params().items():
        assert np.array_equal(model.params()[name], p)
    assert (tmp_path / "t" / "loss.csv").read_text().count("\n") == 1


def test_preset_and_beta_reach_the_tracker(tmp_path):
    assert main(["simulate", "--out", str(tmp_path / "s")] + SMALL) == 0
    assert main(["track", "--scenario", str(tmp_path / "s"), "--preset", "mot20",
                 "--beta", "fixed:0.9", "--out", str(tmp_path / "t")]) == 0
    cfg = fileio.load_config(tmp_path / "t" / "config.txt")
    assert (cfg.tracker.kappa1, cfg.tracker.kappa3, cfg.tracker.beta) == (0.25, 0.5, "fixed:0.9")


def test_track_from_det_and_emb(tmp_path):
    assert main(["simulate", "--out", str(tmp_path / "s")] + SMALL) == 0
    s = tmp_path / "s"
    assert main(["track", "--det", str(s / "det.txt"), "--emb", str(s / "det.emb"),
                 "--out", str(tmp_path / "a")]) == 0
    assert main(["track", "--scenario", str(s), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "results.txt").read_bytes() == (tmp_path / "b" / "results.txt").read_bytes()


def test_evaluate_empty_results(tmp_path):
    assert main(["simulate", "--out", str(tmp_path / "s")] + SMALL) == 0
    (tmp_path / "empty.txt").write_text("")
    assert main(["evaluate", "--gt", str(tmp_path / "s" / "gt.txt"), "--results",
                 str(tmp_path / "empty.txt"), "--out", str(tmp_path / "e")]) == 0
    m = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert m["idf1"] == 0.0 and m["fp"] == 0 and m["ids"] == 0
    assert m["fn"] == m["num_gt"] > 0 and m["mota"] == 1.0 - m["fn"] / m["num_gt"]


def test_simulate_line_counts_match_scenario(tmp_path):
    from mvtrack import sim
    assert main(["simulate", "--seed", "5", "--set", "p_drop=0.2", "--out", str(tmp_path)] + SMALL) == 0
    cfg = fileio.load_config(tmp_path / "config.txt").scenario
    frames = sim.generate_scenario(cfg)
    assert len(fileio.read_mot_file(tmp_path / "gt.txt")) == sum(len(f.gt.objects) for f in frames)
    n_det = sum(len(f.detections) for f in frames)
    assert len(fileio.read_mot_file(tmp_path / "det.txt")) == n_det
    assert len(fileio.read_embeddings(tmp_path / "det.emb")[0]) == n_det


def test_usage_errors_exit_one(tmp_path, capsys):
    assert main(["simulate", "--set", "bogus=1", "--out", str(tmp_path)]) == 1
    assert main(["simulate", "--set", "novalue", "--out", str(tmp_path)]) == 1
    assert main(["track", "--out", str(tmp_path)]) == 1
    assert main(["track", "--det", str(tmp_path / "missing.txt"), "--emb", "x",
                 "--out", str(tmp_path)]) == 1
    assert main(["track", "--scenario", str(tmp_path), "--beta", "often",
                 "--out", str(tmp_path)]) == 1
    (tmp_path / "gt.txt").write_text("1,1,0,0,5,5,1,-1,-1,-1\n")
    (tmp_path / "res.txt").write_text("2,1,0,0,5,5,1,-1,-1,-1\n")
    assert main(["evaluate", "--gt", str(tmp_path / "gt.txt"), "--results",
                 str(tmp_path / "res.txt"), "--out", str(tmp_path)]) == 1
    (tmp_path / "bad.txt").write_text("1,1,0\n")
    assert main(["evaluate", "--gt", str(tmp_path / "gt.txt"), "--results",
                 str(tmp_path / "bad.txt"), "--out", str(tmp_path)]) == 1
    assert "line 1" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--no-such-flag"])
    assert exc.value.code == 1


def test_gradcheck_corruption_exits_two(tmp_path):
    assert main(["gradcheck", "--configs", "1", "--corrupt", "proj.W2",
                 "--out", str(tmp_path)]) == 2
    assert "FAIL" in (tmp_path / "gradcheck.txt").read_text()


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "env"))
    assert main(["simulate"] + SMALL) == 0
    assert (tmp_path / "env" / "gt.txt").exists()
    assert main(["simulate", "--out", str(tmp_path / "flag")] + SMALL) == 0
    assert (tmp_path / "flag" / "gt.txt").exists()


def test_bench_writes_fps(tmp_path):
    assert main(["bench", "--repeat", "1", "--out", str(tmp_path)] + SMALL) == 0
    assert json.loads((tmp_path / "bench.json").read_text())["fps"] > 0


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "mvtrack.cli", "simulate", "--out", str(tmp_path)]
                       + SMALL, capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("# effective config")
