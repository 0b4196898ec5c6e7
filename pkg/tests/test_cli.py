from __future__ import annotations

import json

import numpy as np
import pytest
import yaml

from lang2motion import cli
from lang2motion.skeleton import load_motion
from lang2motion.toy import write_toy_corpus, write_toy_word_table

SMALL_FLAGS = ["--h1", "4", "--h2", "8", "--h", "16"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_toy_corpus(root / "corpus", n_motions=10, seed=2)
    write_toy_word_table(root / "words.txt")
    return root


@pytest.fixture(scope="module")
def trained(workspace):
    w = workspace
    assert cli.main(["preprocess", "--corpus", str(w / "corpus"), "--cache", str(w / "cache")]) == 0
    rc = cli.main(["train", "--cache", str(w / "cache"), "--run-dir", str(w / "run"), "--epochs", "1",
                   "--limit", "32", "--batch-size", "4", "--embedder", "static",
                   "--word-table", str(w / "words.txt"), *SMALL_FLAGS])
    assert rc == 0
    return w


def test_preprocess_is_idempotent(trained, capsys):
    w = trained
    assert cli.main(["preprocess", "--corpus", str(w / "corpus"), "--cache", str(w / "cache")]) == 0
    assert "up to date" in capsys.readouterr().out


def test_preprocess_empty_corpus(tmp_path):
    (tmp_path / "empty").mkdir()
    assert cli.main(["preprocess", "--corpus", str(tmp_path / "empty"), "--cache", str(tmp_path / "c")]) == 3


def test_train_outputs(trained):
    run = trained / "run"
    assert (run / "last.pt").exists() and (run / "best.pt").exists()
    assert len((run / "metrics.jsonl").read_text().splitlines()) == 1
    snap = yaml.safe_load((run / "config.yaml").read_text())
    assert snap["embedder"]["kind"] == "static" and snap["train"]["epochs"] == 1
    arch = json.loads((run / "architecture.json").read_text())
    assert arch["latent_layout"] == {"ub": 16, "lb": 16}
    assert any((trained / "cache" / "embeddings").iterdir())


def test_evaluate_writes_reports(trained, capsys):
    w = trained
    out = w / "eval"
    assert cli.main(["evaluate", "--checkpoint", str(w / "run" / "best.pt"), "--cache", str(w / "cache"),
                     "--out", str(out)]) == 0
    rep = json.loads((out / "eval_test.json").read_text())
    assert rep["N"] > 0 and np.isfinite(rep["ape_mean"]) and rep["cee"] is not None
    assert (out / "eval_test_ape.png").exists() and (out / "eval_test.txt").exists()
    assert "Mean w/o trajectory" in capsys.readouterr().out


def test_evaluate_ground_truth_is_zero(trained):
    w = trained
    assert cli.main(["evaluate", "--gt-vs-gt", "--cache", str(w / "cache"), "--out", str(w / "gt"),
                     "--no-plots"]) == 0
    rep = json.loads((w / "gt" / "eval_test.json").read_text())
    assert rep["ape_mean"] == 0.0 and rep["ave_mean"] == 0.0


def test_evaluate_refuses_other_embedder(trained, tmp_path):
    other = write_toy_word_table(tmp_path / "other.txt", seed=9)
    rc = cli.main(["evaluate", "--checkpoint", str(trained / "run" / "best.pt"), "--cache",
                   str(trained / "cache"), "--word-table", str(other), "--out", str(tmp_path)])
    assert rc == 5


def test_generate(trained, tmp_path):
    ckpt = str(trained / "run" / "best.pt")
    out = tmp_path / "walk.npz"
    assert cli.main(["generate", "--checkpoint", ckpt, "--sentence", "a person walks forward",
                     "--out", str(out), "--csv", "--plot"]) == 0
    seq, names = load_motion(out)
    assert seq.frames.shape == (96, 21, 3) and len(names) == 21
    assert (tmp_path / "walk.csv").exists() and (tmp_path / "walk_trajectory.png").exists()
    again = tmp_path / "again.npz"
    cli.main(["generate", "--checkpoint", ckpt, "--sentence", "a person walks forward", "--out", str(again),
              "--frames", "96"])
    np.testing.assert_array_equal(load_motion(again)[0].frames, seq.frames)

    seeded = tmp_path / "seeded.npz"
    assert cli.main(["generate", "--checkpoint", ckpt, "--sentence", "a person jumps up", "--frames", "5",
                     "--initial-pose", str(out), "--out", str(seeded)]) == 0
    assert load_motion(seeded)[0].frames.shape == (5, 21, 3)


def test_generate_usage_errors(trained, tmp_path):
    ckpt = str(trained / "run" / "best.pt")
    assert cli.main(["generate", "--checkpoint", ckpt, "--sentence", "  "]) == 2
    assert cli.main(["generate", "--checkpoint", ckpt, "--sentence", "walk", "--frames", "0"]) == 2
    assert cli.main(["generate", "--checkpoint", str(tmp_path / "missing.pt"), "--sentence", "walk"]) == 5
    assert cli.main(["frobnicate"]) == 2


def test_missing_bert_weights(trained, tmp_path, monkeypatch):
    monkeypatch.delenv("LANG2MOTION_BERT_DIR", raising=False)
    rc = cli.main(["train", "--cache", str(trained / "cache"), "--run-dir", str(tmp_path / "r"),
                   "--epochs", "1", "--embedder", "bert", *SMALL_FLAGS])
    assert rc == 4


def test_config_file_and_ablation(trained, tmp_path):
    cfg = {"cache": str(trained / "cache"), "run_dir": str(tmp_path / "r2"), "seed": 3,
           "train": {"epochs": 1, "batch_size": 4}, "model": {"h1": 4, "h2": 8, "h": 16},
           "embedder": {"kind": "static", "table_path": str(trained / "words.txt")}}
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert cli.main(["--config", str(path), "train", "--ablation", "2st", "--limit", "4"]) == 0
    arch = json.loads((tmp_path / "r2" / "architecture.json").read_text())
    assert arch["ablation"] == "no_two_stream" and arch["latent_layout"] == {"body": 32}


def test_bert_pipeline(trained, bert_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("LANG2MOTION_BERT_DIR", str(bert_dir))
    run = tmp_path / "bert_run"
    assert cli.main(["train", "--cache", str(trained / "cache"), "--run-dir", str(run), "--epochs", "1",
                     "--limit", "6", "--batch-size", "3", *SMALL_FLAGS]) == 0
    assert json.loads((run / "architecture.json").read_text())["embed_dim"] == 4096
    out = tmp_path / "g.npz"
    assert cli.main(["generate", "--checkpoint", str(run / "best.pt"), "--sentence", "a person walks",
                     "--frames", "10", "--out", str(out)]) == 0
