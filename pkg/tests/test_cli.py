import json
from pathlib import Path

import numpy as np
import pytest

from setner.cli import main
from setner.data import load_corpus
from setner.evaluation import corpus_stats


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    code = main([
        "gen-data", "--seed", "7", "--n", "40", "--nesting-prob", "0.5",
        "--out-dir", str(out),
    ])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("run")
    code = main([
        "train", "--train", str(data_dir / "train.jsonl"),
        "--dev", str(data_dir / "dev.jsonl"), "--out", str(out),
        "--seed", "13", "--epochs", "2", "--queries", "8", "--layers", "1",
        "--heads", "2", "--hidden", "8", "--quiet",
    ])
    assert code == 0
    return out


class TestGenData:
    def test_writes_three_splits(self, data_dir):
        for name in ("train.jsonl", "dev.jsonl", "test.jsonl"):
            assert (data_dir / name).is_file()
        sentences, _ = load_corpus(data_dir / "train.jsonl")
        assert len(sentences) == 40

    def test_deterministic(self, data_dir, tmp_path):
        other = tmp_path / "again"
        assert main(["gen-data", "--seed", "7", "--n", "40",
                     "--nesting-prob", "0.5", "--out-dir", str(other)]) == 0
        for name in ("train.jsonl", "dev.jsonl", "test.jsonl"):
            assert (other / name).read_bytes() == (data_dir / name).read_bytes()


class TestStats:
    def test_prints_and_writes(self, data_dir, tmp_path, capsys):
        out = tmp_path / "stats"
        code = main(["stats", "--corpus", str(data_dir / "train.jsonl"),
                     "--out", str(out)])
        assert code == 0
        text = capsys.readouterr().out
        assert "nested_pct" in text
        payload = json.loads((out / "stats.json").read_text())
        sentences, _ = load_corpus(data_dir / "train.jsonl")
        assert payload == corpus_stats(sentences).to_dict()
        assert (out / "stats.csv").is_file()
        assert (out / "stats.png").is_file()

    def test_missing_corpus_is_usage_error(self, capsys):
        assert main(["stats", "--corpus", "no-such.jsonl"]) == 2
        assert "--corpus" in capsys.readouterr().err


class TestTrain:
    def test_run_directory_contents(self, run_dir):
        for name in ("checkpoint_best.npz", "checkpoint_final.npz",
                     "metrics.csv", "metrics.json", "training_curves.png",
                     "config_used.cfg"):
            assert (run_dir / name).is_file(), name

    def test_missing_train_flag_names_flag(self, capsys, data_dir, tmp_path):
        code = main(["train", "--train", "missing.jsonl",
                     "--dev", str(data_dir / "dev.jsonl"),
                     "--out", str(tmp_path / "x")])
        assert code == 2
        assert "--train" in capsys.readouterr().err

    def test_unknown_flag_is_usage_error(self, capsys):
        assert main(["train", "--bogus"]) == 2


class TestPredictEval:
    def test_predict_mirrors_input_order(self, run_dir, data_dir, tmp_path):
        pred_path = tmp_path / "pred.jsonl"
        code = main(["predict", "--checkpoint", str(run_dir / "checkpoint_best.npz"),
                     "--in", str(data_dir / "test.jsonl"),
                     "--out", str(pred_path)])
        assert code == 0
        inputs = [json.loads(l) for l in open(data_dir / "test.jsonl")]
        outputs = [json.loads(l) for l in open(pred_path)]
        assert len(inputs) == len(outputs)
        for i, o in zip(inputs, outputs):
            assert i["tokens"] == o["tokens"]
            for ent in o["entities"]:
                assert set(ent) == {"start", "end", "type", "score"}
                assert 0 <= ent["start"] <= ent["end"] < len(o["tokens"])

    def test_eval_checkpoint_and_file_paths_agree(self, run_dir, data_dir, tmp_path, capsys):
        pred_path = tmp_path / "pred.jsonl"
        main(["predict", "--checkpoint", str(run_dir / "checkpoint_best.npz"),
              "--in", str(data_dir / "test.jsonl"), "--out", str(pred_path)])
        out_a = tmp_path / "eval_ck"
        code = main(["eval", "--checkpoint", str(run_dir / "checkpoint_best.npz"),
                     "--corpus", str(data_dir / "test.jsonl"), "--out", str(out_a)])
        assert code == 0
        out_b = tmp_path / "eval_pred"
        code = main(["eval", "--pred", str(pred_path),
                     "--corpus", str(data_dir / "test.jsonl"), "--out", str(out_b)])
        assert code == 0
        a = json.loads((out_a / "eval.json").read_text())
        b = json.loads((out_b / "eval.json").read_text())
        assert a == b

    def test_eval_requires_exactly_one_source(self, data_dir, capsys):
        assert main(["eval", "--corpus", str(data_dir / "test.jsonl")]) == 2


class TestSweep:
    def test_interaction_sweep_two_rows(self, data_dir, tmp_path, capsys):
        out = tmp_path / "sweep"
        code = main([
            "sweep", "--axis", "interaction", "--values", "on,off",
            "--train", str(data_dir / "train.jsonl"),
            "--dev", str(data_dir / "dev.jsonl"),
            "--test", str(data_dir / "test.jsonl"),
            "--out", str(out), "--epochs", "1", "--seed", "3",
        ])
        assert code == 0
        payload = json.loads((out / "sweep.json").read_text())
        assert len(payload) == 2
        assert (out / "sweep.csv").is_file() and (out / "sweep.png").is_file()

    def test_bad_values_usage_error(self, data_dir, tmp_path, capsys):
        code = main([
            "sweep", "--axis", "queries", "--values", "a,b",
            "--train", str(data_dir / "train.jsonl"),
            "--dev", str(data_dir / "dev.jsonl"),
            "--test", str(data_dir / "test.jsonl"),
            "--out", str(tmp_path / "s"),
        ])
        assert code == 2


def test_seeded_training_is_reproducible(tmp_path, data_dir):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = main([
            "train", "--train", str(data_dir / "train.jsonl"),
            "--dev", str(data_dir / "dev.jsonl"), "--out", str(out),
            "--seed", "13", "--epochs", "1", "--queries", "8", "--layers", "1",
            "--heads", "2", "--hidden", "8", "--quiet",
        ])
        assert code == 0
        outs.append(out)
    assert (outs[0] / "metrics.json").read_bytes() == (outs[1] / "metrics.json").read_bytes()
