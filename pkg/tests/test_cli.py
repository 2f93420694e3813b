import json
import subprocess
import sys

import pytest

from itt.cli import main
from itt.config import TrainConfig, config_to_dict
from conftest import tiny_itt_config
from itt.data import markov_corpus


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny trained checkpoint plus config and corpora on disk."""
    root = tmp_path_factory.mktemp("cli")
    (root / "train.txt").write_bytes(markov_corpus(8192, seed=0))
    (root / "eval.txt").write_bytes(markov_corpus(4096, seed=1))
    cfg = TrainConfig(
        seq_len=32,
        batch_size=2,
        steps=4,
        eval_every=2,
        eval_batches=2,
        seed=3,
        train_data=str(root / "train.txt"),
        eval_data=str(root / "eval.txt"),
        model=tiny_itt_config(steps=3, max_seq_len=32),
    )
    (root / "config.json").write_text(json.dumps(config_to_dict(cfg)))
    rc = main(
        ["train", "--config", str(root / "config.json"), "--out", str(root / "run")]
    )
    assert rc == 0
    return root


def test_train_writes_outputs(workspace):
    assert (workspace / "run" / "model.ittc").exists()
    assert (workspace / "run" / "metrics.jsonl").exists()


def test_eval_prints_ppl(workspace, capsys):
    rc = main(
        [
            "eval",
            "--ckpt", str(workspace / "run" / "model.ittc"),
            "--data", str(workspace / "eval.txt"),
            "--capacity-override", "s1=0.7,s2=0.9",
        ]
    )
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["capacities"] == [0.7, 0.9]
    assert doc["eval_ppl"] == pytest.approx(2.718281828**doc["eval_loss"], rel=1e-9)


def test_eval_rejects_unknown_step_label(workspace, capsys):
    rc = main(
        [
            "eval",
            "--ckpt", str(workspace / "run" / "model.ittc"),
            "--data", str(workspace / "eval.txt"),
            "--capacity-override", "s5=0.7",
        ]
    )
    assert rc == 2
    assert "s1..s2" in capsys.readouterr().err


def test_same_invocation_byte_identical(workspace, capsys):
    argv = [
        "eval",
        "--ckpt", str(workspace / "run" / "model.ittc"),
        "--data", str(workspace / "eval.txt"),
    ]
    assert main(argv) == 0
    first = capsys.readouterr().out
    assert main(argv) == 0
    assert capsys.readouterr().out == first


def test_sweep_csv(workspace, tmp_path):
    grid_path = tmp_path / "grid.json"
    grid_path.write_text(json.dumps([[0.5, 0.5], [1.0, 1.0]]))
    out_path = tmp_path / "sweep.csv"
    rc = main(
        [
            "sweep",
            "--ckpt", str(workspace / "run" / "model.ittc"),
            "--data", str(workspace / "eval.txt"),
            "--grid", str(grid_path),
            "--out", str(out_path),
        ]
    )
    assert rc == 0
    lines = out_path.read_text().strip().splitlines()
    assert lines[0].startswith("# grid:")
    assert lines[1].startswith("capacities,")
    assert len(lines) == 4


def test_trace_json_with_early_exit(workspace, capsys):
    rc = main(
        [
            "trace",
            "--ckpt", str(workspace / "run" / "model.ittc"),
            "--text", "hello world",
            "--epsilon", "10.0",
        ]
    )
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["tokens"] == list(b"hello world")
    assert doc["layers"]
    assert "early_exit" in doc and len(doc["early_exit"]["first_step"]) == 10


def test_probe_gnn_csv(workspace, capsys):
    rc = main(
        [
            "probe-gnn",
            "--ckpt", str(workspace / "run" / "model.ittc"),
            "--samples", "4",
        ]
    )
    assert rc == 0
    captured = capsys.readouterr()
    lines = captured.out.strip().splitlines()
    assert lines[0] == "sample_id,label,layer,wq,wk,wv,wo,total"
    assert "easy" in captured.err or "hard" in captured.err


def test_flops_breakdown(workspace, capsys):
    rc = main(["flops", "--config", str(workspace / "config.json")])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["total"] == doc["blocks_total"] + doc["routers_total"]


def test_gradcheck_exits_zero(capsys):
    assert main(["gradcheck", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out


class TestUsageErrors:
    def test_unknown_flag_exits_one(self, workspace, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["flops", "--config", str(workspace / "config.json"), "--bogus"])
        assert exc.value.code == 1
        assert "--bogus" in capsys.readouterr().err

    def test_conflicting_flag_named_in_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--config", "x.json", "--out", "y", "--text", "abc"])
        assert exc.value.code == 1
        assert "--text" in capsys.readouterr().err

    def test_missing_subcommand(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 1

    def test_help_exits_zero(self, capsys):
        for argv in (["--help"], ["eval", "--help"]):
            with pytest.raises(SystemExit) as exc:
                main(argv)
            assert exc.value.code == 0
        assert "--capacity-override" in capsys.readouterr().out

    def test_runtime_error_exits_two(self, tmp_path, capsys):
        missing = str(tmp_path / "missing.ittc")
        rc = main(["trace", "--ckpt", missing, "--text", "x"])
        assert rc == 2
        assert "error" in capsys.readouterr().err


def test_module_entry_point(workspace):
    proc = subprocess.run(
        [sys.executable, "-m", "itt", "flops", "--config", str(workspace / "config.json")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["total"] > 0
