import json
import subprocess
import sys

import pytest

from epievo import checkpoint
from epievo.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main


def run_args(out, *extra):
    return [
        "run", "--task", "synthetic:two-blobs", "--out-dir", str(out), "--generations", "3",
        "--initial-size", "4", "--max-size", "6", "--species", "2", "--species-cap", "3",
        "--batch-size", "32", "--subset-fraction", "0.25", "--seed", "42", "--threads", "1", *extra,
    ]


def rows(out):
    return (out / "metrics.csv").read_text().splitlines()


class TestRun:
    def test_smoke(self, tmp_path, capsys):
        assert main(run_args(tmp_path)) == EXIT_OK
        lines = rows(tmp_path)
        assert len(lines) == 4  # header plus three generations
        assert [json.loads(l)["generation"] for l in (tmp_path / "metrics.jsonl").read_text().splitlines()] == [1, 2, 3]
        out = capsys.readouterr().out
        assert out.count("gen ") == 3 and "offspring-pre-BP" in out
        assert (tmp_path / "checkpoint.bin").exists()
        echoed = json.loads((tmp_path / "config.json").read_text())
        assert echoed["master_seed"] == 42 and echoed["initial_size"] == 4

    def test_missing_config(self, tmp_path, capsys):
        path = tmp_path / "missing.json"
        assert main(["run", "--config", str(path)]) == EXIT_CONFIG
        assert str(path) in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"populaton": 3}))
        assert main(["run", "--config", str(cfg)]) == EXIT_CONFIG
        assert "populaton" in capsys.readouterr().err

    def test_invalid_value_names_key(self, tmp_path, capsys):
        assert main(run_args(tmp_path, "--mutation-prob", "2")) == EXIT_CONFIG
        assert "mutation_probability" in capsys.readouterr().err

    def test_flags_override_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"generations": 7, "batch_size": 16}))
        out = tmp_path / "o"
        assert main(run_args(out, "--config", str(cfg))) == EXIT_OK
        echoed = json.loads((out / "config.json").read_text())
        assert echoed["generations"] == 3 and echoed["batch_size"] == 32
        assert len(rows(out)) == 4

    def test_missing_data(self, tmp_path, capsys):
        assert main(["run", "--task", "mnist", "--data-dir", str(tmp_path), "--out-dir", str(tmp_path / "o")]) == EXIT_DATA

    def test_byte_identical_metrics(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(run_args(a)) == EXIT_OK
        assert main(run_args(b)) == EXIT_OK
        for name in ("metrics.csv", "metrics.jsonl"):
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestResumeAndInspect:
    def test_resume_matches_straight_through(self, tmp_path):
        straight, split = tmp_path / "s", tmp_path / "r"
        assert main(run_args(straight, "--generations", "5")) == EXIT_OK
        assert main(run_args(split, "--generations", "2")) == EXIT_OK
        assert main(["resume", str(split / "checkpoint.bin"), "--generations", "5"]) == EXIT_OK
        assert (split / "metrics.csv").read_bytes() == (straight / "metrics.csv").read_bytes()
        assert (split / "metrics.jsonl").read_bytes() == (straight / "metrics.jsonl").read_bytes()

    def test_run_resume_flag(self, tmp_path):
        out = tmp_path / "o"
        assert main(run_args(out, "--generations", "1")) == EXIT_OK
        assert main(["run", "--resume", str(out / "checkpoint.bin"), "--generations", "2"]) == EXIT_OK
        assert len(rows(out)) == 3

    def test_nothing_to_do(self, tmp_path, capsys):
        assert main(run_args(tmp_path)) == EXIT_OK
        capsys.readouterr()
        assert main(["resume", str(tmp_path / "checkpoint.bin")]) == EXIT_OK
        assert "nothing to do" in capsys.readouterr().out
        assert len(rows(tmp_path)) == 4

    def test_inspect_minimal(self, tmp_path, capsys):
        args = ["run", "--task", "synthetic:two-blobs", "--out-dir", str(tmp_path), "--generations", "0",
                "--initial-size", "3", "--species", "1", "--seed", "1"]
        assert main(args) == EXIT_OK
        capsys.readouterr()
        assert main(["inspect", str(tmp_path / "checkpoint.bin")]) == EXIT_OK
        text = capsys.readouterr().out
        net_lines = [l for l in text.split("networks:")[1].splitlines()[2:] if l.strip()]
        assert len(net_lines) == 3
        assert all(l.rstrip().endswith("[(FC,2)]") for l in net_lines)

    def test_inspect_is_read_only(self, tmp_path):
        assert main(run_args(tmp_path, "--generations", "1")) == EXIT_OK
        before = (tmp_path / "checkpoint.bin").read_bytes()
        assert main(["inspect", str(tmp_path / "checkpoint.bin")]) == EXIT_OK
        assert (tmp_path / "checkpoint.bin").read_bytes() == before

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"EPIEVOCK" + b"\0" * 5)
        assert main(["inspect", str(bad)]) == EXIT_DATA
        assert main(["resume", str(bad)]) == EXIT_DATA
        assert "checkpoint error" in capsys.readouterr().err

    def test_checkpoint_loads(self, tmp_path):
        assert main(run_args(tmp_path, "--generations", "2")) == EXIT_OK
        assert checkpoint.load(tmp_path / "checkpoint.bin").generation == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "epievo", "inspect", str(tmp_path / "none.bin")],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_DATA
    assert "none.bin" in proc.stderr
