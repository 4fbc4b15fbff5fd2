"""End-to-end tests for the command-line front end."""

import json
import os

import numpy as np
import pytest

from dpvp.cli import main


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_simulate_writes_dataset(tmp_path, capsys):
    out = tmp_path / "sim"
    code = main(["simulate", "--generator", "mcm-t3", "--seed", "7", "--out", str(out)])
    assert code == 0
    for name in (
        "manifest.txt",
        "source_1.csv",
        "source_2.csv",
        "source_3.csv",
        "truth.csv",
        "config.echo",
    ):
        assert (out / name).exists()
    assert "manifest.txt" in capsys.readouterr().out


def test_simulate_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert main(["simulate", "--generator", "ecs-synthetic", "--seed", "3", "--out", str(a)]) == 0
    assert main(["simulate", "--generator", "ecs-synthetic", "--seed", "3", "--out", str(b)]) == 0
    for name in sorted(os.listdir(a)):
        if name == "config.echo":
            continue
        assert _read(a / name) == _read(b / name), name


def test_simulate_unknown_generator(tmp_path, capsys):
    code = main(["simulate", "--generator", "nope", "--out", str(tmp_path / "x")])
    assert code == 2
    assert "unknown generator" in capsys.readouterr().err


def test_fit_retains_expected_records(tmp_path):
    out = tmp_path / "fit"
    cfgfile = tmp_path / "cfg"
    cfgfile.write_text("init_sweeps=20\n")
    code = main(
        [
            "fit",
            "--config",
            str(cfgfile),
            "--generator",
            "mcm-t3",
            "--model",
            "mcm",
            "--K",
            "5",
            "--iterations",
            "10",
            "--burnin",
            "5",
            "--seed",
            "1",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    lines = (out / "trace.jsonl").read_text().splitlines()
    assert len(lines) == 5
    rows = [json.loads(line) for line in lines]
    assert rows[0]["iteration"] == 5
    assert (out / "assignments.csv").exists()
    assert (out / "kernel_posterior.csv").exists()
    assert (out / "runtime.txt").exists()
    echo = (out / "config.echo").read_text()
    assert "iterations=10" in echo and "K=5" in echo


def test_fit_similarity_emits_sigma_matrix(tmp_path):
    out = tmp_path / "fit"
    cfgfile = tmp_path / "cfg"
    cfgfile.write_text("init_sweeps=20\n")
    code = main(
        [
            "fit",
            "--config",
            str(cfgfile),
            "--generator",
            "mcm-t3",
            "--model",
            "mcm",
            "--kernel",
            "similarity",
            "--K",
            "5",
            "--iterations",
            "12",
            "--burnin",
            "6",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    posterior = (out / "kernel_posterior.csv").read_text().splitlines()
    assert len(posterior) == 4  # header + three off-diagonal entries
    assert posterior[1].startswith('"sigma[0,1]",')
    sigma_lines = (out / "kernel_sigma_mean.csv").read_text().splitlines()
    assert len(sigma_lines) == 4
    grid = np.array([row.split(",")[1:] for row in sigma_lines[1:]], dtype=float)
    assert grid.shape == (3, 3)
    np.testing.assert_allclose(np.diag(grid), 1.0)
    np.testing.assert_allclose(grid, grid.T)


def test_fit_network_generator(tmp_path):
    out = tmp_path / "fit"
    cfgfile = tmp_path / "cfg"
    cfgfile.write_text("init_sweeps=15\n")
    code = main(
        [
            "fit",
            "--config",
            str(cfgfile),
            "--generator",
            "ecs-synthetic",
            "--model",
            "ecs",
            "--K",
            "5",
            "--iterations",
            "8",
            "--burnin",
            "4",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    assignments = (out / "assignments.csv").read_text().splitlines()
    assert assignments[0] == "object," + ",".join(f"location_{t}" for t in range(6))
    assert len(assignments) == 31


def test_fit_baseline_shared(tmp_path):
    out = tmp_path / "fit"
    cfgfile = tmp_path / "cfg"
    cfgfile.write_text("init_sweeps=15\n")
    code = main(
        [
            "fit",
            "--config",
            str(cfgfile),
            "--generator",
            "mcm-t3",
            "--model",
            "baseline-shared",
            "--K",
            "5",
            "--iterations",
            "8",
            "--burnin",
            "4",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    assignments = (out / "assignments.csv").read_text().splitlines()
    assert assignments[0] == "object,location_0"
    posterior = (out / "kernel_posterior.csv").read_text().splitlines()
    # the shared baseline holds a fixed unit-lengthscale kernel, so the
    # posterior summary degenerates to a constant row
    assert len(posterior) == 2
    assert posterior[1] == "lengthscale,1,1,1"


def test_fit_missing_data_manifest(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "manifest.txt"
    code = main(["fit", "--data", str(missing), "--model", "mcm", "--out", str(tmp_path / "o")])
    assert code == 2
    assert str(missing) in capsys.readouterr().err


def test_fit_model_data_mismatch(tmp_path, capsys):
    code = main(
        [
            "fit",
            "--generator",
            "mcm-t3",
            "--model",
            "ecs",
            "--iterations",
            "4",
            "--burnin",
            "2",
            "--out",
            str(tmp_path / "o"),
        ]
    )
    assert code == 2
    assert "network" in capsys.readouterr().err


def test_fit_both_data_and_generator(tmp_path, capsys):
    code = main(
        [
            "fit",
            "--generator",
            "mcm-t3",
            "--data",
            "somefile",
            "--model",
            "mcm",
            "--out",
            str(tmp_path / "o"),
        ]
    )
    assert code == 2
    assert "exactly one" in capsys.readouterr().err


def test_fit_malformed_csv_is_runtime_error(tmp_path, capsys):
    data_dir = tmp_path / "d"
    data_dir.mkdir()
    (data_dir / "s.csv").write_text("object,a\n0,oops\n")
    manifest = data_dir / "manifest.txt"
    manifest.write_text("kind=multitask\nsource=s.csv,0.0\n")
    code = main(
        [
            "fit",
            "--data",
            str(manifest),
            "--model",
            "mcm",
            "--iterations",
            "4",
            "--burnin",
            "2",
            "--out",
            str(tmp_path / "o"),
        ]
    )
    assert code == 1
    assert "s.csv" in capsys.readouterr().err


def test_evaluate_writes_table(tmp_path):
    out = tmp_path / "eval"
    cfgfile = tmp_path / "cfg"
    cfgfile.write_text("init_sweeps=15\n")
    code = main(
        [
            "evaluate",
            "--config",
            str(cfgfile),
            "--generator",
            "gaussian-clusters",
            "--model",
            "independent,shared",
            "--K",
            "5",
            "--iterations",
            "12",
            "--burnin",
            "6",
            "--repeats",
            "2",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    lines = (out / "eval_table.csv").read_text().splitlines()
    assert lines[0] == "method,mean,stderr,repeats"
    assert len(lines) == 3
    for line in lines[1:]:
        method, mean, stderr, repeats = line.split(",")
        assert method in ("independent", "shared")
        assert np.isfinite(float(mean)) and np.isfinite(float(stderr))
        assert repeats == "2"


def test_evaluate_zero_repeats(tmp_path, capsys):
    code = main(
        [
            "evaluate",
            "--generator",
            "gaussian-clusters",
            "--model",
            "independent",
            "--repeats",
            "0",
            "--out",
            str(tmp_path / "o"),
        ]
    )
    assert code == 2
    assert "repeat" in capsys.readouterr().err


def test_flags_override_config_file(tmp_path):
    out = tmp_path / "fit"
    cfgfile = tmp_path / "cfg"
    cfgfile.write_text("iterations=40\nburnin=2\ninit_sweeps=10\nK=4\n")
    code = main(
        [
            "fit",
            "--config",
            str(cfgfile),
            "--generator",
            "gaussian-clusters",
            "--model",
            "mcm",
            "--iterations",
            "6",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    assert len((out / "trace.jsonl").read_text().splitlines()) == 4
    echo = (out / "config.echo").read_text()
    assert "iterations=6" in echo and "K=4" in echo


def test_config_unknown_key(tmp_path, capsys):
    cfgfile = tmp_path / "cfg"
    cfgfile.write_text("iterationz=40\n")
    code = main(
        [
            "fit",
            "--config",
            str(cfgfile),
            "--generator",
            "gaussian-clusters",
            "--model",
            "mcm",
            "--out",
            str(tmp_path / "o"),
        ]
    )
    assert code == 2
    assert "iterationz" in capsys.readouterr().err


def test_echo_config_reruns_identically(tmp_path):
    out1 = tmp_path / "one"
    cfgfile = tmp_path / "cfg"
    cfgfile.write_text("init_sweeps=15\n")
    args = [
        "fit",
        "--generator",
        "gaussian-clusters",
        "--model",
        "mcm",
        "--K",
        "4",
        "--iterations",
        "8",
        "--burnin",
        "4",
        "--seed",
        "5",
    ]
    assert main(args + ["--config", str(cfgfile), "--out", str(out1)]) == 0
    out2 = tmp_path / "two"
    assert main(["fit", "--config", str(out1 / "config.echo"), "--out", str(out2)]) == 0
    assert _read(out1 / "trace.jsonl") == _read(out2 / "trace.jsonl")
    assert _read(out1 / "assignments.csv") == _read(out2 / "assignments.csv")
