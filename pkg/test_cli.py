#!/usr/bin/env python3
"""
End-to-end tests of the snake-refine subcommands and their exit codes
"""

import json

import numpy as np
import pandas as pd
import pytest

from snake_refine.cli import FIG4_COLUMNS, main
from snake_refine.field_model import HISTORY_COLUMNS
from snake_refine.metrics import REPORT_COLUMNS
from snake_refine.utils import file_formats


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch, tmp_path):
    """Isolate runs from stray SNAKE_REFINE_* variables and .env files"""
    import os

    for key in list(os.environ):
        if key.startswith("SNAKE_REFINE_"):
            monkeypatch.delenv(key)
    monkeypatch.chdir(tmp_path)


@pytest.fixture
def fig4_dir(tmp_path):
    out = tmp_path / "fig4"
    assert main(["synth-gen", "--fixture", "fig4", "--grid-size", "48", "--output", str(out)]) == 0
    return out


@pytest.fixture
def steep_dir(tmp_path):
    out = tmp_path / "steep"
    assert main(["synth-gen", "--fixture", "steep", "--grid-size", "48", "--output", str(out)]) == 0
    return out


def adjust_args(fixture_dir, out, *extra):
    return ["adjust", "--volume", str(fixture_dir / "field.raw"),
            "--graph", str(fixture_dir / "annotation.graph"),
            "--truth", str(fixture_dir / "truth.graph"), "--output", str(out), *extra]


def test_help_lists_subcommands(capsys):
    """Test the top-level help"""
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for name in ("synth-gen", "adjust", "train-toy", "metrics", "reproduce-fig4"):
        assert name in out
    assert "Exit codes" in out


def test_synth_gen_writes_fixture(fig4_dir):
    """Test the fixture files and manifest"""
    for name in ("field.raw", "field.raw.hdr", "truth.graph", "annotation.graph",
                 "gap_mask.raw", "manifest.json"):
        assert (fig4_dir / name).exists()
    manifest = json.loads((fig4_dir / "manifest.json").read_text())
    assert manifest["grid"] == [48, 48]
    assert manifest["params"]["offset"] == 4.0


@pytest.mark.parametrize("driver", ["fast", "full"])
def test_adjust_moves_annotation_toward_truth(fig4_dir, tmp_path, driver):
    """Test the adjusted graph, per-step table and summary"""
    out = tmp_path / f"adjust_{driver}"
    assert main(adjust_args(fig4_dir, out, "--driver", driver)) == 0
    adjusted = file_formats.read_graph(out / "adjusted.graph")
    assert adjusted.num_vertices == file_formats.read_graph(fig4_dir / "annotation.graph").num_vertices
    steps = pd.read_csv(out / "steps.csv")
    assert len(steps) == 10
    summary = json.loads((out / "summary.json").read_text())
    assert summary["final_error"] < summary["initial_error"]
    assert json.loads((out / "progress.json").read_text())["status"] == "completed"


def test_adjust_divergence_exit_code(steep_dir, tmp_path):
    """Test gamma = 1 on the steep fixture exits with 4 and marks the run failed"""
    out = tmp_path / "diverged"
    assert main(adjust_args(steep_dir, out, "--gamma", "1")) == 4
    assert json.loads((out / "progress.json").read_text())["status"] == "failed"


def test_environment_sets_viscosity(steep_dir, tmp_path, monkeypatch):
    """Test SNAKE_REFINE_GAMMA reaches the solver and a flag overrides it"""
    monkeypatch.setenv("SNAKE_REFINE_GAMMA", "1")
    assert main(adjust_args(steep_dir, tmp_path / "env")) == 4
    assert main(adjust_args(steep_dir, tmp_path / "flag", "--gamma", "1000")) == 0


def test_config_error_exit_codes(fig4_dir, tmp_path):
    """Test invalid values and missing inputs exit with 2"""
    assert main(adjust_args(fig4_dir, tmp_path / "a", "--gamma", "-1")) == 2
    assert main(["train-toy", "--mode", "adam", "--output", str(tmp_path / "b")]) == 2
    assert main(["adjust", "--graph", str(fig4_dir / "truth.graph")]) == 2
    assert main(["metrics", "--graph", str(fig4_dir / "truth.graph")]) == 2


def test_config_file_flag(fig4_dir, tmp_path):
    """Test --config values are validated"""
    conf = tmp_path / "bad.conf"
    conf.write_text("gamma = 0\n")
    assert main(adjust_args(fig4_dir, tmp_path / "c", "--config", str(conf))) == 2


def test_io_error_exit_code(fig4_dir, tmp_path):
    """Test unreadable inputs exit with 3"""
    args = ["adjust", "--volume", str(tmp_path / "missing.raw"),
            "--graph", str(fig4_dir / "annotation.graph"), "--output", str(tmp_path / "d")]
    assert main(args) == 3
    broken = tmp_path / "broken.graph"
    broken.write_text("v 0 1 2\ne 0 4\n")
    args = ["adjust", "--volume", str(fig4_dir / "field.raw"), "--graph", str(broken),
            "--output", str(tmp_path / "e")]
    assert main(args) == 3


def test_solver_error_exit_code(tmp_path):
    """Test a fixture that cannot be built exits with 5"""
    assert main(["synth-gen", "--fixture", "tree", "--grid-size", "8",
                 "--output", str(tmp_path / "tree")]) == 5


def test_train_toy_outputs(tmp_path):
    """Test history, final field, graph and summary of a short run"""
    out = tmp_path / "train"
    args = ["train-toy", "--fixture", "fig4", "--grid-size", "48", "--mode", "fast",
            "--train-steps", "3", "--dump-every", "2", "--output", str(out)]
    assert main(args) == 0
    history = pd.read_csv(out / "history.csv")
    assert list(history.columns) == HISTORY_COLUMNS
    assert history["step"].tolist() == [0, 1, 2]
    assert file_formats.read_volume(out / "final_field.raw").shape == (48, 48)
    assert file_formats.read_graph(out / "final.graph").num_vertices > 0
    assert (out / "dumps" / "step_0002.raw").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["mode"] == "fast"
    assert summary["grid"] == [48, 48]


def test_train_toy_divergence(tmp_path):
    """Test training on the steep fixture at gamma = 1 exits with 4"""
    args = ["train-toy", "--fixture", "steep", "--grid-size", "48", "--gamma", "1",
            "--train-steps", "2", "--output", str(tmp_path / "steep_train")]
    assert main(args) == 4


def test_adjust_full_driver_damping_flag(fig4_dir, tmp_path):
    """Test --damping reaches the full driver and negative values are rejected"""
    out = tmp_path / "damped"
    assert main(adjust_args(fig4_dir, out, "--driver", "full", "--damping", "4")) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["final_error"] < summary["initial_error"]
    assert main(adjust_args(fig4_dir, tmp_path / "a", "--damping", "-1")) == 2


def test_train_toy_absolute_error_loss(tmp_path):
    """Test --loss mae trains and keeps the field inside [0, d]"""
    out = tmp_path / "mae"
    args = ["train-toy", "--fixture", "fig4", "--grid-size", "48", "--mode", "fast",
            "--loss", "mae", "--train-steps", "3", "--output", str(out)]
    assert main(args) == 0
    field = file_formats.read_volume(out / "final_field.raw")
    assert field.data.min() >= 0.0 and field.data.max() <= 20.0


def test_metrics_on_identical_inputs(fig4_dir, capsys):
    """Test a prediction equal to the truth prints ones in column order"""
    capsys.readouterr()
    truth = str(fig4_dir / "truth.graph")
    assert main(["metrics", "--graph", truth, "--truth", truth, "--seed", "2"]) == 0
    fields = capsys.readouterr().out.strip().splitlines()[-1].split(",")
    assert len(fields) == len(REPORT_COLUMNS)
    assert fields[:5] == ["1"] * 5
    assert fields[-1] == "2"


def test_metrics_from_volumes(fig4_dir, capsys):
    """Test skeletonized volumes on both sides"""
    capsys.readouterr()
    field = str(fig4_dir / "field.raw")
    assert main(["metrics", "--volume", field, "--truth-volume", field]) == 0
    fields = capsys.readouterr().out.strip().splitlines()[-1].split(",")
    assert fields[:5] == ["1"] * 5


def test_reproduce_fig4_outputs(tmp_path):
    """Test the per-mode directories and the summary table"""
    out = tmp_path / "repro"
    args = ["reproduce-fig4", "--grid-size", "48", "--train-steps", "2", "--output", str(out)]
    assert main(args) == 0
    table = pd.read_csv(out / "fig4.csv")
    assert list(table.columns) == FIG4_COLUMNS
    assert table["mode"].tolist() == ["full", "fast", "simple"]
    assert (table["initial_error"] > 3.9).all()
    for mode in ("full", "fast", "simple"):
        for name in ("final_field.raw", "diff_to_truth.raw", "final_field.pgm",
                     "diff_to_truth.pgm", "final.graph", "history.csv"):
            assert (out / mode / name).exists()
    assert (out / "fixture" / "manifest.json").exists()
    assert (out / "initial_field.pgm").exists()


def test_adjust_zero_force_keeps_graph(tmp_path):
    """Test an annotation on its own exact distance map with no internal forces stays put"""
    fixture_dir = tmp_path / "exact"
    assert main(["synth-gen", "--fixture", "fig4", "--grid-size", "48", "--offset", "0",
                 "--gap", "0", "--output", str(fixture_dir)]) == 0
    out = tmp_path / "still"
    assert main(adjust_args(fixture_dir, out, "--driver", "full", "--alpha", "0",
                            "--beta", "0")) == 0
    before = file_formats.read_graph(fixture_dir / "annotation.graph")
    after = file_formats.read_graph(out / "adjusted.graph")
    assert np.abs(after.vertices - before.vertices).max() < 1e-4


def test_adjust_halves_gap_fixture_error(tmp_path):
    """Test the fast driver halves the annotation error on the default gap fixture"""
    fixture_dir = tmp_path / "fig4_full"
    assert main(["synth-gen", "--fixture", "fig4", "--output", str(fixture_dir)]) == 0
    out = tmp_path / "halved"
    assert main(adjust_args(fixture_dir, out, "--driver", "fast")) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["final_error"] <= 0.5 * summary["initial_error"]


def test_outputs_are_reproducible(tmp_path):
    """Test repeated runs give byte-identical numeric outputs"""
    for name in ("a", "b"):
        assert main(["synth-gen", "--fixture", "tree", "--seed", "4", "--grid-size", "48",
                     "--output", str(tmp_path / name / "fixture")]) == 0
        assert main(["train-toy", "--fixture", "tree", "--seed", "4", "--grid-size", "48",
                     "--train-steps", "2", "--output", str(tmp_path / name / "train")]) == 0
    for rel in ("fixture/field.raw", "fixture/truth.graph", "fixture/annotation.graph",
                "train/final_field.raw", "train/final.graph"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    history = [pd.read_csv(tmp_path / name / "train" / "history.csv").drop(columns=["seconds"])
               for name in ("a", "b")]
    pd.testing.assert_frame_equal(history[0], history[1])


@pytest.mark.slow
def test_reproduce_fig4_defaults(tmp_path):
    """Test the default run exits cleanly and meets the gap-fixture acceptance checks"""
    out = tmp_path / "repro_defaults"
    assert main(["reproduce-fig4", "--output", str(out)]) == 0
    table = pd.read_csv(out / "fig4.csv").set_index("mode")
    for mode in ("full", "fast"):
        assert table.loc[mode, "final_error"] <= 0.5 * table.loc[mode, "initial_error"]
        assert table.loc[mode, "gap_max"] <= 1.0
    assert table.loc["simple", "arc_length"] < table.loc["fast", "arc_length"]
    assert table.loc["full", "seconds_per_step"] > table.loc["simple", "seconds_per_step"]
