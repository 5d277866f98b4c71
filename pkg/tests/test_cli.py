"""
Tests for the command line interface and its exit codes
"""

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from app.cli import main
from app.services.config_service import save_config

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"


@pytest.fixture
def linear_ini(workdir, linear_config):
    return save_config(linear_config, str(workdir / "linear.ini"))


def test_converge_linear_is_degenerate(linear_ini, linear_config, capsys):
    assert main(["converge", "--config", linear_ini, "--seed", "3"]) == 0
    out = capsys.readouterr().out
    assert "verdict: degenerate: scheme exact" in out
    table = pd.read_csv(Path(linear_config.run.output_dir) / "weak_error.csv")
    assert table["seed"].tolist() == [3, 3, 3]
    assert (Path("logs") / "marcus.log").exists()


def test_out_override(linear_ini, workdir):
    assert main(["converge", "--config", linear_ini, "--out", "elsewhere"]) == 0
    assert (workdir / "elsewhere" / "weak_error.csv").exists()
    assert (workdir / "elsewhere" / "weak_error_plot.dat").exists()


def test_bad_ladder_is_a_config_error(workdir):
    path = workdir / "bad.ini"
    path.write_text("[model]\nname = linear\nparams = 0.1, 0.2, 0.3\n"
                    "[levy]\nfamily = compound_poisson_normal\nparams = 1, 0, 0.5\n"
                    "[run]\nh_list = 0.125, 0.25\n")
    assert main(["converge", "--config", str(path)]) == 2


def test_missing_config_is_an_io_error(workdir):
    assert main(["verify", "--config", str(workdir / "missing.ini")]) == 4


def test_paths_export_is_exact_and_repeatable(linear_ini, linear_config):
    assert main(["paths", "--config", linear_ini, "-n", "3", "--dense", "2"]) == 0
    out_dir = Path(linear_config.run.output_dir)
    frame = pd.read_csv(out_dir / "paths.csv")
    assert sorted(frame["path_index"].unique()) == [0, 1, 2]
    assert len(frame) == 3 * 17
    gap = np.abs(frame["scheme"] - frame["oracle"])
    assert np.all(gap <= 1e-8 * np.maximum(1.0, frame["oracle"].abs()) * 16)
    dense = pd.read_csv(out_dir / "paths_dense.csv")
    assert len(dense) == 3 * 33

    first = (out_dir / "paths.csv").read_bytes()
    assert main(["paths", "--config", linear_ini, "-n", "3", "--dense", "2"]) == 0
    assert (out_dir / "paths.csv").read_bytes() == first


def test_paths_count_is_validated(linear_ini):
    assert main(["paths", "--config", linear_ini, "-n", "0"]) == 2


@pytest.mark.slow
def test_verify_flags_stable_tails(workdir, capsys):
    code = main(["verify", "--config", str(CONFIG_DIR / "stable_verify.ini"), "--out", "verify"])
    assert code == 1
    table = pd.read_csv(workdir / "verify" / "verify.csv")
    verdicts = dict(zip(table["check"], table["verdict"]))
    assert verdicts["H_nu"] == "infinite"
    assert verdicts["H_abc"] == "pass"
    assert "H_nu" in capsys.readouterr().out
