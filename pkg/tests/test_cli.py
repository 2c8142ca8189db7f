import numpy as np
import pytest

from pbemoc.cli import EXIT_CFL, EXIT_CONFIG, EXIT_OK, cli_main
from pbemoc.harness import read_convergence_csv, read_scaling_csv


def test_convergence_study_writes_csv(tmp_path, capsys):
    out = tmp_path / "t1.csv"
    code = cli_main(
        [
            "--study", "convergence",
            "--element", "p1",
            "--levels", "1,2",
            "--coupling", "h2",
            "--out", str(out),
        ]
    )
    assert code == EXIT_OK
    rows = read_convergence_csv(out)
    assert len(rows) == 2
    assert rows[0].h == 0.5 and rows[1].h == 0.25
    stdout = capsys.readouterr().out
    assert "l2_error" in stdout


def test_single_run_with_workers(capsys):
    code = cli_main(
        ["--study", "single", "--h", "0.25", "--tau", "0.0625", "--iota", "0.0625", "--workers", "2"]
    )
    assert code == EXIT_OK
    stdout = capsys.readouterr().out
    assert "2 pipelined workers" in stdout
    assert "L2 error" in stdout and "H1 error" in stdout


def test_cfl_violation_exits_nonzero(capsys):
    code = cli_main(
        ["--study", "single", "--h", "0.25", "--tau", "0.5", "--iota", "0.001"]
    )
    assert code == EXIT_CFL
    err = capsys.readouterr().err
    assert "stability bound" in err


def test_unknown_flag_exits_nonzero(capsys):
    code = cli_main(["--study", "single", "--frobnicate"])
    assert code != 0


def test_missing_required_parameters(capsys):
    assert cli_main(["--study", "single"]) == EXIT_CONFIG
    assert cli_main([]) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_characteristics_requires_quadratic(capsys):
    code = cli_main(["--study", "characteristics", "--element", "p1", "--levels", "1,2"])
    assert code == EXIT_CONFIG


def test_config_file_supplies_defaults_and_flags_win(tmp_path, capsys):
    cfg = tmp_path / "study.cfg"
    cfg.write_text(
        "# benchmark configuration\n"
        "study = convergence\n"
        "element = p1\n"
        "levels = 1\n"
        "coupling = h2\n"
    )
    out = tmp_path / "out.csv"
    code = cli_main(["--config", str(cfg), "--levels", "2", "--out", str(out)])
    assert code == EXIT_OK
    rows = read_convergence_csv(out)
    assert len(rows) == 1
    assert rows[0].h == 0.25  # the explicit flag overrode the file's level 1


def test_config_file_rejects_unknown_keys(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("studyy = single\n")
    assert cli_main(["--config", str(cfg)]) == EXIT_CONFIG
    assert "unknown config keys" in capsys.readouterr().err


def test_snapshots_written_for_single_run(tmp_path, capsys):
    code = cli_main(
        [
            "--study", "single",
            "--h", "0.5",
            "--tau", "0.25",
            "--iota", "0.25",
            "--snapshots", "0,4",
            "--out", str(tmp_path),
        ]
    )
    assert code == EXIT_OK
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["surface_n00000.txt", "surface_n00004.txt"]
    first = (tmp_path / "surface_n00000.txt").read_text().splitlines()[0].split()
    assert len(first) == 3


def test_scaling_study_csv(tmp_path, capsys):
    out = tmp_path / "scaling.csv"
    code = cli_main(
        [
            "--study", "scaling",
            "--workers", "1,2",
            "--h", "0.25",
            "--iota", "0.0625",
            "--steps", "4",
            "--out", str(out),
        ]
    )
    assert code == EXIT_OK
    rows = read_scaling_csv(out)
    assert [r.workers for r in rows] == [1, 2]
    assert rows[0].speedup == pytest.approx(1.0)


def test_iterative_solver_flag(capsys):
    code = cli_main(
        [
            "--study", "single",
            "--h", "0.25",
            "--tau", "0.125",
            "--iota", "0.125",
            "--solver", "iterative",
            "--solver-tol", "1e-10",
        ]
    )
    assert code == EXIT_OK
