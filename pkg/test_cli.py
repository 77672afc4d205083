#!/usr/bin/env python3
"""
Tests for the csbm command-line front end.
"""
import csv
import sys

import pytest

sys.path.insert(0, '.')

import cli
from csbm.config import load_settings, set_settings
from csbm.errors import InvalidParameterError
from csbm.serialization import read_instance


@pytest.fixture(autouse=True)
def fresh_settings():
    yield
    set_settings(load_settings())


def read_rows(path):
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    return lines[0], list(csv.DictReader(lines[1:]))


def test_parse_grid():
    assert cli.parse_grid("0.5:1.0:0.25") == [0.5, 0.75, 1.0]
    assert cli.parse_grid("1,2,3.5") == [1.0, 2.0, 3.5]
    assert cli.parse_grid("7") == [7.0]
    for bad in ("1:2", "2:1:0.5", "a,b", ""):
        with pytest.raises(InvalidParameterError):
            cli.parse_grid(bad)


def test_sweep_writes_reproducible_rows(tmp_path):
    """Rows come out in (point, repeat) order and repeat bit-for-bit apart from timing."""
    print("=" * 60)
    print("Testing sweep")
    print("=" * 60)
    args = ["sweep", "--n", "300", "--alpha", "5", "--d", "3", "--lam", "0.5,1.0", "--mu", "1.5",
            "--rho", "0.1", "--repeats", "2", "--max-iters", "30", "--seed", "11", "--quiet"]
    first = tmp_path / "first.csv"
    second = tmp_path / "second.csv"
    assert cli.main(args + ["--out", str(first)]) == cli.EXIT_OK
    assert cli.main(args + ["--out", str(second)]) == cli.EXIT_OK

    header, rows = read_rows(first)
    assert header.startswith("# csbm ") and header.endswith("seed=11")
    assert list(rows[0].keys()) == cli.SWEEP_COLUMNS
    assert len(rows) == 4
    assert [float(row["lambda"]) for row in rows] == [0.5, 0.5, 1.0, 1.0]
    assert rows[0]["seed"] != rows[1]["seed"]
    assert all(row["algorithm"] == "amp_bp" for row in rows)
    assert all(row["N"] == "300" and row["P"] == "60" for row in rows)

    _, again = read_rows(second)
    strip = lambda table: [{k: v for k, v in row.items() if k != "ms"} for row in table]
    assert strip(rows) == strip(again)
    print("✓ Sweep works")


def test_sweep_with_worker_processes(tmp_path):
    out = tmp_path / "parallel.csv"
    args = ["sweep", "--n", "200", "--alpha", "5", "--d", "3", "--lam", "1.0", "--mu", "1.0", "--rho", "0.1",
            "--repeats", "3", "--max-iters", "20", "--threads", "2", "--algorithm", "se", "--out", str(out),
            "--quiet"]
    assert cli.main(args) == cli.EXIT_OK
    _, rows = read_rows(out)
    assert len(rows) == 3
    assert all(row["algorithm"] == "se" for row in rows)


def test_se_subcommand(tmp_path):
    """Full supervision pins m_u = 1 and m_v = μ/(1 + μ)."""
    out = tmp_path / "se.csv"
    assert cli.main(["se", "--mu", "2", "--alpha", "10", "--lam", "0.9", "--rho", "1", "--out", str(out)]) == 0
    with open(out, encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert float(rows[-1]["m_u"]) == pytest.approx(1.0)
    assert float(rows[-1]["m_v"]) == pytest.approx(2.0 / 3.0)


def test_generate_then_infer(tmp_path, capsys):
    directory = tmp_path / "instance"
    assert cli.main(["generate", "--n", "400", "--p", "40", "--d", "4", "--lam", "1.5", "--mu", "2",
                     "--seed", "5", "--out", str(directory)]) == 0
    instance = read_instance(str(directory))
    assert instance.n_nodes == 400 and instance.feature_dim == 40

    labels = tmp_path / "labels.txt"
    assert cli.main(["infer", "--instance", str(directory), "--rho", "0.1", "--max-iters", "50",
                     "--out", str(labels)]) == 0
    captured = capsys.readouterr().out
    assert "q_u:" in captured and "phi:" in captured
    with open(labels, encoding="utf-8") as f:
        assert len(f.read().split()) == 400


def test_oracle_and_logistic(tmp_path, capsys):
    out = tmp_path / "marginals.txt"
    assert cli.main(["oracle", "--n", "10", "--p", "4", "--d", "2", "--lam", "0.5", "--mu", "1", "--rho", "0.2",
                     "--compare", "--out", str(out)]) == 0
    with open(out, encoding="utf-8") as f:
        values = [float(x) for x in f.read().split()]
    assert len(values) == 10 and all(0.0 <= x <= 1.0 for x in values)
    assert "max |AMP-BP - exact|" in capsys.readouterr().out

    assert cli.main(["logistic", "--n", "300", "--p", "30", "--d", "3", "--lam", "0", "--mu", "20",
                     "--rho", "0.3", "--l2", "0.01,1"]) == 0
    assert "q_u:" in capsys.readouterr().out


def test_em_mcmc_and_dense_subcommands(tmp_path, capsys):
    trace = tmp_path / "trace.csv"
    assert cli.main(["em", "--n", "400", "--p", "40", "--d", "4", "--lam", "1.5", "--mu", "2", "--rho", "0.1",
                     "--max-outer", "2", "--max-iters", "40", "--out", str(trace)]) == 0
    with open(trace, encoding="utf-8") as f:
        lines = f.read().splitlines()
    assert lines[0].startswith("# csbm ")
    assert lines[1] == "outer,c_in,c_out,mu,phi"
    assert 1 <= len(lines) - 2 <= 2

    assert cli.main(["mcmc", "--n", "30", "--p", "6", "--d", "3", "--lam", "1", "--mu", "1", "--rho", "0.2",
                     "--sweeps", "200", "--burn-in", "50"]) == 0
    assert "q_u:" in capsys.readouterr().out

    assert cli.main(["dense", "--n", "300", "--p", "30", "--d", "30", "--lam", "2", "--mu", "2", "--rho", "0.1",
                     "--max-iters", "20", "--surrogate"]) == 0
    captured = capsys.readouterr().out
    assert "se_m_u:" in captured and "se_q_u:" in captured


def test_config_file_supplies_defaults(tmp_path):
    config = tmp_path / "experiment.ini"
    config.write_text("[global]\nseed = 4\n\n[se]\nmu = 2\nalpha = 10\nlam = 0.9\nrho = 1\n", encoding="utf-8")
    out = tmp_path / "se.csv"
    assert cli.main(["se", "--config", str(config), "--out", str(out)]) == 0
    with open(out, encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert float(rows[-1]["m_u"]) == pytest.approx(1.0)


def test_exit_codes(tmp_path, monkeypatch):
    """2 for invalid parameters, 3 for budget violations."""
    assert cli.main(["infer", "--n", "100", "--p", "10", "--d", "4", "--lam", "3"]) == cli.EXIT_INVALID
    assert cli.main(["sweep", "--n", "100", "--p", "10", "--algorithm", "nope"]) == cli.EXIT_INVALID
    assert cli.main(["se", "--config", str(tmp_path / "missing.ini")]) == cli.EXIT_INVALID

    monkeypatch.setenv("CSBM_MEMORY_BUDGET_MB", "1")
    assert cli.main(["generate", "--n", "2000", "--p", "2000", "--out", str(tmp_path / "big")]) == cli.EXIT_BUDGET

    with pytest.raises(SystemExit):
        cli.main(["infer", "--p", "10", "--alpha", "2"])


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
