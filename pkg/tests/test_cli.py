import json
import subprocess
import sys

import pytest

from lbtrace.cli import build_parser, main


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as info:
        main(["run", "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--example", "--N", "--k", "--eigen", "--seed", "--sweep", "--out"):
        assert flag in text


def test_parser_defaults():
    args = build_parser().parse_args(["run"])
    assert args.example == 1 and args.N == 16 and args.k == 1
    assert args.eigen == "rank-completing"
    assert build_parser().parse_args(["run", "--sweep", "4,8"]).sweep == (4, 8)


def test_example1_run_writes_csv(tmp_path, capsys):
    assert main(["run", "--example", "1", "--sweep", "4,8", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "N,M,E_L2,EOC_L2,E_H1,EOC_H1"
    assert (tmp_path / "errors_k1.csv").exists()


def test_example2_run_with_dumps(tmp_path, capsys):
    code = main(["run", "--example", "2", "--N", "8", "--k", "1", "--lam-max", "7",
                 "--out", str(tmp_path), "--dump-matrices", "--dump-quadrature"])
    out = capsys.readouterr().out
    assert code == 0
    assert (tmp_path / "A_N8.mtx").exists() and (tmp_path / "quadrature_N8.csv").exists()
    assert "K=" in out and "6: 5 values" in out


def test_error_exit_reports_json(tmp_path, capsys):
    code = main(["run", "--example", "1", "--surface", "file:" + str(tmp_path / "none.json"),
                 "--N", "4", "--out", str(tmp_path)])
    err = capsys.readouterr().err.strip().splitlines()[-1]
    record = json.loads(err)
    assert code in (1, 2)
    assert set(record) >= {"error", "message"}


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lbtrace.cli", "run", "--example", "1", "--N", "4",
                           "--out", str(tmp_path)], capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert "errors_k1.csv" in proc.stdout
