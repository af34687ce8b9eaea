import json

import pytest

from mvsde import __version__
from mvsde.cli import build_parser, main
from mvsde.config import THREADS_ENV
from mvsde.report import RESULT_COLUMNS

CHAOS = """
[experiment]
name = chaos

[kernel]
name = linear

[initial_law]
name = gaussian
mean = 1
cov = 0.04

[grid]
h_fine = 2^-5

[particles]
N_list = 4, 8, 16

[picard]
law_source = analytic
M_law = 100

[run]
replications = 3
"""


@pytest.fixture(autouse=True)
def _no_thread_env(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)


def test_run_writes_results(write_config, tmp_path, capsys):
    path = write_config(CHAOS)
    out = tmp_path / "out"
    assert main(["chaos", "--config", str(path), "--out", str(out)]) == 0
    run_dir = out / "chaos-linear"
    assert (run_dir / "results.csv").read_text().splitlines()[0] == ",".join(RESULT_COLUMNS)
    assert (run_dir / "mvsde.log").exists()
    assert json.loads((run_dir / "summary.json").read_text())["config"]["out"] == str(out)
    assert "[✓] Saved:" in capsys.readouterr().out


def test_seed_and_threads_flags(write_config, tmp_path):
    path = write_config(CHAOS)
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(["chaos", "-c", str(path), "-o", str(a), "--seed", "3", "--threads", "1"]) == 0
    assert main(["chaos", "-c", str(path), "-o", str(b), "--seed", "3", "--threads", "3"]) == 0
    assert main(["chaos", "-c", str(path), "-o", str(c), "--seed", "4"]) == 0
    first = (a / "chaos-linear" / "results.csv").read_bytes()
    assert first == (b / "chaos-linear" / "results.csv").read_bytes()
    assert first != (c / "chaos-linear" / "results.csv").read_bytes()
    summary = json.loads((b / "chaos-linear" / "summary.json").read_text())
    assert (summary["config"]["seed"], summary["config"]["threads"]) == (3, 3)


def test_experiment_argument_overrides_config(write_config, tmp_path):
    path = write_config(CHAOS)
    assert main(["moments", "-c", str(path), "-o", str(tmp_path)]) == 0
    assert (tmp_path / "moments-linear" / "results.csv").exists()


def test_bad_config_exits_with_2(write_config, tmp_path, capsys):
    path = write_config(CHAOS.replace("N_list = 4, 8, 16", "N_list = 16, 8"))
    assert main(["chaos", "-c", str(path), "-o", str(tmp_path)]) == 2
    assert "[!]" in capsys.readouterr().err


def test_missing_config_exits_with_2(tmp_path):
    assert main(["chaos", "-c", str(tmp_path / "nope.ini"), "-o", str(tmp_path)]) == 2


def test_blow_up_exits_with_3(write_config, tmp_path):
    body = CHAOS.replace("name = linear", "name = linear\na = 1e300\nc = 0\ns = 0")
    path = write_config(body)
    assert main(["euler-rate", "-c", str(path), "-o", str(tmp_path)]) == 3


def test_failed_check_exits_with_4_only_with_check(write_config, tmp_path):
    body = CHAOS + "\n[checks]\nslope_band = 5, 6\n"
    path = write_config(body)
    assert main(["chaos", "-c", str(path), "-o", str(tmp_path)]) == 0
    assert main(["chaos", "-c", str(path), "-o", str(tmp_path), "--check"]) == 4


def test_dump_paths_flag(write_config, tmp_path):
    path = write_config(CHAOS)
    assert main(["chaos", "-c", str(path), "-o", str(tmp_path), "--dump-paths"]) == 0
    assert (tmp_path / "chaos-linear" / "paths" / "chaos_N16_limit.npy").exists()


def test_parser_rejects_unknown_experiment():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["everything", "-c", "x.ini"])


def test_version_flag(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["--version"])
    assert __version__ in capsys.readouterr().out
