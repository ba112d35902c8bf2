import io
import json

import pytest

from punchsim.cli import main


def run(*argv, env=None):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


def test_oracle_birthday():
    code, out, _ = run("oracle", "birthday", "--m", "256", "--k", "256")
    assert code == 0 and out.strip() == "0.6336"


def test_oracle_birthday_both_edm_and_precision():
    code, out, _ = run("oracle", "birthday", "--m", "2048", "--k", "256", "--both-edm")
    assert out.strip() == "1.221e-04"
    _, out, _ = run("--precision", "6", "oracle", "birthday", "--m", "256", "--k", "256")
    assert out.strip() == "0.633559"


def test_oracle_mix_and_improvement():
    _, out, _ = run("oracle", "mix", "--p", "0.11")
    assert out.split() == ["eim_eim", "0.7921", "mixed", "0.1958", "both", "0.0121"]
    _, out, _ = run("oracle", "improvement", "--p", "0.11", "--gain", "0.64")
    assert out.strip() == "0.1253"


@pytest.mark.parametrize("eps,d,want", [("5", "20", "true"), ("30", "20", "false"), ("0", "0", "false")])
def test_oracle_sync_safe(eps, d, want):
    assert run("oracle", "sync-safe", "--eps", eps, "--d", d)[1].strip() == want


def test_usage_errors_exit_1():
    code, _, err = run("oracle", "birthday", "--m", "1")
    assert code == 1 and "required" in err
    assert run("bogus")[0] == 1
    assert run("oracle", "mix", "--p", "0.1", "--extra")[0] == 1


def test_invalid_values_exit_1():
    assert run("oracle", "mix", "--p", "2")[0] == 1
    assert run("oracle", "birthday", "--m", "70000", "--k", "1")[0] == 1


def test_presets_lists_paper_like():
    code, out, _ = run("presets")
    assert code == 0 and "paper-like" in out


def test_run_writes_outputs_and_is_deterministic(tmp_path):
    args = ["run", "--scenario", "clean-cone", "--seed", "3", "--trials", "15", "--jobs", "1"]
    assert run(*args, "--out", str(tmp_path / "a"))[0] == 0
    assert run(*args, "--out", str(tmp_path / "b"))[0] == 0
    for name in ("results.jsonl", "results.csv", "scenario.json", "report.json", "report.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    cfg = json.loads((tmp_path / "a" / "scenario.json").read_text())
    assert cfg["seed"] == 3 and cfg["trials"] == 15


def test_run_flags_map_to_options(tmp_path):
    code, _, _ = run("run", "--scenario", "clean-cone", "--trials", "3", "--seed", "1", "--transport", "quic",
                     "--enable", "alternate-roles,refined-rtt,ttl-priming", "--birthday", "64,128",
                     "--out", str(tmp_path), "--jobs", "1")
    assert code == 0
    opts = json.loads((tmp_path / "scenario.json").read_text())["options"]
    assert opts["transport_filter"] == "QUIC"
    assert opts["alternate_roles"] and opts["refined_rtt"] and opts["ttl_priming"]
    assert opts["birthday"] == {"m_open": 64, "k_probe": 128}


def test_run_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PUNCHSIM_SEED", "77")
    run("run", "--scenario", "clean-cone", "--trials", "2", "--out", str(tmp_path), "--jobs", "1")
    assert json.loads((tmp_path / "scenario.json").read_text())["seed"] == 77
    monkeypatch.setenv("PUNCHSIM_SEED", "nope")
    assert run("run", "--scenario", "clean-cone", "--trials", "2", "--out", str(tmp_path))[0] == 1


def test_run_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema": "punchsim.scenario/1", "unknown_key": 1}))
    assert run("run", "--scenario", str(bad), "--out", str(tmp_path / "o"))[0] == 1
    assert run("run", "--scenario", "clean-cone", "--enable", "warp", "--out", str(tmp_path / "o"))[0] == 1
    assert run("run", "--scenario", "clean-cone", "--seed", "-1", "--out", str(tmp_path / "o"))[0] == 1


def test_io_errors_exit_2(tmp_path):
    assert run("run", "--scenario", str(tmp_path / "missing.json"), "--out", str(tmp_path))[0] == 2
    assert run("report", "--in", str(tmp_path / "missing.jsonl"))[0] == 2
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code = run("run", "--scenario", "clean-cone", "--trials", "2", "--jobs", "1", "--out", str(blocker / "sub"))[0]
    assert code == 2


def test_report_round_trip(tmp_path):
    run("run", "--scenario", "clean-cone", "--trials", "10", "--seed", "4", "--out", str(tmp_path), "--jobs", "1")
    code, out, _ = run("report", "--in", str(tmp_path / "results.jsonl"))
    assert code == 0
    assert out == (tmp_path / "report.txt").read_text()
