import json
import re

import pytest

from singleload.analysis import parse_xy_csv
from singleload.cli import main, parse_range
from singleload.schedule import parse_trace_lines
from singleload.traffic import parse_traffic_csv


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def _report_value(path, key):
    for line in path.read_text().splitlines():
        if line.startswith(key + " ="):
            return float(line.split("=", 1)[1])
    raise KeyError(key)


def test_simulate_deit_b(tmp_path, capsys):
    code, out, _ = _run(capsys, "simulate", "--model", "deit-b", "--psys", "32", "--freq", "300e6", "--out", str(tmp_path))
    assert code == 0
    lat = _report_value(tmp_path / "deit-b_p32_report.txt", "latency_ms")
    assert abs(lat - 37.86) / 37.86 <= 0.10
    for name in ("report.txt", "modes.csv", "bandwidth.csv", "trace.jsonl"):
        assert (tmp_path / f"deit-b_p32_{name}").exists()


def test_simulate_deit_t_p16(tmp_path, capsys):
    code, out, _ = _run(capsys, "simulate", "--model", "deit-t", "--psys", "16", "--no-trace", "--out", str(tmp_path))
    assert code == 0
    fps = _report_value(tmp_path / "deit-t_p16_report.txt", "fps")
    assert abs(fps - 94.13) / 94.13 <= 0.10


def test_unknown_model(tmp_path, capsys):
    code, _, err = _run(capsys, "simulate", "--model", "vit-huge", "--out", str(tmp_path))
    assert code == 1 and "usage" in err.lower() and "vit-huge" in err


def test_bad_flag_exits_one(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--psys"])
    assert exc.value.code == 1


def test_verify_default(tmp_path, capsys):
    code, out, _ = _run(capsys, "verify", "--out", str(tmp_path))
    assert code == 0, out
    assert "FAIL" not in out and out.count("PASS") >= 10
    assert "16777216 cases" in out


def test_verify_quick(tmp_path, capsys):
    code, out, _ = _run(capsys, "verify", "--quick", "--out", str(tmp_path))
    assert code == 0 and "1000000 cases" in out


def test_verify_fault_injection(tmp_path, capsys):
    code, out, err = _run(capsys, "verify", "--quick", "--inject-fault", "packing", "--out", str(tmp_path))
    assert code == 2
    assert "FAIL packing" in out and "packing" in err


def test_sweep_efficiency_peaks(tmp_path, capsys):
    code, out, _ = _run(capsys, "sweep", "efficiency", "--model", "deit-b", "--p", "4..80", "--out", str(tmp_path))
    assert code == 0
    peaks = set(json.loads(re.search(r"\[.*\]", out).group(0)))
    xs, ys = parse_xy_csv((tmp_path / "efficiency_deit-b.csv").read_text())
    assert xs == list(range(4, 81)) and len(ys) == 77
    assert {11, 17, 33, 50, 66} <= peaks, sorted(peaks)


def test_sweep_multi_pe_baseline_knee(tmp_path, capsys):
    code, out, _ = _run(capsys, "sweep", "multi-pe", "--model", "deit-b", "--k", "1..6", "--policy", "baseline",
                        "--out", str(tmp_path))
    assert code == 0 and "knee at k=3" in out
    xs, _ = parse_xy_csv((tmp_path / "multi_pe_deit-b_baseline.csv").read_text())
    assert xs == [1, 2, 3, 4, 5, 6]


def test_sweep_roofline_all_models(tmp_path, capsys):
    code, out, _ = _run(capsys, "sweep", "roofline", "--out", str(tmp_path))
    assert code == 0
    xs, ys = parse_xy_csv((tmp_path / "roofline.csv").read_text())
    assert len(xs) == 4 and out.count("under the roof") == 4


@pytest.mark.parametrize("argv", [["sweep", "efficiency", "--p", "2..80"], ["sweep", "efficiency", "--p", "9..4"],
                                  ["sweep", "multi-pe", "--k", "0..3"], ["sweep", "efficiency", "--p", "x"]])
def test_invalid_ranges(tmp_path, capsys, argv):
    code, _, err = _run(capsys, *argv, "--out", str(tmp_path))
    assert code == 1 and "error" in err


def test_parse_range():
    assert parse_range("4..6") == range(4, 7) and parse_range("5") == range(5, 6)


def test_traffic_and_bram(tmp_path, capsys):
    code, out, _ = _run(capsys, "traffic", "--model", "deit-s", "--out", str(tmp_path))
    assert code == 0 and "in MSA" in out
    rows = parse_traffic_csv((tmp_path / "deit-s_p32_traffic_baseline.csv").read_text())
    assert rows["total"]["bytes_loaded"] > 0
    code, out, _ = _run(capsys, "bram", "--out", str(tmp_path))
    assert code == 0 and "= 288" in out and out.count("\n") == 4


def test_config_files_drive_simulation(tmp_path, capsys):
    (tmp_path / "m.cfg").write_text("base = deit-t\nnum_layers = 2\nname = tiny2\n")
    (tmp_path / "h.cfg").write_text("p_sys = 16\n")
    code, out, _ = _run(capsys, "simulate", "--model-config", str(tmp_path / "m.cfg"),
                        "--hw-config", str(tmp_path / "h.cfg"), "--out", str(tmp_path))
    assert code == 0 and (tmp_path / "tiny2_p16_report.txt").exists()
    (tmp_path / "bad.cfg").write_text("p_sys = -1\n")
    code, _, err = _run(capsys, "simulate", "--hw-config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path))
    assert code == 1


def test_out_dir_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SINGLELOAD_OUT", str(tmp_path / "envout"))
    code, _, _ = _run(capsys, "simulate", "--model", "deit-t", "--no-trace")
    assert code == 0 and (tmp_path / "envout" / "deit-t_p32_report.txt").exists()


def test_outputs_are_deterministic_and_parse(tmp_path, capsys):
    argv = ["simulate", "--model", "deit-t", "--out", str(tmp_path)]
    _run(capsys, *argv)
    first = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    _run(capsys, *argv)
    second = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    assert first == second
    # every file carries the manifest hash and parses back
    hashes = set()
    for name, blob in first.items():
        text = blob.decode()
        if name.endswith(".jsonl"):
            head = json.loads(text.splitlines()[0])
            hashes.add(head["hash"])
            events, dram = parse_trace_lines(text)
            assert events and dram
        else:
            hashes.add(re.match(r"# manifest (\w+)", text).group(1))
        if name.endswith("bandwidth.csv"):
            assert set(parse_traffic_csv(text)) == {"LP", "MSA", "MLP", "total"}
        if name.endswith("modes.csv"):
            lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
            assert lines[0] == "mode,cycles,fraction" and len(lines) == 4
    assert len(hashes) == 1
