import io
import json

import numpy as np
import pytest

from conftest import analysis_window, simulated
from loadbus_dse.cli import EXIT_INPUT, EXIT_USAGE, REPORT_COLUMNS, main
from loadbus_dse.waveform import load_waveform_csv, window, write_waveform_csv


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out=out)
    return code, out.getvalue()


@pytest.fixture
def wye_lg_csv(tmp_path):
    ws, _ = simulated("wye", "lg-a")
    path = tmp_path / "wye_lg.csv"
    write_waveform_csv(ws, path)
    return path


def write_scenario(tmp_path, **fields):
    base = {"topology": "wye", "r_load": 7.373, "l_load": 9.779e-3, "hypothesis": "lg-a",
            "r_fault": 0.015, "t_end": 0.32}
    base.update(fields)
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(base))
    return path


def test_simulate_writes_files_and_is_reproducible(tmp_path):
    scen = write_scenario(tmp_path)
    a_w, a_t, b_w, b_t = (tmp_path / n for n in ("a.csv", "at.csv", "b.csv", "bt.csv"))
    assert run("simulate", scen, a_w, a_t)[0] == 0
    assert run("simulate", scen, b_w, b_t)[0] == 0
    assert a_w.read_bytes() == b_w.read_bytes()
    assert a_t.read_bytes() == b_t.read_bytes()
    ws = load_waveform_csv(a_w)
    assert ws.n == 3201
    assert a_t.read_text().startswith("time,")


def test_simulate_rejects_inconsistent_timing(tmp_path):
    scen = write_scenario(tmp_path, t_fault=0.6, t_end=0.5)
    code, _ = run("simulate", scen, tmp_path / "w.csv", tmp_path / "t.csv")
    assert code == EXIT_INPUT
    assert not (tmp_path / "w.csv").exists()


def test_estimate_line_ground(wye_lg_csv):
    code, out = run("estimate", wye_lg_csv, "--topology", "wye", "--hypothesis", "lg-a", "--window", "0.3:0.35")
    assert code == 0
    res = json.loads(out)
    assert res["converged"] is True
    assert res["hypothesis"] == "lg-a"
    assert res["rf_hat_ohm"] == pytest.approx(0.015, rel=2e-2)
    assert res["r_hat_ohm"] == pytest.approx(7.373, rel=1e-3)


def test_estimate_window_restricts_input(wye_lg_csv, tmp_path):
    code, whole = run("estimate", wye_lg_csv, "--topology", "wye", "--hypothesis", "lg-a", "--window", "0.3:0.4")
    ws = window(load_waveform_csv(wye_lg_csv), 0.3, 0.4)
    cut = tmp_path / "cut.csv"
    write_waveform_csv(ws, cut)
    code2, direct = run("estimate", cut, "--topology", "wye", "--hypothesis", "lg-a")
    assert code == code2 == 0
    assert json.loads(whole) == json.loads(direct)


def test_json_round_trips_full_precision(wye_lg_csv):
    _, out = run("estimate", wye_lg_csv, "--topology", "wye", "--hypothesis", "lg-a", "--window", "0.3:0.32")
    res = json.loads(out)
    for key in ("r_hat_ohm", "l_hat_h", "rf_hat_ohm", "cost"):
        assert float(repr(res[key])) == res[key]
    assert json.loads(json.dumps(res)) == res


def test_usage_errors(wye_lg_csv):
    assert run("estimate", wye_lg_csv, "--topology", "1ph", "--hypothesis", "ll-ab")[0] == EXIT_USAGE
    assert run("estimate", wye_lg_csv, "--topology", "hex", "--hypothesis", "lg-a")[0] == EXIT_USAGE
    assert run("estimate", wye_lg_csv, "--topology", "wye", "--hypothesis", "lg-a", "--window", "0.3")[0] == EXIT_USAGE
    assert run("estimate", wye_lg_csv, "--topology", "wye", "--hypothesis", "lg-a", "--max-iter", "0")[0] == EXIT_USAGE
    assert run("classify", wye_lg_csv, "--topology", "wye", "--workers", "0")[0] == EXIT_USAGE
    assert run("frobnicate")[0] == EXIT_USAGE
    assert run()[0] == EXIT_USAGE


def test_input_errors(tmp_path, wye_lg_csv):
    assert run("estimate", tmp_path / "missing.csv", "--topology", "wye", "--hypothesis", "lg-a")[0] == EXIT_INPUT
    bad = tmp_path / "bad.csv"
    bad.write_text("time,va\n0,1\n")
    assert run("classify", bad, "--topology", "wye")[0] == EXIT_INPUT
    assert run("classify", wye_lg_csv, "--topology", "wye", "--window", "0.3:0.3003")[0] == EXIT_INPUT


def test_classify_short_waveform_is_size_error(tmp_path):
    ws = window(analysis_window("wye", "lg-a"), 0.3, 0.30035)
    assert ws.n == 4
    path = tmp_path / "short.csv"
    write_waveform_csv(ws, path)
    code, _ = run("classify", path, "--topology", "wye")
    assert code == EXIT_INPUT


def _classify_sim(tmp_path, top, hyp):
    ws, _ = simulated(top, hyp)
    path = tmp_path / f"{top}_{hyp}.csv"
    write_waveform_csv(ws, path)
    code, out = run("classify", path, "--topology", top, "--window", "0.3:0.35")
    assert code == 0
    return json.loads(out)


def test_classify_line_ground_trips(tmp_path):
    res = _classify_sim(tmp_path, "wye", "lg-a")
    assert res["selected"] == "lg-a"
    assert res["action"] == "Trip"
    assert len(res["entries"]) == 7


def test_classify_unfaulted_holds(tmp_path):
    res = _classify_sim(tmp_path, "wye", "unfaulted")
    assert res["selected"] == "unfaulted"
    assert res["action"] == "Hold"


def test_classify_wye_line_line_trips(tmp_path):
    res = _classify_sim(tmp_path, "wye", "ll-bc")
    assert res["selected"] == "ll-bc"
    assert res["action"] == "Trip"


def test_classify_margin_flag_can_block_trip(tmp_path):
    ws, _ = simulated("wye", "lg-a")
    path = tmp_path / "w.csv"
    write_waveform_csv(ws, path)
    code, out = run("classify", path, "--topology", "wye", "--window", "0.3:0.35", "--margin", "1e9")
    res = json.loads(out)
    assert code == 0
    assert res["selected"] == "lg-a"
    assert res["action"] == "Hold"
    assert "margin" in res["reason"]


def test_report_with_empty_case_list(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"cases": []}')
    code, out = run("report", cfg)
    assert code == 0
    assert out.strip() == ",".join(REPORT_COLUMNS)


def test_report_rejects_bad_case_before_running(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"cases": [{"label": "x", "topology": "wye", "hypothesis": "lg-a"}]}))
    assert run("report", cfg)[0] == EXIT_INPUT


def test_report_is_byte_identical_on_rerun(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"cases": [
        {"label": "wye lg", "topology": "wye", "hypothesis": "lg-b", "r_fault": 0.015, "t_end": 0.36},
        {"label": "delta ok", "topology": "delta", "hypothesis": "unfaulted", "t_end": 0.36},
    ]}))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run("report", cfg, "--out", a)[0] == 0
    assert run("report", cfg, "--out", b, "--workers", "2")[0] == 0
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert lines[1].split(",")[0] == "wye lg"
    assert lines[1].split(",")[7] == "lg-b"


@pytest.mark.slow
def test_default_report_covers_table_cases():
    code, out = run("report")
    assert code == 0
    rows = [line.split(",") for line in out.strip().splitlines()]
    assert rows[0] == REPORT_COLUMNS
    assert [r[0] for r in rows[1:]] == [
        "Single-Phase RL Load", "Grounded-Wye No Fault", "Grounded-Wye Line-Ground Fault",
        "Grounded-Wye Line-Line Fault", "Delta No Fault", "Delta Line-Line Fault", "Delta Line-Ground Fault",
    ]
    wye_lg = rows[3]
    assert float(wye_lg[REPORT_COLUMNS.index("Rf_hat")]) == pytest.approx(0.015, rel=2e-2)
    assert np.isfinite(float(wye_lg[REPORT_COLUMNS.index("J_best")]))
