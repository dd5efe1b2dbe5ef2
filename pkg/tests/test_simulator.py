import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import L_TRUE, R_TRUE, rf_for, simulated
from loadbus_dse.errors import DivergenceError, ScenarioError
from loadbus_dse.simulator import Scenario, build_circuit, simulate, write_truth_csv
from loadbus_dse.waveform import window


def phase_rms(ws, t0, t1):
    w = window(ws, t0, t1)
    return np.sqrt([np.mean(w.channel(c) ** 2) for c in ("ia", "ib", "ic")])


def oracle_rms(v_rms, r, l, f0=60.0):
    return v_rms / abs(complex(r, 2 * math.pi * f0 * l))


def test_steady_state_matches_phasor_solution():
    ws, _ = simulated("wye", "unfaulted")
    s = Scenario("wye", R_TRUE, L_TRUE)
    expected = oracle_rms(120.0, R_TRUE + s.source_r, L_TRUE + s.source_l)
    # three full cycles at 60 Hz
    np.testing.assert_allclose(phase_rms(ws, 0.45, 0.4999), expected, rtol=5e-3)


def test_stiff_source_reproduces_textbook_current():
    ws, _ = simulate(Scenario("wye", R_TRUE, L_TRUE, source_r=0.0, source_l=1e-9, t_end=0.3,
                              analysis_start=0.28, dt_sim=2e-6))
    assert oracle_rms(120.0, R_TRUE, L_TRUE) == pytest.approx(14.56, abs=5e-3)
    np.testing.assert_allclose(phase_rms(ws, 0.25, 0.2999), 14.56, rtol=5e-3)


def test_rk4_fourth_order_convergence():
    base = dict(topology="wye", r_load=R_TRUE, l_load=L_TRUE, t_fault=0.0, analysis_start=0.01, t_end=0.02)

    def run(dt_sim):
        ws, _ = simulate(Scenario(**base, dt_sim=dt_sim))
        return np.column_stack([ws.channel(c) for c in ("va", "vb", "vc", "ia", "ib", "ic")])

    ref = run(1e-7)
    e_coarse = np.max(np.abs(run(4e-6) - ref))
    e_fine = np.max(np.abs(run(2e-6) - ref))
    assert e_coarse / e_fine >= 8.0


@pytest.mark.parametrize("top,hyp", [
    ("wye", "unfaulted"), ("wye", "lg-a"), ("wye", "ll-bc"),
    ("delta", "unfaulted"), ("delta", "ll-ab"), ("delta", "lg-c"), ("1ph", "lg-a"),
])
def test_kirchhoff_current_law_at_load_bus(top, hyp):
    ws, truth = simulated(top, hyp)
    s = Scenario(top, R_TRUE, L_TRUE, hyp, rf_for(hyp))
    circ = build_circuit(s)
    D = circ.incidence
    nn = circ.n_nodes
    v = np.column_stack([ws.channel(c) for c in ("va", "vb", "vc")[:nn]])
    i_src = truth.source_current
    i_load = truth.load_current
    fault_on = (truth.time >= s.t_fault)[:, None]
    imbalance = (i_src @ D[list(circ.source_branches)] + i_load @ D[list(circ.load_branches)]
                 + fault_on * (v @ circ.fault_conductance.T))
    scale = np.max(np.abs(i_src))
    assert np.max(np.abs(imbalance)) <= 1e-6 * scale


def test_current_limit_is_respected():
    ws, truth = simulated("wye", "lg-a")
    s = Scenario("wye", R_TRUE, L_TRUE, "lg-a", 0.015)
    assert any(e[1] == "limit" and e[2] == "a" for e in truth.events)
    assert truth.limited[-1, 0]
    i_lim = s.effective_i_limit
    for k, ch in enumerate(("ia", "ib", "ic")):
        mask = truth.limited[:, k]
        if mask.any():
            assert np.max(np.abs(ws.channel(ch)[mask])) <= 1.02 * i_lim
    post = window(ws, 0.3, 0.35)
    assert np.max(np.abs(post.ia)) <= 1.02 * i_lim


def test_simulation_is_bitwise_deterministic():
    s = Scenario("delta", R_TRUE, L_TRUE, "ll-ab", 0.01, t_end=0.32, analysis_start=0.3)
    a, ta = simulate(s)
    b, tb = simulate(s)
    for c in ("va", "vb", "vc", "ia", "ib", "ic"):
        np.testing.assert_array_equal(a.channel(c), b.channel(c))
    np.testing.assert_array_equal(ta.v_r, tb.v_r)


@pytest.mark.parametrize("top", ["wye", "delta"])
def test_pre_fault_currents_are_balanced(top):
    ws, _ = simulated(top, "lg-a")
    rms = phase_rms(ws, 0.2, 0.2499)
    assert (rms.max() - rms.min()) / rms.mean() <= 1e-3


def test_dead_source_gives_silence():
    ws, truth = simulate(Scenario("wye", R_TRUE, L_TRUE, "lg-a", 0.015, v_source_rms=0.0,
                                  t_end=0.31, dt_sim=1e-5))
    for c in ("va", "vb", "vc", "ia", "ib", "ic"):
        assert not np.any(ws.channel(c))
    assert not truth.events or all(e[1] == "fault" for e in truth.events)


@pytest.mark.parametrize("top,hyp,states", [
    ("wye", "unfaulted", 6), ("wye", "lg-a", 6), ("delta", "ll-ab", 6), ("1ph", "lg-a", 2),
])
def test_state_counts(top, hyp, states):
    circ = build_circuit(Scenario(top, R_TRUE, L_TRUE, hyp, None if hyp == "unfaulted" else 0.01))
    assert circ.n_states == states


def test_delta_line_line_fault_sits_across_ab_terminals():
    circ = build_circuit(Scenario("delta", R_TRUE, L_TRUE, "ll-ab", 0.01))
    gf = 1 / 0.01
    np.testing.assert_allclose(circ.fault_conductance, [[gf, -gf, 0], [-gf, gf, 0], [0, 0, 0]])
    ab = circ.branch_names.index("load_ab")
    np.testing.assert_array_equal(circ.incidence[ab], [1, -1, 0])


def test_line_ground_fault_is_purely_algebraic():
    circ = build_circuit(Scenario("wye", R_TRUE, L_TRUE, "lg-b", 0.015))
    assert circ.n_states == 6
    np.testing.assert_allclose(np.diag(circ.fault_conductance), [0, 1 / 0.015, 0])


def test_unstable_step_raises_divergence():
    s = Scenario("wye", 7.0, 1e-7, source_l=1e-7, dt_sim=1e-4, dt_out=1e-4,
                 t_fault=0.0, t_end=0.05, analysis_start=0.04)
    with pytest.raises(DivergenceError, match="step"):
        simulate(s)


@pytest.mark.parametrize("kwargs", [
    dict(hypothesis="ll-ab", topology="1ph"),
    dict(hypothesis="lg-a", r_fault=None),
    dict(hypothesis="lg-a", r_fault=0.0),
    dict(r_load=-1.0),
    dict(l_load=0.0),
    dict(i_limit=0.0),
    dict(dt_sim=2e-4),
    dict(dt_sim=3e-5),
    dict(t_fault=0.35),
    dict(analysis_start=0.6),
    dict(hysteresis_release=1.5),
])
def test_invalid_scenarios(kwargs):
    args = dict(topology="wye", r_load=R_TRUE, l_load=L_TRUE)
    args.update(kwargs)
    with pytest.raises(ScenarioError):
        Scenario(**args)


def test_default_limit_is_twice_rated_peak():
    s = Scenario("wye", R_TRUE, L_TRUE)
    assert s.effective_i_limit == pytest.approx(2 * math.sqrt(2) * 120 / abs(complex(R_TRUE, 377 * L_TRUE)), rel=1e-3)
    assert Scenario("wye", R_TRUE, L_TRUE, i_limit=40.0).effective_i_limit == 40.0


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["wye", "delta"]), st.floats(0.1, 100), st.floats(1e-4, 0.1),
       st.floats(0.001, 1.0), st.floats(0.5, 1.0))
def test_scenario_json_round_trip(top, r, l, rf, rel):
    s = Scenario(top, r, l, "lg-b", rf, hysteresis_release=rel)
    assert Scenario.from_dict(json.loads(json.dumps(s.to_dict()))) == s


def test_scenario_file_errors(tmp_path):
    p = tmp_path / "s.json"
    p.write_text('{"topology": "wye", "r_load": 7.0, "l_load": 0.01, "colour": 3}')
    with pytest.raises(ScenarioError, match="unknown"):
        Scenario.load(p)
    p.write_text("{not json")
    with pytest.raises(ScenarioError):
        Scenario.load(p)
    p.write_text("[1, 2]")
    with pytest.raises(ScenarioError):
        Scenario.load(p)


def test_truth_csv_header(tmp_path):
    _, truth = simulated("wye", "lg-a")
    out = tmp_path / "truth.csv"
    write_truth_csv(truth, out)
    header = out.read_text().splitlines()[0].split(",")
    assert header[0] == "time"
    assert {"vr_a", "vl_a", "vr_c", "vl_c", "vf"} <= set(header)
    table = np.loadtxt(out, delimiter=",", skiprows=1)
    np.testing.assert_array_equal(table[:, header.index("vf")], truth.v_fault)
