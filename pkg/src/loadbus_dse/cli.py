"""Command-line entry point: simulate, estimate, classify and report.

JSON and CSV results go to standard output, diagnostics to standard error.
Exit status is 0 on success, 2 for usage errors, 3 for unreadable or
malformed input and 4 for numerical failures.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .errors import (
    ConfigurationError,
    DegenerateInputError,
    DivergenceError,
    DSEError,
    RangeError,
    ScenarioError,
    ShapeError,
    SingularSystemError,
    SizeError,
    WaveformFormatError,
)
from .estimator import EstimationResult, SolverConfig, estimate
from .models import Hypothesis, LoadTopology, build_model
from .protection import Classification, TripPolicy, classify, trip_decision
from .simulator import Scenario, simulate, write_truth_csv
from .waveform import load_waveform_csv, window, write_waveform_csv

log = logging.getLogger("loadbus_dse")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4

# analysis window used by `report`, starting at the scenario's analysis_start
REPORT_WINDOW = 0.05

TABLE_R = 7.373
TABLE_L = 9.779e-3

DEFAULT_CASES = [
    {"label": "Single-Phase RL Load", "topology": "1ph", "hypothesis": "lg-a", "r_fault": 0.015},
    {"label": "Grounded-Wye No Fault", "topology": "wye", "hypothesis": "unfaulted"},
    {"label": "Grounded-Wye Line-Ground Fault", "topology": "wye", "hypothesis": "lg-a", "r_fault": 0.015},
    {"label": "Grounded-Wye Line-Line Fault", "topology": "wye", "hypothesis": "ll-ab", "r_fault": 0.010},
    {"label": "Delta No Fault", "topology": "delta", "hypothesis": "unfaulted"},
    {"label": "Delta Line-Line Fault", "topology": "delta", "hypothesis": "ll-ab", "r_fault": 0.010},
    {"label": "Delta Line-Ground Fault", "topology": "delta", "hypothesis": "lg-a", "r_fault": 0.015},
]

REPORT_COLUMNS = ["case", "R_true", "R_hat", "L_true", "L_hat", "Rf_true", "Rf_hat",
                  "selected", "J_best", "J_margin", "converged"]


class UsageError(Exception):
    pass


def default_report_config() -> dict:
    cases = []
    for c in DEFAULT_CASES:
        case = dict(c)
        case.setdefault("r_load", TABLE_R)
        case.setdefault("l_load", TABLE_L)
        cases.append(case)
    return {"cases": cases}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (ScenarioError, WaveformFormatError, SizeError, RangeError, OSError, UnicodeDecodeError)):
        return EXIT_INPUT
    if isinstance(exc, ConfigurationError):
        return EXIT_USAGE
    if isinstance(exc, (SingularSystemError, DivergenceError, DegenerateInputError, ShapeError)):
        return EXIT_NUMERIC
    if isinstance(exc, DSEError):
        return EXIT_NUMERIC
    raise exc


def _parse_window(text):
    if text is None:
        return None
    try:
        a, b = text.split(":")
        return float(a), float(b)
    except ValueError:
        raise UsageError(f"--window expects start:end in seconds, got {text!r}") from None


def _solver_config(args) -> SolverConfig:
    kw = {}
    if getattr(args, "max_iter", None) is not None:
        kw["max_iterations"] = args.max_iter
    if getattr(args, "tol", None) is not None:
        kw["cost_delta_tol"] = args.tol
    try:
        return SolverConfig(**kw)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None


def _parse_choice(parser, value, what):
    try:
        return parser(value)
    except ConfigurationError as exc:
        raise UsageError(f"bad {what}: {exc}") from None


def _load_window(path, win):
    ws = load_waveform_csv(path)
    if win is not None:
        ws = window(ws, *win)
    return ws


def _num(v):
    return None if v is None else float(v)


def result_json(res: EstimationResult) -> dict:
    p = res.params
    return {
        "hypothesis": res.hypothesis.value,
        "r_hat_ohm": _num(p.r),
        "l_hat_h": _num(p.l),
        "rf_hat_ohm": _num(p.rf),
        "cost": float(res.cost),
        "iterations": int(res.iterations),
        "converged": bool(res.converged),
    }


def classification_json(c: Classification, policy: TripPolicy) -> dict:
    decision = trip_decision(c, policy)
    entries = []
    for e in c.entries:
        d = {"hypothesis": e.hypothesis.value}
        if e.result is not None:
            d.update(result_json(e.result))
        else:
            d.update({"cost": None, "converged": False, "error": e.error})
        entries.append(d)
    return {
        "topology": c.topology.value,
        "selected": c.selected.value if c.selected is not None else None,
        "margin": float(c.margin),
        "action": decision.action,
        "reason": decision.reason,
        "entries": entries,
    }


def _dump(obj, out):
    json.dump(obj, out, indent=2)
    out.write("\n")


def cmd_simulate(args, out) -> int:
    scenario = Scenario.load(args.scenario)
    ws, truth = simulate(scenario)
    write_waveform_csv(ws, args.waveform)
    write_truth_csv(truth, args.truth)
    log.info("wrote %d samples to %s and %s", ws.n, args.waveform, args.truth)
    return EXIT_OK


def cmd_estimate(args, out) -> int:
    topology = _parse_choice(LoadTopology.parse, args.topology, "topology")
    hypothesis = _parse_choice(Hypothesis.parse, args.hypothesis, "hypothesis")
    cfg = _solver_config(args)
    win = _parse_window(args.window)
    try:
        ws = _load_window(args.waveform, win)
        model = build_model(topology, hypothesis, ws.n, ws.dt)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    res = estimate(model, ws, cfg)
    _dump(result_json(res), out)
    return EXIT_OK


def cmd_classify(args, out) -> int:
    topology = _parse_choice(LoadTopology.parse, args.topology, "topology")
    cfg = _solver_config(args)
    win = _parse_window(args.window)
    if args.margin is not None and not args.margin >= 0:
        raise UsageError("--margin must be >= 0")
    policy = TripPolicy() if args.margin is None else TripPolicy(min_margin=args.margin)
    ws = _load_window(args.waveform, win)
    c = classify(ws, topology, cfg, workers=args.workers)
    _dump(classification_json(c, policy), out)
    return EXIT_OK


@dataclass
class ReportRow:
    case: str
    r_true: float
    l_true: float
    rf_true: float | None
    truth: Hypothesis
    r_hat: float | None = None
    l_hat: float | None = None
    rf_hat: float | None = None
    selected: str = ""
    j_best: float | None = None
    j_margin: float | None = None
    converged: bool = False
    wall_time: float = 0.0
    error: str = ""
    costs: dict = field(default_factory=dict)

    def csv_cells(self):
        def f(v):
            if v is None:
                return ""
            return repr(float(v))
        return [self.case, f(self.r_true), f(self.r_hat), f(self.l_true), f(self.l_hat),
                f(self.rf_true), f(self.rf_hat), self.selected, f(self.j_best), f(self.j_margin),
                str(self.converged).lower()]


def run_case(case: dict, cfg: SolverConfig) -> ReportRow:
    """Simulate one configured case, run its bank and tabulate the results.

    The R/L/Rf estimates come from the estimator of the applied fault
    hypothesis; the selected label, best cost and margin from the bank.
    """
    params = {k: v for k, v in case.items() if k != "label"}
    label = str(case.get("label", f"{params.get('topology')} {params.get('hypothesis', 'unfaulted')}"))
    t0 = time.perf_counter()
    scenario = Scenario.from_dict(params)
    row = ReportRow(case=label, r_true=scenario.r_load, l_true=scenario.l_load,
                    rf_true=scenario.r_fault, truth=scenario.hypothesis)
    try:
        ws, _ = simulate(scenario)
        ws = window(ws, scenario.analysis_start, min(scenario.analysis_start + REPORT_WINDOW, scenario.t_end))
        c = classify(ws, scenario.topology, cfg)
        for e in c.entries:
            row.costs[e.hypothesis.value] = e.cost
            if e.hypothesis is scenario.hypothesis and e.result is not None:
                row.r_hat, row.l_hat, row.rf_hat = e.result.params.r, e.result.params.l, e.result.params.rf
                row.converged = e.result.converged
        if c.selected is not None:
            row.selected = c.selected.value
            row.j_best = c.selected_entry.cost
            row.j_margin = c.margin
    except DSEError as exc:
        row.error = f"{type(exc).__name__}: {exc}"
        log.warning("case %r failed: %s", label, row.error)
    row.wall_time = time.perf_counter() - t0
    return row


def load_report_config(path) -> dict:
    if path is None:
        return default_report_config()
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"report config is not valid JSON: {exc}") from None
    if not isinstance(data, dict) or not isinstance(data.get("cases", []), list):
        raise ScenarioError("report config must be an object with a 'cases' list")
    cases = []
    for c in data.get("cases", []):
        if not isinstance(c, dict):
            raise ScenarioError("each report case must be an object")
        c = dict(c)
        c.setdefault("r_load", TABLE_R)
        c.setdefault("l_load", TABLE_L)
        cases.append(c)
    return {"cases": cases}


def write_report_csv(rows, dest) -> None:
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow(r.csv_cells())


def format_report(rows) -> str:
    def g(v, scale=1.0, fmt="{:.4g}"):
        return "-" if v is None else fmt.format(v * scale)
    lines = [f"{'case':32s} {'R':>7s} {'R_hat':>9s} {'L mH':>7s} {'L_hat':>9s} {'Rf mOhm':>8s} {'Rf_hat':>9s}  "
             f"{'selected':10s} {'J_best':>8s} {'margin':>7s} conv  time"]
    for r in rows:
        lines.append(
            f"{r.case[:32]:32s} {g(r.r_true):>7s} {g(r.r_hat):>9s} {g(r.l_true, 1e3):>7s} {g(r.l_hat, 1e3):>9s} "
            f"{g(r.rf_true, 1e3):>8s} {g(r.rf_hat, 1e3):>9s}  {r.selected or '-':10s} {g(r.j_best, fmt='{:.3f}'):>8s} "
            f"{g(r.j_margin, fmt='{:.3f}'):>7s} {'yes' if r.converged else 'no':4s} {r.wall_time:5.1f}s"
            + (f"  [{r.error}]" if r.error else "")
        )
    return "\n".join(lines)


def cmd_report(args, out) -> int:
    config = load_report_config(args.config)
    for case in config["cases"]:
        params = {k: v for k, v in case.items() if k != "label"}
        Scenario.from_dict(params)  # validate every case before spending time on any
    cfg = _solver_config(args)
    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(lambda c: run_case(c, cfg), config["cases"]))
    else:
        rows = [run_case(c, cfg) for c in config["cases"]]
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            write_report_csv(rows, fh)
    else:
        write_report_csv(rows, out)
    if rows:
        print(format_report(rows), file=sys.stderr)
    return EXIT_OK


def _add_solver_flags(p):
    p.add_argument("--max-iter", type=int, default=None, help="Gauss-Newton iteration cap (default 50)")
    p.add_argument("--tol", type=float, default=None, help="convergence threshold on |delta J| (default 1e-6)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loadbus-dse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more diagnostics on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a scenario file into waveform and ground-truth CSVs")
    p.add_argument("scenario", help="scenario JSON file")
    p.add_argument("waveform", help="output waveform CSV")
    p.add_argument("truth", help="output ground-truth CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="fit one hypothesis model to a waveform")
    p.add_argument("waveform", help="waveform CSV")
    p.add_argument("--topology", required=True, help="1ph, wye or delta")
    p.add_argument("--hypothesis", required=True,
                   help="unfaulted, lg-a, lg-b, lg-c, ll-ab, ll-bc or ll-ca")
    p.add_argument("--window", help="analysis interval start:end in seconds (default: whole file)")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("classify", help="run the full hypothesis bank and decide trip or hold")
    p.add_argument("waveform", help="waveform CSV")
    p.add_argument("--topology", required=True, help="1ph, wye or delta")
    p.add_argument("--window", help="analysis interval start:end in seconds (default: whole file)")
    p.add_argument("--margin", type=float, default=None, help="minimum cost margin to trip (default 0.5)")
    p.add_argument("--workers", type=int, default=1, help="estimators run concurrently")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("report", help="simulate, estimate and classify a list of cases")
    p.add_argument("config", nargs="?", default=None,
                   help="report config JSON (default: the seven built-in reference cases)")
    p.add_argument("--out", default=None, help="write the CSV here instead of stdout")
    p.add_argument("--workers", type=int, default=1, help="cases run concurrently")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, out)
    except (UsageError, DSEError, OSError, UnicodeDecodeError) as exc:
        code = _exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
