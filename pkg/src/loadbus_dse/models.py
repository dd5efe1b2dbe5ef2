"""Hypothesis model bank: discrete-time state-output maps and Jacobians.

Every model shares one construction.  The unknowns are two or three
scalar parameters (load conductance ``g``, inverse inductance ``gamma``
and, when a fault element is present, fault conductance ``gf``) followed
by a set of voltage trajectories, each ``n`` samples long.  Outputs are
measurement rows, each a bilinear combination of a parameter and a
trajectory at the same sample, followed by one Simpson constraint row per
inductive branch per window position::

    z(k) = g*(vr[k] - vr[k-2]) - gamma*dt/3*(vl[k] + 4*vl[k-1] + vl[k-2])

whose target value is zero.  ``dt/3`` is the ``2*dt/6`` Simpson weight.

Faulted models for three-phase loads are the reduced forms that drop the
load current of the faulted phase(s), valid when the fault resistance is
small next to the load impedance.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, DegenerateInputError, ShapeError, SizeError
from .waveform import WaveformSet

OMEGA0 = 2.0 * math.pi * 60.0
PHASES = "abc"


class LoadTopology(enum.Enum):
    SINGLE_PHASE = "1ph"
    WYE = "wye"
    DELTA = "delta"

    @classmethod
    def parse(cls, label):
        if isinstance(label, cls):
            return label
        aliases = {"single-phase": "1ph", "single_phase": "1ph", "gwye": "wye"}
        try:
            return cls(aliases.get(str(label).lower(), str(label).lower()))
        except ValueError:
            raise ConfigurationError(f"unknown topology {label!r}") from None


class Hypothesis(enum.Enum):
    """Fault hypotheses in tie-break order."""

    UNFAULTED = "unfaulted"
    LG_A = "lg-a"
    LG_B = "lg-b"
    LG_C = "lg-c"
    LL_AB = "ll-ab"
    LL_BC = "ll-bc"
    LL_CA = "ll-ca"

    @property
    def kind(self) -> str:
        return self.value.split("-")[0]

    @property
    def phases(self) -> str:
        return "" if self is Hypothesis.UNFAULTED else self.value.split("-")[1]

    @property
    def is_fault(self) -> bool:
        return self is not Hypothesis.UNFAULTED

    @property
    def rank(self) -> int:
        return list(Hypothesis).index(self)

    @classmethod
    def parse(cls, label):
        if isinstance(label, cls):
            return label
        try:
            return cls(str(label).lower())
        except ValueError:
            raise ConfigurationError(f"unknown hypothesis {label!r}") from None


def valid_hypotheses(topology: LoadTopology) -> tuple:
    topology = LoadTopology.parse(topology)
    if topology is LoadTopology.SINGLE_PHASE:
        return (Hypothesis.UNFAULTED, Hypothesis.LG_A)
    return tuple(Hypothesis)


def simpson_window_integral(f0, f1, f2, dt):
    """Simpson 1/3 rule over ``[t-2dt, t]`` from samples at t-2dt, t-dt, t."""
    return (2.0 * dt / 6.0) * (f2 + 4.0 * f1 + f0)


@dataclass(frozen=True)
class Term:
    coef: float
    param: str | None  # None: coefficient multiplies the trajectory alone
    traj: str


@dataclass(frozen=True)
class MeasurementRow:
    channel: str
    terms: tuple


@dataclass(frozen=True)
class Branch:
    """Inductive branch that contributes a Simpson constraint block."""

    label: str
    vr: str
    vl: str


@dataclass(frozen=True)
class LoadParams:
    r: float
    l: float
    rf: float | None = None


class StateVector:
    """Packed unknowns with named access; ``values`` is the flat array."""

    def __init__(self, model: "HypothesisModel", values):
        values = np.asarray(values, dtype=float)
        if values.shape != (model.state_dim,):
            raise ShapeError(f"state has shape {values.shape}, model expects ({model.state_dim},)")
        self.model = model
        self.values = values

    def _param(self, name):
        try:
            return float(self.values[self.model.params.index(name)])
        except ValueError:
            return None

    @property
    def g(self):
        return self._param("g")

    @property
    def gamma(self):
        return self._param("gamma")

    @property
    def gf(self):
        return self._param("gf")

    def trajectory(self, name) -> np.ndarray:
        return self.values[self.model.traj_slice(name)]

    @property
    def trajectories(self) -> dict:
        return {name: self.trajectory(name) for name in self.model.trajectories}

    def copy(self) -> "StateVector":
        return StateVector(self.model, self.values.copy())


def _sig(*terms):
    return tuple(Term(*t) for t in terms)


@dataclass(frozen=True, eq=False)
class HypothesisModel:
    topology: LoadTopology
    hypothesis: Hypothesis
    n: int
    dt: float
    params: tuple
    trajectories: tuple
    measurements: tuple
    branches: tuple
    # channels used only to build the initial guess
    load_currents: tuple = ()
    load_voltages: tuple = ()
    branch_current_factor: float = 1.0
    branch_voltage_channels: dict = field(default_factory=dict)
    fault_channel: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "_pattern", self._build_pattern())

    # -- layout -------------------------------------------------------
    @property
    def n_params(self) -> int:
        return len(self.params)

    @property
    def state_dim(self) -> int:
        return self.n_params + len(self.trajectories) * self.n

    @property
    def n_constraint_rows(self) -> int:
        return self.n - 2

    @property
    def output_dim(self) -> int:
        return len(self.measurements) * self.n + len(self.branches) * self.n_constraint_rows

    def traj_slice(self, name) -> slice:
        k = self.trajectories.index(name)
        start = self.n_params + k * self.n
        return slice(start, start + self.n)

    @property
    def output_layout(self) -> list:
        """``(label, slice)`` per output block; constraint labels start with ``z_``."""
        out, row = [], 0
        for m in self.measurements:
            out.append((m.channel, slice(row, row + self.n)))
            row += self.n
        for b in self.branches:
            out.append((f"z_{b.label}", slice(row, row + self.n_constraint_rows)))
            row += self.n_constraint_rows
        return out

    @property
    def band_order(self) -> np.ndarray:
        """Trajectory columns ordered sample-major, which makes H^T H banded."""
        nt = len(self.trajectories)
        return np.arange(self.n_params, self.state_dim).reshape(nt, self.n).T.ravel()

    def pack(self, g, gamma, gf=None, **trajectories) -> StateVector:
        x = np.zeros(self.state_dim)
        scalars = {"g": g, "gamma": gamma, "gf": gf}
        for j, name in enumerate(self.params):
            if scalars[name] is None:
                raise ConfigurationError(f"model needs parameter {name}")
            x[j] = scalars[name]
        for name in self.trajectories:
            x[self.traj_slice(name)] = trajectories[name]
        return StateVector(self, x)

    def measurement_vector(self, ws: WaveformSet) -> np.ndarray:
        """Assemble y from ``ws``; constraint targets are zero."""
        if ws.n != self.n:
            raise ShapeError(f"waveform has {ws.n} samples, model expects {self.n}")
        if not math.isclose(ws.dt, self.dt, rel_tol=1e-9):
            raise ShapeError(f"waveform dt {ws.dt} differs from model dt {self.dt}")
        y = np.zeros(self.output_dim)
        for (label, sl), m in zip(self.output_layout, self.measurements):
            y[sl] = ws.channel(m.channel)
        return y

    # -- evaluation ---------------------------------------------------
    def _build_pattern(self):
        n, rows, cols = self.n, [], []
        idx = np.arange(n)
        pidx = {name: j for j, name in enumerate(self.params)}
        for r, m in enumerate(self.measurements):
            for t in m.terms:
                tcol = self.traj_slice(t.traj).start + idx
                rows.append(r * n + idx)
                cols.append(tcol)
                if t.param is not None:
                    rows.append(r * n + idx)
                    cols.append(np.full(n, pidx[t.param]))
        base = len(self.measurements) * n
        k = np.arange(2, n)
        nc = n - 2
        for j, b in enumerate(self.branches):
            crow = base + j * nc + np.arange(nc)
            vr0 = self.traj_slice(b.vr).start
            vl0 = self.traj_slice(b.vl).start
            for c in (
                np.full(nc, pidx["g"]),
                np.full(nc, pidx["gamma"]),
                vr0 + k,
                vr0 + k - 2,
                vl0 + k,
                vl0 + k - 1,
                vl0 + k - 2,
            ):
                rows.append(crow)
                cols.append(c)
        return np.concatenate(rows), np.concatenate(cols)

    def _unpack(self, x):
        if isinstance(x, StateVector):
            x = x.values
        x = np.asarray(x, dtype=float)
        if x.shape != (self.state_dim,):
            raise ShapeError(f"state has shape {x.shape}, model expects ({self.state_dim},)")
        p = {name: x[j] for j, name in enumerate(self.params)}
        tr = {name: x[self.traj_slice(name)] for name in self.trajectories}
        return p, tr

    def h(self, x) -> np.ndarray:
        p, tr = self._unpack(x)
        n = self.n
        out = np.zeros(self.output_dim)
        for r, m in enumerate(self.measurements):
            acc = out[r * n:(r + 1) * n]
            for t in m.terms:
                scale = t.coef * (p[t.param] if t.param is not None else 1.0)
                acc += scale * tr[t.traj]
        base = len(self.measurements) * n
        nc = n - 2
        g, gamma, w = p["g"], p["gamma"], self.dt / 3.0
        for j, b in enumerate(self.branches):
            vr, vl = tr[b.vr], tr[b.vl]
            simpson = vl[2:] + 4.0 * vl[1:-1] + vl[:-2]
            out[base + j * nc: base + (j + 1) * nc] = g * (vr[2:] - vr[:-2]) - gamma * w * simpson
        return out

    def jacobian(self, x) -> sp.csr_matrix:
        p, tr = self._unpack(x)
        vals = []
        for m in self.measurements:
            for t in m.terms:
                if t.param is None:
                    vals.append(np.full(self.n, t.coef))
                else:
                    vals.append(np.full(self.n, t.coef * p[t.param]))
                    vals.append(t.coef * tr[t.traj])
        nc = self.n - 2
        g, gamma, w = p["g"], p["gamma"], self.dt / 3.0
        for b in self.branches:
            vr, vl = tr[b.vr], tr[b.vl]
            simpson = vl[2:] + 4.0 * vl[1:-1] + vl[:-2]
            vals += [
                vr[2:] - vr[:-2],
                -w * simpson,
                np.full(nc, g),
                np.full(nc, -g),
                np.full(nc, -w * gamma),
                np.full(nc, -4.0 * w * gamma),
                np.full(nc, -w * gamma),
            ]
        rows, cols = self._pattern
        return sp.csr_matrix(
            (np.concatenate(vals), (rows, cols)), shape=(self.output_dim, self.state_dim)
        )


def model_h(model: HypothesisModel, x) -> np.ndarray:
    return model.h(x)


def model_jacobian(model: HypothesisModel, x) -> sp.csr_matrix:
    return model.jacobian(x)


# ---------------------------------------------------------------------------
# model construction


def _rot(phase: str, k: int) -> str:
    return PHASES[(PHASES.index(phase) + k) % 3]


def _single_phase(hyp):
    if hyp is Hypothesis.UNFAULTED:
        params = ("g", "gamma")
        meas = (
            MeasurementRow("va", _sig((1, None, "vr"), (1, None, "vl"))),
            MeasurementRow("ia", _sig((1, "g", "vr"))),
        )
    else:
        # fault in parallel with the RL load; terminal voltage vr + vl
        params = ("g", "gamma", "gf")
        meas = (
            MeasurementRow("va", _sig((1, None, "vr"), (1, None, "vl"))),
            MeasurementRow("ia", _sig((1, "g", "vr"), (1, "gf", "vr"), (1, "gf", "vl"))),
        )
    return dict(
        params=params,
        trajectories=("vr", "vl"),
        measurements=meas,
        branches=(Branch("a", "vr", "vl"),),
        load_currents=("ia",),
        load_voltages=("va",),
        branch_voltage_channels={"vr": "va", "vl": "va"},
        fault_channel=None,
    )


def _wye(hyp):
    if hyp is Hypothesis.UNFAULTED:
        healthy, params, traj = PHASES, ("g", "gamma"), ()
    elif hyp.kind == "lg":
        f = hyp.phases
        healthy = "".join(p for p in PHASES if p != f)
        params, traj = ("g", "gamma", "gf"), ("vf",)
    else:
        p, q = hyp.phases
        healthy = "".join(c for c in PHASES if c not in (p, q))
        params, traj = ("g", "gamma", "gf"), ("vf",)
    for ph in healthy:
        traj += (f"vr_{ph}", f"vl_{ph}")

    volts, amps = [], []
    if hyp.kind == "ll":
        p, q = hyp.phases
        volts.append(MeasurementRow(f"v{p}{q}", _sig((1, None, "vf"))))
    for ph in PHASES:
        if ph in healthy:
            volts.append(MeasurementRow(f"v{ph}", _sig((1, None, f"vr_{ph}"), (1, None, f"vl_{ph}"))))
            amps.append(MeasurementRow(f"i{ph}", _sig((1, "g", f"vr_{ph}"))))
        elif hyp.kind == "lg":
            volts.append(MeasurementRow(f"v{ph}", _sig((1, None, "vf"))))
            amps.append(MeasurementRow(f"i{ph}", _sig((1, "gf", "vf"))))
        else:
            sign = 1.0 if ph == hyp.phases[0] else -1.0
            amps.append(MeasurementRow(f"i{ph}", _sig((sign, "gf", "vf"))))
    chans = {}
    for ph in healthy:
        chans[f"vr_{ph}"] = chans[f"vl_{ph}"] = f"v{ph}"
    if hyp.is_fault:
        chans["vf"] = f"v{hyp.phases}"
    return dict(
        params=params,
        trajectories=traj,
        measurements=tuple(volts + amps),
        branches=tuple(Branch(ph, f"vr_{ph}", f"vl_{ph}") for ph in healthy),
        load_currents=tuple(f"i{ph}" for ph in healthy),
        load_voltages=tuple(f"v{ph}" for ph in healthy),
        branch_voltage_channels=chans,
        fault_channel=f"v{hyp.phases}" if hyp.is_fault else None,
    )


_DELTA_BRANCHES = ("ab", "bc", "ca")


def _delta_line_current(ph, present):
    """Terms of line current ``i_ph`` from the delta branches in ``present``.

    Branch ``xy`` carries current from x to y, so it leaves phase x and
    enters phase y.
    """
    terms = []
    for br in _DELTA_BRANCHES:
        if br not in present:
            continue
        if br[0] == ph:
            terms.append((1, "g", f"vr_{br}"))
        elif br[1] == ph:
            terms.append((-1, "g", f"vr_{br}"))
    return terms


def _delta(hyp):
    if hyp is Hypothesis.UNFAULTED:
        present = _DELTA_BRANCHES
        traj = tuple(f"vr_{b}" for b in present) + tuple(f"vl_{b}" for b in present)
        meas = [
            MeasurementRow(f"v{b}", _sig((1, None, f"vr_{b}"), (1, None, f"vl_{b}"))) for b in present
        ]
        meas += [MeasurementRow(f"i{ph}", _sig(*_delta_line_current(ph, present))) for ph in PHASES]
        params, fault_channel = ("g", "gamma"), None
    elif hyp.kind == "lg":
        # phase f shorted to ground; its terminal voltage is taken as zero
        # in the healthy-branch KVL and its line current is the fault current
        f = hyp.phases
        k = PHASES.index(f)
        fb = _rot(f, 1)  # phase after f
        fc = _rot(f, 2)  # phase before f
        present = tuple(_rot(b[0], k) + _rot(b[1], k) for b in _DELTA_BRANCHES)
        br_out, br_mid, br_in = present  # f->fb, fb->fc, fc->f
        traj = tuple(f"vr_{b}" for b in present) + tuple(f"vl_{b}" for b in present) + ("vf",)
        volts = {
            f: MeasurementRow(f"v{f}", _sig((1, None, "vf"))),
            fb: MeasurementRow(f"v{fb}", _sig((-1, None, f"vr_{br_out}"), (-1, None, f"vl_{br_out}"))),
            fc: MeasurementRow(f"v{fc}", _sig((1, None, f"vr_{br_in}"), (1, None, f"vl_{br_in}"))),
        }
        amps = {f: MeasurementRow(f"i{f}", _sig((1, "gf", "vf")))}
        for ph in (fb, fc):
            amps[ph] = MeasurementRow(f"i{ph}", _sig(*_delta_line_current(ph, present)))
        meas = [volts[p] for p in PHASES] + [amps[p] for p in PHASES]
        params, fault_channel = ("g", "gamma", "gf"), f"v{f}"
    else:
        # fault across p-q shunts the p-q branch, which is dropped
        p, q = hyp.phases
        pq = p + q
        present = tuple(b for b in _DELTA_BRANCHES if b != pq)
        traj = ("vf",) + tuple(f"vr_{b}" for b in present) + tuple(f"vl_{b}" for b in present)
        meas = []
        for b in _DELTA_BRANCHES:
            if b == pq:
                meas.append(MeasurementRow(f"v{b}", _sig((1, None, "vf"))))
            else:
                meas.append(MeasurementRow(f"v{b}", _sig((1, None, f"vr_{b}"), (1, None, f"vl_{b}"))))
        for ph in PHASES:
            terms = _delta_line_current(ph, present)
            if ph == p:
                terms.append((1, "gf", "vf"))
            elif ph == q:
                terms.append((-1, "gf", "vf"))
            meas.append(MeasurementRow(f"i{ph}", _sig(*terms)))
        params, fault_channel = ("g", "gamma", "gf"), f"v{pq}"

    chans = {}
    for b in present:
        chans[f"vr_{b}"] = chans[f"vl_{b}"] = f"v{b}"
    if fault_channel:
        chans["vf"] = fault_channel
    healthy_lines = tuple(
        f"i{ph}" for ph in PHASES if not (hyp.is_fault and ph in hyp.phases)
    )
    return dict(
        params=params,
        trajectories=traj,
        measurements=tuple(meas),
        branches=tuple(Branch(b, f"vr_{b}", f"vl_{b}") for b in present),
        load_currents=healthy_lines,
        load_voltages=tuple(f"v{b}" for b in present),
        branch_current_factor=1.0 / math.sqrt(3.0),
        branch_voltage_channels=chans,
        fault_channel=fault_channel,
    )


_BUILDERS = {
    LoadTopology.SINGLE_PHASE: _single_phase,
    LoadTopology.WYE: _wye,
    LoadTopology.DELTA: _delta,
}


def build_model(topology, hypothesis, n: int, dt: float) -> HypothesisModel:
    topology = LoadTopology.parse(topology)
    hypothesis = Hypothesis.parse(hypothesis)
    if hypothesis not in valid_hypotheses(topology):
        raise ConfigurationError(
            f"hypothesis {hypothesis.value} is not valid for {topology.value} loads"
        )
    if n < 3:
        raise SizeError(f"models need at least 3 samples, got {n}")
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    parts = _BUILDERS[topology](hypothesis)
    return HypothesisModel(topology=topology, hypothesis=hypothesis, n=int(n), dt=float(dt), **parts)


def _rms(a):
    return float(np.sqrt(np.mean(np.square(a))))


def initial_state(model: HypothesisModel, ws: WaveformSet) -> StateVector:
    """Deterministic starting point for Gauss-Newton.

    g0 is the RMS branch current over the RMS branch voltage of the healthy
    load branches, gamma0 = 2*pi*60*g0 and gf0 = 100*g0.  Resistor and
    inductor trajectories start at 0.9 and 0.1 of the measured branch
    voltage; the fault voltage starts at the measured faulted channel.
    """
    if ws.n != model.n:
        raise ShapeError(f"waveform has {ws.n} samples, model expects {model.n}")
    i_rms = math.sqrt(sum(_rms(ws.channel(c)) ** 2 for c in model.load_currents) / len(model.load_currents))
    v_rms = math.sqrt(sum(_rms(ws.channel(c)) ** 2 for c in model.load_voltages) / len(model.load_voltages))
    if i_rms == 0.0 or v_rms == 0.0:
        raise DegenerateInputError("measured load channels are identically zero")
    g0 = model.branch_current_factor * i_rms / v_rms
    scalars = {"g": g0, "gamma": OMEGA0 * g0, "gf": 100.0 * g0}
    x = np.zeros(model.state_dim)
    for j, name in enumerate(model.params):
        x[j] = scalars[name]
    for name in model.trajectories:
        v = ws.channel(model.branch_voltage_channels[name])
        if name.startswith("vr"):
            v = 0.9 * v
        elif name.startswith("vl"):
            v = 0.1 * v
        x[model.traj_slice(name)] = v
    return StateVector(model, x)


def _recip(v):
    if v is None:
        return None
    if v == 0.0:
        return math.inf
    return 1.0 / v


def physical_params(x: StateVector) -> LoadParams:
    """Convert conductances to R, L, Rf; degenerate values pass through."""
    return LoadParams(r=_recip(x.g), l=_recip(x.gamma), rf=_recip(x.gf))
