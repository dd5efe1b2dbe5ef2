"""Two-bus microgrid fault simulator with per-phase hysteresis current limiting.

The source is an ideal three-phase voltage behind a series R-L impedance
feeding the protected load bus.  Each phase independently switches to a
fixed sinusoidal current reference when its current exceeds ``i_limit``
and re-arms once the current it would carry in voltage mode has stayed
below ``hysteresis_release * i_limit`` for half a cycle.

Continuous states are inductor currents (source branches then load
branches) plus one "shadow" current per phase that follows the
voltage-mode dynamics and drives the re-arm test.  Bus voltages are
algebraic: on node directions touched by the fault conductance they come
from KCL directly, elsewhere from the time derivative of KCL, so KCL holds
identically along RK4 steps.
"""
from __future__ import annotations

import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from numba import njit

from .errors import ConfigurationError, DivergenceError, ScenarioError
from .models import Hypothesis, LoadTopology, valid_hypotheses
from .waveform import WaveformSet

DIVERGENCE_LIMIT = 1e9

# loop exit codes from the compiled integrator
_DONE, _OVERCURRENT, _REARM, _DIVERGED = 0, 1, 2, 3


@dataclass(frozen=True)
class Scenario:
    topology: LoadTopology
    r_load: float
    l_load: float
    hypothesis: Hypothesis = Hypothesis.UNFAULTED
    r_fault: float | None = None
    v_source_rms: float = 120.0
    f0: float = 60.0
    source_r: float = 0.05
    source_l: float = 1e-4
    i_limit: float | None = None
    hysteresis_release: float = 0.9
    t_fault: float = 0.25
    t_end: float = 0.5
    dt_sim: float = 1e-6
    dt_out: float = 1e-4
    analysis_start: float = 0.3

    def __post_init__(self):
        try:
            object.__setattr__(self, "topology", LoadTopology.parse(self.topology))
            object.__setattr__(self, "hypothesis", Hypothesis.parse(self.hypothesis))
        except ConfigurationError as exc:
            raise ScenarioError(str(exc)) from None
        if self.hypothesis not in valid_hypotheses(self.topology):
            raise ScenarioError(f"hypothesis {self.hypothesis.value} invalid for {self.topology.value}")
        if self.hypothesis.is_fault:
            if self.r_fault is None or not self.r_fault > 0:
                raise ScenarioError("faulted scenarios need r_fault > 0")
        for name in ("r_load", "l_load", "source_r", "source_l", "v_source_rms"):
            if getattr(self, name) < 0:
                raise ScenarioError(f"{name} must be >= 0")
        if self.l_load <= 0 or self.source_l <= 0:
            raise ScenarioError("inductances must be positive")
        if self.i_limit is not None and not self.i_limit > 0:
            raise ScenarioError("i_limit must be positive")
        if not 0 < self.hysteresis_release <= 1:
            raise ScenarioError("hysteresis_release must lie in (0, 1]")
        if not self.f0 > 0:
            raise ScenarioError("f0 must be positive")
        if not (0 < self.dt_sim <= self.dt_out):
            raise ScenarioError("need 0 < dt_sim <= dt_out")
        ratio = self.dt_out / self.dt_sim
        if abs(ratio - round(ratio)) > 1e-6 * ratio:
            raise ScenarioError("dt_out must be an integer multiple of dt_sim")
        if not (0 <= self.t_fault < self.analysis_start < self.t_end):
            raise ScenarioError("need t_fault < analysis_start < t_end")

    @property
    def omega(self) -> float:
        return 2.0 * math.pi * self.f0

    @property
    def rated_peak_current(self) -> float:
        """Peak line current of the healthy load at nominal voltage."""
        z = abs(complex(self.r_load, self.omega * self.l_load))
        v_peak = math.sqrt(2.0) * self.v_source_rms
        if self.topology is LoadTopology.DELTA:
            return math.sqrt(3.0) * math.sqrt(3.0) * v_peak / z
        return v_peak / z

    @property
    def effective_i_limit(self) -> float:
        if self.i_limit is not None:
            return self.i_limit
        rated = self.rated_peak_current
        # a dead source never limits
        return 2.0 * rated if rated > 0 else math.inf

    def to_dict(self) -> dict:
        d = asdict(self)
        d["topology"] = self.topology.value
        d["hypothesis"] = self.hypothesis.value
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ScenarioError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ScenarioError(f"scenario file is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ScenarioError("scenario file must hold a JSON object")
        return cls.from_dict(data)


@dataclass
class CircuitODE:
    """Branch/node description of the two-bus circuit.

    ``incidence[b, k]`` is +1 when branch ``b`` leaves bus node ``k`` and -1
    when it enters it; the branch equation is
    ``L_b di_b/dt = (incidence @ v)_b + e_b - R_b i_b``.
    """

    scenario: Scenario
    node_names: tuple
    branch_names: tuple
    inductance: np.ndarray
    resistance: np.ndarray
    incidence: np.ndarray
    emf: np.ndarray  # per branch, coefficients on [sin wt, cos wt]
    source_branches: tuple
    load_branches: tuple
    fault_conductance: np.ndarray  # nodal matrix of the fault element

    @property
    def n_states(self) -> int:
        return len(self.branch_names)

    @property
    def n_nodes(self) -> int:
        return len(self.node_names)

    def phase_angle(self, k: int) -> float:
        return -2.0 * math.pi * k / 3.0

    def mode_matrices(self, fault_on: bool, limited: tuple):
        """Affine dynamics ``dz/dt = A z + C s`` and bus voltages ``v = Vx z + Vs s``.

        ``z`` stacks branch currents and the shadow currents; ``s`` is
        ``[sin wt, cos wt]``.  ``limited`` flags the phases in current mode.
        """
        sc = self.scenario
        w = sc.omega
        nbr, nn = self.n_states, self.n_nodes
        ns = len(self.source_branches)
        D, L, R, E = self.incidence, self.inductance, self.resistance, self.emf
        Y = self.fault_conductance if fault_on else np.zeros((nn, nn))
        lim_br = [self.source_branches[k] for k in range(ns) if limited[k]]
        free = [b for b in range(nbr) if b not in lim_br]
        dsdt = np.array([[0.0, w], [-w, 0.0]])
        psi = np.zeros((nbr, 2))
        for k in range(ns):
            if limited[k]:
                th = self.phase_angle(k)
                psi[self.source_branches[k]] = sc.effective_i_limit * np.array([math.cos(th), math.sin(th)])

        null, rng_ = _split_null_range(Y)
        # range part from KCL itself: Qr^T (D^T i + Y v) = 0
        vx = np.zeros((nn, nbr))
        vs = np.zeros((nn, 2))
        if rng_.shape[1]:
            yr = rng_.T @ Y @ rng_
            d_i = -np.linalg.solve(yr, rng_.T @ D.T)
            vx += rng_ @ d_i
        else:
            d_i = np.zeros((0, nbr))
        if null.shape[1]:
            Df, Lf_inv = D[free], np.diag(1.0 / L[free])
            mn = null.T @ Df.T @ Lf_inv @ Df @ null
            mn_inv = np.linalg.pinv(mn)
            # i-dependence: -(N^T Df^T Lf^-1)(Df Qr d - R_f i_f)
            sel_f = np.zeros((len(free), nbr))
            sel_f[np.arange(len(free)), free] = 1.0
            g_i = -null.T @ Df.T @ Lf_inv @ (Df @ rng_ @ d_i - np.diag(R[free]) @ sel_f)
            g_s = -null.T @ Df.T @ Lf_inv @ E[free] - null.T @ D.T @ psi @ dsdt
            vx += null @ mn_inv @ g_i
            vs += null @ mn_inv @ g_s

        nz = nbr + ns
        A = np.zeros((nz, nz))
        C = np.zeros((nz, 2))
        for b in range(nbr):
            if b in lim_br:
                C[b] = psi[b] @ dsdt
            else:
                A[b, :nbr] = (D[b] @ vx - (R[b] * np.eye(nbr)[b])) / L[b]
                C[b] = (D[b] @ vs + E[b]) / L[b]
        for k, b in enumerate(self.source_branches):
            A[nbr + k, :nbr] = (D[b] @ vx) / L[b]
            A[nbr + k, nbr + k] = -R[b] / L[b]
            C[nbr + k] = (D[b] @ vs + E[b]) / L[b]
        Vx = np.zeros((nn, nz))
        Vx[:, :nbr] = vx
        return A, C, Vx, vs, psi, null

    def project(self, z, t, fault_on, limited):
        """Snap limited currents to their references and restore KCL.

        The free inductor currents move by the flux-weighted least change
        that satisfies the cut-set constraints.
        """
        A, C, Vx, Vs, psi, null = self.mode_matrices(fault_on, limited)
        z = z.copy()
        s = np.array([math.sin(self.scenario.omega * t), math.cos(self.scenario.omega * t)])
        for k, b in enumerate(self.source_branches):
            if limited[k]:
                z[b] = psi[b] @ s
        if null.shape[1]:
            nbr = self.n_states
            lim_br = {self.source_branches[k] for k in range(len(limited)) if limited[k]}
            free = [b for b in range(nbr) if b not in lim_br]
            D, L = self.incidence, self.inductance
            Df = D[free]
            mn = null.T @ Df.T @ np.diag(1.0 / L[free]) @ Df @ null
            r = null.T @ D.T @ z[:nbr]
            delta = -np.diag(1.0 / L[free]) @ Df @ null @ np.linalg.pinv(mn) @ r
            z[free] += delta
        return z


def _split_null_range(Y, tol=1e-12):
    w, v = np.linalg.eigh(Y)
    big = np.abs(w) > tol * max(1.0, np.max(np.abs(w)) if w.size else 1.0)
    return v[:, ~big], v[:, big]


def build_circuit(s: Scenario) -> CircuitODE:
    if s.topology is LoadTopology.SINGLE_PHASE:
        nodes = ("a",)
    else:
        nodes = ("a", "b", "c")
    nn = len(nodes)
    names, L, R, rows, emf = [], [], [], [], []
    amp = math.sqrt(2.0) * s.v_source_rms
    for k, ph in enumerate(nodes):
        th = -2.0 * math.pi * k / 3.0
        names.append(f"src_{ph}")
        L.append(s.source_l)
        R.append(s.source_r)
        row = np.zeros(nn)
        row[k] = -1.0
        rows.append(row)
        emf.append([amp * math.cos(th), amp * math.sin(th)])
    if s.topology is LoadTopology.DELTA:
        pairs = (("a", "b"), ("b", "c"), ("c", "a"))
        for p, q in pairs:
            names.append(f"load_{p}{q}")
            row = np.zeros(nn)
            row[nodes.index(p)] = 1.0
            row[nodes.index(q)] = -1.0
            rows.append(row)
    else:
        for k, ph in enumerate(nodes):
            names.append(f"load_{ph}")
            row = np.zeros(nn)
            row[k] = 1.0
            rows.append(row)
    n_load = len(names) - nn
    L += [s.l_load] * n_load
    R += [s.r_load] * n_load
    emf += [[0.0, 0.0]] * n_load

    Y = np.zeros((nn, nn))
    hyp = s.hypothesis
    if hyp.is_fault:
        gf = 1.0 / s.r_fault
        if hyp.kind == "lg":
            k = nodes.index(hyp.phases)
            Y[k, k] = gf
        else:
            p, q = (nodes.index(c) for c in hyp.phases)
            Y[p, p] += gf
            Y[q, q] += gf
            Y[p, q] -= gf
            Y[q, p] -= gf
    return CircuitODE(
        scenario=s,
        node_names=nodes,
        branch_names=tuple(names),
        inductance=np.array(L, dtype=float),
        resistance=np.array(R, dtype=float),
        incidence=np.array(rows),
        emf=np.array(emf, dtype=float),
        source_branches=tuple(range(nn)),
        load_branches=tuple(range(nn, nn + n_load)),
        fault_conductance=Y,
    )


@njit(cache=True)
def _integrate(z, A, C, Vx, Vs, omega, h, k0, k_stop, rec_every, rec_z, rec_v,
               src, limited, i_limit, release, half_cycle, below):
    """Classical RK4 on ``dz/dt = A z + C s(t)`` from step ``k0`` to ``k_stop``.

    Returns ``(k, code, phase)``: the step index reached, why the loop
    stopped and the phase that triggered an event.
    """
    nz = z.shape[0]
    ns = src.shape[0]
    k = k0
    while k < k_stop:
        t = k * h
        th = t + 0.5 * h
        t1 = t + h
        s0, c0 = np.sin(omega * t), np.cos(omega * t)
        sh, ch = np.sin(omega * th), np.cos(omega * th)
        s1, c1 = np.sin(omega * t1), np.cos(omega * t1)
        k1 = A @ z + C[:, 0] * s0 + C[:, 1] * c0
        k2 = A @ (z + 0.5 * h * k1) + C[:, 0] * sh + C[:, 1] * ch
        k3 = A @ (z + 0.5 * h * k2) + C[:, 0] * sh + C[:, 1] * ch
        k4 = A @ (z + h * k3) + C[:, 0] * s1 + C[:, 1] * c1
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        k += 1
        for j in range(nz):
            if not abs(z[j]) < 1e9:
                return z, k, 3, -1
        if k % rec_every == 0:
            r = k // rec_every
            if r < rec_z.shape[0]:
                rec_z[r] = z
                rec_v[r] = Vx @ z + Vs[:, 0] * s1 + Vs[:, 1] * c1
        for p in range(ns):
            if limited[p]:
                if abs(z[nz - ns + p]) < release * i_limit:
                    below[p] += 1
                else:
                    below[p] = 0
                if below[p] >= half_cycle:
                    return z, k, 2, p
            elif abs(z[src[p]]) > i_limit:
                return z, k, 1, p
    return z, k, 0, -1


@dataclass
class GroundTruth:
    """Internal quantities recorded alongside the terminal waveforms."""

    time: np.ndarray
    branch_labels: tuple
    load_current: np.ndarray  # (n, n_branches)
    v_r: np.ndarray
    v_l: np.ndarray
    v_fault: np.ndarray | None
    i_fault: np.ndarray | None
    source_current: np.ndarray  # (n, n_phases)
    limited: np.ndarray  # (n, n_phases) bool, mode at each output sample
    events: list = field(default_factory=list)

    def columns(self) -> dict:
        cols = {}
        for j, lab in enumerate(self.branch_labels):
            cols[f"vr_{lab}"] = self.v_r[:, j]
            cols[f"vl_{lab}"] = self.v_l[:, j]
        if self.v_fault is not None:
            cols["vf"] = self.v_fault
        return cols


def simulate(s: Scenario):
    """Integrate the scenario; return ``(WaveformSet, GroundTruth)``."""
    circ = build_circuit(s)
    nbr = circ.n_states
    ns = len(circ.source_branches)
    nz = nbr + ns
    h = s.dt_sim
    rec_every = int(round(s.dt_out / s.dt_sim))
    n_steps = int(round(s.t_end / h))
    n_out = n_steps // rec_every + 1
    k_fault = int(math.ceil(s.t_fault / h - 1e-9)) if s.hypothesis.is_fault else n_steps + 1
    i_limit = s.effective_i_limit
    half_cycle = int(math.ceil(0.5 / s.f0 / h))

    rec_z = np.zeros((n_out, nz))
    rec_v = np.zeros((n_out, circ.n_nodes))
    mode_log = np.zeros((n_out, ns), dtype=bool)
    limited = np.zeros(ns, dtype=np.bool_)
    below = np.zeros(ns, dtype=np.int64)
    src = np.array(circ.source_branches, dtype=np.int64)
    z = np.zeros(nz)
    fault_on = False
    events = []
    k = 0

    def record(k, mats):
        if k % rec_every == 0:
            r = k // rec_every
            t = k * h
            rec_z[r] = z
            rec_v[r] = mats[2] @ z + mats[3] @ np.array([math.sin(s.omega * t), math.cos(s.omega * t)])

    mats = circ.mode_matrices(fault_on, tuple(limited))
    record(0, mats)
    last_mode_rec = 0
    while k < n_steps:
        stop = min(n_steps, k_fault) if k < k_fault else n_steps
        A, C, Vx, Vs = mats[:4]
        z, k_new, code, phase = _integrate(
            z, A, C, Vx, Vs, s.omega, h, k, stop, rec_every, rec_z, rec_v,
            src, limited, i_limit, s.hysteresis_release, half_cycle, below,
        )
        r_hi = min(k_new // rec_every, n_out - 1)
        mode_log[last_mode_rec:r_hi + 1] = limited
        last_mode_rec = r_hi + 1
        k = k_new
        if code == _DIVERGED:
            raise DivergenceError(f"state exceeded {DIVERGENCE_LIMIT:g} at step {k} (t={k * h:.6g} s)", step=k)
        changed = False
        if code == _OVERCURRENT:
            limited[phase] = True
            # shadow picks up from the pre-switch current
            z[nbr + phase] = z[circ.source_branches[phase]]
            events.append((k * h, "limit", circ.node_names[phase]))
            changed = True
        elif code == _REARM:
            limited[phase] = False
            below[phase] = 0
            events.append((k * h, "rearm", circ.node_names[phase]))
            changed = True
        if k == k_fault and not fault_on and k < n_steps:
            fault_on = True
            events.append((k * h, "fault", s.hypothesis.value))
            changed = True
        if not changed:
            continue
        z = circ.project(z, k * h, fault_on, tuple(limited))
        if code == _REARM:
            z[nbr + phase] = z[circ.source_branches[phase]]
        mats = circ.mode_matrices(fault_on, tuple(limited))
        if k % rec_every == 0:
            record(k, mats)
            mode_log[k // rec_every] = limited

    t = np.arange(n_out) * s.dt_out
    v = rec_v
    i_src = rec_z[:, list(circ.source_branches)]
    zeros = np.zeros(n_out)
    if s.topology is LoadTopology.SINGLE_PHASE:
        ws = WaveformSet(dt=s.dt_out, t0=0.0, va=v[:, 0], vb=zeros, vc=zeros,
                         ia=i_src[:, 0], ib=zeros, ic=zeros)
    else:
        ws = WaveformSet(dt=s.dt_out, t0=0.0, va=v[:, 0], vb=v[:, 1], vc=v[:, 2],
                         ia=i_src[:, 0], ib=i_src[:, 1], ic=i_src[:, 2])

    lb = list(circ.load_branches)
    i_load = rec_z[:, lb]
    v_branch = v @ circ.incidence[lb].T
    v_r = i_load * circ.resistance[lb]
    v_l = v_branch - v_r
    labels = tuple(circ.branch_names[b].split("_", 1)[1] for b in lb)
    v_fault = i_fault = None
    if s.hypothesis.is_fault:
        nodes = circ.node_names
        if s.hypothesis.kind == "lg":
            v_fault = v[:, nodes.index(s.hypothesis.phases)].copy()
        else:
            p, q = (nodes.index(c) for c in s.hypothesis.phases)
            v_fault = v[:, p] - v[:, q]
        i_fault = np.where(t >= s.t_fault - 1e-12, v_fault / s.r_fault, 0.0)
    truth = GroundTruth(
        time=t, branch_labels=labels, load_current=i_load, v_r=v_r, v_l=v_l,
        v_fault=v_fault, i_fault=i_fault, source_current=i_src,
        limited=mode_log, events=events,
    )
    return ws, truth


def write_truth_csv(truth: GroundTruth, dest, precision: int = 17) -> None:
    cols = truth.columns()
    header = ["time"] + list(cols)
    table = np.column_stack([truth.time] + list(cols.values()))
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    np.savetxt(buf, table, fmt=f"%.{precision}g", delimiter=",")
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(buf.getvalue())
    else:
        dest.write(buf.getvalue())
