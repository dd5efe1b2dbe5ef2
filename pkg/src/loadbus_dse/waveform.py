"""Sampled three-phase waveform container and CSV I/O.

Channels are stored in volts and amperes exactly as read; no per-unit
conversion happens here.
"""
from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import NonUniformSamplingError, RangeError, SizeError, WaveformFormatError

CHANNELS = ("va", "vb", "vc", "ia", "ib", "ic")
HEADER = ("time",) + CHANNELS

# relative deviation allowed between any time step and the median step
STEP_RTOL = 1e-4


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class WaveformSet:
    """Uniformly sampled phase voltages and currents at the protected bus."""

    dt: float
    va: np.ndarray
    vb: np.ndarray
    vc: np.ndarray
    ia: np.ndarray
    ib: np.ndarray
    ic: np.ndarray
    t0: float = 0.0
    n: int = field(init=False)

    def __post_init__(self):
        arrays = {}
        for name in CHANNELS:
            arr = _frozen(getattr(self, name))
            if arr.ndim != 1:
                raise WaveformFormatError(f"channel {name} must be one-dimensional")
            arrays[name] = arr
        lengths = {len(a) for a in arrays.values()}
        if len(lengths) != 1:
            raise WaveformFormatError(f"channel lengths differ: {sorted(lengths)}")
        n = lengths.pop()
        if n < 3:
            raise SizeError(f"need at least 3 samples, got {n}")
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise WaveformFormatError(f"sample period must be positive, got {self.dt}")
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "n", n)

    @property
    def time(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n)

    @property
    def t_last(self) -> float:
        return self.t0 + (self.n - 1) * self.dt

    def channel(self, name: str) -> np.ndarray:
        """Return a measured channel or a derived line-line voltage by name."""
        if name in CHANNELS:
            return getattr(self, name)
        derived = dict(zip(("vab", "vbc", "vca"), derive_line_line(self)))
        try:
            return derived[name]
        except KeyError:
            raise KeyError(f"unknown channel {name!r}") from None

    def replace(self, **changes) -> "WaveformSet":
        kw = {name: getattr(self, name) for name in CHANNELS}
        kw.update(dt=self.dt, t0=self.t0)
        kw.update(changes)
        return WaveformSet(**kw)

    def equals(self, other: "WaveformSet") -> bool:
        """Bitwise equality of every channel, dt and t0."""
        return (
            self.dt == other.dt
            and self.t0 == other.t0
            and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in CHANNELS)
        )


def _open_text(source):
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8") as fh:
            return fh.read()
    data = source.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return data


def load_waveform_csv(source) -> WaveformSet:
    """Parse a waveform CSV from a path, text stream or byte stream.

    The header must be exactly ``time,va,vb,vc,ia,ib,ic``; lines starting
    with ``#`` are ignored.  The sample period is the median time step and
    every step must agree with it to within 1 part in 10^4.
    """
    text = _open_text(source)
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise WaveformFormatError("empty waveform file")
    header = tuple(h.strip() for h in lines[0].split(","))
    if header != HEADER:
        missing = [h for h in HEADER if h not in header]
        detail = f"missing columns {missing}" if missing else f"got {','.join(header)}"
        raise WaveformFormatError(f"header must be {','.join(HEADER)}: {detail}")
    rows = lines[1:]
    if len(rows) < 3:
        raise SizeError(f"need at least 3 rows, got {len(rows)}")
    try:
        data = np.array([[float(c) for c in r.split(",")] for r in rows])
    except ValueError as exc:
        raise WaveformFormatError(f"non-numeric cell: {exc}") from None
    if data.ndim != 2 or data.shape[1] != len(HEADER):
        raise WaveformFormatError("ragged rows in waveform file")
    if not np.all(np.isfinite(data)):
        raise WaveformFormatError("non-finite value in waveform file")

    t = data[:, 0]
    steps = np.diff(t)
    dt = float(np.median(steps))
    if dt <= 0:
        raise NonUniformSamplingError("time column is not increasing")
    worst = np.max(np.abs(steps - dt)) / dt
    if worst > STEP_RTOL:
        k = int(np.argmax(np.abs(steps - dt)))
        raise NonUniformSamplingError(
            f"time step {steps[k]:.6g} s at row {k + 1} deviates from median {dt:.6g} s"
        )
    cols = {name: data[:, j + 1] for j, name in enumerate(CHANNELS)}
    return WaveformSet(dt=dt, t0=float(t[0]), **cols)


def write_waveform_csv(ws: WaveformSet, dest, precision: int = 17) -> None:
    """Write ``ws`` in the canonical CSV layout.

    ``precision`` is the number of significant digits (17 reproduces
    doubles exactly).
    """
    if precision < 9:
        raise ValueError("precision must be at least 9 significant digits")
    fmt = f"%.{precision}g"
    table = np.column_stack([ws.time] + [getattr(ws, c) for c in CHANNELS])
    buf = io.StringIO()
    buf.write(",".join(HEADER) + "\n")
    np.savetxt(buf, table, fmt=fmt, delimiter=",")
    text = buf.getvalue()
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        dest.write(text)


def window(ws: WaveformSet, t_start: float, t_end: float) -> WaveformSet:
    """Contiguous sub-series with timestamps in ``[t_start, t_end]``."""
    tol = 1e-9 * ws.dt
    if not t_end > t_start:
        raise RangeError(f"window end {t_end} must exceed start {t_start}")
    if t_start < ws.t0 - tol or t_end > ws.t_last + tol:
        raise RangeError(
            f"window [{t_start}, {t_end}] outside record [{ws.t0}, {ws.t_last}]"
        )
    lo = max(0, math.ceil((t_start - ws.t0) / ws.dt - 1e-9))
    hi = min(ws.n - 1, math.floor((t_end - ws.t0) / ws.dt + 1e-9))
    if hi - lo + 1 < 3:
        raise SizeError(f"window [{t_start}, {t_end}] holds {max(hi - lo + 1, 0)} samples")
    sl = slice(lo, hi + 1)
    return WaveformSet(
        dt=ws.dt,
        t0=ws.t0 + lo * ws.dt,
        **{c: getattr(ws, c)[sl] for c in CHANNELS},
    )


def derive_line_line(ws: WaveformSet):
    """Line-line voltages ``(vab, vbc, vca)``."""
    return ws.va - ws.vb, ws.vb - ws.vc, ws.vc - ws.va


def add_noise(ws: WaveformSet, snr_db: float, seed: int) -> WaveformSet:
    """Additive white Gaussian noise at a per-channel SNR.

    ``snr_db = math.inf`` returns the input unchanged.  All-zero channels
    stay zero.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return ws
    if not math.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite or +inf, got {snr_db}")
    rng = np.random.default_rng(seed)
    out = {}
    for name in CHANNELS:
        x = getattr(ws, name)
        power = float(np.mean(x**2))
        sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
        out[name] = x + sigma * rng.standard_normal(ws.n)
    return ws.replace(**out)
