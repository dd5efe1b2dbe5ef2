"""Damped Gauss-Newton estimation of one hypothesis model."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .errors import ConfigurationError, ShapeError, SingularSystemError
from .models import HypothesisModel, LoadParams, StateVector, initial_state, physical_params
from .waveform import WaveformSet

log = logging.getLogger(__name__)

# a Cholesky pivot below this fraction of its diagonal entry counts as singular
PIVOT_RTOL = 1e-11
# first damping tried when escalating from an undamped solve
DAMPING_SEED = 1e-6
MAX_ESCALATIONS = 8
# residual this small relative to y is at the level of rounding in h(x)
ROUNDOFF_RTOL = 1e-12


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    cost_delta_tol: float = 1e-6
    initial_damping: float = 0.0
    damping_growth: float = 10.0
    cost_floor: float = 1e-30
    column_scaling: bool = True
    refit_trajectories: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")
        if not self.cost_delta_tol > 0:
            raise ConfigurationError("cost_delta_tol must be positive")
        if self.initial_damping < 0:
            raise ConfigurationError("initial_damping must be >= 0")
        if not self.damping_growth > 1:
            raise ConfigurationError("damping_growth must exceed 1")
        if not self.cost_floor > 0:
            raise ConfigurationError("cost_floor must be positive")


@dataclass
class EstimationResult:
    x_hat: StateVector
    params: LoadParams
    cost: float
    iterations: int
    converged: bool
    cost_trace: list = field(default_factory=list)
    residual_norm: float = math.nan

    @property
    def hypothesis(self):
        return self.x_hat.model.hypothesis


def residual(y, h_x) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    h_x = np.asarray(h_x, dtype=float)
    if y.shape != h_x.shape:
        raise ShapeError(f"residual operands differ in shape: {y.shape} vs {h_x.shape}")
    return y - h_x


def cost(eps, floor: float = 1e-30) -> float:
    """Natural log of the residual power, floored to stay finite."""
    eps = np.asarray(eps, dtype=float)
    return math.log(float(eps @ eps) + floor)


def _check_pivots(diag_factor, diag_a, what):
    ratio = diag_factor**2 / np.where(diag_a > 0, diag_a, 1.0)
    if not np.all(np.isfinite(ratio)) or ratio.min() < PIVOT_RTOL:
        raise SingularSystemError(f"{what} is numerically singular (min pivot ratio {ratio.min():.3g})")


def _dense_solve(a, b):
    try:
        c, lower = sla.cho_factor(a, lower=False, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystemError(str(exc)) from None
    _check_pivots(np.diag(c), np.diag(a), "normal matrix")
    return sla.cho_solve((c, lower), b)


def band_ordering(a: sp.spmatrix, border: int) -> np.ndarray:
    """Reverse Cuthill-McKee order of the non-border block of ``a``."""
    block = sp.csr_matrix(a[border:, border:])
    return border + reverse_cuthill_mckee(block, symmetric_mode=True).astype(np.int64)


class NormalEquations:
    """``H^T H`` and ``H^T eps`` split into a dense border and a banded block.

    The first ``border`` columns (the scalar parameters) are dense; the rest
    are banded once permuted by ``order``.  :meth:`solve` factorises for a
    given damping, eliminating the border through a Schur complement, so the
    work is linear in the trajectory length and repeated damping trials
    reuse the assembled matrix.
    """

    def __init__(self, H, eps, border: int = 0, order=None):
        H = sp.csc_matrix(H)
        eps = np.asarray(eps, dtype=float)
        if H.shape[0] != eps.shape[0]:
            raise ShapeError(f"H has {H.shape[0]} rows but residual has {eps.shape[0]}")
        a = (H.T @ H).tocsr()
        self.rhs = H.T @ eps
        self.border = border
        if order is None:
            order = band_ordering(a, border)
        self.order = np.asarray(order)
        blk = a[self.order][:, self.order].tocoo()
        upper = blk.row <= blk.col
        bw = int(np.max(blk.col[upper] - blk.row[upper])) if np.any(upper) else 0
        ab = np.zeros((bw + 1, blk.shape[0]))
        ab[bw + blk.row[upper] - blk.col[upper], blk.col[upper]] = blk.data[upper]
        self.bandwidth = bw
        self.band = ab
        self.coupling = a[self.order][:, :border].toarray()
        self.corner = a[:border, :border].toarray()
        self.diag_mean = float(a.diagonal().mean()) if a.shape[0] else 0.0

    def solve(self, damping: float = 0.0) -> np.ndarray:
        bw, border, order = self.bandwidth, self.border, self.order
        ab = self.band
        if damping:
            ab = ab.copy()
            ab[bw] += damping
        try:
            cb = sla.cholesky_banded(ab, lower=False)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(f"trajectory block: {exc}") from None
        _check_pivots(cb[bw], ab[bw], "trajectory block")
        b = self.rhs
        out = np.empty_like(b)
        if border == 0:
            out[order] = sla.cho_solve_banded((cb, False), b[order])
            return out
        cpl = self.coupling
        sol = sla.cho_solve_banded((cb, False), np.column_stack([cpl, b[order]]))
        y_c, y_r = sol[:, :border], sol[:, border]
        d = self.corner + damping * np.eye(border) if damping else self.corner
        schur = d - cpl.T @ y_c
        w = _dense_solve(0.5 * (schur + schur.T), b[:border] - cpl.T @ y_r)
        out[:border] = w
        out[order] = y_r - y_c @ w
        return out


def gauss_newton_step(H, eps, damping: float = 0.0, *, border: int = 0, order=None) -> np.ndarray:
    """Solve ``(H^T H + damping*I) dx = H^T eps`` by Cholesky factorisation.

    Dense ``H`` uses a dense factorisation; sparse ``H`` goes through
    :class:`NormalEquations` with ``border`` dense leading columns and the
    remaining block reordered by ``order`` (reverse Cuthill-McKee when
    omitted).  Raises :class:`SingularSystemError` when the matrix is not
    numerically positive definite, so the caller can escalate ``damping``.
    """
    eps = np.asarray(eps, dtype=float)
    if H.shape[0] != eps.shape[0]:
        raise ShapeError(f"H has {H.shape[0]} rows but residual has {eps.shape[0]}")
    if sp.issparse(H):
        return NormalEquations(H, eps, border, order).solve(damping)
    H = np.asarray(H, dtype=float)
    a = H.T @ H
    if damping:
        a = a + damping * np.eye(a.shape[0])
    return _dense_solve(a, H.T @ eps)


def _refit_trajectories(model, y, x, order, scaling=True):
    """Least-squares trajectories for the scalar parameters held in ``x``.

    The model output is linear in the trajectory entries once G, Gamma and
    Gf are fixed, so a single solve gives the exact conditional minimiser.
    Unobservable trajectory modes are pinned by a tiny damping.
    """
    border = model.n_params
    eps = residual(y, model.h(x))
    Ht = model.jacobian(x)[:, border:]
    scale = _column_scales(Ht) if scaling else np.ones(Ht.shape[1])
    normal = NormalEquations(Ht @ sp.diags(scale), eps, 0, order - border)
    for lam in (0.0, DAMPING_SEED * max(normal.diag_mean, 1.0)):
        try:
            du = normal.solve(lam)
        except SingularSystemError:
            continue
        x_new = x.copy()
        x_new[border:] += scale * du
        eps_new = residual(y, model.h(x_new))
        if eps_new @ eps_new <= eps @ eps:
            return x_new, eps_new
        break
    return x, eps


def _column_scales(H):
    if sp.issparse(H):
        sq = np.asarray(H.multiply(H).sum(axis=0)).ravel()
    else:
        sq = np.sum(H * H, axis=0)
    rms = np.sqrt(sq / H.shape[0])
    return np.where(rms > 0, 1.0 / np.where(rms > 0, rms, 1.0), 1.0)


def estimate(
    model: HypothesisModel,
    ws: WaveformSet,
    cfg: SolverConfig | None = None,
    x0: StateVector | None = None,
) -> EstimationResult:
    """Fit ``model`` to ``ws`` by damped Gauss-Newton.

    A step is accepted when the log residual power does not increase;
    otherwise the damping grows by ``cfg.damping_growth`` (at most eight
    times) and the step is retried.  Iteration stops when the change in
    cost drops below ``cfg.cost_delta_tol`` or after ``cfg.max_iterations``.
    """
    cfg = cfg or SolverConfig()
    y = model.measurement_vector(ws)
    x = (x0 if x0 is not None else initial_state(model, ws)).values.copy()
    if x.shape != (model.state_dim,):
        raise ShapeError(f"initial state has shape {x.shape}, model expects ({model.state_dim},)")
    order = model.band_order
    border = model.n_params
    y_norm = float(np.linalg.norm(y))

    if cfg.refit_trajectories:
        x, eps = _refit_trajectories(model, y, x, order, cfg.column_scaling)
    else:
        eps = residual(y, model.h(x))
    J = cost(eps, cfg.cost_floor)
    trace = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        H = model.jacobian(x)
        scale = _column_scales(H) if cfg.column_scaling else np.ones(model.state_dim)
        Hs = H @ sp.diags(scale)
        normal = NormalEquations(Hs, eps, border, order)
        lam = cfg.initial_damping
        accepted = False
        for attempt in range(MAX_ESCALATIONS + 1):
            try:
                du = normal.solve(lam)
            except SingularSystemError:
                du = None
            if du is not None:
                x_new = x + scale * du
                if cfg.refit_trajectories:
                    x_new, eps_new = _refit_trajectories(model, y, x_new, order, cfg.column_scaling)
                else:
                    eps_new = residual(y, model.h(x_new))
                J_new = cost(eps_new, cfg.cost_floor)
                if J_new <= J:
                    accepted = True
                    break
            if attempt < MAX_ESCALATIONS:
                lam = lam * cfg.damping_growth if lam > 0 else DAMPING_SEED * max(normal.diag_mean, 1.0)
        if not accepted:
            # no damped step lowers the cost: a stationary point to working precision,
            # unless the residual is still far above rounding level
            trace.append(J)
            converged = float(np.linalg.norm(eps)) <= ROUNDOFF_RTOL * max(y_norm, 1.0) or _stationary(Hs, eps)
            log.debug("%s: stalled at iteration %d (J=%.6g)", model.hypothesis.value, it, J)
            break
        dJ = J - J_new
        x, eps, J = x_new, eps_new, J_new
        trace.append(J)
        if abs(dJ) < cfg.cost_delta_tol or float(np.linalg.norm(eps)) <= ROUNDOFF_RTOL * y_norm:
            converged = True
            break

    x_hat = StateVector(model, x)
    return EstimationResult(
        x_hat=x_hat,
        params=physical_params(x_hat),
        cost=J,
        iterations=it,
        converged=converged,
        cost_trace=trace,
        residual_norm=float(np.linalg.norm(eps)),
    )


def _stationary(Hs, eps, tol=1e-8):
    """Scaled gradient small next to the residual norm."""
    g = Hs.T @ eps
    en = float(np.linalg.norm(eps))
    if en == 0.0:
        return True
    col = np.sqrt(np.asarray(Hs.multiply(Hs).sum(axis=0)).ravel()) if sp.issparse(Hs) else np.linalg.norm(Hs, axis=0)
    col = np.where(col > 0, col, 1.0)
    return float(np.max(np.abs(g) / col)) <= tol * en
