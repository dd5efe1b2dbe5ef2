"""Parallel hypothesis bank, minimum-cost selection and trip logic."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .errors import DSEError, SizeError
from .estimator import EstimationResult, SolverConfig, estimate
from .models import Hypothesis, LoadTopology, build_model, valid_hypotheses
from .waveform import WaveformSet

log = logging.getLogger(__name__)

# the largest model (delta line-ground) is only estimable from five samples on
MIN_SAMPLES = 5


@dataclass
class BankEntry:
    hypothesis: Hypothesis
    result: EstimationResult | None
    error: str | None = None

    @property
    def usable(self) -> bool:
        return self.result is not None and self.result.converged

    @property
    def cost(self) -> float:
        return self.result.cost if self.result is not None else math.nan


@dataclass
class Classification:
    topology: LoadTopology
    entries: list
    selected: Hypothesis | None
    margin: float

    @property
    def selected_entry(self) -> BankEntry | None:
        for e in self.entries:
            if e.hypothesis is self.selected:
                return e
        return None

    def costs(self) -> dict:
        return {e.hypothesis: e.cost for e in self.entries}


@dataclass(frozen=True)
class TripPolicy:
    min_margin: float = 0.5
    require_convergence: bool = True

    def __post_init__(self):
        if not self.min_margin >= 0:
            raise ValueError("min_margin must be >= 0")


@dataclass(frozen=True)
class TripDecision:
    action: str  # "Trip" or "Hold"
    reason: str

    @property
    def trip(self) -> bool:
        return self.action == "Trip"


def _run_one(hyp, ws, topology, cfg):
    try:
        model = build_model(topology, hyp, ws.n, ws.dt)
        return BankEntry(hyp, estimate(model, ws, cfg))
    except DSEError as exc:
        log.warning("estimator %s failed: %s", hyp.value, exc)
        return BankEntry(hyp, None, f"{type(exc).__name__}: {exc}")


def select(entries, require_convergence: bool = True) -> tuple:
    """Argmin cost over the eligible entries, ties broken by hypothesis order.

    Returns ``(hypothesis, margin)``; the margin is the cost gap to the
    runner-up, infinite when only one entry is eligible.
    """
    if require_convergence:
        eligible = (e for e in entries if e.usable)
    else:
        eligible = (e for e in entries if e.result is not None and math.isfinite(e.cost))
    usable = sorted(eligible, key=lambda e: (e.cost, e.hypothesis.rank))
    if not usable:
        return None, math.nan
    margin = usable[1].cost - usable[0].cost if len(usable) > 1 else math.inf
    return usable[0].hypothesis, margin


def classify(
    ws: WaveformSet,
    topology,
    cfg: SolverConfig | None = None,
    workers: int = 1,
    require_convergence: bool = True,
) -> Classification:
    """Run every valid hypothesis estimator on ``ws`` and pick the lowest cost.

    Failed estimators, and unconverged ones when ``require_convergence`` is
    set, stay in ``entries`` but never win.
    """
    if ws.n < MIN_SAMPLES:
        raise SizeError(f"classification needs at least {MIN_SAMPLES} samples, got {ws.n}")
    topology = LoadTopology.parse(topology)
    cfg = cfg or SolverConfig()
    hyps = valid_hypotheses(topology)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(lambda h: _run_one(h, ws, topology, cfg), hyps))
    else:
        entries = [_run_one(h, ws, topology, cfg) for h in hyps]
    selected, margin = select(entries, require_convergence)
    return Classification(topology=topology, entries=entries, selected=selected, margin=margin)


def trip_decision(c: Classification, policy: TripPolicy | None = None) -> TripDecision:
    policy = policy or TripPolicy()
    if c.selected is None:
        return TripDecision("Hold", "no estimator converged")
    if not c.selected.is_fault:
        return TripDecision("Hold", "unfaulted hypothesis selected")
    entry = c.selected_entry
    if policy.require_convergence and not (entry and entry.result and entry.result.converged):
        return TripDecision("Hold", f"{c.selected.value} estimator did not converge")
    if not c.margin >= policy.min_margin:
        return TripDecision("Hold", f"insufficient margin {c.margin:.3g} < {policy.min_margin:.3g}")
    return TripDecision("Trip", f"{c.selected.value} selected with margin {c.margin:.3g}")
