"""Dynamic state estimation for protecting load buses fed by current-limited inverters."""

from .errors import DSEError
from .estimator import EstimationResult, SolverConfig, estimate
from .models import Hypothesis, LoadParams, LoadTopology, build_model, initial_state, valid_hypotheses
from .protection import Classification, TripPolicy, classify, trip_decision
from .simulator import Scenario, simulate
from .waveform import WaveformSet, add_noise, load_waveform_csv, window, write_waveform_csv

__version__ = "0.1.0"

__all__ = [
    "DSEError",
    "EstimationResult",
    "SolverConfig",
    "estimate",
    "Hypothesis",
    "LoadParams",
    "LoadTopology",
    "build_model",
    "initial_state",
    "valid_hypotheses",
    "Classification",
    "TripPolicy",
    "classify",
    "trip_decision",
    "Scenario",
    "simulate",
    "WaveformSet",
    "add_noise",
    "load_waveform_csv",
    "window",
    "write_waveform_csv",
]
