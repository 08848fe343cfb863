"""2AM: a one-round-trip 2-atomic SWMR register, its ABD baseline, a trace
checker, and the probability model of old-new inversions."""

from .analytics import ModelParams, QuadratureSpec
from .checker import OpRecord, PatternReport, Trace
from .proto import Protocol
from .workload import WorkloadConfig, run_abstract, run_experiment

__version__ = "0.1.0"

__all__ = [
    "ModelParams",
    "QuadratureSpec",
    "OpRecord",
    "PatternReport",
    "Trace",
    "Protocol",
    "WorkloadConfig",
    "run_abstract",
    "run_experiment",
]
