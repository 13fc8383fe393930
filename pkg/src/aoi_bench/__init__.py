"""Multi-flow multi-server status-update simulator and verification harness."""

from .engine import (
    CoupledRunResult,
    RunResult,
    RunStatistics,
    SimulationDiverged,
    replicate,
    run,
    run_continuous,
    run_coupled,
    run_discrete,
)
from .model import (
    ArrivalSpec,
    ConfigError,
    Deterministic,
    EventTrace,
    Exponential,
    ScenarioConfig,
    ShiftedExponential,
    TraceError,
    validate_scenario,
)
from .policies import PRESETS, PolicySpec, parse_policy
from .stochastic import RandomStreams

__version__ = "0.1.0"
