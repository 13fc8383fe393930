"""Age processes, penalties, sample-path checks, gap certificate and oracle."""

from .age import (
    AGE,
    ASI,
    AgeProcess,
    build_age_process,
    penalty_integral,
    slot_average_penalty,
    slot_penalty_sum,
    time_average_penalty,
)
from .checks import (
    DominanceReport,
    InvariantReport,
    WorkEfficiencyReport,
    asi_dominance_check,
    replay,
    scan_asi_below_age,
    scan_epochs_match,
    scan_no_preemption,
    scan_post_delivery_min,
    scan_post_start_min,
    scan_same_flow,
    scan_slope_one,
    scan_work_conservation,
    sorted_dominance_check,
    weak_work_efficiency_check,
)
from .gap import GapReport, gap_certificate
from .oracle import BUILTIN_INSTANCES, OracleInstance, OracleReport, OracleTooLarge, discrete_optimality_oracle
from .ordering import OrderingReport, empirical_ccdf, empirical_stochastic_order
from .penalty import P_AVG, P_MAX, P_MS, OnlineIntegrator, PenaltySpec, evaluate_penalty, segment_integral
from .replication import KSReport, completion_samples, replication_ks
