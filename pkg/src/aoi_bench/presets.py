"""Experiment presets, parameter sweeps and the verification suites."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace
from typing import Optional

from .engine import AGE, ASI, map_tasks, metric_key, run, run_coupled
from .metrics.checks import (
    scan_asi_below_age,
    scan_epochs_match,
    scan_post_delivery_min,
    scan_post_start_min,
    scan_same_flow,
    scan_slope_one,
    scan_work_conservation,
    sorted_dominance_check,
)
from .metrics.gap import nbu_grid
from .metrics.gap import gap_certificate
from .metrics.oracle import BUILTIN_INSTANCES, ORACLE_PENALTIES, discrete_optimality_oracle
from .metrics.penalty import P_AVG, P_MAX, P_MS, PenaltySpec, evaluate_penalty
from .model import (
    DISCRETE,
    ArrivalSpec,
    ConfigError,
    Deterministic,
    Exponential,
    ScenarioConfig,
    ShiftedExponential,
)
from .policies import parse_policy
from .stochastic import RandomStreams, nbu_check

CSV_HEADER = ("policy", "rho", "lambda", "seed", "replications", "metric", "mean", "ci95")

FIG5_SERVICE = ShiftedExponential(1.0 / 3.0, 1.5)


def parse_rho(text: str) -> list:
    """``start:stop:step`` (inclusive), a comma list, or one value."""
    text = text.strip()
    try:
        if ":" in text:
            a, b, c = (float(x) for x in text.split(":"))
            if c <= 0 or b < a:
                raise ConfigError(f"bad rho range {text!r}")
            n = int(round((b - a) / c))
            vals = [round(a + i * c, 10) for i in range(n + 1)]
            return [v for v in vals if v <= b + 1e-9]
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad rho specification {text!r}") from None


def lam_for(rho: float, n_flows: int, n_servers: int, mean_service: float = 1.0) -> float:
    """rho = lambda * N * E[X] / M, so lambda = rho * M / (N * E[X])."""
    return rho * n_servers / (n_flows * mean_service)


@dataclass
class ExperimentPreset:
    name: str
    base: ScenarioConfig
    policies: tuple
    rho: tuple
    reps: int
    metric: PenaltySpec
    # extra (policy, metric key) series computed from the same runs
    extra: tuple = ()
    notes: str = ""

    def config_for(self, rho: float, horizon: Optional[float] = None) -> ScenarioConfig:
        lam = lam_for(rho, self.base.n_flows, self.base.n_servers, self.base.service_dist.mean)
        cfg = self.base.replace(arrival_spec=replace(self.base.arrival_spec, gen_rate=lam))
        if horizon is not None:
            cfg = cfg.replace(horizon=float(horizon))
        return cfg

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "base": self.base.to_dict(),
            "policies": list(self.policies),
            "rho": list(self.rho),
            "reps": self.reps,
            "metric": self.metric.label,
            "extra": [list(e) for e in self.extra],
            "notes": self.notes,
        }


DEFAULT_RHO = (0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4)

PRESET_NOTES = ("horizon and replication count are not given for the figures; defaults are "
                "horizon 1e4 and 200 replications; initial ages are zero; ties go to the lowest flow id")


def fig4() -> ExperimentPreset:
    base = ScenarioConfig(3, 1, Exponential(1.0), ArrivalSpec(1.0), 0.0, horizon=1e4, seed=0)
    return ExperimentPreset("fig4", base, ("p-maf-lgfs", "p-maf-fcfs", "rand-lgfs", "rand-fcfs"),
                            DEFAULT_RHO, 200, P_MAX, notes=PRESET_NOTES)


def fig5() -> ExperimentPreset:
    base = ScenarioConfig(50, 3, FIG5_SERVICE, ArrivalSpec(1.0), 0.0, horizon=1e4, seed=0)
    return ExperimentPreset("fig5", base,
                            ("np-masif-lgfs", "np-maf-lgfs", "np-maf-fcfs", "rand-lgfs", "rand-fcfs"),
                            DEFAULT_RHO, 200, P_AVG, extra=(("np-masif-lgfs", metric_key(ASI, P_AVG)),),
                            notes=PRESET_NOTES + "; the asi_avg row of np-masif-lgfs is the lower bound")


SWEEP_PRESETS = {"fig4": fig4, "fig5": fig5}


# ---------------------------------------------------------------------------
# Sweeps


def _sweep_task(args):
    cfg, policy, seed, metrics = args
    res = run(cfg.replace(seed=seed), policy, RandomStreams(seed), metrics=metrics, record_trace=False)
    return res.penalties


@dataclass
class SweepRow:
    policy: str
    rho: float
    lam: float
    seed: int
    replications: int
    metric: str
    mean: float
    ci95: float

    def as_list(self) -> list:
        return [self.policy, repr(self.rho), repr(self.lam), self.seed, self.replications, self.metric,
                repr(self.mean), repr(self.ci95)]


def run_sweep(preset: ExperimentPreset, rho=None, reps: Optional[int] = None, seed: int = 0,
              horizon: Optional[float] = None, policies=None) -> list:
    """All (policy, rho) points; replication r of every point uses seed+r."""
    from .engine import _summarize

    rhos = list(rho if rho is not None else preset.rho)
    R = reps or preset.reps
    pols = list(policies or preset.policies)
    for p in pols:
        parse_policy(p)
    main_key = metric_key(AGE, preset.metric)
    tasks, index = [], []
    for r_ in rhos:
        cfg = preset.config_for(r_, horizon)
        for p in pols:
            keys = [main_key] + [k for pp, k in preset.extra if pp == p]
            mets = [(AGE, preset.metric)] + [(ASI, PenaltySpec.parse(k.split("_", 1)[1])) for pp, k in
                                             preset.extra if pp == p]
            for i in range(1, R + 1):
                tasks.append((cfg, p, seed + i, tuple(mets)))
            index.append((r_, cfg.arrival_spec.gen_rate, p, keys))
    results = map_tasks(_sweep_task, tasks)
    rows = []
    for j, (r_, lam, p, keys) in enumerate(index):
        chunk = results[j * R:(j + 1) * R]
        st = _summarize(p, [seed + i for i in range(1, R + 1)], chunk)
        for k in keys:
            rows.append(SweepRow(p, r_, lam, seed, R, k, st.mean[k], st.halfwidth[k]))
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.as_list())
    return buf.getvalue()


def run_scenario(cfg: ScenarioConfig, policy: Optional[str], reps: int, seed: int,
                 metric: PenaltySpec = P_AVG) -> list:
    """Single-point run for a user config (rho column is lambda*N*E[X]/M)."""
    from .engine import replicate

    pol = policy or cfg.policy_spec
    st = replicate(cfg, pol, reps, seed, metrics=((AGE, metric),))
    lam = cfg.arrival_spec.gen_rate
    rho = lam * cfg.n_flows * cfg.service_dist.mean / cfg.n_servers
    k = metric_key(AGE, metric)
    return [SweepRow(parse_policy(pol).name, rho, lam, seed, reps, k, st.mean[k], st.halfwidth[k])]


# ---------------------------------------------------------------------------
# Verification suites


@dataclass
class SuiteResult:
    name: str
    passed: bool
    # (case, seed, policy, holds, detail)
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    seconds: float = 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("suite", "case", "seed", "policy", "holds", "detail"))
        for case, seed, pol, ok, detail in self.rows:
            w.writerow((self.name, case, seed, pol, int(bool(ok)), detail))
        return buf.getvalue()


def discrete_suite(seeds=range(1, 51), qs=(0.0, 0.3), horizon: int = 10_000, rho: float = 1.0,
                   baselines=("np-maf-fcfs", "rand-lgfs", "rand-fcfs")) -> SuiteResult:
    """Coupled DT-MAF-LGFS vs each baseline, N=3, M=2: sorted-age dominance at every slot."""
    t0 = time.perf_counter()
    res = SuiteResult("verify-discrete", True)
    n, m = 3, 2
    for q in qs:
        for s in seeds:
            cfg = ScenarioConfig(n, m, Deterministic(1.0), ArrivalSpec(lam_for(rho, n, m)), q, DISCRETE, 1.0,
                                 float(horizon), s, "dt-maf-lgfs")
            c = run_coupled(cfg, ("dt-maf-lgfs",) + tuple(baselines), metrics=())
            ref = c.traces[0]
            for b in c.traces[1:]:
                rep = sorted_dominance_check(ref, b)
                res.passed &= rep.holds
                res.rows.append((f"q={q}", s, b.policy, rep.holds,
                                 "" if rep.holds else f"first violation {rep.first_violation}"))
    res.seconds = time.perf_counter() - t0
    res.summary = {"cases": len(res.rows), "violations": sum(1 for r in res.rows if not r[3])}
    return res


def continuous_suite(seeds=range(1, 101), qs=(0.0, 0.3), horizon: float = 1000.0, rho: float = 2.0,
                     baselines=("maf-fcfs", "rand-lgfs")) -> SuiteResult:
    """Coupled P-MAF-LGFS vs baselines, N=3, M=2, exponential(1): sorted-age dominance
    at every epoch and no asymmetric idle-position epochs."""
    t0 = time.perf_counter()
    res = SuiteResult("verify-continuous", True)
    n, m = 3, 2
    flagged = idle = 0
    last_idle = 0.0
    flagged_runs = []  # (q, seed, count, last flagged time)
    for q in qs:
        for s in seeds:
            cfg = ScenarioConfig(n, m, Exponential(1.0), ArrivalSpec(lam_for(rho, n, m)), q, horizon=horizon,
                                 seed=s, policy_spec="p-maf-lgfs")
            c = run_coupled(cfg, ("p-maf-lgfs",) + tuple(baselines), metrics=())
            flagged += len(c.flagged)
            if c.flagged:
                flagged_runs.append((q, s, len(c.flagged), c.flagged[-1][0]))
            idle += len(c.idle_epochs)
            if c.idle_epochs:
                last_idle = max(last_idle, c.idle_epochs[-1][0])
            ref = c.traces[0]
            for b in c.traces[1:]:
                rep = sorted_dominance_check(ref, b)
                ok = rep.holds and not c.flagged
                res.passed &= ok
                detail = ""
                if not rep.holds:
                    detail = f"first violation {rep.first_violation}"
                elif c.flagged:
                    detail = f"{len(c.flagged)} flagged epochs"
                res.rows.append((f"q={q}", s, b.policy, ok, detail))
    res.seconds = time.perf_counter() - t0
    res.summary = {"cases": len(res.rows), "violations": sum(1 for r in res.rows if not r[3]),
                   "flagged_epochs": flagged, "idle_epochs": idle,
                   "last_idle_time": last_idle, "flagged_runs": flagged_runs}
    return res


def gap_suite(rhos=(0.4, 0.8, 1.2), reps: int = 200, seed: int = 0, horizon: Optional[float] = None) -> SuiteResult:
    t0 = time.perf_counter()
    res = SuiteResult("verify-gap", True)
    pre = fig5()
    reports = {}
    for r_ in rhos:
        cfg = pre.config_for(r_, horizon)
        g = gap_certificate(cfg, reps, seed)
        reports[r_] = g
        res.passed &= g.holds
        res.rows.append((f"rho={r_}", seed, "np-masif-lgfs", g.holds,
                         f"lower={g.lower!r} upper={g.upper!r} gap={g.gap!r} bound={g.bound!r} "
                         f"hw={g.lower_hw + g.upper_hw!r}"))
    res.seconds = time.perf_counter() - t0
    res.summary = {str(k): {"gap": v.gap, "slack": v.slack} for k, v in reports.items()}
    return res


def oracle_suite(instances=BUILTIN_INSTANCES, penalties=ORACLE_PENALTIES) -> SuiteResult:
    t0 = time.perf_counter()
    res = SuiteResult("oracle", True)
    for inst in instances:
        for p in penalties:
            rep = discrete_optimality_oracle(inst, p)
            res.passed &= rep.match
            res.rows.append((f"{inst.name}/{p.label}", 0, "dt-maf-lgfs", rep.match,
                             f"optimum={rep.optimal_value} dt={rep.dt_maf_lgfs_value}"))
    res.seconds = time.perf_counter() - t0
    res.summary = {"cases": len(res.rows), "mismatches": sum(1 for r in res.rows if not r[3])}
    return res


PROPERTY_PENALTIES = (P_AVG, P_MAX, P_MS, PenaltySpec("lnorm", l=2.0), PenaltySpec("lnorm", l=3.0),
                      PenaltySpec("sum_penalty", table=((0.0, 0.0), (1.0, 0.5), (4.0, 6.0), (10.0, 7.0))))


def penalty_property_scan(n_vectors: int = 10_000, seed: int = 0, penalties=PROPERTY_PENALTIES) -> list:
    """Symmetry (random permutation) and monotonicity (random nonnegative bump)
    of each penalty on random age vectors. Returns (label, checked, violations)."""
    import numpy as np

    rng = np.random.default_rng(seed)
    out = []
    for spec in penalties:
        bad = 0
        for _ in range(n_vectors):
            n = int(rng.integers(1, 8))
            x = rng.exponential(3.0, n)
            y = x + rng.exponential(1.0, n) * (rng.random(n) < 0.5)
            px = evaluate_penalty(spec, x)
            if evaluate_penalty(spec, rng.permutation(x)) != px and \
                    abs(evaluate_penalty(spec, rng.permutation(x)) - px) > 1e-12 * max(1.0, abs(px)):
                bad += 1
            elif evaluate_penalty(spec, y) < px - 1e-12 * max(1.0, abs(px)):
                bad += 1
        out.append((spec.label, n_vectors, bad))
    return out


def invariant_suite(seeds=range(1, 6), horizon: float = 500.0, n_vectors: int = 10_000) -> SuiteResult:
    """Trace scans on every preset policy, penalty properties and the NBU grid."""
    t0 = time.perf_counter()
    res = SuiteResult("invariants", True)
    cases = [
        ("p-maf-lgfs", ScenarioConfig(3, 2, Exponential(1.0), ArrivalSpec(1.0), 0.3, horizon=horizon)),
        ("np-masif-lgfs", ScenarioConfig(5, 2, FIG5_SERVICE, ArrivalSpec(0.5), 0.0, horizon=horizon)),
        ("np-maf-lgfs", ScenarioConfig(5, 2, FIG5_SERVICE, ArrivalSpec(0.5), 0.0, horizon=horizon)),
        ("p-maf-lgfs-r", ScenarioConfig(3, 2, Exponential(1.0), ArrivalSpec(1.0), 0.3, horizon=horizon)),
        ("dt-maf-lgfs", ScenarioConfig(3, 2, Deterministic(1.0), ArrivalSpec(0.6), 0.3, DISCRETE,
                                       horizon=horizon)),
    ]
    for pol, base in cases:
        spec = parse_policy(pol)
        for s in seeds:
            r = run(base.replace(seed=s), pol, RandomStreams(s), record_epochs=True)
            tr = r.trace
            scans = [scan_asi_below_age(tr), scan_work_conservation(tr), scan_epochs_match(tr, r.epochs, 1e-9),
                     scan_slope_one(tr, r.epochs), scan_slope_one(tr, r.epochs, kind=ASI)]
            if spec.exclusive:
                scans.append(scan_same_flow(tr))
            if pol == "p-maf-lgfs":
                scans.append(scan_post_delivery_min(tr))
            if pol == "np-masif-lgfs":
                scans.append(scan_post_start_min(tr))
            problems = tr.check(allow_overlap=spec.replication)
            for sc in scans:
                res.passed &= sc.ok
                res.rows.append((sc.name, s, pol, sc.ok, "" if sc.ok else str(sc.violations[:3])))
            res.passed &= not problems
            res.rows.append(("trace-structure", s, pol, not problems, "; ".join(problems[:3])))
    for label, checked, bad in penalty_property_scan(n_vectors):
        res.passed &= bad == 0
        res.rows.append((f"penalty:{label}", 0, "", bad == 0, f"{bad}/{checked} violations"))
    for dist in (Exponential(1.0), FIG5_SERVICE, Deterministic(1.0)):
        rep = nbu_check(dist, nbu_grid(dist.mean, 40))
        res.passed &= rep.holds
        res.rows.append((f"nbu:{dist.type_name}", 0, "", rep.holds, f"worst slack {rep.worst_slack!r}"))
    res.seconds = time.perf_counter() - t0
    res.summary = {"checks": len(res.rows), "failed": sum(1 for r in res.rows if not r[3])}
    return res


SUITES = {
    "verify-discrete": discrete_suite,
    "discrete": discrete_suite,
    "verify-continuous": continuous_suite,
    "continuous": continuous_suite,
    "verify-gap": gap_suite,
    "gap": gap_suite,
    "oracle": oracle_suite,
    "discrete-oracle": oracle_suite,
    "invariants": invariant_suite,
}
