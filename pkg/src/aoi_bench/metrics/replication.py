"""Checks for the replicated policy: one fast server of rate M*mu."""

from __future__ import annotations

from dataclasses import dataclass

from scipy import stats

from ..model import ArrivalSpec, Exponential, ScenarioConfig


@dataclass
class KSReport:
    n_servers: int
    rate: float
    n_samples: int
    statistic: float
    pvalue: float
    alpha: float

    @property
    def passed(self) -> bool:
        return self.pvalue >= self.alpha


def completion_samples(n_servers: int, mu: float = 1.0, n_samples: int = 100_000, seed: int = 1,
                       n_flows: int = 3, error_prob: float = 0.0, rho: float = 2.0) -> list:
    """Busy time between consecutive completions (success or error) of the
    replicated server group, collected from one long P-MAF-LGFS-R run."""
    from ..engine import run_continuous

    lam = rho * n_servers / n_flows
    horizon = 1.2 * n_samples / (n_servers * mu) + 50
    cfg = ScenarioConfig(n_flows, n_servers, Exponential(mu), ArrivalSpec(lam), error_prob,
                         horizon=horizon, seed=seed, policy_spec="p-maf-lgfs-r")
    res = run_continuous(cfg, record_trace=False, record_gaps=True, metrics=())
    return res.completion_gaps[:n_samples]


def replication_ks(n_servers: int, mu: float = 1.0, n_samples: int = 100_000, seed: int = 1,
                   alpha: float = 0.01, **kw) -> KSReport:
    xs = completion_samples(n_servers, mu, n_samples, seed, **kw)
    rate = n_servers * mu
    res = stats.kstest(xs, "expon", args=(0.0, 1.0 / rate))
    return KSReport(n_servers, rate, len(xs), float(res.statistic), float(res.pvalue), alpha)
