"""ASI lower bound and the additive-gap certificate for NP-MASIF-LGFS."""

from __future__ import annotations

from dataclasses import dataclass

from ..model import CONTINUOUS, ConfigError, ScenarioConfig
from ..stochastic import nbu_check
from .penalty import P_AVG


@dataclass
class GapReport:
    lower: float
    upper: float
    gap: float
    bound: float
    lower_hw: float
    upper_hw: float
    replications: int
    holds: bool
    nbu: bool = True

    @property
    def slack(self) -> float:
        return self.bound + self.lower_hw + self.upper_hw - self.gap


def nbu_grid(mean: float, n: int = 25) -> list:
    pts = [mean * 4.0 * i / n for i in range(n + 1)]
    return [(a, b) for a in pts for b in pts]


def gap_certificate(cfg: ScenarioConfig, R: int = 200, base_seed=None, policy: str = "np-masif-lgfs") -> GapReport:
    """lower = time-average avg-Ξ, upper = time-average avg-Δ, both under
    NP-MASIF-LGFS over R replications; certifies upper - lower <= E[X] + CIs."""
    from ..engine import ASI, AGE, metric_key, replicate

    if cfg.error_prob > 0:
        raise ConfigError("gap certificate needs q = 0")
    if cfg.mode != CONTINUOUS:
        raise ConfigError("gap certificate needs continuous mode")
    nbu = nbu_check(cfg.service_dist, nbu_grid(cfg.service_dist.mean)).holds
    if not nbu:
        raise ConfigError("gap certificate needs NBU service")
    stats = replicate(cfg, policy, R, base_seed, metrics=((ASI, P_AVG), (AGE, P_AVG)))
    kl, ku = metric_key(ASI, P_AVG), metric_key(AGE, P_AVG)
    lo, up = stats.mean[kl], stats.mean[ku]
    hl, hu = stats.halfwidth[kl], stats.halfwidth[ku]
    bound = cfg.service_dist.mean
    gap = up - lo
    return GapReport(lo, up, gap, bound, hl, hu, R, gap <= bound + hl + hu, nbu)
