"""Empirical first-order stochastic ordering from i.i.d. samples."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..model import ConfigError

MIN_SAMPLES = 30
Z95 = 1.959963984540054


@dataclass
class OrderingReport:
    holds_within_ci: bool
    n_x: int
    n_y: int
    # per grid point: (t, ccdf_x, ccdf_y, band)
    points: list = field(default_factory=list)
    violations: list = field(default_factory=list)


def empirical_ccdf(samples, grid) -> np.ndarray:
    xs = np.sort(np.asarray(samples, dtype=float))
    g = np.asarray(grid, dtype=float)
    return 1.0 - np.searchsorted(xs, g, side="right") / len(xs)


def empirical_stochastic_order(samplesX: Sequence[float], samplesY: Sequence[float], grid) -> OrderingReport:
    """Is X stochastically smaller than Y, i.e. Pr(X>t) <= Pr(Y>t) on the grid?

    A grid point fails when the CCDF of X exceeds that of Y by more than the
    two-sample binomial 95% half-width. With both variances zero any positive
    excess fails.
    """
    nx, ny = len(samplesX), len(samplesY)
    if nx < MIN_SAMPLES or ny < MIN_SAMPLES:
        raise ConfigError(f"need at least {MIN_SAMPLES} samples per side, got {nx} and {ny}")
    cx = empirical_ccdf(samplesX, grid)
    cy = empirical_ccdf(samplesY, grid)
    rep = OrderingReport(True, nx, ny)
    for t, px, py in zip(grid, cx, cy):
        band = Z95 * math.sqrt(px * (1 - px) / nx + py * (1 - py) / ny)
        rep.points.append((float(t), float(px), float(py), band))
        if px - py > band:
            rep.holds_within_ci = False
            rep.violations.append((float(t), float(px), float(py), band))
    return rep
