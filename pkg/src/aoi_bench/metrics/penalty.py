"""Age penalty functions and exact integrals over linear age segments.

Between reset events every age grows with slope 1, so on a segment the age
vector is ``t - u`` for a fixed offset vector ``u``. All integrals below are
taken in that form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..model import ConfigError

KINDS = ("avg", "max", "ms", "lnorm", "sum_penalty")


@dataclass(frozen=True)
class PenaltySpec:
    """A symmetric non-decreasing penalty.

    ``l`` is the norm order for ``lnorm``. ``table`` holds ``(x, g(x))`` pairs
    for ``sum_penalty`` (linear interpolation, flat beyond the ends).
    ``schedule`` optionally makes the penalty time dependent: a tuple of
    ``(start_time, PenaltySpec)`` with the first start at 0.
    """

    kind: str = "avg"
    l: Optional[float] = None
    table: Optional[tuple] = None
    schedule: Optional[tuple] = None

    def __post_init__(self):
        if self.schedule:
            starts = [s for s, _ in self.schedule]
            if starts[0] != 0 or any(b <= a for a, b in zip(starts, starts[1:])):
                raise ConfigError("schedule start times must begin at 0 and increase")
            return
        if self.kind not in KINDS:
            raise ConfigError(f"unknown penalty kind {self.kind!r}")
        if self.kind == "lnorm" and (self.l is None or self.l < 1):
            raise ConfigError("lnorm requires l >= 1")
        if self.kind == "sum_penalty":
            if not self.table or len(self.table) < 2:
                raise ConfigError("sum_penalty needs a table with at least two points")
            xs = [x for x, _ in self.table]
            gs = [g for _, g in self.table]
            if any(b <= a for a, b in zip(xs, xs[1:])):
                raise ConfigError("sum_penalty table x values must increase")
            if any(b < a for a, b in zip(gs, gs[1:])):
                raise ConfigError("sum_penalty g must be non-decreasing")

    @property
    def label(self) -> str:
        if self.schedule:
            return "sched(" + ",".join(f"{s:g}:{p.label}" for s, p in self.schedule) + ")"
        if self.kind == "lnorm":
            return f"lnorm{self.l:g}"
        return self.kind

    def at(self, t: float) -> "PenaltySpec":
        if not self.schedule:
            return self
        cur = self.schedule[0][1]
        for s, p in self.schedule:
            if s <= t:
                cur = p
        return cur

    @classmethod
    def parse(cls, text: str) -> "PenaltySpec":
        """``avg``, ``max``, ``ms``, ``lnorm3``..."""
        t = text.strip().lower()
        if t.startswith("lnorm"):
            return cls("lnorm", l=float(t[5:] or 2))
        return cls(t)


P_AVG = PenaltySpec("avg")
P_MAX = PenaltySpec("max")
P_MS = PenaltySpec("ms")


def _table(spec: PenaltySpec):
    xs = np.array([x for x, _ in spec.table], dtype=float)
    gs = np.array([g for _, g in spec.table], dtype=float)
    return xs, gs


def evaluate_penalty(spec: PenaltySpec, ages: Sequence[float], t: float = 0.0) -> float:
    spec = spec.at(t)
    a = [float(x) for x in ages]
    if any(x < 0 for x in a):
        raise ConfigError("ages must be nonnegative")
    n = len(a)
    if spec.kind == "avg":
        return math.fsum(a) / n
    if spec.kind == "max":
        return max(a)
    if spec.kind == "ms":
        return math.fsum(x * x for x in a) / n
    if spec.kind == "lnorm":
        return math.fsum(x ** spec.l for x in a) ** (1.0 / spec.l)
    xs, gs = _table(spec)
    return float(np.interp(np.asarray(a), xs, gs).sum())


def _g_antiderivative(xs: np.ndarray, gs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Integral of the interpolated g from xs[0] to x (flat extrapolation)."""
    x = np.asarray(x, dtype=float)
    widths = np.diff(xs)
    slopes = np.diff(gs) / widths
    cum = np.concatenate([[0.0], np.cumsum(widths * (gs[:-1] + gs[1:]) / 2.0)])
    j = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(xs) - 2)
    dx = x - xs[j]
    inside = cum[j] + gs[j] * dx + 0.5 * slopes[j] * dx * dx
    below = gs[0] * (x - xs[0])
    above = cum[-1] + gs[-1] * (x - xs[-1])
    return np.where(x < xs[0], below, np.where(x > xs[-1], above, inside))


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


def _lnorm_quad(u: np.ndarray, l: float, a: float, b: float, depth: int = 0) -> float:
    def gl(lo, hi):
        s = 0.5 * (hi - lo) * _GL_NODES + 0.5 * (hi + lo)
        ages = np.maximum(s[:, None] - u[None, :], 0.0)
        vals = (ages ** l).sum(axis=1) ** (1.0 / l)
        return 0.5 * (hi - lo) * float(_GL_WEIGHTS @ vals)

    whole = gl(a, b)
    mid = 0.5 * (a + b)
    halves = gl(a, mid) + gl(mid, b)
    if abs(halves - whole) <= 1e-12 * max(1.0, abs(halves)) or depth > 30:
        return halves
    return _lnorm_quad(u, l, a, mid, depth + 1) + _lnorm_quad(u, l, mid, b, depth + 1)


def segment_integral(spec: PenaltySpec, offsets: Sequence[float], a: float, b: float) -> float:
    """Integral over [a, b] of p(t - offsets) dt (``spec`` must not be scheduled)."""
    if b <= a:
        return 0.0
    u = np.asarray(offsets, dtype=float)
    n = len(u)
    if spec.kind == "avg":
        return (0.5 * (b * b - a * a) - u.mean() * (b - a)) if n else 0.0
    if spec.kind == "max":
        m = u.min()
        return 0.5 * ((b - m) ** 2 - (a - m) ** 2)
    if spec.kind == "ms":
        return float((((b - u) ** 3 - (a - u) ** 3) / 3.0).mean())
    if spec.kind == "lnorm":
        if spec.l == 1:
            return float((0.5 * ((b - u) ** 2 - (a - u) ** 2)).sum())
        return _lnorm_quad(u, spec.l, a, b)
    xs, gs = _table(spec)
    return float((_g_antiderivative(xs, gs, b - u) - _g_antiderivative(xs, gs, a - u)).sum())


def scheduled_segment_integral(spec: PenaltySpec, offsets, a: float, b: float) -> float:
    if not spec.schedule:
        return segment_integral(spec, offsets, a, b)
    total = 0.0
    bounds = [s for s, _ in spec.schedule] + [math.inf]
    for (s, p), e in zip(spec.schedule, bounds[1:]):
        lo, hi = max(a, s), min(b, e)
        if hi > lo:
            total += segment_integral(p, offsets, lo, hi)
    return total


class OnlineIntegrator:
    """Accumulates the integral of p(t - u) while offsets ``u`` change over time.

    avg and ms use running sums so each step is O(1); max caches the minimum
    offset; other kinds fall back to :func:`scheduled_segment_integral`.
    """

    def __init__(self, spec: PenaltySpec, offsets: Sequence[float], t0: float = 0.0):
        self.spec = spec
        self.u = [float(x) for x in offsets]
        self.n = len(self.u)
        self.t = t0
        self.total = 0.0
        self._fast = None if spec.schedule else spec.kind
        self._s1 = math.fsum(self.u)
        self._s2 = math.fsum(x * x for x in self.u)
        self._min = min(self.u) if self.u else 0.0

    def advance(self, t: float) -> None:
        a, b = self.t, t
        if b <= a:
            return
        k = self._fast
        if k == "avg":
            self.total += 0.5 * (b * b - a * a) - self._s1 / self.n * (b - a)
        elif k == "max":
            x, y = b - self._min, a - self._min
            self.total += 0.5 * (x * x - y * y)
        elif k == "ms":
            # mean of ((b-u)^3 - (a-u)^3)/3 expanded in powers of u
            n = self.n
            self.total += ((b * b * b - a * a * a) / 3.0 - (b * b - a * a) * self._s1 / n
                           + (b - a) * self._s2 / n)
        else:
            self.total += scheduled_segment_integral(self.spec, self.u, a, b)
        self.t = b

    def update(self, i: int, new: float) -> None:
        old = self.u[i]
        if new == old:
            return
        self.u[i] = new
        self._s1 += new - old
        self._s2 += new * new - old * old
        if old == self._min or new < self._min:
            self._min = min(self.u)
