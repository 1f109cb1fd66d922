"""
Latency and accuracy distributions for lossy split inference.

Without retransmission the device always sends ``n_t`` packets, so the
latency is the constant ``n_t * T`` and the received count is binomial.
With stop-and-wait retransmission every packet eventually arrives, and the
total transmission count is negative binomial: ``n_t`` successes at
success probability ``1 - p``.  ``T = 8 * l / b`` for packet size ``l`` in
bytes and throughput ``b`` in bit/s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln

from .nn import check_rate

TAIL_TOL = 1e-10
ALPHA_GRID = np.arange(0, 101, 10, dtype=float)


@dataclass
class Pmf:
    support: np.ndarray
    masses: np.ndarray
    truncated: float = 0.0  # tail mass folded into the last atom

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=float)
        self.masses = np.asarray(self.masses, dtype=float)
        if self.support.shape != self.masses.shape or self.support.ndim != 1:
            raise ValueError("support and masses must be 1-D and the same length")
        if np.any(np.diff(self.support) <= 0):
            raise ValueError("support must be strictly increasing")
        if np.any(self.masses < 0):
            raise ValueError("masses must be nonnegative")

    @classmethod
    def point(cls, value: float) -> "Pmf":
        return cls(np.array([value]), np.array([1.0]))

    def total(self) -> float:
        return math.fsum(self.masses)

    def mean(self) -> float:
        return math.fsum(self.support * self.masses)

    def variance(self) -> float:
        mu = self.mean()
        return math.fsum((self.support - mu) ** 2 * self.masses)

    def mass_at(self, value: float) -> float:
        hit = np.isclose(self.support, value, rtol=1e-12, atol=0.0) | (self.support == value)
        return float(self.masses[hit].sum())

    def scaled(self, factor: float) -> "Pmf":
        return Pmf(self.support * factor, self.masses, self.truncated)

    def cdf_at(self, x) -> np.ndarray:
        c = np.cumsum(self.masses)
        idx = np.searchsorted(self.support, np.asarray(x, dtype=float), side="right")
        return np.where(idx > 0, c[np.maximum(idx - 1, 0)], 0.0)


@dataclass
class AccuracyCurve:
    """Accuracy when ``alpha`` percent of the representation survives."""

    alphas: np.ndarray
    accuracy: np.ndarray

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=float)
        self.accuracy = np.asarray(self.accuracy, dtype=float)
        order = np.argsort(self.alphas)
        self.alphas, self.accuracy = self.alphas[order], self.accuracy[order]
        if self.alphas[0] > 0 or self.alphas[-1] < 100:
            raise ValueError("curve must cover alpha from 0 to 100")
        if np.any((self.accuracy < 0) | (self.accuracy > 1)):
            raise ValueError("accuracies must lie in [0, 1]")

    def __call__(self, alpha) -> np.ndarray:
        return np.interp(alpha, self.alphas, self.accuracy)

    @property
    def clean(self) -> float:
        return float(self.accuracy[-1])


def slot_time(l: float, b: float) -> float:
    return l * 8.0 / b


def _log_choose(n, k):
    return gammaln(np.asarray(n) + 1.0) - gammaln(np.asarray(k) + 1.0) - gammaln(np.asarray(n) - k + 1.0)


def pmf_received(n_t: int, p: float) -> Pmf:
    """Number of packets, out of ``n_t``, that survive loss rate ``p``."""
    if n_t < 1:
        raise ValueError("n_t must be at least 1")
    p = check_rate(p, "packet loss rate")
    n = np.arange(n_t + 1)
    if p == 0.0:
        masses = (n == n_t).astype(float)
    else:
        masses = np.exp(_log_choose(n_t, n) + (n_t - n) * math.log(p) + n * math.log1p(-p))
        masses /= math.fsum(masses)
    return Pmf(n, masses)


def pmf_accuracy_sinr(n_t: int, n_int: int, p: float, curve: AccuracyCurve) -> Pmf:
    """Push the received-packet distribution through ``curve``.

    Only the ``n_int`` packets that carry the representation matter; ``k``
    of them arriving means ``alpha = 100 k / n_int``.  Equal accuracies
    merge into one atom.
    """
    if not 1 <= n_int <= n_t:
        raise ValueError(f"need 1 <= n_int <= n_t, got n_int={n_int}, n_t={n_t}")
    rec = pmf_received(n_int, p)
    acc = curve(100.0 * rec.support / n_int)
    values, inverse = np.unique(acc, return_inverse=True)
    masses = np.zeros(len(values))
    np.add.at(masses, inverse, rec.masses)
    keep = masses > 0
    return Pmf(values[keep], masses[keep])


def pmf_accuracy_retx(curve: AccuracyCurve | None = None, clean: float | None = None) -> Pmf:
    """Retransmission always delivers everything: a point mass at acc(100)."""
    if clean is None:
        if curve is None:
            raise ValueError("pass the accuracy curve or the clean accuracy")
        clean = curve.clean
    return Pmf.point(clean)


def latency_sinr(n_t: int, l: float = 500, b: float = 9.0e6) -> Pmf:
    if n_t < 1 or l <= 0 or b <= 0:
        raise ValueError("n_t, l and b must be positive")
    return Pmf.point(n_t * slot_time(l, b))


def transmissions_retx(n_t: int, p: float, tail: float = TAIL_TOL, cap: int | None = None) -> Pmf:
    """Total transmissions until ``n_t`` packets got through (negative binomial).

    The support is cut at the smallest ``n_max`` whose tail mass is below
    ``tail`` (capped at ``10**6 * n_t``).  The cut mass is added to the last
    atom, so the total is 1 while every other mass is the exact value, and
    is reported in ``truncated``.
    """
    if n_t < 1:
        raise ValueError("n_t must be at least 1")
    p = check_rate(p, "packet loss rate")
    if p == 0.0:
        return Pmf.point(float(n_t))
    cap = cap or 10**6 * n_t
    mean = n_t / (1 - p)
    sd = math.sqrt(n_t * p) / (1 - p)
    n_max = int(mean + 12 * sd + 50)
    while True:
        n_max = min(n_max, cap)
        n = np.arange(n_t, n_max + 1)
        masses = np.exp(_log_choose(n - 1, n_t - 1) + (n - n_t) * math.log(p) + n_t * math.log1p(-p))
        cut = max(0.0, 1.0 - math.fsum(masses))
        if cut < tail or n_max >= cap:
            break
        n_max *= 2
    # smallest n_max whose tail is already below the tolerance
    tails = cut + np.cumsum(masses[::-1])[::-1] - masses
    first = int(np.argmax(tails < tail)) if np.any(tails < tail) else len(masses) - 1
    masses = masses[:first + 1].copy()
    cut = max(0.0, 1.0 - math.fsum(masses))
    # fold the cut tail into the last atom so the kept masses stay exact
    masses[-1] += cut
    return Pmf(n[:first + 1], masses, truncated=cut)


def latency_retx(n_t: int, p: float, l: float = 500, b: float = 9.0e6, tail: float = TAIL_TOL) -> Pmf:
    return transmissions_retx(n_t, p, tail).scaled(slot_time(l, b))


def cdf(pmf: Pmf) -> tuple[np.ndarray, np.ndarray]:
    """Step points of the CDF: ``(support, cumulative mass)``."""
    return pmf.support.copy(), np.cumsum(pmf.masses)


def dkw_epsilon(trials: int, confidence: float = 0.99) -> float:
    """Half-width of the Dvoretzky-Kiefer-Wolfowitz band."""
    return math.sqrt(math.log(2.0 / (1.0 - confidence)) / (2.0 * trials))


@dataclass
class DivergenceReport:
    sup_distance: float
    band: float
    trials: int

    @property
    def inside(self) -> bool:
        return self.sup_distance <= self.band

    def __str__(self) -> str:
        verdict = "inside" if self.inside else "OUTSIDE"
        return f"sup|F_emp - F| = {self.sup_distance:.5f} vs DKW {self.band:.5f} ({self.trials} trials): {verdict}"


def monte_carlo_check(analytic: Pmf, simulator: Callable[[np.random.Generator, int], np.ndarray] | np.ndarray,
                      trials: int = 100_000, seed: int = 0, confidence: float = 0.99) -> DivergenceReport:
    """Compare an analytic PMF with simulated draws.

    ``simulator(rng, trials)`` returns ``trials`` samples; an array of
    samples is accepted directly.  The sup distance between the empirical
    and analytic CDFs is checked against the DKW band.
    """
    if callable(simulator):
        samples = np.asarray(simulator(np.random.default_rng(seed), trials), dtype=float)
    else:
        samples = np.asarray(simulator, dtype=float)
    samples = np.sort(samples)
    points = np.union1d(analytic.support, samples)
    emp = np.searchsorted(samples, points, side="right") / len(samples)
    sup = float(np.max(np.abs(emp - analytic.cdf_at(points))))
    return DivergenceReport(sup, dkw_epsilon(len(samples), confidence), len(samples))


def curve_from_points(alphas: Sequence[float], accuracy: Sequence[float]) -> AccuracyCurve:
    return AccuracyCurve(np.asarray(alphas), np.asarray(accuracy))
