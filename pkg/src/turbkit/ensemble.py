"""Streaming means, variances and standard errors.

RunningStats is a Welford accumulator over vectors of fixed shape.  For
time series it can also keep the samples, so that finalize can deflate
the sample count by an integrated autocorrelation time (IACT) chosen
with the usual self-consistent window.
"""

from dataclasses import dataclass

import numpy as np


class StatsError(ValueError):
    """Mismatched shapes or labels between accumulators."""


class RunningStats:
    """One-pass mean and sum of squared deviations (Welford)."""

    def __init__(self, shape=(), label="", keep_series=False):
        self.shape = tuple(shape) if isinstance(shape, (tuple, list)) else (int(shape),)
        self.label = label
        self.count = 0
        self.mean = np.zeros(self.shape)
        self.m2 = np.zeros(self.shape)
        self.keep_series = keep_series
        self.series = [] if keep_series else None

    def accumulate(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != self.shape:
            raise StatsError(f"sample shape {x.shape} does not match {self.shape}")
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)
        if self.keep_series:
            self.series.append(x.copy())
        return self

    @property
    def variance(self):
        if self.count < 2:
            return np.full(self.shape, np.nan)
        return self.m2 / (self.count - 1)

    def copy(self):
        out = RunningStats(self.shape, self.label, self.keep_series)
        out.count, out.mean, out.m2 = self.count, self.mean.copy(), self.m2.copy()
        if self.keep_series:
            out.series = list(self.series)
        return out


def accumulate(stats, x):
    """Add one sample; new_mean = mean + (x - mean)/count."""
    return stats.accumulate(x)


def merge(a, b):
    """Combine two accumulators as if their streams were concatenated."""
    if a.shape != b.shape:
        raise StatsError(f"cannot merge shapes {a.shape} and {b.shape}")
    if a.label != b.label:
        raise StatsError(f"cannot merge labels {a.label!r} and {b.label!r}")
    if b.count == 0:
        return a.copy()
    if a.count == 0:
        return b.copy()
    out = RunningStats(a.shape, a.label, a.keep_series and b.keep_series)
    n = a.count + b.count
    delta = b.mean - a.mean
    out.count = n
    out.mean = a.mean + delta * (b.count / n)
    out.m2 = a.m2 + b.m2 + delta**2 * (a.count * b.count / n)
    if out.keep_series:
        out.series = list(a.series) + list(b.series)
    return out


def autocorrelation(x):
    """Normalized autocorrelation of a 1-D series via FFT."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    y = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(y, size)
    acf = np.fft.irfft(f * np.conj(f), size)[:n]
    if acf[0] <= 0:
        return np.zeros(n)
    return acf / acf[0]


def iact(x, c=5.0):
    """Integrated autocorrelation time tau = 1 + 2 sum rho(t).

    The sum is truncated at the smallest window M with M >= c tau(M).
    For an AR(1) series with coefficient rho this tends to
    (1 + rho)/(1 - rho).  The result is floored at 1.
    """
    rho = autocorrelation(x)
    n = len(rho)
    if n < 2 or rho[0] == 0:
        return 1.0
    taus = 1.0 + 2.0 * np.cumsum(rho[1:])
    ok = np.arange(1, n) >= c * taus
    tau = taus[np.argmax(ok)] if ok.any() else taus[-1]
    return max(1.0, float(tau))


@dataclass
class Estimate:
    """Mean with a standard error; stderr is NaN when unavailable."""

    mean: np.ndarray
    stderr: np.ndarray
    count: int
    count_effective: np.ndarray
    available: bool


def finalize(stats, autocorrelated=False, c=5.0):
    """Mean and stderr = sqrt(variance / count_effective).

    With autocorrelated=True the kept series is used to estimate an
    IACT per component and count_effective = count / tau.
    """
    mean = stats.mean.copy()
    if stats.count < 2:
        nan = np.full(stats.shape, np.nan)
        return Estimate(mean, nan, stats.count, np.full(stats.shape, float(stats.count)), False)
    neff = np.full(stats.shape, float(stats.count))
    if autocorrelated:
        if not stats.keep_series:
            raise StatsError("autocorrelation deflation needs keep_series=True")
        series = np.asarray(stats.series).reshape(stats.count, -1)
        taus = np.array([iact(series[:, i], c) for i in range(series.shape[1])])
        neff = (stats.count / taus).reshape(stats.shape)
    stderr = np.sqrt(np.maximum(stats.variance, 0.0) / neff)
    return Estimate(mean, stderr, stats.count, neff, True)


def series_estimate(x, autocorrelated=True, c=5.0):
    """Mean and stderr of a stored scalar time series."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    mean = x.mean(axis=0)
    if n < 2:
        nan = np.full(mean.shape, np.nan)
        return Estimate(mean, nan, n, np.full(mean.shape, float(n)), False)
    var = x.var(axis=0, ddof=1)
    neff = np.full(mean.shape, float(n))
    if autocorrelated:
        flat = x.reshape(n, -1)
        taus = np.array([iact(flat[:, i], c) for i in range(flat.shape[1])])
        neff = (n / taus).reshape(mean.shape)
    return Estimate(mean, np.sqrt(var / neff), n, neff, True)
