"""MCMC output diagnostics used by the tests and the CLI traces."""

from __future__ import annotations

import numpy as np


def autocorrelation(x, max_lag=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = len(x)
    x = x - x.mean()
    m = 1 << (2 * n - 1).bit_length()
    fx = np.fft.rfft(x, m)
    acf = np.fft.irfft(fx * np.conj(fx), m)[:n]
    acf = acf / acf[0] if acf[0] > 0 else np.zeros(n)
    return acf if max_lag is None else acf[: max_lag + 1]


def integrated_autocorr_time(x, c: float = 5.0) -> float:
    """Integrated autocorrelation time with Sokal's adaptive window."""
    rho = autocorrelation(x)
    taus = 2.0 * np.cumsum(rho) - 1.0
    window = np.arange(len(taus)) < c * taus
    m = int(np.argmin(window)) if not np.all(window) else len(taus) - 1
    return float(max(taus[m], 1.0))


def effective_sample_size(x) -> float:
    return len(x) / integrated_autocorr_time(x)


def mc_standard_error(x) -> float:
    """Standard error of the sample mean accounting for autocorrelation."""
    x = np.asarray(x, dtype=float)
    return float(np.std(x, ddof=1) / np.sqrt(effective_sample_size(x)))


def decorrelated(x) -> np.ndarray:
    """Thin ``x`` by its integrated autocorrelation time (rounded up)."""
    step = max(1, int(np.ceil(integrated_autocorr_time(x))))
    return np.asarray(x)[::step]
