"""Input checks shared by the estimator interface and the CLI."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils import check_array

from .exceptions import ValidationError
from .market_data import MarketData, OptionQuote


def check_points(X) -> np.ndarray:
    """Validate an ``(n, 2)`` array of ``(T, K)`` with positive finite entries."""
    try:
        X = check_array(X, dtype=np.float64, ensure_2d=True)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    if X.shape[1] != 2:
        raise ValidationError(f"expected columns (T, K), got {X.shape[1]} columns")
    if np.any(X <= 0):
        raise ValidationError("maturities and strikes must be positive")
    return X


def check_prices(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.shape != (n,):
        raise ValidationError(f"expected {n} prices, got {y.shape[0]}")
    if not np.all(np.isfinite(y)) or np.any(y < 0):
        raise ValidationError("prices must be finite and non-negative")
    return y


def check_positive(value, name: str) -> float:
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise ValidationError(f"{name} must be a positive finite number, got {value!r}")
    return float(value)


def check_seed(random_state) -> int:
    """Integer seed from ``None``, an int or a Generator (drawn once)."""
    if random_state is None:
        return 0
    if isinstance(random_state, numbers.Integral):
        if random_state < 0:
            raise ValidationError("random_state must be non-negative")
        return int(random_state)
    if isinstance(random_state, np.random.Generator):
        return int(random_state.integers(2**63 - 1))
    raise ValidationError(f"unsupported random_state {random_state!r}")


def market_data_from_arrays(X, y, spot, rate, spread=None) -> MarketData:
    """Build :class:`MarketData` from points and mid prices.

    ``spread`` (scalar or per-quote) sets ``bid/ask = mid -/+ spread / 2``;
    by default the bid equals the ask.
    """
    X = check_points(X)
    y = check_prices(y, len(X))
    half = np.zeros(len(y)) if spread is None else np.broadcast_to(np.asarray(spread, float) / 2, y.shape)
    half = np.minimum(half, y)
    quotes = tuple(OptionQuote(float(T), float(K), float(m - h), float(m + h)) for (T, K), m, h in zip(X, y, half))
    return MarketData(check_positive(spot, "spot"), float(rate), quotes)
