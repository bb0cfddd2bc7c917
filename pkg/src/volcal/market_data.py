"""Option quotes, calibration grids and Black-Scholes utilities."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

from .exceptions import DomainError, QuoteFormatError, ValidationError

QUOTE_HEADER = ("T", "K", "bid", "ask")
DEFAULT_STRIKE_BOUNDS = (0.3, 2.2)


@dataclass(frozen=True)
class OptionQuote:
    """A European call quote at maturity ``T`` (years) and strike ``K``."""

    T: float
    K: float
    bid: float
    ask: float

    def __post_init__(self):
        if not (math.isfinite(self.T) and self.T > 0):
            raise ValidationError(f"maturity must be positive, got {self.T}")
        if not (math.isfinite(self.K) and self.K > 0):
            raise ValidationError(f"strike must be positive, got {self.K}")
        if not (math.isfinite(self.bid) and math.isfinite(self.ask)):
            raise ValidationError("bid and ask must be finite")
        if self.bid < 0:
            raise ValidationError(f"negative bid {self.bid} at (T={self.T}, K={self.K})")
        if self.bid > self.ask:
            raise ValidationError(
                f"bid {self.bid} exceeds ask {self.ask} at (T={self.T}, K={self.K})"
            )

    @property
    def mid(self) -> float:
        return (self.bid + self.ask) / 2


@dataclass(frozen=True)
class MarketData:
    """Spot, constant rate and a set of call quotes, sorted by (T, K)."""

    spot: float
    rate: float
    quotes: tuple[OptionQuote, ...]
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not (math.isfinite(self.spot) and self.spot > 0):
            raise ValidationError(f"spot must be positive, got {self.spot}")
        if not (math.isfinite(self.rate) and self.rate >= 0):
            raise ValidationError(f"rate must be non-negative, got {self.rate}")
        quotes = tuple(sorted(self.quotes, key=lambda q: (q.T, q.K)))
        if not quotes:
            raise ValidationError("no quotes")
        seen = set()
        for q in quotes:
            if (q.T, q.K) in seen:
                raise ValidationError(f"duplicate quote at (T={q.T}, K={q.K})")
            seen.add((q.T, q.K))
        object.__setattr__(self, "quotes", quotes)

    @property
    def n_quotes(self) -> int:
        return len(self.quotes)

    @property
    def maturities(self) -> np.ndarray:
        return np.array([q.T for q in self.quotes])

    @property
    def strikes(self) -> np.ndarray:
        return np.array([q.K for q in self.quotes])

    @property
    def mids(self) -> np.ndarray:
        return np.array([q.mid for q in self.quotes])

    def points(self) -> np.ndarray:
        """Quote coordinates as an ``(n, 2)`` array of ``(T, K)``."""
        return np.column_stack([self.maturities, self.strikes])


def load_quotes(path) -> MarketData:
    """Read a quote CSV with ``# key=value`` metadata lines.

    ``spot`` and ``rate`` metadata are required; the column header must be
    exactly ``T,K,bid,ask``.
    """
    path = Path(path)
    meta: dict[str, str] = {}
    quotes = []
    header_seen = False
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" not in body:
                    raise QuoteFormatError(f"metadata line must be key=value: {line!r}", lineno)
                key, value = (s.strip() for s in body.split("=", 1))
                meta[key] = value
                continue
            cells = [c.strip() for c in line.split(",")]
            if not header_seen:
                if tuple(cells) != QUOTE_HEADER:
                    raise QuoteFormatError(f"expected header T,K,bid,ask, got {line!r}", lineno)
                header_seen = True
                continue
            if len(cells) != 4:
                raise QuoteFormatError(f"expected 4 fields, got {len(cells)}", lineno)
            try:
                T, K, bid, ask = (float(c) for c in cells)
            except ValueError as exc:
                raise QuoteFormatError(str(exc), lineno) from None
            try:
                quotes.append(OptionQuote(T, K, bid, ask))
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None

    for key in ("spot", "rate"):
        if key not in meta:
            raise QuoteFormatError(f"missing required metadata '# {key}=<value>'")
    try:
        spot, rate = float(meta.pop("spot")), float(meta.pop("rate"))
    except ValueError as exc:
        raise QuoteFormatError(f"bad metadata value: {exc}") from None
    if not header_seen or not quotes:
        raise ValidationError("no quotes")
    return MarketData(spot, rate, tuple(quotes), metadata=meta)


def write_quotes(data: MarketData, path, **metadata) -> Path:
    """Write ``data`` in the format read by :func:`load_quotes`."""
    path = Path(path)
    lines = [f"# spot={data.spot!r}", f"# rate={data.rate!r}"]
    for key, value in {**data.metadata, **metadata}.items():
        lines.append(f"# {key}={value}")
    lines.append(",".join(QUOTE_HEADER))
    for q in data.quotes:
        lines.append(f"{q.T!r},{q.K!r},{q.bid!r},{q.ask!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@dataclass(frozen=True, eq=False)
class Grid:
    """Cartesian maturity x strike grid, flattened maturity-major (n = i*J + j).

    Coordinates are mapped affinely to the unit square for the GP kernel.
    """

    maturities: np.ndarray
    strikes: np.ndarray

    def __post_init__(self):
        T = np.array(self.maturities, dtype=float)
        K = np.array(self.strikes, dtype=float)
        if T.ndim != 1 or K.ndim != 1 or len(T) < 2 or len(K) < 2:
            raise ValidationError("grid needs at least 2 maturities and 2 strikes")
        if np.any(np.diff(T) <= 0) or np.any(np.diff(K) <= 0):
            raise ValidationError("grid coordinates must be strictly increasing")
        if not (np.all(np.isfinite(T)) and np.all(np.isfinite(K))):
            raise ValidationError("grid coordinates must be finite")
        if T[0] < 0 or K[0] <= 0:
            raise ValidationError("maturities must be >= 0 and strikes > 0")
        T.flags.writeable = False
        K.flags.writeable = False
        object.__setattr__(self, "maturities", T)
        object.__setattr__(self, "strikes", K)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.maturities), len(self.strikes)

    @property
    def size(self) -> int:
        return len(self.maturities) * len(self.strikes)

    def scale_T(self, T):
        T = np.asarray(T, dtype=float)
        return (T - self.maturities[0]) / (self.maturities[-1] - self.maturities[0])

    def scale_K(self, K):
        K = np.asarray(K, dtype=float)
        return (K - self.strikes[0]) / (self.strikes[-1] - self.strikes[0])

    def unscale_T(self, u):
        return self.maturities[0] + np.asarray(u, dtype=float) * (self.maturities[-1] - self.maturities[0])

    def unscale_K(self, u):
        return self.strikes[0] + np.asarray(u, dtype=float) * (self.strikes[-1] - self.strikes[0])

    def scale(self, points) -> np.ndarray:
        """Map ``(T, K)`` rows to unit-square coordinates."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.column_stack([self.scale_T(pts[:, 0]), self.scale_K(pts[:, 1])])

    def nodes(self) -> np.ndarray:
        """All ``(T, K)`` nodes in maturity-major order, shape ``(N, 2)``."""
        TT, KK = np.meshgrid(self.maturities, self.strikes, indexing="ij")
        return np.column_stack([TT.ravel(), KK.ravel()])

    def node_index(self, T: float, K: float) -> int:
        """Flat index of the node at exactly ``(T, K)``; ``KeyError`` if off-grid."""
        i = np.flatnonzero(self.maturities == T)
        j = np.flatnonzero(self.strikes == K)
        if len(i) == 0 or len(j) == 0:
            raise KeyError(f"(T={T}, K={K}) is not a grid node")
        return int(i[0]) * len(self.strikes) + int(j[0])

    def contains(self, T: float, K: float) -> bool:
        return bool(np.any(self.maturities == T) and np.any(self.strikes == K))

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return np.array_equal(self.maturities, other.maturities) and np.array_equal(
            self.strikes, other.strikes
        )

    def __hash__(self):
        return hash((self.maturities.tobytes(), self.strikes.tobytes()))


def _pad_by_bisection(values: list[float], target: int) -> list[float]:
    values = sorted(values)
    while len(values) < target:
        gaps = np.diff(values)
        k = int(np.argmax(gaps))
        values.insert(k + 1, 0.5 * (values[k] + values[k + 1]))
    return values


def build_grid(
    data: MarketData,
    target_I: int,
    target_J: int,
    strike_bounds: tuple[float, float] = DEFAULT_STRIKE_BOUNDS,
) -> Grid:
    """Smallest grid containing every quote node, padded to ``target_I x target_J``.

    Extra strike nodes go first to ``strike_bounds[0] * spot`` and
    ``strike_bounds[1] * spot`` (when those lie outside the quoted range) and
    then into the widest gaps. Extra maturities bisect the widest gaps, or
    extend beyond a single quoted maturity.
    """
    if target_I < 2 or target_J < 2:
        raise ValidationError("target grid sizes must be at least 2")
    mats = sorted(set(q.T for q in data.quotes))
    strikes = sorted(set(q.K for q in data.quotes))
    if len(mats) > target_I:
        raise ValidationError(f"{len(mats)} distinct maturities exceed target_I={target_I}")
    if len(strikes) > target_J:
        raise ValidationError(f"{len(strikes)} distinct strikes exceed target_J={target_J}")

    if len(mats) == 1:
        step = mats[0]
        mats = [mats[0] + k * step for k in range(target_I)]
    else:
        mats = _pad_by_bisection(mats, target_I)

    lo, hi = strike_bounds[0] * data.spot, strike_bounds[1] * data.spot
    extra = []
    if hi > strikes[-1]:
        extra.append(hi)
    if lo < strikes[0]:
        extra.append(lo)
    strikes = strikes + extra[: target_J - len(strikes)]
    if len(strikes) == 1:
        strikes.append(strikes[0] * strike_bounds[1] if strike_bounds[1] > 1 else 2 * strikes[0])
    strikes = _pad_by_bisection(strikes, target_J)
    return Grid(np.array(mats), np.array(strikes))


def black_scholes_price(S, K, T, r, vol):
    """Black-Scholes value of a European call. Broadcasts over array inputs."""
    S, K, T, r, vol = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (S, K, T, r, vol)))
    disc_K = K * np.exp(-r * T)
    sd = vol * np.sqrt(T)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (np.log(S / disc_K) + 0.5 * sd**2) / sd
        price = S * ndtr(d1) - disc_K * ndtr(d1 - sd)
    price = np.where(sd > 0, price, np.maximum(S - disc_K, 0.0))
    return price if price.ndim else float(price)


def black_scholes_vega(S, K, T, r, vol):
    S, K, T, r, vol = (np.asarray(a, dtype=float) for a in (S, K, T, r, vol))
    sd = vol * np.sqrt(T)
    d1 = (np.log(S / (K * np.exp(-r * T))) + 0.5 * sd**2) / sd
    return S * np.sqrt(T) * np.exp(-0.5 * d1**2) / math.sqrt(2 * math.pi)


def implied_volatility(price, S, K, T, r, tol=1e-12, max_iter=200) -> float:
    """Black-Scholes implied volatility of a call price.

    Bisection on a bracket followed by safeguarded Newton polishing.
    Raises :class:`DomainError` outside the open no-arbitrage band.
    """
    if T <= 0:
        raise DomainError("implied volatility undefined at T=0")
    lower = max(S - K * math.exp(-r * T), 0.0)
    if not (lower < price < S):
        raise DomainError(f"price {price} outside no-arbitrage band ({lower}, {S})")

    lo, hi = 0.0, 1.0
    while black_scholes_price(S, K, T, r, hi) < price:
        lo, hi = hi, 2 * hi
        if hi > 1e4:
            raise DomainError(f"cannot bracket implied volatility for price {price}")
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        if black_scholes_price(S, K, T, r, mid) < price:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-3 * hi:
            break

    vol = 0.5 * (lo + hi)
    for _ in range(max_iter):
        diff = black_scholes_price(S, K, T, r, vol) - price
        if diff < 0:
            lo = vol
        else:
            hi = vol
        vega = float(black_scholes_vega(S, K, T, r, vol))
        step = diff / vega if vega > 0 else np.inf
        new = vol - step
        if not (lo < new < hi):
            new = 0.5 * (lo + hi)
        if abs(new - vol) <= tol * max(vol, 1e-8) or hi - lo <= tol * hi:
            return float(new)
        vol = new
    return float(vol)


def implied_volatilities(prices, S, Ks, Ts, r) -> np.ndarray:
    """Vector of implied vols; NaN where inversion is undefined."""
    out = np.full(len(prices), np.nan)
    for n, (p, K, T) in enumerate(zip(prices, Ks, Ts)):
        try:
            out[n] = implied_volatility(float(p), S, float(K), float(T), r)
        except DomainError:
            pass
    return out


def generate_synthetic(
    truth,
    grid_fine: Grid,
    quote_points: Iterable[Sequence[float]],
    noise_sd: float,
    spot: float,
    rate: float,
    seed=None,
    settings=None,
) -> MarketData:
    """Price a known local-vol surface on ``grid_fine`` and add Gaussian noise.

    ``truth`` is either a callable ``sigma(T, K)`` (vectorised) or a
    :class:`~volcal.pricer.LogVolSurface` on ``grid_fine``. The bid/ask are
    set to ``mid -/+ noise_sd`` (narrowed if the bid would go negative).
    """
    from .pricer import DupirePricer, LogVolSurface

    if noise_sd < 0:
        raise ValidationError("noise_sd must be non-negative")
    pricer = DupirePricer(grid_fine, spot, rate, settings)
    if isinstance(truth, LogVolSurface):
        if truth.grid != grid_fine:
            raise ValidationError("truth surface must live on grid_fine")
        if not np.all(np.isfinite(truth.values)):
            raise ValidationError("truth surface must be finite")
        C = pricer.price_values(np.exp(truth.values))
    elif callable(truth):
        C = pricer.price_function(truth)
    else:
        raise TypeError("truth must be a LogVolSurface or a callable sigma(T, K)")

    pts = [tuple(map(float, p)) for p in quote_points]
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, noise_sd, size=len(pts)) if noise_sd > 0 else np.zeros(len(pts))
    I, J = grid_fine.shape
    quotes = []
    for (T, K), eps in zip(pts, noise):
        if not grid_fine.contains(T, K):
            raise ValidationError(f"quote point (T={T}, K={K}) is not on grid_fine")
        model = C.reshape(I, J)[np.flatnonzero(grid_fine.maturities == T)[0],
                                np.flatnonzero(grid_fine.strikes == K)[0]]
        band_lo = max(spot - K * math.exp(-rate * T), 0.0)
        mid = float(np.clip(model + eps, band_lo, spot))
        half = min(noise_sd, mid)
        quotes.append(OptionQuote(T, K, mid - half, mid + half))
    return MarketData(spot, rate, tuple(quotes), metadata={"noise_sd": repr(noise_sd)})


def smooth_test_surface(spot: float) -> Callable:
    """Smooth non-constant local-vol surface used by the demos and tests.

    ``sigma(T, K) = 0.2 + 0.1 * exp(-T) * exp(-(K/spot - 1)^2 / 0.1)``
    """

    def sigma(T, K):
        T = np.asarray(T, dtype=float)
        K = np.asarray(K, dtype=float)
        return 0.2 + 0.1 * np.exp(-T) * np.exp(-((K / spot - 1.0) ** 2) / 0.1)

    return sigma
