"""Crank-Nicolson solver for Dupire's forward equation and the price likelihood.

The forward equation in maturity ``T`` and strike ``K``

    dC/dT = -r K dC/dK + 0.5 K^2 sigma(T, K)^2 d2C/dK2,   C(0, K) = max(S - K, 0)

is marched forward on a PDE mesh that contains every calibration grid node
exactly. The mesh extends the strike range to ``strike_bounds * spot`` and
sub-divides maturity intervals so that no time step exceeds ``max_dt``.
Node values of sigma are extended to the mesh by bilinear interpolation with
flat extrapolation outside the grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.linalg.lapack import dgtsv

from .exceptions import DomainError, NumericalError, SingularSystemError, ValidationError
from .market_data import DEFAULT_STRIKE_BOUNDS, Grid, MarketData, OptionQuote


@dataclass(frozen=True, eq=False)
class LogVolSurface:
    """Log local-volatility values ``f`` on ``grid`` in maturity-major order."""

    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.shape != (self.grid.size,):
            raise ValidationError(f"expected {self.grid.size} values, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("log-vol values must be finite")
        object.__setattr__(self, "values", v)

    def sigma(self, mu_f: float = 0.0) -> np.ndarray:
        return np.exp(self.values + mu_f)


@dataclass(frozen=True, eq=False)
class PriceSurface:
    """Call prices on the grid nodes, shape ``(I, J)``."""

    values: np.ndarray
    grid: Grid
    spot: float
    rate: float

    def at(self, T: float, K: float) -> float:
        n = self.grid.node_index(T, K)
        return float(self.values.ravel()[n])

    def monotonicity_violations(self, tol: float = 1e-8) -> dict:
        """Count nodes where C increases in K or decreases in T (diagnostic only)."""
        C = self.values
        return {
            "strike": int(np.sum(np.diff(C, axis=1) > tol)),
            "maturity": int(np.sum(np.diff(C, axis=0) < -tol)),
        }

    def to_csv(self, path) -> Path:
        path = Path(path)
        lines = ["T\\K," + ",".join(repr(float(k)) for k in self.grid.strikes)]
        for T, row in zip(self.grid.maturities, self.values):
            lines.append(repr(float(T)) + "," + ",".join(repr(float(c)) for c in row))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def to_json(self, path) -> Path:
        path = Path(path)
        payload = {
            "spot": self.spot,
            "rate": self.rate,
            "maturities": self.grid.maturities.tolist(),
            "strikes": self.grid.strikes.tolist(),
            "prices": self.values.tolist(),
        }
        path.write_text(json.dumps(payload, indent=1), encoding="utf-8")
        return path


@dataclass
class TridiagonalSystem:
    sub: np.ndarray
    diag: np.ndarray
    sup: np.ndarray
    rhs: np.ndarray


def thomas_solve(system: TridiagonalSystem) -> np.ndarray:
    """Solve a tridiagonal system by forward elimination and back substitution."""
    a = np.asarray(system.sub, dtype=float)
    b = np.asarray(system.diag, dtype=float)
    c = np.asarray(system.sup, dtype=float)
    d = np.asarray(system.rhs, dtype=float)
    n = len(b)
    if len(a) != n - 1 or len(c) != n - 1 or len(d) != n:
        raise ValidationError("inconsistent tridiagonal system dimensions")
    cp = np.empty(max(n - 1, 0))
    dp = np.empty(n)
    pivot = b[0]
    if pivot == 0:
        raise SingularSystemError("zero pivot in row 0")
    if n > 1:
        cp[0] = c[0] / pivot
    dp[0] = d[0] / pivot
    for i in range(1, n):
        pivot = b[i] - a[i - 1] * cp[i - 1]
        if pivot == 0:
            raise SingularSystemError(f"zero pivot in row {i}")
        if i < n - 1:
            cp[i] = c[i] / pivot
        dp[i] = (d[i] - a[i - 1] * dp[i - 1]) / pivot
    x = np.empty(n)
    x[-1] = dp[-1]
    for i in range(n - 2, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]
    return x


@dataclass(frozen=True)
class PricerSettings:
    """Numerical controls of the PDE solver.

    Strikes: ``n_strikes`` mesh nodes over ``strike_bounds * spot`` (widened to
    cover the grid), clustered around spot by a sinh map of width
    ``strike_cluster * spot`` (``None`` gives a uniform mesh). Grid strikes are
    snapped onto their nearest mesh node.

    Maturities: ``steps_per_year`` steps on average, uniform in
    ``T ** (1 / time_grading)`` so steps are short near the payoff kink
    (``time_grading=1`` is uniform), and never longer than ``max_dt``.
    """

    n_strikes: int = 161
    strike_bounds: tuple[float, float] = DEFAULT_STRIKE_BOUNDS
    strike_cluster: float | None = 0.12
    steps_per_year: float = 50.0
    time_grading: float = 2.0
    max_dt: float | None = 0.02
    rannacher_steps: int = 2

    def __post_init__(self):
        if self.n_strikes < 3:
            raise ValidationError("n_strikes must be at least 3")
        if not self.steps_per_year > 0 or not self.time_grading >= 1:
            raise ValidationError("need steps_per_year > 0 and time_grading >= 1")
        if self.max_dt is not None and not self.max_dt > 0:
            raise ValidationError("max_dt must be positive")
        if self.strike_cluster is not None and not self.strike_cluster > 0:
            raise ValidationError("strike_cluster must be positive")
        if self.rannacher_steps < 0:
            raise ValidationError("rannacher_steps must be non-negative")


def strike_mesh(nodes: np.ndarray, spot: float, settings: PricerSettings) -> np.ndarray:
    """Clustered strike mesh containing every value of ``nodes`` exactly."""
    s = settings
    lo = min(s.strike_bounds[0] * spot, nodes[0])
    hi = max(s.strike_bounds[1] * spot, nodes[-1])
    u = np.linspace(0.0, 1.0, s.n_strikes)
    if s.strike_cluster is None:
        base = lo + u * (hi - lo)
    else:
        c = s.strike_cluster * spot
        a, b = np.arcsinh((lo - spot) / c), np.arcsinh((hi - spot) / c)
        base = spot + c * np.sinh(a + u * (b - a))
    base[0], base[-1] = lo, hi
    mesh = base.copy()
    taken = set()
    extra = []
    for k in nodes:
        n = int(np.argmin(np.abs(base - k)))
        if n in taken:
            extra.append(k)
        else:
            taken.add(n)
            mesh[n] = k
    mesh = np.unique(np.concatenate([mesh, extra]))
    # drop mesh points left as slivers next to snapped nodes
    keep = np.ones(len(mesh), dtype=bool)
    pinned = np.isin(mesh, nodes)
    gaps = np.diff(mesh)
    tiny = 1e-6 * (hi - lo)
    for n in np.flatnonzero(gaps < tiny):
        if not pinned[n]:
            keep[n] = False
        elif not pinned[n + 1]:
            keep[n + 1] = False
    return mesh[keep]


def time_mesh(knots: np.ndarray, settings: PricerSettings) -> tuple[np.ndarray, np.ndarray]:
    """Graded time mesh from 0 through every knot; returns mesh and knot positions."""
    s = settings
    p = s.time_grading
    t_end = knots[-1]
    h = t_end ** (1 / p) / max(1.0, s.steps_per_year * t_end)
    mesh = [0.0]
    index = []
    prev = 0.0
    for b in knots:
        if b == prev:
            index.append(len(mesh) - 1)
            continue
        sa, sb = prev ** (1 / p), b ** (1 / p)
        parts = math.ceil((sb - sa) / h - 1e-9)
        if s.max_dt is not None:
            parts = max(parts, math.ceil((b - prev) / s.max_dt - 1e-9))
        parts = max(parts, 1)
        while True:
            pts = (sa + (sb - sa) * np.arange(0, parts + 1) / parts) ** p
            # graded steps grow with T, so the last one in the interval is the longest
            if s.max_dt is None or pts[-1] - pts[-2] <= s.max_dt * (1 + 1e-12):
                break
            parts = math.ceil(parts * 1.1)
        pts = pts[1:]
        pts[-1] = b
        mesh.extend(pts)
        index.append(len(mesh) - 1)
        prev = b
    return np.array(mesh), np.array(index)


def _interp_matrix(x_new: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Linear-interpolation weights (flat extrapolation) as a dense matrix."""
    W = np.zeros((len(x_new), len(x)))
    pos = np.clip(np.searchsorted(x, x_new, side="right") - 1, 0, len(x) - 2)
    w = (x_new - x[pos]) / (x[pos + 1] - x[pos])
    w = np.clip(w, 0.0, 1.0)
    rows = np.arange(len(x_new))
    W[rows, pos] = 1.0 - w
    W[rows, pos + 1] += w
    return W


class DupirePricer:
    """Reusable forward-PDE pricer for one grid, spot and rate.

    Construction builds the PDE mesh and interpolation weights once; each call
    to :meth:`price_values` is then a single forward sweep costing
    O(n_time_steps * n_strikes).
    """

    def __init__(self, grid: Grid, spot: float, rate: float, settings: PricerSettings | None = None):
        self.grid = grid
        self.spot = float(spot)
        self.rate = float(rate)
        self.settings = settings or PricerSettings()
        s = self.settings
        if grid.shape[0] < 2 or grid.shape[1] < 2:
            raise ValidationError("grid too small")

        self.mesh_K = strike_mesh(grid.strikes, self.spot, s)
        self.k_index = np.searchsorted(self.mesh_K, grid.strikes)
        if not np.array_equal(self.mesh_K[self.k_index], grid.strikes):
            raise NumericalError("grid strikes missing from the PDE mesh")
        self.mesh_T, self.t_index = time_mesh(grid.maturities, s)

        self.W_T = _interp_matrix(self.mesh_T, grid.maturities)
        self.W_K = _interp_matrix(self.mesh_K, grid.strikes)
        self._stencils()

    @property
    def mesh_shape(self) -> tuple[int, int]:
        return len(self.mesh_T), len(self.mesh_K)

    def _stencils(self):
        K = self.mesh_K
        hm = K[1:-1] - K[:-2]
        hp = K[2:] - K[1:-1]
        w1 = np.stack([-hp / (hm * (hm + hp)), (hp - hm) / (hm * hp), hm / (hp * (hm + hp))])
        w2 = np.stack([2 / (hm * (hm + hp)), -2 / (hm * hp), 2 / (hp * (hm + hp))])
        self._w1 = w1
        self._w2 = w2
        self._halfK2 = 0.5 * K[1:-1] ** 2
        self._rK = self.rate * K[1:-1]

    def payoff(self) -> np.ndarray:
        return np.maximum(self.spot - self.mesh_K, 0.0)

    def interpolate(self, sigma_nodes) -> np.ndarray:
        """Bilinear extension of node sigma values to the PDE mesh."""
        S = np.asarray(sigma_nodes, dtype=float).reshape(self.grid.shape)
        return self.W_T @ S @ self.W_K.T

    def price_values(self, sigma_nodes) -> np.ndarray:
        """Call prices at grid nodes (flattened maturity-major) for node sigma values."""
        sigma_nodes = np.asarray(sigma_nodes, dtype=float)
        if not np.all(np.isfinite(sigma_nodes)):
            raise NumericalError("non-finite local volatility")
        return self.solve(self.interpolate(sigma_nodes))

    def price_function(self, sigma_fn: Callable) -> np.ndarray:
        """Call prices at grid nodes for a vectorised ``sigma_fn(T, K)``."""
        sig = np.asarray(sigma_fn(self.mesh_T[:, None], self.mesh_K[None, :]), dtype=float)
        sig = np.broadcast_to(sig, self.mesh_shape)
        if not np.all(np.isfinite(sig)):
            raise NumericalError("non-finite local volatility")
        return self.solve(sig)

    def solve(self, sigma_mesh: np.ndarray, full: bool = False) -> np.ndarray:
        """March the forward equation over the mesh.

        Returns prices at the grid nodes (flattened), or the whole mesh
        solution when ``full`` is true.
        """
        T = self.mesh_T
        K = self.mesh_K
        nK = len(K)
        alpha = self._halfK2 * sigma_mesh[:, 1:-1] ** 2
        # operator rows (lower, centre, upper) at every time level
        L = alpha[None] * self._w2[:, None, :] - self._rK * self._w1[:, None, :]
        C = self.payoff()
        out = np.empty((len(T), nK)) if full else np.empty((len(self.t_index), nK))
        want = np.zeros(len(T), dtype=bool)
        want[self.t_index] = True
        if full:
            out[0] = C
        elif want[0]:
            out[0] = C
        slot = int(want[0])
        sub = np.zeros(nK - 1)
        diag = np.ones(nK)
        sup = np.zeros(nK - 1)
        rhs = np.empty(nK)
        for n in range(len(T) - 1):
            dt = T[n + 1] - T[n]
            theta = 1.0 if n < self.settings.rannacher_steps else 0.5
            lo, mid, up = L[0, n], L[1, n], L[2, n]
            rhs[1:-1] = C[1:-1]
            if theta < 1.0:
                rhs[1:-1] += (1.0 - theta) * dt * (lo * C[:-2] + mid * C[1:-1] + up * C[2:])
            rhs[0] = self.spot - K[0] * math.exp(-self.rate * T[n + 1])
            rhs[-1] = 0.0
            lo, mid, up = L[0, n + 1], L[1, n + 1], L[2, n + 1]
            sub[:-1] = -theta * dt * lo
            diag[1:-1] = 1.0 - theta * dt * mid
            sup[1:] = -theta * dt * up
            *_, C, info = dgtsv(sub, diag, sup, rhs)
            if info != 0:
                raise SingularSystemError(f"LAPACK gtsv failed with info={info}")
            if full:
                out[n + 1] = C
            elif want[n + 1]:
                out[slot] = C
                slot += 1
        if full:
            return out
        return out[:, self.k_index].ravel()

    def price_surface(self, surface: LogVolSurface, mu_f: float = 0.0) -> PriceSurface:
        if surface.grid != self.grid:
            raise ValidationError("surface grid does not match pricer grid")
        C = self.price_values(surface.sigma(mu_f))
        return PriceSurface(C.reshape(self.grid.shape), self.grid, self.spot, self.rate)


def dupire_price_surface(
    sigma: LogVolSurface,
    mu_f: float,
    spot: float,
    rate: float,
    settings: PricerSettings | None = None,
) -> PriceSurface:
    """Price every grid node for local vol ``exp(f + mu_f)`` in one forward sweep."""
    if not math.isfinite(mu_f):
        raise NumericalError("non-finite mu_f")
    return DupirePricer(sigma.grid, spot, rate, settings).price_surface(sigma, mu_f)


def quote_indices(grid: Grid, quotes: Sequence[OptionQuote]) -> np.ndarray:
    """Flat grid indices of quote nodes; raises if a quote is off-grid."""
    idx = np.empty(len(quotes), dtype=int)
    for n, q in enumerate(quotes):
        try:
            idx[n] = grid.node_index(q.T, q.K)
        except KeyError:
            raise ValidationError(f"quote (T={q.T}, K={q.K}) is not a grid node") from None
    return idx


def prices_at_quotes(C: PriceSurface, quotes: Sequence[OptionQuote]) -> np.ndarray:
    """Model prices at the quote nodes, in quote order (no interpolation)."""
    return C.values.ravel()[quote_indices(C.grid, quotes)]


def gaussian_loglik(sse: float, n: int, sigma_eps: float) -> float:
    """Independent Gaussian noise log-likelihood from a residual sum of squares."""
    if not sigma_eps > 0:
        raise DomainError(f"sigma_eps must be positive, got {sigma_eps}")
    return -0.5 * sse / sigma_eps**2 - 0.5 * n * math.log(2 * math.pi * sigma_eps**2)


class PriceLikelihood:
    """Gaussian likelihood of quoted mid prices given a log-vol surface.

    Only ``f + mu_f`` enters, so shifting ``mu_f`` by ``d`` and ``f`` by
    ``-d`` leaves every value unchanged.
    """

    def __init__(self, data: MarketData, grid: Grid, settings: PricerSettings | None = None):
        self.data = data
        self.grid = grid
        self.pricer = DupirePricer(grid, data.spot, data.rate, settings)
        self.index = quote_indices(grid, data.quotes)
        self.mids = data.mids
        self.n = data.n_quotes

    def model_prices(self, f, mu_f: float) -> np.ndarray:
        return self.pricer.price_values(np.exp(np.asarray(f) + mu_f))[self.index]

    def residual_sum(self, f, mu_f: float) -> float:
        """Least-squares calibration objective sum_i (C_i - c_i)^2."""
        r = self.model_prices(f, mu_f) - self.mids
        return float(r @ r)

    def __call__(self, f, mu_f: float, sigma_eps: float) -> float:
        # extreme slice proposals may overflow; the sampler rejects non-finite values
        with np.errstate(over="ignore", invalid="ignore"):
            sse = self.residual_sum(f, mu_f)
        return gaussian_loglik(sse, self.n, sigma_eps)


def log_likelihood(
    f: LogVolSurface,
    mu_f: float,
    sigma_eps: float,
    data: MarketData,
    settings: PricerSettings | None = None,
) -> float:
    """Gaussian log-likelihood of the quoted mids under local vol ``exp(f + mu_f)``."""
    if not sigma_eps > 0:
        raise DomainError(f"sigma_eps must be positive, got {sigma_eps}")
    return PriceLikelihood(data, f.grid, settings)(f.values, mu_f, sigma_eps)


def mc_price_oracle(
    sigma_fn: Callable,
    spot: float,
    rate: float,
    K,
    T: float,
    n_paths: int,
    n_steps: int,
    seed=None,
    chunk: int = 250_000,
):
    """Monte Carlo call price under the local-vol SDE (log-Euler scheme).

    ``K`` may be a scalar or an array of strikes sharing maturity ``T``.
    Returns ``(price, std_error)`` with the same shape as ``K``.
    """
    if n_paths < 1000:
        raise ValidationError("n_paths must be at least 1000")
    if n_steps < 1 or T <= 0:
        raise ValidationError("need n_steps >= 1 and T > 0")
    K = np.asarray(K, dtype=float)
    strikes = np.atleast_1d(K)
    rng = np.random.default_rng(seed)
    dt = T / n_steps
    sqdt = math.sqrt(dt)
    total = np.zeros(len(strikes))
    total_sq = np.zeros(len(strikes))
    done = 0
    while done < n_paths:
        m = min(chunk, n_paths - done)
        x = np.full(m, math.log(spot))
        for k in range(n_steps):
            vol = np.asarray(sigma_fn(k * dt, np.exp(x)), dtype=float)
            x += (rate - 0.5 * vol**2) * dt + vol * sqdt * rng.standard_normal(m)
        ST = np.exp(x)
        if not np.all(np.isfinite(ST)):
            raise NumericalError("non-finite simulated prices (volatility blow-up)")
        payoff = np.maximum(ST[:, None] - strikes[None, :], 0.0)
        total += payoff.sum(axis=0)
        total_sq += (payoff**2).sum(axis=0)
        done += m
    disc = math.exp(-rate * T)
    mean = total / n_paths
    var = np.maximum(total_sq / n_paths - mean**2, 0.0)
    price = disc * mean
    se = disc * np.sqrt(var / (n_paths - 1))
    if K.ndim == 0:
        return float(price[0]), float(se[0])
    return price, se
