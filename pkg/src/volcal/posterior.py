"""Posterior summaries, re-pricing and predictive simulation from a stored chain."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import NumericalError, ValidationError
from .gp_prior import KernelParams, build_covariance, conditional_predictive, kron_cholesky, sample_mvn
from .market_data import Grid, MarketData, implied_volatilities
from .pricer import DupirePricer, PricerSettings, quote_indices
from .sampler import Chain


@dataclass(frozen=True, eq=False)
class SurfaceSummary:
    """Pointwise summary of posterior local-vol surfaces.

    ``mean``, ``sd``, ``map_values`` and the band edges are on the
    volatility scale; ``f_mean`` and ``f_sd`` summarise the latent log-vol
    deviation ``f`` for diagnostics.
    """

    nodes: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    map_values: np.ndarray
    map_index: int
    f_mean: np.ndarray
    f_sd: np.ndarray

    @property
    def band_lo(self) -> np.ndarray:
        return self.mean - 2 * self.sd

    @property
    def band_hi(self) -> np.ndarray:
        return self.mean + 2 * self.sd

    def covers(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return (self.band_lo <= values) & (values <= self.band_hi)

    def to_rows(self) -> list[dict]:
        cols = {
            "T": self.nodes[:, 0], "K": self.nodes[:, 1], "mean": self.mean, "sd": self.sd,
            "map": self.map_values, "band_lo": self.band_lo, "band_hi": self.band_hi,
            "f_mean": self.f_mean, "f_sd": self.f_sd,
        }
        return [{k: float(v[n]) for k, v in cols.items()} for n in range(len(self.mean))]

    def to_csv(self, path) -> Path:
        return _write_rows(path, self.to_rows())

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps({"map_index": self.map_index, "nodes": self.to_rows()}, indent=1))
        return path


def _write_rows(path, rows: list[dict]) -> Path:
    path = Path(path)
    if not rows:
        raise ValidationError("nothing to write")
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def _nonempty(chain: Chain):
    if len(chain) == 0:
        raise ValidationError("empty chain")


def map_index(chain: Chain) -> int:
    """Index of the stored sample with the largest log-posterior.

    Ties go to the earliest iteration so the result does not depend on
    sample order.
    """
    _nonempty(chain)
    best = np.flatnonzero(chain.log_post == np.max(chain.log_post))
    return int(best[np.argmin(chain.iteration[best])])


def summarize(chain: Chain) -> SurfaceSummary:
    """Pointwise mean, sd and MAP of ``sigma = exp(f + mu_f)`` over the chain."""
    _nonempty(chain)
    sig = chain.sigma_surfaces()
    m = map_index(chain)
    # moments about the MAP sample: exact zeros for a collapsed chain
    dev = sig - sig[m]
    return SurfaceSummary(
        nodes=chain.grid.nodes(),
        mean=sig[m] + dev.mean(axis=0),
        sd=dev.std(axis=0),
        map_values=sig[m].copy(),
        map_index=m,
        f_mean=chain.f.mean(axis=0),
        f_sd=chain.f.std(axis=0),
    )


def select_samples(chain: Chain, subsample: int | None) -> np.ndarray:
    """Deterministic, order-independent choice of ``subsample`` stored samples.

    Samples are ranked by iteration number and picked at evenly spaced ranks.
    """
    _nonempty(chain)
    n = len(chain)
    if subsample is None or subsample == n:
        return np.argsort(chain.iteration, kind="stable")
    if not 1 <= subsample <= n:
        raise ValidationError(f"subsample must be in [1, {n}], got {subsample}")
    order = np.argsort(chain.iteration, kind="stable")
    ranks = np.round(np.linspace(0, n - 1, subsample)).astype(int)
    return order[ranks]


@dataclass(frozen=True, eq=False)
class RepriceResult:
    """Per-quote distributions of model prices and implied vols.

    Arrays ``prices`` and ``ivs`` are ``(n_selected, n_quotes)`` with NaN
    marking implied-vol inversions that failed.
    """

    data: MarketData
    sample_index: np.ndarray
    prices: np.ndarray
    ivs: np.ndarray
    map_prices: np.ndarray
    map_ivs: np.ndarray
    market_ivs: np.ndarray

    @property
    def n_missing(self) -> int:
        return int(np.sum(np.isnan(self.ivs)))

    @property
    def map_iv_errors(self) -> np.ndarray:
        """MAP minus market implied vol per quote (NaN where either is missing)."""
        return self.map_ivs - self.market_ivs

    def error_stats(self, exclude_shortest: bool = False) -> tuple[float, float]:
        """Mean and sd across quotes of the MAP-to-market implied-vol error."""
        err = self.map_iv_errors
        if exclude_shortest:
            T = self.data.maturities
            err = err[T > T.min()]
        err = err[np.isfinite(err)]
        if len(err) == 0:
            return float("nan"), float("nan")
        return float(err.mean()), float(err.std())

    def to_rows(self) -> list[dict]:
        d = self.data
        p_mean, p_sd = self.prices.mean(axis=0), self.prices.std(axis=0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            iv_mean = np.nanmean(self.ivs, axis=0)
            iv_sd = np.nanstd(self.ivs, axis=0)
        n_ok = np.sum(np.isfinite(self.ivs), axis=0)
        rows = []
        for q in range(d.n_quotes):
            rows.append({
                "T": float(d.maturities[q]), "K": float(d.strikes[q]), "market_mid": float(d.mids[q]),
                "market_iv": float(self.market_ivs[q]),
                "price_mean": float(p_mean[q]), "price_sd": float(p_sd[q]), "price_map": float(self.map_prices[q]),
                "iv_mean": float(iv_mean[q]), "iv_sd": float(iv_sd[q]), "iv_map": float(self.map_ivs[q]),
                "iv_map_error": float(self.map_iv_errors[q]), "n_iv_missing": int(len(self.ivs) - n_ok[q]),
            })
        return rows

    def to_csv(self, path) -> Path:
        return _write_rows(path, self.to_rows())


def reprice(
    chain: Chain,
    data: MarketData,
    subsample: int | None = None,
    settings: PricerSettings | None = None,
) -> RepriceResult:
    """Re-price quotes under posterior surfaces and invert to implied vols.

    The MAP sample is always priced, whether or not the subsample includes it.
    """
    _nonempty(chain)
    idx = select_samples(chain, subsample)
    pricer = DupirePricer(chain.grid, data.spot, data.rate, settings)
    qi = quote_indices(chain.grid, data.quotes)
    sig = chain.sigma_surfaces()
    T, K = data.maturities, data.strikes

    def price(s):
        return pricer.price_values(sig[s])[qi]

    prices = np.array([price(s) for s in idx]).reshape(len(idx), data.n_quotes)
    ivs = np.array([implied_volatilities(p, data.spot, K, T, data.rate) for p in prices]).reshape(prices.shape)
    m = map_index(chain)
    map_prices = price(m)
    return RepriceResult(
        data=data,
        sample_index=idx,
        prices=prices,
        ivs=ivs,
        map_prices=map_prices,
        map_ivs=implied_volatilities(map_prices, data.spot, K, T, data.rate),
        market_ivs=implied_volatilities(data.mids, data.spot, K, T, data.rate),
    )


@dataclass(frozen=True, eq=False)
class PredictiveSample:
    """Predictive local-vol draws at ``points`` (unscaled ``(T, K)``).

    ``surfaces[m]`` came from posterior state ``state_index[m]`` and is the
    ``draw_index[m]``-th conditional draw for that state. ``prices`` and
    ``ivs`` are filled only when re-pricing was requested.
    """

    points: np.ndarray
    surfaces: np.ndarray
    state_index: np.ndarray
    draw_index: np.ndarray
    log_surfaces: np.ndarray
    prices: np.ndarray | None = None
    ivs: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.surfaces)

    def sd(self, log_scale: bool = False) -> np.ndarray:
        return (self.log_surfaces if log_scale else self.surfaces).std(axis=0)

    def to_rows(self) -> list[dict]:
        rows = []
        for m in range(len(self)):
            for p, (T, K) in enumerate(self.points):
                row = {
                    "surface": m, "state": int(self.state_index[m]), "draw": int(self.draw_index[m]),
                    "T": float(T), "K": float(K), "sigma": float(self.surfaces[m, p]),
                }
                if self.prices is not None:
                    row["price"] = float(self.prices[m, p])
                    row["iv"] = float(self.ivs[m, p])
                rows.append(row)
        return rows

    def to_csv(self, path) -> Path:
        return _write_rows(path, self.to_rows())


def combined_grid(grid: Grid, points) -> Grid:
    """Cartesian grid over the union of training and prediction coordinates."""
    points = np.atleast_2d(points)
    return Grid(np.union1d(grid.maturities, points[:, 0]), np.union1d(grid.strikes, points[:, 1]))


def predict(
    chain: Chain,
    new_points,
    n_states: int,
    n_draws_per_state: int,
    rng: np.random.Generator,
    reprice: bool = False,
    data: MarketData | None = None,
    settings: PricerSettings | None = None,
) -> PredictiveSample:
    """Conditional GP predictive draws at unseen ``(T, K)`` points.

    For each of ``n_states`` posterior states chosen uniformly without
    replacement, the node values ``f`` and kernel parameters fix a Gaussian
    conditional at the new points, from which ``n_draws_per_state`` joint
    draws are taken. The likelihood of the augmented surface is treated as
    constant. With ``reprice=True`` the draws are extended jointly to every
    node of the combined training and prediction grid, the combined surface
    is priced with the PDE and prices and implied vols at the new points are
    returned; ``data`` (or ``chain.data``) supplies spot and rate.
    """
    _nonempty(chain)
    pts = np.atleast_2d(np.asarray(new_points, dtype=float))
    if pts.shape[1] != 2 or len(pts) == 0:
        raise ValidationError("new_points must be a non-empty (M, 2) array of (T, K)")
    grid = chain.grid
    scaled = grid.scale(pts)
    if not np.all(np.isfinite(scaled)):
        raise ValidationError("prediction points have non-finite scaled coordinates")
    if not 1 <= n_states <= len(chain):
        raise ValidationError(f"n_states must be in [1, {len(chain)}]")
    if n_draws_per_state < 1:
        raise ValidationError("n_draws_per_state must be positive")

    order = np.argsort(chain.iteration, kind="stable")
    states = order[rng.choice(len(chain), size=n_states, replace=False)]

    if reprice:
        data = data if data is not None else chain.data
        if data is None:
            raise ValidationError("re-pricing needs spot and rate from market data")
        full = combined_grid(grid, pts)
        on_train = np.array([grid.contains(T, K) for T, K in full.nodes()])
        target = full.nodes()[~on_train]
        train_pos = np.array([full.node_index(T, K) for T, K in grid.nodes()])
        pt_pos = np.array([full.node_index(T, K) for T, K in pts])
        pricer = DupirePricer(full, data.spot, data.rate, settings)
    else:
        target = pts

    draws, state_idx, draw_idx = [], [], []
    prices, ivs = [], []
    for s in states:
        f = chain.f[s]
        mu = chain.mu_f[s]
        params = KernelParams(*chain.kappa[s])
        chol = kron_cholesky(build_covariance(grid, params))
        if len(target):
            mean, cov = conditional_predictive(f, chol, grid, grid.scale(target))
            g = sample_mvn(mean, cov, rng, n_draws_per_state)
        else:
            g = np.empty((n_draws_per_state, 0))
        for d in range(n_draws_per_state):
            if reprice:
                logvol = np.empty(full.size)
                logvol[train_pos] = f
                logvol[~on_train] = g[d]
                logvol += mu
                p = pricer.price_values(np.exp(logvol))[pt_pos]
                prices.append(p)
                ivs.append(implied_volatilities(p, data.spot, pts[:, 1], pts[:, 0], data.rate))
                draws.append(logvol[pt_pos])
            else:
                draws.append(g[d] + mu)
            state_idx.append(int(s))
            draw_idx.append(d)

    log_surfaces = np.array(draws)
    surfaces = np.exp(log_surfaces)
    if not np.all(surfaces > 0):
        raise NumericalError("predictive volatility underflowed to zero")
    return PredictiveSample(
        points=pts,
        surfaces=surfaces,
        state_index=np.array(state_idx),
        draw_index=np.array(draw_idx),
        log_surfaces=log_surfaces,
        prices=np.array(prices) if reprice else None,
        ivs=np.array(ivs) if reprice else None,
        meta={"n_states": n_states, "n_draws_per_state": n_draws_per_state},
    )


def prior_mixture_sd(chain: Chain, states=None, log_scale: bool = True) -> float:
    """Marginal sd of the prior ``N(mu_f, sigma_f^2)`` mixed over posterior states.

    On the log scale this is ``sqrt(E[sigma_f^2] + Var[mu_f])``; otherwise the
    sd of the lognormal mixture ``exp(N(mu_f, sigma_f^2))``.
    """
    idx = np.arange(len(chain)) if states is None else np.asarray(states)
    mu = chain.mu_f[idx]
    s2 = chain.hyper[idx, 0] ** 2
    if log_scale:
        return float(np.sqrt(np.mean(s2) + np.var(mu)))
    m1 = np.exp(mu + s2 / 2)
    m2 = np.exp(2 * mu + 2 * s2)
    return float(np.sqrt(np.mean(m2) - np.mean(m1) ** 2))
