"""scikit-learn style wrapper around the calibration pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .hyperprior import HyperBounds
from .market_data import build_grid, implied_volatilities
from .posterior import predict as posterior_predict
from .posterior import summarize
from .pricer import PriceLikelihood, PricerSettings
from .sampler import SamplerConfig, run_chain
from .validation import check_points, check_seed, market_data_from_arrays


class LocalVolCalibrator(RegressorMixin, BaseEstimator):
    """Bayesian local-volatility calibration to call mid prices.

    ``fit(X, y)`` takes quote coordinates ``X = [[T, K], ...]`` and mid prices
    ``y``, runs the Gibbs sampler and stores the chain. ``predict(X)``
    returns posterior-mean call prices at arbitrary ``(T, K)``, using the GP
    predictive for points off the calibration grid.

    Parameters
    ----------
    spot, rate : float
        Underlying price and continuously compounded rate.
    n_maturities, n_strikes : int, optional
        Grid size; defaults to the number of distinct quoted values.
    strike_margin : tuple of float
        Far strike nodes as multiples of spot, added when there is room.
    n_iterations, burn_in, thin, surrogate_noise_scale, f_updates
        Sampler controls, see :class:`~volcal.sampler.SamplerConfig`.
    init_from_data : bool
        Start the constant log-vol level at the median quoted implied vol.
    hyper_bounds : HyperBounds, optional
    pricer_settings : PricerSettings, optional
    n_predict_states : int
        Posterior states averaged over in :meth:`predict`.
    random_state : int, Generator or None
    """

    def __init__(
        self,
        spot=100.0,
        rate=0.0,
        n_maturities=None,
        n_strikes=None,
        strike_margin=(0.3, 2.2),
        n_iterations=6000,
        burn_in=1000,
        thin=10,
        surrogate_noise_scale=0.1,
        f_updates=1,
        init_from_data=True,
        hyper_bounds=None,
        pricer_settings=None,
        n_predict_states=20,
        random_state=None,
    ):
        self.spot = spot
        self.rate = rate
        self.n_maturities = n_maturities
        self.n_strikes = n_strikes
        self.strike_margin = strike_margin
        self.n_iterations = n_iterations
        self.burn_in = burn_in
        self.thin = thin
        self.surrogate_noise_scale = surrogate_noise_scale
        self.f_updates = f_updates
        self.init_from_data = init_from_data
        self.hyper_bounds = hyper_bounds
        self.pricer_settings = pricer_settings
        self.n_predict_states = n_predict_states
        self.random_state = random_state

    def _settings(self) -> PricerSettings:
        if self.pricer_settings is not None:
            return self.pricer_settings
        return PricerSettings(strike_bounds=tuple(self.strike_margin))

    def fit(self, X, y, spread=None):
        data = market_data_from_arrays(X, y, self.spot, self.rate, spread)
        I = self.n_maturities or len(np.unique(data.maturities))
        J = self.n_strikes or len(np.unique(data.strikes)) + 2
        grid = build_grid(data, max(I, 2), max(J, 2), tuple(self.strike_margin))
        init = None
        if self.init_from_data:
            iv = implied_volatilities(data.mids, data.spot, data.strikes, data.maturities, data.rate)
            iv = iv[np.isfinite(iv)]
            init = float(np.log(np.median(iv))) if len(iv) else None
        seed = check_seed(self.random_state)
        config = SamplerConfig(
            n_iterations=self.n_iterations, burn_in=self.burn_in, thin=self.thin, seed=seed,
            surrogate_noise_scale=self.surrogate_noise_scale, f_updates=self.f_updates, init_mu_f=init,
        )
        likelihood = PriceLikelihood(data, grid, self._settings())
        self.chain_ = run_chain(config, data, grid, self.hyper_bounds or HyperBounds(), likelihood=likelihood)
        self.data_ = data
        self.grid_ = grid
        self.summary_ = summarize(self.chain_)
        self.n_features_in_ = 2
        return self

    def predict_volatility(self, X) -> np.ndarray:
        """Posterior-mean local volatility at ``X`` (GP predictive off the grid)."""
        check_is_fitted(self, "chain_")
        X = check_points(X)
        rng = np.random.default_rng(check_seed(self.random_state) + 1)
        n = min(self.n_predict_states, len(self.chain_))
        return posterior_predict(self.chain_, X, n, 1, rng).surfaces.mean(axis=0)

    def predict(self, X) -> np.ndarray:
        """Posterior-mean call prices at ``X``."""
        check_is_fitted(self, "chain_")
        X = check_points(X)
        rng = np.random.default_rng(check_seed(self.random_state) + 1)
        n = min(self.n_predict_states, len(self.chain_))
        sample = posterior_predict(self.chain_, X, n, 1, rng, reprice=True, data=self.data_, settings=self._settings())
        return sample.prices.mean(axis=0)
