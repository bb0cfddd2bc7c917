"""Bayesian calibration of Dupire local volatility with a Gaussian-process prior."""

from .exceptions import (
    DomainError,
    NumericalError,
    QuoteFormatError,
    SingularSystemError,
    ValidationError,
    VolcalError,
)
from .estimator import LocalVolCalibrator
from .gp_prior import KernelParams, build_covariance, conditional_predictive, gaussian_logpdf_kron, kron_cholesky
from .hyperprior import HyperBounds, HyperState, log_hyperprior_density
from .market_data import (
    Grid,
    MarketData,
    OptionQuote,
    black_scholes_price,
    build_grid,
    generate_synthetic,
    implied_volatility,
    load_quotes,
    write_quotes,
)
from .posterior import PredictiveSample, SurfaceSummary, predict, reprice, summarize
from .pricer import DupirePricer, LogVolSurface, PriceLikelihood, PricerSettings, dupire_price_surface
from .sampler import Chain, GibbsSampler, SamplerConfig, run_chain

__version__ = "0.1.0"

__all__ = [
    "Chain", "DomainError", "DupirePricer", "GibbsSampler", "Grid", "HyperBounds", "HyperState",
    "KernelParams", "LocalVolCalibrator", "LogVolSurface", "MarketData", "NumericalError", "OptionQuote",
    "PredictiveSample", "PriceLikelihood", "PricerSettings", "QuoteFormatError", "SamplerConfig",
    "SingularSystemError", "SurfaceSummary", "ValidationError", "VolcalError", "black_scholes_price",
    "build_covariance", "build_grid", "conditional_predictive", "dupire_price_surface",
    "gaussian_logpdf_kron", "generate_synthetic", "implied_volatility", "kron_cholesky",
    "load_quotes", "log_hyperprior_density", "predict", "reprice", "run_chain", "summarize",
    "write_quotes",
]
