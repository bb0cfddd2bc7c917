"""Sigmoid-Gaussian hyperpriors.

Each bounded hyperparameter is ``lo + (hi - lo) * logistic(z)`` with
``z ~ N(0, 1)``; the sampler works directly on the unconstrained ``z``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .exceptions import DomainError, ValidationError

HYPER_NAMES = ("sigma_f", "l_T", "l_K", "mu_f", "sigma_eps")
_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


def constrain(z, lo, hi):
    """Map unconstrained ``z`` into the open interval ``(lo, hi)``."""
    if not np.all(np.less(lo, hi)):
        raise ValidationError(f"need lo < hi, got ({lo}, {hi})")
    out = lo + (hi - lo) * expit(z)
    return float(out) if np.ndim(out) == 0 else out


def unconstrain(kappa, lo, hi):
    if not lo < hi:
        raise ValidationError(f"need lo < hi, got ({lo}, {hi})")
    kappa = np.asarray(kappa, dtype=float)
    if np.any(kappa <= lo) or np.any(kappa >= hi):
        raise DomainError(f"value {kappa} outside open interval ({lo}, {hi})")
    u = (kappa - lo) / (hi - lo)
    out = logit(u)
    return float(out) if out.ndim == 0 else out


def log_hyperprior_density(kappa, lo, hi):
    """Log density of ``constrain(z, lo, hi)`` for ``z ~ N(0, 1)``.

    ``log phi(z) + log |dz/dkappa|`` with ``dz/dkappa = (hi - lo) / ((kappa - lo) (hi - kappa))``.
    """
    z = unconstrain(kappa, lo, hi)
    kappa = np.asarray(kappa, dtype=float)
    out = -0.5 * np.asarray(z) ** 2 - _LOG_SQRT_2PI + np.log(hi - lo) - np.log(kappa - lo) - np.log(hi - kappa)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class HyperBounds:
    """Intervals of the five hyperparameters.

    Defaults: ``(0, 1)`` for the kernel parameters on the unit-square scale,
    ``(0, 0.5)`` for the price noise and ``(log 0.01, log 0.5)`` for the
    constant log-vol level.
    """

    sigma_f_max: float = 1.0
    l_T_max: float = 1.0
    l_K_max: float = 1.0
    sigma_eps_max: float = 0.5
    mu_f_min: float = field(default=math.log(0.01))
    mu_f_max: float = field(default=math.log(0.5))

    def __post_init__(self):
        for name in ("sigma_f_max", "l_T_max", "l_K_max", "sigma_eps_max"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValidationError(f"{name} must be positive and finite")
        if not (math.isfinite(self.mu_f_min) and math.isfinite(self.mu_f_max) and self.mu_f_min < self.mu_f_max):
            raise ValidationError("need finite mu_f_min < mu_f_max")

    def intervals(self) -> np.ndarray:
        """``(5, 2)`` array of ``(lo, hi)`` in :data:`HYPER_NAMES` order."""
        return np.array(
            [
                (0.0, self.sigma_f_max),
                (0.0, self.l_T_max),
                (0.0, self.l_K_max),
                (self.mu_f_min, self.mu_f_max),
                (0.0, self.sigma_eps_max),
            ]
        )


@dataclass(frozen=True, eq=False)
class HyperState:
    """Unconstrained 5-vector ``z`` with its constrained view."""

    z: np.ndarray
    bounds: HyperBounds

    def __post_init__(self):
        z = np.array(self.z, dtype=float).ravel()
        if z.shape != (5,) or not np.all(np.isfinite(z)):
            raise ValidationError("z must be a finite 5-vector")
        object.__setattr__(self, "z", z)

    @classmethod
    def from_values(cls, bounds: HyperBounds, **values) -> "HyperState":
        iv = bounds.intervals()
        z = [unconstrain(values[name], lo, hi) for name, (lo, hi) in zip(HYPER_NAMES, iv)]
        return cls(np.array(z), bounds)

    def values(self) -> np.ndarray:
        iv = self.bounds.intervals()
        return constrain(self.z, iv[:, 0], iv[:, 1])

    def as_dict(self) -> dict:
        return dict(zip(HYPER_NAMES, map(float, self.values())))

    @property
    def kappa(self) -> np.ndarray:
        return self.values()[:3]

    @property
    def mu_f(self) -> float:
        return float(self.values()[3])

    @property
    def sigma_eps(self) -> float:
        return float(self.values()[4])

    def log_density(self) -> float:
        """Joint log hyperprior density in the constrained parametrisation."""
        return float(np.sum(log_density_z(self.z, self.bounds.intervals())))


def log_density_z(z, intervals) -> np.ndarray:
    """Per-parameter log hyperprior density evaluated through ``z`` (no saturation)."""
    z = np.asarray(z, dtype=float)
    width = intervals[:, 1] - intervals[:, 0]
    # log|dz/dkappa| = softplus(z) + softplus(-z) - log(width)
    return -0.5 * z**2 - _LOG_SQRT_2PI + np.logaddexp(0, z) + np.logaddexp(0, -z) - np.log(width)
