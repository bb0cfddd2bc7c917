"""Squared-exponential GP prior on a Cartesian grid with Kronecker algebra.

The covariance over maturity-major flattened nodes is ``Sigma_T kron Sigma_K``
with the output scale ``sigma_f**2`` carried by the maturity factor. Every
operation works factor-wise, so decompositions cost O(I^3 + J^3) and
matrix-vector products O(N (I + J)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import NumericalError, ValidationError
from .market_data import Grid

JITTER = 1e-8
MAX_JITTER = 1e-4


@dataclass(frozen=True)
class KernelParams:
    sigma_f: float
    l_T: float
    l_K: float

    def __post_init__(self):
        if not (self.sigma_f > 0 and self.l_T > 0 and self.l_K > 0):
            raise ValidationError(f"kernel parameters must be positive: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.sigma_f, self.l_T, self.l_K])


def se_kernel(x, x2, params: KernelParams) -> float:
    """Squared-exponential covariance between two scaled ``(T, K)`` points."""
    dT = x[0] - x2[0]
    dK = x[1] - x2[1]
    return params.sigma_f**2 * math.exp(-(dT**2) / (2 * params.l_T**2)) * math.exp(
        -(dK**2) / (2 * params.l_K**2)
    )


def _se_1d(a, b, length):
    d = np.subtract.outer(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    return np.exp(-(d**2) / (2 * length**2))


@dataclass(frozen=True, eq=False)
class KroneckerCovariance:
    Sigma_T: np.ndarray
    Sigma_K: np.ndarray
    params: KernelParams
    jitter: float = JITTER

    @property
    def shape(self) -> tuple[int, int]:
        return self.Sigma_T.shape[0], self.Sigma_K.shape[0]

    def dense(self) -> np.ndarray:
        return np.kron(self.Sigma_T, self.Sigma_K)


@dataclass(frozen=True, eq=False)
class KroneckerCholesky:
    L_T: np.ndarray
    L_K: np.ndarray
    params: KernelParams
    jitter: float = JITTER

    @property
    def shape(self) -> tuple[int, int]:
        return self.L_T.shape[0], self.L_K.shape[0]

    @property
    def size(self) -> int:
        return self.L_T.shape[0] * self.L_K.shape[0]

    def logdet(self) -> float:
        I, J = self.shape
        return 2 * (J * np.sum(np.log(np.diag(self.L_T))) + I * np.sum(np.log(np.diag(self.L_K))))

    def matvec(self, v) -> np.ndarray:
        """``(L_T kron L_K) v``."""
        I, J = self.shape
        return (self.L_T @ np.reshape(v, (I, J)) @ self.L_K.T).ravel()

    def whiten(self, v) -> np.ndarray:
        """``(L_T kron L_K)^{-1} v``."""
        I, J = self.shape
        V = np.reshape(v, (I, J))
        A = solve_triangular(self.L_T, V, lower=True)
        return solve_triangular(self.L_K, A.T, lower=True).T.ravel()

    def solve(self, v) -> np.ndarray:
        """``Sigma^{-1} v``."""
        I, J = self.shape
        W = np.reshape(self.whiten(v), (I, J))
        A = solve_triangular(self.L_T, W, lower=True, trans="T")
        return solve_triangular(self.L_K, A.T, lower=True, trans="T").T.ravel()


def build_covariance(grid: Grid, params: KernelParams, jitter: float = JITTER) -> KroneckerCovariance:
    """Kronecker factors of the SE covariance over the scaled grid nodes."""
    tT = grid.scale_T(grid.maturities)
    tK = grid.scale_K(grid.strikes)
    s2 = params.sigma_f**2
    Sigma_T = s2 * _se_1d(tT, tT, params.l_T) + jitter * s2 * np.eye(len(tT))
    Sigma_K = _se_1d(tK, tK, params.l_K) + jitter * np.eye(len(tK))
    return KroneckerCovariance(Sigma_T, Sigma_K, params, jitter)


def _escalate(cov: KroneckerCovariance, factor):
    """Run ``factor`` on ``cov`` with jitter raised x10 on failure, up to MAX_JITTER."""
    jitter = cov.jitter
    s2 = cov.params.sigma_f**2
    I, J = cov.shape
    while True:
        extra = jitter - cov.jitter
        A = cov.Sigma_T + extra * s2 * np.eye(I)
        B = cov.Sigma_K + extra * np.eye(J)
        try:
            return factor(A, B), jitter
        except np.linalg.LinAlgError:
            pass
        if jitter * 10 > MAX_JITTER * (1 + 1e-12):
            raise NumericalError(
                f"covariance factor not positive definite at jitter {jitter:.1e} ({cov.params})"
            )
        jitter *= 10


def kron_cholesky(cov: KroneckerCovariance) -> KroneckerCholesky:
    """Factor-wise Cholesky, escalating jitter if a factor is numerically indefinite."""

    def factor(A, B):
        if np.any(np.diag(A) <= 0) or np.any(np.diag(B) <= 0):
            raise np.linalg.LinAlgError("non-positive diagonal")
        return np.linalg.cholesky(A), np.linalg.cholesky(B)

    (L_T, L_K), jitter = _escalate(cov, factor)
    return KroneckerCholesky(L_T, L_K, cov.params, jitter)


@dataclass(frozen=True, eq=False)
class KroneckerEigen:
    """Eigendecomposition ``Sigma = (Q_T kron Q_K) diag(lam_T kron lam_K) (Q_T kron Q_K)^T``."""

    Q_T: np.ndarray
    lam_T: np.ndarray
    Q_K: np.ndarray
    lam_K: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.lam_T), len(self.lam_K)

    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues as an ``(I, J)`` array matching the node layout."""
        return np.outer(self.lam_T, self.lam_K)

    def rotate(self, v) -> np.ndarray:
        """``Q^T v`` as an ``(I, J)`` array."""
        I, J = self.shape
        return self.Q_T.T @ np.reshape(v, (I, J)) @ self.Q_K

    def unrotate(self, W) -> np.ndarray:
        """``Q w`` for ``w`` given as an ``(I, J)`` array; returns a flat vector."""
        return (self.Q_T @ W @ self.Q_K.T).ravel()


def kron_eigh(cov: KroneckerCovariance) -> KroneckerEigen:
    def factor(A, B):
        lt, Qt = np.linalg.eigh(A)
        lk, Qk = np.linalg.eigh(B)
        if lt[0] <= 0 or lk[0] <= 0:
            raise np.linalg.LinAlgError("non-positive eigenvalue")
        return Qt, lt, Qk, lk

    (Qt, lt, Qk, lk), _ = _escalate(cov, factor)
    return KroneckerEigen(Qt, lt, Qk, lk)


def sample_prior(chol: KroneckerCholesky, rng: np.random.Generator) -> np.ndarray:
    """Draw ``f ~ N(0, Sigma)`` without forming the N x N factor."""
    I, J = chol.shape
    return chol.matvec(rng.standard_normal((I, J)))


def gaussian_logpdf_kron(v, chol: KroneckerCholesky) -> float:
    """``log N(v | 0, Sigma)`` via factor-wise triangular solves."""
    v = np.asarray(v, dtype=float).ravel()
    if v.shape[0] != chol.size:
        raise ValidationError(f"expected vector of length {chol.size}, got {v.shape[0]}")
    w = chol.whiten(v)
    return -0.5 * (w @ w) - 0.5 * chol.logdet() - 0.5 * chol.size * math.log(2 * math.pi)


def cross_factors(grid: Grid, params: KernelParams, x_new) -> tuple[np.ndarray, np.ndarray]:
    """Per-point factors ``a[m, i]`` and ``b[m, j]`` with ``k(x_m, x_ij) = a[m, i] * b[m, j]``."""
    x_new = np.atleast_2d(np.asarray(x_new, dtype=float))
    a = params.sigma_f**2 * _se_1d(x_new[:, 0], grid.scale_T(grid.maturities), params.l_T)
    b = _se_1d(x_new[:, 1], grid.scale_K(grid.strikes), params.l_K)
    return a, b


def conditional_predictive(f, chol: KroneckerCholesky, grid: Grid, x_new):
    """Joint GP conditional at scaled points ``x_new`` given node values ``f``.

    Returns ``(mean, cov)``. Each cross-covariance row is a Kronecker product
    of a maturity and a strike vector, so ``k^T Sigma^{-1} k'`` factorizes into
    a product of two small quadratic forms.
    """
    x_new = np.atleast_2d(np.asarray(x_new, dtype=float))
    if not np.all(np.isfinite(x_new)):
        raise ValidationError("prediction points must be finite")
    params = chol.params
    I, J = chol.shape
    a, b = cross_factors(grid, params, x_new)
    alpha = chol.solve(f).reshape(I, J)
    mean = np.einsum("mi,ij,mj->m", a, alpha, b)

    At = solve_triangular(chol.L_T, a.T, lower=True)
    Bk = solve_triangular(chol.L_K, b.T, lower=True)
    reduction = (At.T @ At) * (Bk.T @ Bk)
    prior = params.sigma_f**2 * _se_1d(x_new[:, 0], x_new[:, 0], params.l_T) * _se_1d(
        x_new[:, 1], x_new[:, 1], params.l_K
    )
    cov = prior - reduction
    cov = 0.5 * (cov + cov.T)
    return mean, cov


def sample_mvn(mean, cov, rng: np.random.Generator, size: int) -> np.ndarray:
    """Draws from ``N(mean, cov)`` for a possibly semi-definite ``cov``."""
    w, V = np.linalg.eigh(cov)
    root = V * np.sqrt(np.clip(w, 0.0, None))
    z = rng.standard_normal((size, len(mean)))
    return mean + z @ root.T
