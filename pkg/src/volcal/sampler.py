"""Three-block Gibbs sampler over (f, kappa, mu_f, sigma_eps).

Block 1 updates the log-vol surface ``f`` by elliptical slice sampling under
its GP prior. Block 2 updates the kernel parameters with surrogate-data slice
sampling: ``f`` is re-expressed through a noisy copy ``g`` and whitened
residual ``eta`` so that moving ``kappa`` also moves ``f``, and the move itself
is an elliptical slice step in the unconstrained ``z`` space. Block 3 updates
``(mu_f, sigma_eps)`` by an elliptical slice step in their ``z`` space.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .exceptions import NumericalError, ValidationError
from .gp_prior import (
    KernelParams,
    KroneckerCholesky,
    KroneckerEigen,
    build_covariance,
    gaussian_logpdf_kron,
    kron_cholesky,
    kron_eigh,
    sample_prior,
)
from .hyperprior import HYPER_NAMES, HyperBounds, HyperState, unconstrain
from .market_data import Grid, MarketData, OptionQuote

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class SamplerConfig:
    n_iterations: int = 50_000
    burn_in: int = 10_000
    thin: int = 40
    seed: int = 0
    surrogate_noise_scale: float = 0.1
    f_updates: int = 1
    init_mu_f: float | None = None
    check_cache: bool = False
    max_shrinks: int = 200

    def __post_init__(self):
        if self.n_iterations < 1 or not 0 <= self.burn_in < self.n_iterations:
            raise ValidationError("need 0 <= burn_in < n_iterations")
        if self.thin < 1:
            raise ValidationError("thin must be >= 1")
        if self.f_updates < 1:
            raise ValidationError("f_updates must be >= 1")
        if not 0 < self.surrogate_noise_scale <= 1:
            raise ValidationError("surrogate_noise_scale must lie in (0, 1]")

    @property
    def n_samples(self) -> int:
        return (self.n_iterations - self.burn_in) // self.thin


def ess_step(current, prior_draw, loglik: Callable, rng: np.random.Generator, cur_ll=None, max_shrinks=200):
    """One elliptical slice sampling update for a zero-mean Gaussian prior.

    ``prior_draw`` is either a draw from the prior or a callable taking
    ``rng`` and returning one. Returns ``(new_state, new_loglik, n_evals)``.
    NaN log-likelihoods at proposals count as rejections.
    """
    current = np.asarray(current, dtype=float)
    if cur_ll is None:
        cur_ll = loglik(current)
    if math.isnan(cur_ll):
        raise NumericalError(f"log-likelihood is NaN at the current state: {current!r}")
    nu = prior_draw(rng) if callable(prior_draw) else np.asarray(prior_draw, dtype=float)
    threshold = cur_ll + math.log(rng.uniform())
    theta = rng.uniform(0.0, 2 * math.pi)
    lo, hi = theta - 2 * math.pi, theta
    for n_evals in range(1, max_shrinks + 1):
        proposal = current * math.cos(theta) + nu * math.sin(theta)
        ll = loglik(proposal)
        if not math.isnan(ll) and ll > threshold:
            return proposal, ll, n_evals
        if theta < 0:
            lo = theta
        else:
            hi = theta
        theta = rng.uniform(lo, hi)
    logger.warning("elliptical slice bracket collapsed after %d shrinks; keeping state", max_shrinks)
    return current, cur_ll, max_shrinks


class ConstantLikelihood:
    """Likelihood that ignores the data; the chain then samples the prior."""

    def __call__(self, f, mu_f, sigma_eps) -> float:
        return 0.0


@dataclass(eq=False)
class Factorization:
    params: KernelParams
    chol: KroneckerCholesky
    eig: KroneckerEigen
    prior_var: float


def factorize(grid: Grid, params: KernelParams) -> Factorization:
    cov = build_covariance(grid, params)
    chol = kron_cholesky(cov)
    if chol.jitter != cov.jitter:
        cov = build_covariance(grid, params, jitter=chol.jitter)
    eig = kron_eigh(cov)
    prior_var = float(cov.Sigma_T[0, 0] * cov.Sigma_K[0, 0])
    return Factorization(params, chol, eig, prior_var)


@dataclass(eq=False)
class ChainState:
    f: np.ndarray
    hyper: HyperState
    fac: Factorization
    loglik: float

    @property
    def chol(self) -> KroneckerCholesky:
        return self.fac.chol


@dataclass(eq=False)
class Chain:
    """Stored posterior draws and run metadata.

    Arrays are indexed by stored sample: ``f`` is ``(S, N)``, ``z`` and
    ``hyper`` are ``(S, 5)`` in :data:`~volcal.hyperprior.HYPER_NAMES` order.
    """

    f: np.ndarray
    z: np.ndarray
    hyper: np.ndarray
    log_post: np.ndarray
    loglik: np.ndarray
    iteration: np.ndarray
    grid: Grid
    bounds: HyperBounds
    config: SamplerConfig
    data: MarketData | None = None
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.log_post)

    @property
    def mu_f(self) -> np.ndarray:
        return self.hyper[:, 3]

    @property
    def sigma_eps(self) -> np.ndarray:
        return self.hyper[:, 4]

    @property
    def kappa(self) -> np.ndarray:
        return self.hyper[:, :3]

    def sigma_surfaces(self) -> np.ndarray:
        """Local-vol surfaces ``exp(f + mu_f)``, shape ``(S, N)``."""
        return np.exp(self.f + self.mu_f[:, None])

    def subset(self, index) -> "Chain":
        index = np.asarray(index)
        return Chain(
            self.f[index], self.z[index], self.hyper[index], self.log_post[index],
            self.loglik[index], self.iteration[index], self.grid, self.bounds,
            self.config, self.data, dict(self.diagnostics),
        )

    def save(self, path) -> Path:
        """Write an ``.npz`` archive that :meth:`load` restores bit-exactly."""
        path = Path(path)
        extra = {}
        if self.data is not None:
            q = self.data.quotes
            extra = {
                "quote_T": np.array([x.T for x in q]),
                "quote_K": np.array([x.K for x in q]),
                "quote_bid": np.array([x.bid for x in q]),
                "quote_ask": np.array([x.ask for x in q]),
                "spot_rate": np.array([self.data.spot, self.data.rate]),
            }
        meta = {
            "config": asdict(self.config),
            "bounds": asdict(self.bounds),
            "diagnostics": self.diagnostics,
        }
        with path.open("wb") as fh:
            np.savez(
                fh,
                f=self.f, z=self.z, hyper=self.hyper, log_post=self.log_post,
                loglik=self.loglik, iteration=self.iteration,
                maturities=self.grid.maturities, strikes=self.grid.strikes,
                meta=np.array(json.dumps(meta)),
                **extra,
            )
        return path

    @classmethod
    def load(cls, path) -> "Chain":
        with np.load(Path(path), allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
        meta = json.loads(str(arrays["meta"]))
        data = None
        if "quote_T" in arrays:
            spot, rate = arrays["spot_rate"]
            quotes = tuple(
                OptionQuote(float(T), float(K), float(b), float(a))
                for T, K, b, a in zip(arrays["quote_T"], arrays["quote_K"], arrays["quote_bid"], arrays["quote_ask"])
            )
            data = MarketData(float(spot), float(rate), quotes)
        return cls(
            f=arrays["f"], z=arrays["z"], hyper=arrays["hyper"], log_post=arrays["log_post"],
            loglik=arrays["loglik"], iteration=arrays["iteration"],
            grid=Grid(arrays["maturities"], arrays["strikes"]),
            bounds=HyperBounds(**meta["bounds"]),
            config=SamplerConfig(**meta["config"]),
            data=data,
            diagnostics=meta["diagnostics"],
        )

    def to_summary_csv(self, path) -> Path:
        """Per-sample hyperparameters and log-posterior."""
        path = Path(path)
        header = "sample,iteration," + ",".join(HYPER_NAMES) + ",loglik,log_post"
        rows = [header]
        for s in range(len(self)):
            vals = ",".join(repr(float(v)) for v in self.hyper[s])
            rows.append(f"{s},{int(self.iteration[s])},{vals},{self.loglik[s]!r},{self.log_post[s]!r}")
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        return path


class GibbsSampler:
    """Holds the model pieces shared by the three update blocks.

    ``likelihood`` is any callable ``(f, mu_f, sigma_eps) -> float``; the
    price likelihood :class:`~volcal.pricer.PriceLikelihood` is the usual one.
    """

    def __init__(self, likelihood: Callable, grid: Grid, bounds: HyperBounds, config: SamplerConfig):
        self.likelihood = likelihood
        self.grid = grid
        self.bounds = bounds
        self.config = config
        self.intervals = bounds.intervals()
        self.evals = {"f": 0, "kappa": 0, "noise_mean": 0}
        self.seconds = {"f": 0.0, "kappa": 0.0, "noise_mean": 0.0}

    def _loglik(self, f, hyper: HyperState) -> float:
        return float(self.likelihood(f, hyper.mu_f, hyper.sigma_eps))

    def _safe(self, fn):
        """Wrap a proposal log-likelihood so numerical failures reject the proposal."""

        def wrapped(x):
            try:
                value = fn(x)
            except (NumericalError, FloatingPointError, np.linalg.LinAlgError):
                return -math.inf
            return value if math.isfinite(value) or value == -math.inf else -math.inf

        return wrapped

    def initial_state(self, z0=None) -> ChainState:
        if z0 is None:
            z0 = np.zeros(5)
            if self.config.init_mu_f is not None:
                lo, hi = self.intervals[3]
                mu = min(max(self.config.init_mu_f, lo + 1e-3 * (hi - lo)), hi - 1e-3 * (hi - lo))
                z0[3] = unconstrain(mu, lo, hi)
        hyper = HyperState(z0, self.bounds)
        fac = factorize(self.grid, KernelParams(*hyper.kappa))
        f = np.zeros(self.grid.size)
        ll = self._loglik(f, hyper)
        if not math.isfinite(ll):
            raise NumericalError(f"initial log-likelihood is not finite ({ll})")
        return ChainState(f, hyper, fac, ll)

    def log_posterior(self, state: ChainState) -> float:
        return state.loglik + gaussian_logpdf_kron(state.f, state.chol) + state.hyper.log_density()

    def update_f(self, state: ChainState, rng) -> ChainState:
        t0 = time.perf_counter()
        hyper = state.hyper
        f, ll, n = ess_step(
            state.f,
            lambda r: sample_prior(state.chol, r),
            self._safe(lambda v: self._loglik(v, hyper)),
            rng,
            cur_ll=state.loglik,
            max_shrinks=self.config.max_shrinks,
        )
        self.evals["f"] += n
        self.seconds["f"] += time.perf_counter() - t0
        return ChainState(f, hyper, state.fac, ll)

    def surrogate_terms(self, fac: Factorization, g: np.ndarray):
        """Conditional of ``f`` given surrogate ``g`` under ``fac``, in the eigenbasis.

        Returns ``(mean_rot, root_diag, log_p_g)`` where ``f = Q (mean_rot + root_diag * eta)``.
        """
        s = self.config.surrogate_noise_scale * fac.prior_var
        lam = fac.eig.eigenvalues()
        G = fac.eig.rotate(g)
        denom = lam + s
        mean_rot = lam / denom * G
        root = np.sqrt(lam * s / denom)
        log_p_g = -0.5 * np.sum(G**2 / denom) - 0.5 * np.sum(np.log(denom)) - 0.5 * lam.size * _LOG_2PI
        return mean_rot, root, float(log_p_g)

    def update_kappa(self, state: ChainState, rng) -> ChainState:
        t0 = time.perf_counter()
        hyper = state.hyper
        fac = state.fac
        s = self.config.surrogate_noise_scale * fac.prior_var
        g = state.f + math.sqrt(s) * rng.standard_normal(state.f.shape)
        mean_rot, root, log_p_g = self.surrogate_terms(fac, g)
        eta = (fac.eig.rotate(state.f) - mean_rot) / root

        cache = {}

        def reconstruct(zk):
            z = hyper.z.copy()
            z[:3] = zk
            h = HyperState(z, self.bounds)
            new_fac = factorize(self.grid, KernelParams(*h.kappa))
            m, r, lpg = self.surrogate_terms(new_fac, g)
            f_new = new_fac.eig.unrotate(m + r * eta)
            return h, new_fac, f_new, lpg

        def target(zk):
            h, new_fac, f_new, lpg = reconstruct(zk)
            ll = self._loglik(f_new, h)
            cache[zk.tobytes()] = (h, new_fac, f_new, ll)
            return ll + lpg

        cur_target = state.loglik + log_p_g
        zk, _, n = ess_step(
            hyper.z[:3], lambda r: r.standard_normal(3), self._safe(target), rng,
            cur_ll=cur_target, max_shrinks=self.config.max_shrinks,
        )
        self.evals["kappa"] += n
        hit = cache.get(zk.tobytes())
        if hit is None:
            new_state = state
        else:
            h, new_fac, f_new, ll = hit
            new_state = ChainState(f_new, h, new_fac, ll)
        self.seconds["kappa"] += time.perf_counter() - t0
        return new_state

    def update_noise_mean(self, state: ChainState, rng) -> ChainState:
        t0 = time.perf_counter()
        hyper = state.hyper

        def target(zn):
            z = hyper.z.copy()
            z[3:] = zn
            return self._loglik(state.f, HyperState(z, self.bounds))

        zn, ll, n = ess_step(
            hyper.z[3:], lambda r: r.standard_normal(2), self._safe(target), rng,
            cur_ll=state.loglik, max_shrinks=self.config.max_shrinks,
        )
        z = hyper.z.copy()
        z[3:] = zn
        self.evals["noise_mean"] += n
        self.seconds["noise_mean"] += time.perf_counter() - t0
        return ChainState(state.f, HyperState(z, self.bounds), state.fac, ll)

    def step(self, state: ChainState, rng) -> ChainState:
        for _ in range(self.config.f_updates):
            state = self.update_f(state, rng)
        state = self.update_kappa(state, rng)
        return self.update_noise_mean(state, rng)

    def run(self, rng=None, data: MarketData | None = None, progress: Callable | None = None) -> Chain:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        state = self.initial_state()
        S = cfg.n_samples
        N = self.grid.size
        out_f = np.empty((S, N))
        out_z = np.empty((S, 5))
        out_h = np.empty((S, 5))
        out_lp = np.empty(S)
        out_ll = np.empty(S)
        out_it = np.empty(S, dtype=np.int64)
        slot = 0
        for it in range(cfg.n_iterations):
            try:
                state = self.step(state, rng)
            except Exception as exc:
                raise NumericalError(
                    f"iteration {it} failed: {exc}; state hyper={state.hyper.as_dict()}"
                ) from exc
            if cfg.check_cache:
                fresh = self._loglik(state.f, state.hyper)
                if not math.isclose(fresh, state.loglik, rel_tol=1e-10, abs_tol=1e-10):
                    raise NumericalError(f"cached log-likelihood {state.loglik} != recomputed {fresh}")
            if it >= cfg.burn_in and (it - cfg.burn_in + 1) % cfg.thin == 0 and slot < S:
                out_f[slot] = state.f
                out_z[slot] = state.hyper.z
                out_h[slot] = state.hyper.values()
                out_ll[slot] = state.loglik
                out_lp[slot] = self.log_posterior(state)
                out_it[slot] = it
                if not math.isfinite(out_lp[slot]):
                    raise NumericalError(f"non-finite log-posterior at iteration {it}")
                slot += 1
            if progress is not None:
                progress(it, state)
        # wall-clock timings stay on the sampler so stored chains are reproducible
        logger.debug("block timings (s): %s", self.seconds)
        diagnostics = {"likelihood_evals": dict(self.evals)}
        return Chain(out_f, out_z, out_h, out_lp, out_ll, out_it, self.grid, self.bounds, cfg, data, diagnostics)


def run_chain(
    config: SamplerConfig,
    data: MarketData,
    grid: Grid,
    bounds: HyperBounds | None = None,
    pricer_settings=None,
    likelihood: Callable | None = None,
    progress: Callable | None = None,
) -> Chain:
    """Calibrate by MCMC: price likelihood, GP prior, sigmoid-Gaussian hyperpriors."""
    from .pricer import PriceLikelihood

    bounds = bounds or HyperBounds()
    if likelihood is None:
        likelihood = PriceLikelihood(data, grid, pricer_settings)
    sampler = GibbsSampler(likelihood, grid, bounds, config)
    return sampler.run(data=data, progress=progress)
