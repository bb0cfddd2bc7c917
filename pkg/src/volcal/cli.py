"""Batch command-line frontend.

Usage::

    volcal synth|calibrate|reprice|predict --config <path> [--chain <path>] [--out <dir>]

All outputs go under ``--out`` (default: ``paths.out`` of the config) with
fixed names:

``quotes.csv``          synthetic quotes (``synth``), loadable by ``calibrate``
``truth_surface.csv``   ground-truth sigma at the synthesis nodes (``synth``)
``chain.bin``           binary chain archive (``calibrate``)
``chain_summary.csv``   per-sample hyperparameters, log-likelihood and log-posterior
``surface_summary.csv`` per-node mean, sd, MAP and +-2 sd band of sigma
``reprice.csv``         per-quote re-pricing table (``reprice``)
``predictive.csv``      one row per (surface, point) predictive draw (``predict``)

Exit codes: 0 success, 1 numerical failure, 2 I/O or validation failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, seed_streams
from .exceptions import NumericalError, SingularSystemError, ValidationError
from .market_data import (
    MarketData,
    black_scholes_vega,
    build_grid,
    generate_synthetic,
    implied_volatilities,
    load_quotes,
    smooth_test_surface,
    write_quotes,
)
from .posterior import predict, reprice, summarize
from .pricer import PricerSettings, PriceLikelihood
from .sampler import Chain, run_chain

log = logging.getLogger("volcal")

CHAIN_FILE = "chain.bin"
CHAIN_SUMMARY_FILE = "chain_summary.csv"
SURFACE_SUMMARY_FILE = "surface_summary.csv"
REPRICE_FILE = "reprice.csv"
PREDICTIVE_FILE = "predictive.csv"
TRUTH_FILE = "truth_surface.csv"
QUOTES_FILE = "quotes.csv"


def synth_quote_points(cfg: RunConfig, grid, truth) -> list[tuple[float, float]]:
    """Synthesis nodes whose Black-Scholes vega at the true local vol reaches ``min_vega``."""
    s = cfg.section("synth")
    m = cfg.section("market")
    pts = []
    for T, K in grid.nodes():
        if black_scholes_vega(m["spot"], K, T, m["rate"], truth(T, K)) >= s["min_vega"]:
            pts.append((float(T), float(K)))
    if not pts:
        raise ValidationError("synth.min_vega leaves no quotes")
    return pts


def cmd_synth(cfg: RunConfig, out: Path, chain_path=None) -> int:
    s, m = cfg.section("synth"), cfg.section("market")
    spot, rate = m["spot"], m["rate"]
    grid = cfg.synth_grid()
    truth = smooth_test_surface(spot)
    fine = PricerSettings(
        n_strikes=s["fine_strikes"],
        steps_per_year=s["fine_steps_per_year"],
        max_dt=1.0 / s["fine_steps_per_year"],
        strike_bounds=tuple(cfg.section("grid")["strike_margin"]),
    )
    pts = synth_quote_points(cfg, grid, truth)
    data = generate_synthetic(truth, grid, pts, s["noise_sd"], spot, rate, seed=seed_streams(cfg.seed)["data"], settings=fine)
    write_quotes(data, out / QUOTES_FILE, seed=cfg.seed)
    nodes = grid.nodes()
    sig = truth(nodes[:, 0], nodes[:, 1])
    rows = ["T,K,sigma"] + [f"{T!r},{K!r},{v!r}" for (T, K), v in zip(nodes.tolist(), sig.tolist())]
    (out / TRUTH_FILE).write_text("\n".join(rows) + "\n", encoding="utf-8")
    log.info("wrote %d quotes and %d truth nodes to %s", data.n_quotes, len(nodes), out)
    return 0


def _load_data(cfg: RunConfig) -> MarketData:
    path = cfg.path("quotes")
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    return load_quotes(path)


def _initial_mu_f(cfg: RunConfig, data: MarketData) -> float | None:
    if not cfg.section("sampler")["init_from_data"]:
        return None
    iv = implied_volatilities(data.mids, data.spot, data.strikes, data.maturities, data.rate)
    iv = iv[np.isfinite(iv)]
    return float(np.log(np.median(iv))) if len(iv) else None


def _write_summaries(chain: Chain, out: Path):
    chain.to_summary_csv(out / CHAIN_SUMMARY_FILE)
    summarize(chain).to_csv(out / SURFACE_SUMMARY_FILE)


def cmd_calibrate(cfg: RunConfig, out: Path, chain_path=None) -> int:
    if chain_path is not None:
        chain = Chain.load(chain_path)
        log.info("re-summarizing %d stored samples from %s", len(chain), chain_path)
        _write_summaries(chain, out)
        return 0
    data = _load_data(cfg)
    g = cfg.section("grid")
    grid = build_grid(data, g["n_maturities"], g["n_strikes"], tuple(g["strike_margin"]))
    settings = cfg.pricer_settings()
    config = cfg.sampler_config(seed_streams(cfg.seed)["chain"], _initial_mu_f(cfg, data))
    every = max(1, config.n_iterations // 20)
    t0 = time.perf_counter()

    def progress(it, state):
        if (it + 1) % every == 0:
            log.info("iteration %d/%d  loglik %.3f  (%.0f s)", it + 1, config.n_iterations, state.loglik,
                     time.perf_counter() - t0)

    chain = run_chain(config, data, grid, cfg.bounds(), likelihood=PriceLikelihood(data, grid, settings),
                      progress=progress)
    chain.save(out / CHAIN_FILE)
    _write_summaries(chain, out)
    log.info("stored %d samples in %s", len(chain), out / CHAIN_FILE)
    return 0


def _chain(out: Path, chain_path) -> Chain:
    path = Path(chain_path) if chain_path is not None else out / CHAIN_FILE
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    return Chain.load(path)


def cmd_reprice(cfg: RunConfig, out: Path, chain_path=None) -> int:
    chain = _chain(out, chain_path)
    data = chain.data if chain.data is not None else _load_data(cfg)
    res = reprice(chain, data, cfg.section("reprice")["subsample"], cfg.pricer_settings())
    res.to_csv(out / REPRICE_FILE)
    mean, sd = res.error_stats()
    log.info("MAP-to-market implied-vol error %.5f +- %.5f (%d missing cells)", mean, sd, res.n_missing)
    return 0


def cmd_predict(cfg: RunConfig, out: Path, chain_path=None) -> int:
    chain = _chain(out, chain_path)
    p = cfg.section("prediction")
    strikes = p["strikes"] or chain.grid.strikes.tolist()
    pts = np.array([(T, K) for T in p["maturities"] for K in strikes], dtype=float)
    rng = np.random.default_rng(seed_streams(cfg.seed)["prediction"])
    data = chain.data
    if p["reprice"] and data is None:
        data = _load_data(cfg)
    sample = predict(chain, pts, p["n_states"], p["n_draws"], rng, reprice=p["reprice"], data=data,
                     settings=cfg.pricer_settings())
    sample.to_csv(out / PREDICTIVE_FILE)
    log.info("wrote %d predictive surfaces at %d points", len(sample), len(pts))
    return 0


COMMANDS = {"synth": cmd_synth, "calibrate": cmd_calibrate, "reprice": cmd_reprice, "predict": cmd_predict}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volcal", description="Bayesian local-volatility calibration")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--chain", help="existing chain archive (calibrate: re-summarize without sampling)")
    parser.add_argument("--out", help="output directory (default: paths.out of the config)")
    parser.add_argument("-q", "--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise FileNotFoundError(f"file not found: {cfg_path}")
        cfg = RunConfig.load(cfg_path)
        out = Path(args.out) if args.out else cfg.path("out")
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, args.chain)
    except (NumericalError, SingularSystemError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"volcal: numerical failure: {exc}", file=sys.stderr)
        return 1
    except (ValidationError, OSError, ValueError, KeyError) as exc:
        print(f"volcal: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
