"""Command-line pipeline on a tiny configuration."""

import json

import numpy as np
import pytest

import volcal.cli as cli
from volcal.cli import main
from volcal.config import RunConfig, seed_streams
from volcal.exceptions import NumericalError, ValidationError
from volcal.market_data import load_quotes, smooth_test_surface
from volcal.pricer import DupirePricer, PricerSettings, quote_indices

TINY = {
    "seed": 5,
    "paths": {"quotes": "out/quotes.csv", "out": "out"},
    "synth": {
        "maturities": [0.25, 1.0],
        "moneyness": [0.8, 0.9, 1.0, 1.1, 1.2],
        "noise_sd": 0.5,
        "fine_strikes": 81,
        "fine_steps_per_year": 20,
    },
    "grid": {"n_maturities": 2, "n_strikes": 7},
    "sampler": {"n_iterations": 12, "burn_in": 4, "thin": 2},
    "pricer": {"n_strikes": 41, "steps_per_year": 20},
    "reprice": {"subsample": 2},
    "prediction": {"maturities": [2.0], "strikes": [1000.0, 1130.0], "n_states": 3, "n_draws": 2},
}


def write_config(tmp_path, cfg=TINY, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


def run(cmd, cfg_path, *extra):
    return main([cmd, "--config", str(cfg_path), "-q", *extra])


class TestConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError):
            RunConfig.from_dict({"sampler": {"n_iteration": 10}})
        with pytest.raises(ValidationError):
            RunConfig.from_dict({"extra": 1})

    def test_defaults_mirror_reference_run(self):
        cfg = RunConfig.from_dict({})
        s = cfg.sampler_config(0)
        assert (s.n_iterations, s.burn_in, s.thin) == (50_000, 10_000, 40) and s.n_samples == 1000
        b = cfg.bounds()
        assert b.sigma_eps_max == 0.5 and b.mu_f_max == pytest.approx(np.log(0.5))
        assert cfg.section("prediction")["n_states"] * cfg.section("prediction")["n_draws"] == 1000

    def test_burn_in_check(self):
        with pytest.raises(ValidationError):
            RunConfig.from_dict({"sampler": {"n_iterations": 10, "burn_in": 10}})

    def test_seed_streams_are_distinct_and_stable(self):
        a, b = seed_streams(7), seed_streams(7)
        assert a == b and len(set(a.values())) == 3


class TestPipeline:
    def test_full_run(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "out"
        assert run("synth", cfg) == 0
        assert (out / "quotes.csv").exists() and (out / "truth_surface.csv").exists()
        assert run("calibrate", cfg) == 0
        for name in ("chain.bin", "chain_summary.csv", "surface_summary.csv"):
            assert (out / name).exists()
        assert run("reprice", cfg) == 0
        assert len((out / "reprice.csv").read_text().splitlines()) == 1 + load_quotes(out / "quotes.csv").n_quotes
        assert run("predict", cfg) == 0
        assert len((out / "predictive.csv").read_text().splitlines()) == 1 + 3 * 2 * 2

    def test_synth_deterministic(self, tmp_path):
        cfg = write_config(tmp_path)
        assert run("synth", cfg, "--out", str(tmp_path / "a")) == 0
        assert run("synth", cfg, "--out", str(tmp_path / "b")) == 0
        for name in ("quotes.csv", "truth_surface.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_calibrate_deterministic(self, tmp_path):
        cfg = write_config(tmp_path)
        assert run("synth", cfg) == 0
        assert run("calibrate", cfg, "--out", str(tmp_path / "a")) == 0
        assert run("calibrate", cfg, "--out", str(tmp_path / "b")) == 0
        for name in ("chain.bin", "chain_summary.csv", "surface_summary.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_zero_noise_round_trip(self, tmp_path):
        raw = json.loads(json.dumps(TINY))
        raw["synth"]["noise_sd"] = 0.0
        cfg_path = write_config(tmp_path, raw)
        assert run("synth", cfg_path) == 0
        cfg = RunConfig.load(cfg_path)
        data = load_quotes(tmp_path / "out" / "quotes.csv")
        grid = cfg.synth_grid()
        s = cfg.section("synth")
        fine = PricerSettings(n_strikes=s["fine_strikes"], steps_per_year=s["fine_steps_per_year"],
                              max_dt=1.0 / s["fine_steps_per_year"], strike_bounds=tuple(cfg.section("grid")["strike_margin"]))
        pricer = DupirePricer(grid, data.spot, data.rate, fine)
        model = pricer.price_function(smooth_test_surface(data.spot))[quote_indices(grid, data.quotes)]
        assert np.sum((model - data.mids) ** 2) <= 1e-16 * data.n_quotes * data.spot**2

    def test_resume_resummarizes(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "out"
        assert run("synth", cfg) == 0
        assert run("calibrate", cfg) == 0
        chain_bytes = (out / "chain.bin").read_bytes()
        summary = (out / "surface_summary.csv").read_bytes()
        (out / "surface_summary.csv").unlink()
        assert run("calibrate", cfg, "--chain", str(out / "chain.bin"), "--out", str(tmp_path / "again")) == 0
        assert (tmp_path / "again" / "surface_summary.csv").read_bytes() == summary
        assert not (tmp_path / "again" / "chain.bin").exists()
        assert (out / "chain.bin").read_bytes() == chain_bytes


class TestExitCodes:
    def test_missing_quotes(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert run("calibrate", cfg) == 2
        assert "file not found" in capsys.readouterr().err

    def test_missing_config(self, tmp_path, capsys):
        assert run("synth", tmp_path / "nope.json") == 2
        assert "file not found" in capsys.readouterr().err

    def test_invalid_config(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"sampler": {"bogus": 1}})
        assert run("synth", cfg) == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_chain(self, tmp_path):
        cfg = write_config(tmp_path)
        assert run("reprice", cfg) == 2

    def test_numerical_failure(self, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise NumericalError("diverged")

        cfg = write_config(tmp_path)
        assert run("synth", cfg) == 0
        monkeypatch.setattr(cli, "run_chain", boom)
        assert run("calibrate", cfg) == 1
