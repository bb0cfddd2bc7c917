"""JSON run configuration for the command-line pipeline.

Every file is validated against :data:`SCHEMA` before any computation;
unknown keys are rejected at every level. Omitted sections take the defaults
shown in :data:`DEFAULTS`.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .exceptions import ValidationError
from .hyperprior import HyperBounds
from .pricer import PricerSettings
from .sampler import SamplerConfig

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_count = {"type": "integer", "minimum": 1}
_posarray = {"type": "array", "items": _pos, "minItems": 1}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SCHEMA = _obj(
    {
        "seed": {"type": "integer", "minimum": 0},
        "paths": _obj({"quotes": {"type": "string"}, "out": {"type": "string"}}),
        "market": _obj({"spot": _pos, "rate": _num}),
        "synth": _obj(
            {
                "maturities": _posarray,
                "moneyness": _posarray,
                "min_vega": {"type": "number", "minimum": 0},
                "noise_sd": {"type": "number", "minimum": 0},
                "fine_strikes": {"type": "integer", "minimum": 3},
                "fine_steps_per_year": _pos,
            }
        ),
        "grid": _obj(
            {
                "n_maturities": {"type": "integer", "minimum": 2},
                "n_strikes": {"type": "integer", "minimum": 2},
                "strike_margin": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
            }
        ),
        "hyperprior": _obj(
            {
                "sigma_f_max": _pos, "l_T_max": _pos, "l_K_max": _pos,
                "sigma_eps_max": _pos, "mu_f_min": _num, "mu_f_max": _num,
            }
        ),
        "sampler": _obj(
            {
                "n_iterations": _count,
                "burn_in": {"type": "integer", "minimum": 0},
                "thin": _count,
                "surrogate_noise_scale": _pos,
                "f_updates": _count,
                "init_from_data": {"type": "boolean"},
            }
        ),
        "pricer": _obj(
            {
                "n_strikes": {"type": "integer", "minimum": 5},
                "strike_cluster": {"oneOf": [_pos, {"type": "null"}]},
                "steps_per_year": _pos,
                "time_grading": {"type": "number", "minimum": 1},
                "max_dt": {"oneOf": [_pos, {"type": "null"}]},
                "rannacher_steps": {"type": "integer", "minimum": 0},
            }
        ),
        "reprice": _obj({"subsample": {"oneOf": [_count, {"type": "null"}]}}),
        "prediction": _obj(
            {
                "maturities": _posarray,
                "strikes": {"type": "array", "items": _pos},
                "n_states": _count,
                "n_draws": _count,
                "reprice": {"type": "boolean"},
            }
        ),
    }
)

DEFAULTS = {
    "seed": 0,
    "paths": {"quotes": "quotes.csv", "out": "out"},
    "market": {"spot": 1130.0, "rate": 0.01},
    "synth": {
        "maturities": [0.1, 0.25, 0.5, 1.0, 2.0],
        "moneyness": [0.6, 0.75, 0.85, 0.9, 0.95, 1.0, 1.05, 1.1, 1.15, 1.25, 1.55, 1.8],
        "min_vega": 0.0,
        "noise_sd": 0.5,
        "fine_strikes": 321,
        "fine_steps_per_year": 100.0,
    },
    "grid": {"n_maturities": 5, "n_strikes": 12, "strike_margin": [0.3, 2.2]},
    "hyperprior": {},
    "sampler": {
        "n_iterations": 50000,
        "burn_in": 10000,
        "thin": 40,
        "surrogate_noise_scale": 0.1,
        "f_updates": 1,
        "init_from_data": True,
    },
    "pricer": {},
    "reprice": {"subsample": 100},
    "prediction": {
        "maturities": [4.0, 6.0, 8.0, 10.0],
        "strikes": [],
        "n_states": 100,
        "n_draws": 10,
        "reprice": False,
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration with defaults filled in.

    Relative paths are resolved against the directory of the config file.
    """

    raw: dict
    base_dir: Path

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".") -> "RunConfig":
        try:
            jsonschema.validate(raw, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(map(str, exc.absolute_path)) or "<root>"
            raise ValidationError(f"config error at {where}: {exc.message}") from None
        merged = _merge(DEFAULTS, raw)
        cfg = cls(merged, Path(base_dir))
        cfg._check()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw, path.parent)

    def _check(self):
        s = self.raw["sampler"]
        if s["burn_in"] >= s["n_iterations"]:
            raise ValidationError("sampler.burn_in must be smaller than sampler.n_iterations")
        lo, hi = self.raw["grid"]["strike_margin"]
        if not lo < 1 < hi:
            raise ValidationError("grid.strike_margin must bracket 1")
        # constructing the typed views validates the remaining cross-field rules
        self.bounds()
        self.pricer_settings()

    def section(self, name: str) -> dict:
        return self.raw[name]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def path(self, key: str) -> Path:
        p = Path(self.raw["paths"][key])
        return p if p.is_absolute() else self.base_dir / p

    def bounds(self) -> HyperBounds:
        return HyperBounds(**self.raw["hyperprior"])

    def pricer_settings(self) -> PricerSettings:
        p = dict(self.raw["pricer"])
        return PricerSettings(strike_bounds=tuple(self.raw["grid"]["strike_margin"]), **p)

    def sampler_config(self, seed, init_mu_f: float | None = None) -> SamplerConfig:
        s = dict(self.raw["sampler"])
        s.pop("init_from_data")
        return SamplerConfig(seed=seed, init_mu_f=init_mu_f, **s)

    def synth_grid(self):
        from .market_data import Grid

        s = self.raw["synth"]
        spot = self.raw["market"]["spot"]
        return Grid(np.array(sorted(s["maturities"])), spot * np.array(sorted(s["moneyness"])))


def seed_streams(seed: int) -> dict[str, int]:
    """Named integer sub-seeds derived from one root seed."""
    children = np.random.SeedSequence(seed).spawn(3)
    return {
        name: int(child.generate_state(1, dtype=np.uint64)[0] % (2**63))
        for name, child in zip(("data", "chain", "prediction"), children)
    }

