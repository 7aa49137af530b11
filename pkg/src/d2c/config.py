"""YAML pipeline configuration: loading, validation, defaults and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .dynamics import SystemSpec, make_system
from .openloop import GradEstimatorConfig
from .sysid import SysidConfig
from .task import CostSpec, LqrWeights


class ConfigError(ValueError):
    pass


REQUIRED = {
    "system": ("name", "horizon", "dt"),
    "cost": ("Q", "R", "Q_T", "goal"),
    "openloop": ("sigma_du", "m", "alpha", "max_iters", "tol"),
}

DEFAULTS = {
    "openloop": {"decay": 1.0, "patience": 3},
    "sysid": {"sigma": 1e-4, "rollouts": 100, "estimator": "exact", "ridge": 1e-8, "mode": "state-reset"},
    "eval": {
        "epsilon": 0.0,
        "rollouts": 500,
        "mode": "closed",
        "epsilon_grid": [0.0125, 0.025, 0.05, 0.1],
        "robustness_grid": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0],
        "noise_scale": "absolute",
        "robustness_noise_scale": "max_control",
        "divergence_angle": math.pi / 2,
    },
}

# keys that do not influence any numerical result
VOLATILE = ("output_dir", "threads")


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class PipelineConfig:
    raw: dict
    path: Path | None = None

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data, path)

    @classmethod
    def from_dict(cls, data, path=None) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        if "seed" not in data:
            raise ConfigError("missing key 'seed' (no wall-clock seeding)")
        for section, keys in REQUIRED.items():
            if not isinstance(data.get(section), dict):
                raise ConfigError(f"missing section '{section}'")
            for k in keys:
                if k not in data[section]:
                    raise ConfigError(f"missing key '{section}.{k}'")
        raw = _merge(DEFAULTS, data)
        cfg = cls(raw, path)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            system = self.system()
            cost = self.cost()
            if cost.n_x != system.n_x or cost.n_u != system.n_u:
                raise ConfigError(f"cost dimensions ({cost.n_x}, {cost.n_u}) do not match the system "
                                  f"({system.n_x}, {system.n_u})")
            self.lqr_weights()
            self.openloop()
            self.sysid()
        except ConfigError:
            raise
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        int(self.raw["seed"])

    # -- sections --------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def threads(self) -> int:
        return int(self.raw.get("threads", 1))

    def system_spec(self) -> SystemSpec:
        return SystemSpec.from_dict(self.raw["system"])

    def system(self):
        return make_system(self.system_spec())

    def cost(self) -> CostSpec:
        system = self.system()
        return CostSpec.from_dict(self.raw["cost"], system.n_x, system.n_u)

    def lqr_weights(self) -> LqrWeights:
        system = self.system()
        section = self.raw.get("lqr")
        if not section:
            return LqrWeights.from_cost(self.cost(), system.horizon)
        base = self.cost()
        merged = {"Q": section.get("Q", base.Q), "R": section.get("R", base.R), "Q_T": section.get("Q_T", base.Q_T)}
        return LqrWeights.from_dict(merged, system.horizon, system.n_x, system.n_u)

    def openloop(self) -> GradEstimatorConfig:
        s = self.raw["openloop"]
        return GradEstimatorConfig(
            sigma_du=float(s["sigma_du"]), m=int(s["m"]), alpha=float(s["alpha"]),
            max_iters=int(s["max_iters"]), tol=float(s["tol"]), decay=float(s["decay"]),
            patience=int(s["patience"]), threads=self.threads,
        )

    def sysid(self) -> SysidConfig:
        s = self.raw["sysid"]
        return SysidConfig(sigma=float(s["sigma"]), N=int(s["rollouts"]), estimator=str(s["estimator"]),
                           ridge=float(s["ridge"]), mode=str(s["mode"]), threads=self.threads)

    @property
    def eval(self) -> dict:
        return self.raw["eval"]

    def initial_controls(self) -> np.ndarray:
        system = self.system()
        U0 = self.raw["openloop"].get("U0")
        if U0 is None:
            return np.zeros((system.horizon - 1, system.n_u))
        U0 = np.asarray(U0, dtype=float)
        return np.broadcast_to(U0, (system.horizon - 1, system.n_u)).copy()

    # -- provenance -------------------------------------------------------

    def canonical(self) -> dict:
        return {k: v for k, v in self.raw.items() if k not in VOLATILE}

    @property
    def hash(self) -> str:
        blob = json.dumps(_plain(self.canonical()), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def dump(self, path) -> None:
        """Write the resolved config (defaults filled in, volatile keys left out)."""
        with open(path, "w") as fh:
            yaml.safe_dump(_plain(self.canonical()), fh, sort_keys=True)

    def stage_rng(self, stage: str) -> np.random.Generator:
        """Independent stream per pipeline stage, derived from the global seed."""
        tag = int.from_bytes(hashlib.sha256(stage.encode()).digest()[:4], "little")
        return np.random.default_rng([self.seed, tag])


def _plain(x: Any):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x
