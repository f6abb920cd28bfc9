"""Experiment configuration: a versioned YAML document with nested sections."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

SCHEMA_VERSION = 1
ALL_SCHEMES = ("ensemble", "mve", "evidential", "gmm", "random")

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "name": "inversion-al",
    "seed": 0,
    "out": "runs/experiment",
    "oracle": {"kind": "inversion_molecule", "params": {}},
    "data": {
        "n_initial": 78,
        "T_sample": 300.0,
        "energy_cap": None,          # default: oracle energy scale / 5
        "ladder_bins": 24,
        "ladder_per_bin": 4,
        "ladder_ceiling": None,      # default: 1.2 x oracle energy scale
    },
    "model": {
        "hidden": [32, 32],
        "latent_dim": 16,
        "ensemble_size": 5,
        "descriptor": {"cutoff": 3.5, "n_basis": 10, "r_min": 0.5, "width": None,
                       "angular_eta": [0.05, 0.5], "angular_zeta": [1, 4]},
    },
    "scheme": "ensemble",
    "schemes": ["ensemble", "mve", "evidential", "gmm"],
    "loss": {"rho_e": 0.1, "rho_f": 1.0, "lam": 0.1},
    "train": {"epochs": 1000, "lr": 0.005, "decay_every": 250, "decay": 0.5, "patience": 50, "min_epochs": 250,
              "val_fraction": 0.1, "clip_norm": 1000.0},
    "gmm": {"candidates": [1, 2, 3, 4, 5, 6], "max_points": 50000, "tol": 1e-6, "max_iter": 500},
    "uq": {"pooling": "mean"},
    "metrics": {"error_percentile": 20.0},
    "adversarial": {"temperature": 300.0, "lr": 0.01, "steps": 60, "n_seeds": 40,
                    "init_scale": 0.01, "dedup": 0.05, "random_scale": 0.1},
    "md": {"ensemble": "nvt", "temperature": 300.0, "temperatures": None, "dt": 0.5, "steps": 10000, "Q": None,
           "n_trajectories": 20, "stride": 100, "rules": {"preset": "ammonia"}, "write_xyz": False},
    "al": {"generations": 3, "samples_per_generation": 20},
}

# left out of the config hash: paths, labels, and the scheme (recorded per artifact)
_UNHASHED = ("out", "name", "scheme", "schemes")


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            if path.startswith(("oracle.params", "oracle.")) or path in ("model.descriptor.",):
                out[k] = v
                continue
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and k != "params":
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be a section")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        self.validate()

    def __getitem__(self, key):
        return self.data[key]

    def validate(self) -> None:
        d = self.data
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {d.get('schema_version')!r}; expected {SCHEMA_VERSION}")
        if d["al"]["generations"] < 1:
            raise ConfigError("al.generations must be >= 1")
        if d["al"]["samples_per_generation"] < 0:
            raise ConfigError("al.samples_per_generation must be >= 0")
        for s in [d["scheme"], *d["schemes"]]:
            if s not in ALL_SCHEMES:
                raise ConfigError(f"unknown scheme {s!r}; choose from {ALL_SCHEMES}")
        if d["oracle"]["kind"] not in ("inversion_molecule", "pair_cluster"):
            raise ConfigError(f"unknown oracle kind {d['oracle']['kind']!r}")
        if d["model"]["ensemble_size"] < 2:
            raise ConfigError("model.ensemble_size must be >= 2")
        rules = d["md"]["rules"]
        if isinstance(rules, dict) and rules.get("preset", "ammonia") not in ("ammonia", "silica", "none"):
            raise ConfigError(f"unknown stability preset {rules.get('preset')!r}")
        temps = d["md"]["temperatures"]
        if temps is not None and (not temps or min(temps) <= 0):
            raise ConfigError("md.temperatures must be null or a nonempty list of positive values")
        if d["md"]["ensemble"] not in ("nvt", "nve"):
            raise ConfigError("md.ensemble must be nvt or nve")
        if d["adversarial"]["temperature"] <= 0 or d["adversarial"]["steps"] < 1:
            raise ConfigError("adversarial temperature must be > 0 and steps >= 1")
        if not d["gmm"]["candidates"]:
            raise ConfigError("gmm.candidates must be nonempty")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config document must be a mapping")
        return cls(_merge(DEFAULTS, d))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.dump())

    def with_overrides(self, **over) -> "ExperimentConfig":
        d = self.to_dict()
        for dotted, v in over.items():
            keys = dotted.split(".")
            node = d
            for k in keys[:-1]:
                node = node[k]
            node[keys[-1]] = v
        return ExperimentConfig(d)

    def hash(self) -> str:
        d = {k: v for k, v in self.data.items() if k not in _UNHASHED}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]
