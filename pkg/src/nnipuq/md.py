"""Molecular dynamics with learned potentials and trajectory stability checks.

Units: A, fs, amu, kcal/mol. Several trajectories of the same composition
are integrated together as one (S, n, 3) batch; each one stops updating at
its first stability violation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .potential import ModelBundle, fast_predict
from .structures import KB_KCAL, MVV2E, Structure

log = logging.getLogger(__name__)

SYMBOLS = {1: "H", 2: "He", 3: "Li", 6: "C", 7: "N", 8: "O", 9: "F", 10: "Ne", 11: "Na",
           14: "Si", 15: "P", 16: "S", 17: "Cl", 18: "Ar"}

ForceFn = Callable[[np.ndarray], tuple]   # positions (S, n, 3) -> (E (S,), F (S, n, 3))


@dataclass
class StabilityRules:
    min_distance: Optional[float] = None   # A
    max_distance: Optional[float] = None   # A, any pair farther apart fails
    min_energy: Optional[float] = None     # kcal/mol, predicted energy below fails
    max_kinetic: Optional[float] = None    # kcal/mol
    zero_kinetic: bool = False             # kinetic energy exactly 0 fails

    @classmethod
    def preset(cls, name: str) -> "StabilityRules":
        if name == "ammonia":
            return cls(min_distance=0.75, max_distance=2.25, min_energy=0.0)
        if name == "silica":
            return cls(min_distance=1.0, max_kinetic=10000.0, zero_kinetic=True)
        if name == "none":
            return cls()
        raise ValueError(f"unknown stability preset {name!r}")

    @classmethod
    def from_dict(cls, d) -> "StabilityRules":
        if isinstance(d, str):
            return cls.preset(d)
        d = dict(d)
        base = cls.preset(d.pop("preset")) if "preset" in d else cls()
        for k, v in d.items():
            if k not in cls.__dataclass_fields__:
                raise ValueError(f"unknown stability rule {k!r}")
            setattr(base, k, v)
        return base


@dataclass
class MDConfig:
    ensemble: str = "nvt"
    temperature: float = 300.0   # K
    dt: float = 0.5              # fs
    steps: int = 10000
    Q: Optional[float] = None    # kcal/mol fs^2; default N_dof kB T (20 dt)^2
    stride: int = 100
    rules: StabilityRules = field(default_factory=lambda: StabilityRules.preset("ammonia"))
    remove_com: bool = True

    def __post_init__(self):
        if self.ensemble not in ("nvt", "nve"):
            raise ValueError("ensemble must be 'nvt' or 'nve'")
        if self.dt <= 0 or self.steps < 1:
            raise ValueError("dt must be > 0 and steps >= 1")
        if self.ensemble == "nvt" and (self.temperature <= 0 or (self.Q is not None and self.Q <= 0)):
            raise ValueError("nvt needs T > 0 and Q > 0")
        if isinstance(self.rules, (dict, str)):
            self.rules = StabilityRules.from_dict(self.rules)

    def n_dof(self, n_atoms: int) -> int:
        return 3 * n_atoms - (3 if self.remove_com else 0)

    def coupling(self, n_atoms: int) -> float:
        if self.Q is not None:
            return float(self.Q)
        return self.n_dof(n_atoms) * KB_KCAL * self.temperature * (20.0 * self.dt) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MDConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class Trajectory:
    steps: int
    dt: float
    stable_steps: int
    reason: Optional[str]
    frame_steps: list = field(default_factory=list)
    positions: list = field(default_factory=list)
    velocities: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    kinetic: list = field(default_factory=list)

    @property
    def stable(self) -> bool:
        return self.stable_steps == self.steps

    @property
    def stable_time(self) -> float:
        return self.stable_steps * self.dt


def kinetic_energy(v: np.ndarray, masses: np.ndarray) -> np.ndarray:
    """Per-trajectory kinetic energy in kcal/mol for velocities (S, n, 3)."""
    return 0.5 * MVV2E * (masses[None, :, None] * v * v).sum((1, 2))


def maxwell_boltzmann(masses: np.ndarray, T: float, S: int, rng, remove_com: bool = True) -> np.ndarray:
    sigma = np.sqrt(KB_KCAL * T / (masses * MVV2E))
    v = rng.normal(size=(S, len(masses), 3)) * sigma[None, :, None]
    if remove_com:
        v = v - (v * masses[None, :, None]).sum(1, keepdims=True) / masses.sum()
    return v


def model_force_fn(m: ModelBundle, atomic_numbers, cell=None, members: Optional[Sequence[int]] = None) -> ForceFn:
    """Energy and forces averaged over the chosen members (all by default)."""
    def fn(pos):
        with np.errstate(all="ignore"):
            out = fast_predict(m, atomic_numbers, pos, cell, members, check=False)
        return out["energy"].mean(0), out["forces"].mean(0)
    return fn


def _violations(rules: StabilityRules, pos, E, KE, cell=None) -> list:
    """Reason string (or None) per trajectory."""
    S, n, _ = pos.shape
    reasons = [None] * S
    bad_model = ~np.isfinite(E) | ~np.isfinite(pos).all((1, 2))
    need_d = rules.min_distance is not None or rules.max_distance is not None
    if need_d and n > 1:
        diff = pos[:, :, None, :] - pos[:, None, :, :]
        if cell is not None:
            diff = diff - np.round(diff @ np.linalg.inv(cell)) @ cell
        d = np.sqrt((diff ** 2).sum(-1))
        iu = np.triu_indices(n, 1)
        d = d[:, iu[0], iu[1]]
        dmin, dmax = d.min(1), d.max(1)
    for s in range(S):
        if bad_model[s]:
            reasons[s] = "model_nan"
        elif not np.isfinite(KE[s]):
            reasons[s] = "kinetic_nan"
        elif rules.zero_kinetic and KE[s] == 0:
            reasons[s] = "kinetic_zero"
        elif rules.max_kinetic is not None and KE[s] > rules.max_kinetic:
            reasons[s] = "max_kinetic"
        elif need_d and n > 1 and rules.min_distance is not None and dmin[s] < rules.min_distance:
            reasons[s] = "min_distance"
        elif need_d and n > 1 and rules.max_distance is not None and dmax[s] > rules.max_distance:
            reasons[s] = "max_distance"
        elif rules.min_energy is not None and E[s] < rules.min_energy:
            reasons[s] = "min_energy"
    return reasons


def run_md(init: Sequence[Structure], force_fn: ForceFn, masses: np.ndarray, cfg: MDConfig,
           velocities: Optional[np.ndarray] = None, seed: int = 0) -> list:
    """Integrate a batch of same-composition structures; returns one Trajectory each.

    NVE uses velocity Verlet. NVT uses a single Nose-Hoover thermostat per
    trajectory with half-step splitting of the friction variable.
    """
    x = np.stack([s.positions for s in init]).astype(float)
    cell = init[0].cell
    S, n, _ = x.shape
    masses = np.asarray(masses, dtype=float)
    rng = np.random.default_rng(seed)
    if velocities is None:
        T0 = cfg.temperature if cfg.temperature > 0 else 0.0
        v = maxwell_boltzmann(masses, T0, S, rng, cfg.remove_com) if T0 > 0 else np.zeros_like(x)
    else:
        v = np.array(velocities, dtype=float).reshape(x.shape)
    inv_m = 1.0 / (masses[None, :, None] * MVV2E)
    nvt = cfg.ensemble == "nvt"
    Q = cfg.coupling(n)
    target = cfg.n_dof(n) * KB_KCAL * cfg.temperature
    xi = np.zeros(S)
    half = 0.5 * cfg.dt

    E, F = force_fn(x)
    KE = kinetic_energy(v, masses)
    alive = np.ones(S, dtype=bool)
    stable = np.full(S, cfg.steps)
    reasons: list = [None] * S
    trajs = [Trajectory(cfg.steps, cfg.dt, cfg.steps, None) for _ in range(S)]

    def record(step, idx):
        for s in idx:
            t = trajs[s]
            t.frame_steps.append(step)
            t.positions.append(x[s].copy())
            t.velocities.append(v[s].copy())
            t.energies.append(float(E[s]))
            t.kinetic.append(float(KE[s]))

    def check(step):
        bad = _violations(cfg.rules, x, E, KE, cell)
        for s in np.flatnonzero(alive):
            if bad[s] is not None:
                alive[s] = False
                stable[s] = step
                reasons[s] = bad[s]

    check(0)
    record(0, range(S))
    for step in range(1, cfg.steps + 1):
        if not alive.any():
            break
        a = alive[:, None, None]
        vn = v
        if nvt:
            xi = np.where(alive, xi + half * (2 * KE - target) / Q, xi)
            vn = vn * np.exp(-xi * half)[:, None, None]
        vn = vn + half * F * inv_m
        xn = x + cfg.dt * vn
        with np.errstate(all="ignore"):
            En, Fn = force_fn(np.where(a, xn, x))
        vn = vn + half * np.where(a, Fn, 0.0) * inv_m
        if nvt:
            vn = vn * np.exp(-xi * half)[:, None, None]
            KEn = kinetic_energy(vn, masses)
            xi = np.where(alive, xi + half * (2 * KEn - target) / Q, xi)
        else:
            with np.errstate(all="ignore"):
                KEn = kinetic_energy(vn, masses)
        x = np.where(a, xn, x)
        v = np.where(a, vn, v)
        E = np.where(alive, En, E)
        F = np.where(a, Fn, F)
        KE = np.where(alive, KEn, KE)
        was_alive = alive.copy()
        check(step)
        if step % cfg.stride == 0:
            record(step, np.flatnonzero(was_alive))
        else:
            # keep the frame where a trajectory failed
            record(step, np.flatnonzero(was_alive & ~alive))
    for s, t in enumerate(trajs):
        t.stable_steps = int(stable[s])
        t.reason = reasons[s]
    return trajs


def stability_fraction(trajs: Sequence[Trajectory]):
    """(fraction of complete trajectories, mean stable time in fs)."""
    if not trajs:
        raise ValueError("no trajectories")
    frac = sum(t.stable_steps == t.steps for t in trajs) / len(trajs)
    return frac, float(np.mean([t.stable_steps * t.dt for t in trajs]))


def write_xyz(path, traj: Trajectory, atomic_numbers, step_offset: int = 0) -> None:
    """Extended-XYZ frames; the comment line carries energy, kinetic energy and step."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    syms = [SYMBOLS.get(int(z), f"X{int(z)}") for z in atomic_numbers]
    with path.open("w") as fh:
        for k, step in enumerate(traj.frame_steps):
            fh.write(f"{len(syms)}\n")
            fh.write(f'Properties=species:S:1:pos:R:3:vel:R:3 energy={traj.energies[k]!r} '
                     f'kinetic_energy={traj.kinetic[k]!r} step={step + step_offset} time={step * traj.dt!r}\n')
            for sym, r, vel in zip(syms, traj.positions[k], traj.velocities[k]):
                fh.write(f"{sym} {r[0]:.10f} {r[1]:.10f} {r[2]:.10f} {vel[0]:.10e} {vel[1]:.10e} {vel[2]:.10e}\n")


def summary(trajs: Sequence[Trajectory], cfg: MDConfig, n_atoms: int, extra: Optional[dict] = None) -> dict:
    frac, mean_t = stability_fraction(trajs)
    reasons: dict = {}
    for t in trajs:
        reasons[t.reason or "stable"] = reasons.get(t.reason or "stable", 0) + 1
    out = {"stable_fraction": frac, "mean_stable_time_fs": mean_t, "n_trajectories": len(trajs),
           "stable_steps": [t.stable_steps for t in trajs], "reasons": [t.reason for t in trajs],
           "reason_counts": reasons, "config": cfg.to_dict(), "Q": cfg.coupling(n_atoms),
           "n_dof": cfg.n_dof(n_atoms)}
    out.update(extra or {})
    return out


def write_summary(path, data: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)
