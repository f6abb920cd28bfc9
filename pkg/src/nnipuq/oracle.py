"""Analytic ground-truth potentials and dataset generation.

Two toy systems stand in for electronic-structure labels:

``inversion_molecule``
    A central atom bonded to three satellites. Energy is the sum of harmonic
    bonds, an in-plane term that keeps the satellite triangle equilateral, and
    a quartic double well ``a (h^2 - h0^2)^2`` in the signed height ``h`` of the
    central atom above the satellite plane. The two pyramidal minima sit at
    ``E = 0`` and the planar transition state at ``E = B = a h0^4``.

``pair_cluster``
    Identical atoms interacting through a shifted-force Morse well, offset so
    the lowest minimum found by a seeded multistart search is zero.

Forces are derived by hand so they can serve as an independent check of the
autodiff engine.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from .structures import KB_KCAL, MVV2E, LabeledSample, Structure, mass_of

log = logging.getLogger(__name__)

INVERSION_DEFAULTS = {
    "barrier": 20.0,          # kcal/mol
    "bond_length": 1.0,       # A
    "bond_stiffness": 300.0,  # kcal/mol/A^2, E = k (r - r0)^2
    "height": 0.38,           # A, out-of-plane equilibrium height
    "angle_stiffness": 40.0,  # kcal/mol, E = k (cos(phi) + 1/2)^2
    "central_z": 7,
    "satellite_z": 1,
}

PAIR_DEFAULTS = {
    "n_atoms": 8,
    "well_depth": 2.0,     # kcal/mol
    "width": 1.5,          # 1/A
    "r_eq": 2.5,           # A
    "cutoff": 5.0,         # A
    "species_z": 18,
}


class SpeciesMismatch(ValueError):
    pass


@dataclass
class OracleSpec:
    kind: str = "inversion_molecule"
    params: dict = field(default_factory=dict)
    masses: dict = field(default_factory=dict)  # atomic number -> amu

    def __post_init__(self):
        if self.kind == "inversion_molecule":
            merged = dict(INVERSION_DEFAULTS)
        elif self.kind == "pair_cluster":
            merged = dict(PAIR_DEFAULTS)
        else:
            raise ValueError(f"unknown oracle kind {self.kind!r}")
        merged.update(self.params)
        self.params = merged
        p = self.params
        if self.kind == "inversion_molecule":
            if p["barrier"] <= 0 or p["bond_stiffness"] <= 0 or p["angle_stiffness"] <= 0 or p["height"] <= 0:
                raise ValueError("barrier, stiffnesses and height must be positive")
        else:
            if p["well_depth"] <= 0 or p["width"] <= 0 or p["cutoff"] <= p["r_eq"]:
                raise ValueError("pair potential parameters out of range")
        for z in self.species:
            self.masses.setdefault(int(z), mass_of(z))

    @property
    def species(self) -> tuple:
        if self.kind == "inversion_molecule":
            return tuple(sorted({int(self.params["central_z"]), int(self.params["satellite_z"])}))
        return (int(self.params["species_z"]),)

    @property
    def atomic_numbers(self) -> np.ndarray:
        p = self.params
        if self.kind == "inversion_molecule":
            return np.array([p["central_z"]] + [p["satellite_z"]] * 3, dtype=np.int64)
        return np.full(int(p["n_atoms"]), int(p["species_z"]), dtype=np.int64)

    @property
    def energy_scale(self) -> float:
        """Barrier height for the molecule, cohesive energy for the cluster."""
        if self.kind == "inversion_molecule":
            return float(self.params["barrier"])
        return -_pair_minimum(_pair_key(self.params))[0]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params),
                "masses": {str(k): v for k, v in self.masses.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "OracleSpec":
        masses = {int(k): float(v) for k, v in (d.get("masses") or {}).items()}
        return cls(d.get("kind", "inversion_molecule"), dict(d.get("params") or {}), masses)

    # -- evaluation ---------------------------------------------------------------
    def energy_forces(self, positions: np.ndarray):
        """Batched evaluation: positions (S, n, 3) or (n, 3)."""
        pos = np.asarray(positions, dtype=np.float64)
        single = pos.ndim == 2
        if single:
            pos = pos[None]
        if self.kind == "inversion_molecule":
            e, f = _inversion_energy_forces(pos, self.params)
        else:
            e, f = _pair_energy_forces(pos, self.params)
            e = e - _pair_minimum(_pair_key(self.params))[0]
        return (e[0], f[0]) if single else (e, f)

    def equilibrium(self) -> Structure:
        if self.kind == "inversion_molecule":
            return Structure(self.atomic_numbers, inversion_geometry(self.params, 1.0), id="equilibrium")
        return Structure(self.atomic_numbers, _pair_minimum(_pair_key(self.params))[1], id="equilibrium")

    def transition_state(self) -> Structure:
        if self.kind != "inversion_molecule":
            raise ValueError("transition state only defined for the inversion molecule")
        return Structure(self.atomic_numbers, inversion_geometry(self.params, 0.0), id="transition")

    def mass_array(self, atomic_numbers) -> np.ndarray:
        return np.array([self.masses[int(z)] for z in atomic_numbers])


def inversion_geometry(params: dict, height_fraction: float) -> np.ndarray:
    """Symmetric geometry with the central atom at ``height_fraction * h0``.

    Bonds keep their equilibrium length, so the satellite ring shrinks as the
    central atom rises.
    """
    r0, h0 = params["bond_length"], params["height"]
    h = height_fraction * h0
    rho = np.sqrt(r0 ** 2 - h ** 2)
    ang = np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    sats = np.stack([rho * np.cos(ang), rho * np.sin(ang), np.zeros(3)], axis=1)
    return np.vstack([[0.0, 0.0, h], sats])


def oracle_eval(s: Structure, spec: OracleSpec):
    """Energy (kcal/mol) and forces (kcal/mol/A) of one structure."""
    expected = spec.atomic_numbers
    if spec.kind == "inversion_molecule":
        if s.n_atoms != 4 or tuple(s.atomic_numbers) != tuple(expected):
            raise SpeciesMismatch(f"structure {s.id!r} does not match the inversion molecule species {tuple(expected)}")
    elif not set(int(z) for z in s.atomic_numbers) <= set(spec.species):
        raise SpeciesMismatch(f"structure {s.id!r} has species outside the registry {spec.species}")
    return spec.energy_forces(s.positions)


def _inversion_energy_forces(pos: np.ndarray, p: dict):
    kb, r0 = p["bond_stiffness"], p["bond_length"]
    kphi = p["angle_stiffness"]
    h0 = p["height"]
    a_dw = p["barrier"] / h0 ** 4

    c = pos[:, 0]
    s = pos[:, 1:]
    grad = np.zeros_like(pos)

    # bonds
    b = s - c[:, None]
    r = np.linalg.norm(b, axis=-1)
    energy = kb * ((r - r0) ** 2).sum(-1)
    gb = (2 * kb * (r - r0) / r)[..., None] * b
    grad[:, 1:] += gb
    grad[:, 0] -= gb.sum(1)

    # in-plane equilateral term on vectors from the satellite centroid
    g = s.mean(1)
    u = s - g[:, None]
    un = np.linalg.norm(u, axis=-1)
    gu = np.zeros_like(u)
    for i, j in ((0, 1), (0, 2), (1, 2)):
        ui, uj = u[:, i], u[:, j]
        ni, nj = un[:, i], un[:, j]
        cphi = (ui * uj).sum(-1) / (ni * nj)
        energy = energy + kphi * (cphi + 0.5) ** 2
        pre = (2 * kphi * (cphi + 0.5))[:, None]
        gu[:, i] += pre * (uj / (ni * nj)[:, None] - (cphi / ni ** 2)[:, None] * ui)
        gu[:, j] += pre * (ui / (ni * nj)[:, None] - (cphi / nj ** 2)[:, None] * uj)
    grad[:, 1:] += gu - gu.mean(1, keepdims=True)

    # out-of-plane double well
    av = s[:, 1] - s[:, 0]
    bv = s[:, 2] - s[:, 0]
    m = np.cross(av, bv)
    mn = np.linalg.norm(m, axis=-1)
    n = m / mn[:, None]
    d = c - g
    h = (d * n).sum(-1)
    energy = energy + a_dw * (h ** 2 - h0 ** 2) ** 2
    dEdh = (4 * a_dw * h * (h ** 2 - h0 ** 2))[:, None]
    w = (d - h[:, None] * n) / mn[:, None]
    bxw = np.cross(bv, w)
    wxa = np.cross(w, av)
    grad[:, 0] += dEdh * n
    grad[:, 1:] += (dEdh * (-n / 3.0))[:, None, :]
    grad[:, 2] += dEdh * bxw
    grad[:, 3] += dEdh * wxa
    grad[:, 1] -= dEdh * (bxw + wxa)
    return energy, -grad


def _pair_terms(r: np.ndarray, p: dict):
    D, a, re, rc = p["well_depth"], p["width"], p["r_eq"], p["cutoff"]

    def phi(x):
        ex = np.exp(-a * (x - re))
        return D * (ex * ex - 2 * ex)

    def dphi(x):
        ex = np.exp(-a * (x - re))
        return D * (-2 * a * ex * ex + 2 * a * ex)

    inside = r < rc
    val = np.where(inside, phi(r) - phi(rc) - (r - rc) * dphi(rc), 0.0)
    der = np.where(inside, dphi(r) - dphi(rc), 0.0)
    return val, der


def _pair_energy_forces(pos: np.ndarray, p: dict):
    S, n, _ = pos.shape
    diff = pos[:, :, None, :] - pos[:, None, :, :]
    r = np.sqrt((diff ** 2).sum(-1) + np.eye(n))
    val, der = _pair_terms(r, p)
    off = 1.0 - np.eye(n)
    energy = 0.5 * (val * off).sum((1, 2))
    coef = (der * off / r)[..., None]
    grad = (coef * diff).sum(2)
    return energy, -grad


def _pair_key(p: dict) -> tuple:
    return tuple(float(p[k]) for k in ("n_atoms", "well_depth", "width", "r_eq", "cutoff"))


@functools.lru_cache(maxsize=16)
def _pair_minimum(key: tuple):
    """Lowest local minimum over a seeded multistart search."""
    n_atoms, D, a, re, rc = key
    n = int(n_atoms)
    p = {"well_depth": D, "width": a, "r_eq": re, "cutoff": rc}
    rng = np.random.default_rng(12345)

    def fun(x):
        e, f = _pair_energy_forces(x.reshape(1, n, 3), p)
        return e[0], -f[0].ravel()

    best = (np.inf, None)
    for _ in range(24):
        x0 = rng.normal(scale=0.55 * re * n ** (1 / 3) / 2, size=(n, 3))
        res = minimize(fun, x0.ravel(), jac=True, method="L-BFGS-B", options={"maxiter": 2000, "gtol": 1e-10})
        if res.fun < best[0]:
            best = (float(res.fun), res.x.reshape(n, 3))
    pos = best[1] - best[1].mean(0)
    return best[0], pos


# -- dataset generation -------------------------------------------------------------

def _random_rotation(rng) -> np.ndarray:
    return Rotation.random(random_state=rng.integers(2 ** 31)).as_matrix()


def _maxwell_boltzmann(rng, masses: np.ndarray, T: float, shape) -> np.ndarray:
    sigma = np.sqrt(KB_KCAL * T / (masses * MVV2E))
    v = rng.normal(size=shape) * sigma[None, :, None]
    return v - (v * masses[None, :, None]).sum(1, keepdims=True) / masses.sum()


def generate_initial_dataset(spec: OracleSpec, n: int, T_sample: float = 300.0, seed: int = 0,
                             cap: Optional[float] = None, dt: float = 0.5, stride: int = 20,
                             segment: int = 100, prefix: str = "init") -> list:
    """Frames from short oracle MD in a single well, all below ``cap``.

    Velocities are redrawn from Maxwell-Boltzmann at ``T_sample`` every
    ``segment`` steps, which samples the canonical distribution without a
    thermostat. Frames are recorded every ``stride`` steps.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    cap = spec.energy_scale / 5.0 if cap is None else cap
    rng = np.random.default_rng(seed)
    eq = spec.equilibrium()
    z = eq.atomic_numbers
    masses = spec.mass_array(z)
    pos = eq.positions @ _random_rotation(rng).T
    pos = pos[None]
    e, f = spec.energy_forces(pos)
    samples: list = []
    step = 0
    max_steps = max(200 * n * stride, 20000)
    recorded = 0
    while len(samples) < n:
        if step >= max_steps:
            raise RuntimeError(
                f"only {len(samples)} of {n} frames below the cap {cap:.3g} kcal/mol at T={T_sample} K; "
                "lower T_sample or raise the cap")
        if step % segment == 0:
            vel = _maxwell_boltzmann(rng, masses, T_sample, pos.shape)
        acc = f / (masses[None, :, None] * MVV2E)
        vel = vel + 0.5 * dt * acc
        pos = pos + dt * vel
        e, f = spec.energy_forces(pos)
        vel = vel + 0.5 * dt * f / (masses[None, :, None] * MVV2E)
        step += 1
        if step % stride == 0:
            recorded += 1
            if e[0] < cap and (spec.kind != "inversion_molecule" or _height(pos[0]) > 0):
                sid = f"{prefix}-s{seed}-{len(samples):04d}"
                samples.append(LabeledSample(Structure(z, pos[0].copy(), id=sid), e[0], f[0].copy(), "initial"))
    return samples


def _height(pos: np.ndarray) -> float:
    c, s = pos[0], pos[1:]
    m = np.cross(s[1] - s[0], s[2] - s[0])
    return float((c - s.mean(0)) @ (m / np.linalg.norm(m)))


def generate_test_ladder(spec: OracleSpec, bins: int, per_bin: int, seed: int = 0,
                         ceiling: Optional[float] = None, max_batches: int = 400,
                         batch: int = 512, prefix: str = "ladder") -> list:
    """Structures stratified uniformly by oracle energy over [0, ceiling].

    Candidates are random distortions of the equilibrium geometry (for the
    molecule also displaced along the inversion path, into either well);
    each is accepted only if its energy bin still has room.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    ceiling = 1.2 * spec.energy_scale if ceiling is None else ceiling
    width = ceiling / bins
    if per_bin <= 0:
        return []
    rng = np.random.default_rng(seed)
    eq = spec.equilibrium()
    z = eq.atomic_numbers
    filled = [[] for _ in range(bins)]
    n = len(z)
    for _ in range(max_batches):
        if all(len(b) >= per_bin for b in filled):
            break
        if spec.kind == "inversion_molecule":
            frac = rng.uniform(-1.25, 1.25, size=batch)
            base = np.stack([inversion_geometry(spec.params, np.clip(fr, -0.999, 0.999)) for fr in frac])
            sigma = rng.uniform(0.0, 0.16, size=batch)
        else:
            base = np.repeat(eq.positions[None], batch, axis=0)
            sigma = rng.uniform(0.0, 0.45, size=batch)
        cand = base + rng.normal(size=(batch, n, 3)) * sigma[:, None, None]
        rots = Rotation.random(batch, random_state=rng.integers(2 ** 31)).as_matrix()
        cand = np.einsum("bij,bkj->bki", rots, cand)
        energies, forces = spec.energy_forces(cand)
        for k in range(batch):
            e = energies[k]
            if not (0.0 <= e < ceiling):
                continue
            idx = min(int(e // width), bins - 1)
            if len(filled[idx]) < per_bin:
                filled[idx].append((cand[k], e, forces[k]))
    short = [i for i, b in enumerate(filled) if len(b) < per_bin]
    if short:
        log.warning("test ladder: %d of %d bins left short after the search budget", len(short), bins)
    out = []
    for i, b in enumerate(filled):
        for pos, e, f in b:
            sid = f"{prefix}-s{seed}-{len(out):04d}"
            out.append(LabeledSample(Structure(z, pos, id=sid), e, f, "test"))
    return out
