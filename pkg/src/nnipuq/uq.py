"""Scalar uncertainties per structure for the four schemes.

Numeric versions work on prediction arrays; the ``*_tensor`` versions are
differentiable with respect to atomic positions and feed adversarial
sampling.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .gmm import GmmModel
from .potential import ModelBundle, PotentialOutput, energy_and_forces, fast_predict, forward

SCHEMES = ("ensemble", "mve", "evidential", "gmm")
HEAD_FOR_SCHEME = {"ensemble": "standard", "mve": "mve", "evidential": "evidential", "gmm": "standard"}


class InsufficientMembers(ValueError):
    pass


class SchemeMismatch(ValueError):
    pass


class EvidentialDomainError(ValueError):
    pass


@dataclass
class UncertaintyRecord:
    structure_id: str
    scheme: str
    U: float
    aux1: float = float("nan")  # ensemble: energy variance; evidential: aleatoric
    aux2: float = float("nan")


def write_records(path, records: Sequence[UncertaintyRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["structure_id", "scheme", "U", "aux1", "aux2"])
        for r in records:
            w.writerow([r.structure_id, r.scheme, repr(float(r.U)), repr(float(r.aux1)), repr(float(r.aux2))])


def read_records(path) -> list:
    with open(path, newline="") as fh:
        return [UncertaintyRecord(row["structure_id"], row["scheme"], float(row["U"]),
                                  float(row["aux1"]), float(row["aux2"]))
                for row in csv.DictReader(fh)]


# -- numeric ------------------------------------------------------------------------

def ensemble_variances(energies: np.ndarray, forces: np.ndarray):
    """Energy and force variances from member predictions.

    energies (M, S), forces (M, S, n, 3). The force variance averages the
    squared deviation from the member-mean force over the 3n components and
    sums over members with the M - 1 divisor.
    """
    energies = np.asarray(energies, dtype=float)
    forces = np.asarray(forces, dtype=float)
    M = energies.shape[0]
    if M < 2:
        raise InsufficientMembers(f"ensemble uncertainty needs at least 2 members, got {M}")
    # centering on member 0 keeps identical members at exactly zero spread
    de = energies - energies[0]
    var_e = ((de - de.mean(0)) ** 2).sum(0) / (M - 1)
    df = forces - forces[0]
    dev = df - df.mean(0)
    S = forces.shape[1]
    var_f = (dev ** 2).reshape(M, S, -1).mean(-1).sum(0) / (M - 1)
    return var_e, var_f


def ensemble_uncertainty(outputs: Sequence[PotentialOutput]):
    """(sigma^2_E, sigma^2_F) per structure from one output per member."""
    if len(outputs) < 2:
        raise InsufficientMembers(f"ensemble uncertainty needs at least 2 members, got {len(outputs)}")
    return ensemble_variances(np.stack([o.energy for o in outputs]), np.stack([o.forces for o in outputs]))


def mve_uncertainty(output: PotentialOutput, pooling: str = "mean") -> np.ndarray:
    if output.variance is None:
        raise SchemeMismatch("output has no variance head (model head is not mve)")
    v = np.asarray(output.variance, dtype=float)
    return v.max(-1) if pooling == "max" else v.mean(-1)


def evidential_terms(nu, alpha, beta):
    """(aleatoric, epistemic) = (beta / (alpha - 1), beta / (nu (alpha - 1)))."""
    nu, alpha, beta = (np.asarray(x, dtype=float) for x in (nu, alpha, beta))
    if (alpha <= 1).any():
        raise EvidentialDomainError("alpha must exceed 1")
    if (nu <= 0).any() or (beta < 0).any():
        raise EvidentialDomainError("nu must be positive and beta non-negative")
    alea = beta / (alpha - 1)
    return alea, alea / nu


def evidential_uncertainty(output: PotentialOutput):
    if output.nig is None:
        raise SchemeMismatch("output has no evidential head")
    nig = np.atleast_2d(output.nig)
    return evidential_terms(nig[:, 1], nig[:, 2], nig[:, 3])


def gmm_uncertainty(g: GmmModel, output: PotentialOutput, pooling: str = "mean") -> np.ndarray:
    """Per-structure NLL of the atomic latent vectors (mean over atoms by default)."""
    lat = np.asarray(output.latent, dtype=float)
    S, n, D = lat.shape
    nll = g.nll(lat.reshape(S * n, D)).reshape(S, n)
    return nll.max(-1) if pooling == "max" else nll.mean(-1)


# -- differentiable -----------------------------------------------------------------

def uncertainty_tensor(scheme: str, m: ModelBundle, atomic_numbers, pos: Tensor, cell=None,
                       g: Optional[GmmModel] = None, pooling: str = "mean"):
    """Differentiable (U, predicted energy) for a batch of positions (S, n, 3).

    The predicted energy is the member mean for ensembles.
    """
    S, n, _ = pos.shape
    z = np.asarray(atomic_numbers)
    if scheme == "ensemble":
        if m.n_members < 2:
            raise InsufficientMembers("ensemble scheme needs at least 2 members")
        energies, forces = [], []
        for k in range(m.n_members):
            out, f, _ = energy_and_forces(m, k, z, None, cell, create_graph=True, pos=pos)
            energies.append(out["energy"])
            forces.append(f)
        Fm = dc.stack(forces, axis=0)
        M = m.n_members
        dev = Fm - Fm.mean(0)
        U = (dev * dev).reshape(M, S, n * 3).mean(-1).sum(0) * (1.0 / (M - 1))
        return U, dc.stack(energies, 0).mean(0)

    theta = Tensor(m.members[0].values)
    out = forward(m, theta, z, pos, cell, m.members[0])
    if scheme == "mve":
        if m.head != "mve":
            raise SchemeMismatch(f"mve scheme needs an mve head, model has {m.head!r}")
        v = out["variance"]
        U = _pool(v, pooling)
    elif scheme == "evidential":
        if m.head != "evidential":
            raise SchemeMismatch(f"evidential scheme needs an evidential head, model has {m.head!r}")
        U = out["beta"] / (out["nu"] * (out["alpha"] - 1.0))
    elif scheme == "gmm":
        if g is None:
            raise ValueError("gmm scheme needs a fitted mixture")
        lat = out["latent"].reshape(S * n, m.latent_dim)
        U = _pool(g.nll_tensor(lat).reshape(S, n), pooling)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return U, out["energy"]


def _pool(x: Tensor, pooling: str) -> Tensor:
    if pooling == "max":
        # smooth enough for ascent: log-sum-exp with a sharp temperature
        return dc.logsumexp(x * 50.0, axis=-1) * (1.0 / 50.0)
    return x.mean(-1)


# -- batch evaluation ---------------------------------------------------------------

@dataclass
class SchemePrediction:
    energy: np.ndarray    # (S,) member mean for ensembles
    forces: np.ndarray    # (S, n, 3)
    U: np.ndarray         # (S,)
    aux1: np.ndarray
    aux2: np.ndarray
    member_forces: Optional[np.ndarray] = None


def predict_scheme(scheme: str, m: ModelBundle, atomic_numbers, positions, cell=None,
                   g: Optional[GmmModel] = None, pooling: str = "mean") -> SchemePrediction:
    """Predictions and uncertainty for a same-composition batch (S, n, 3)."""
    out = fast_predict(m, atomic_numbers, positions, cell)
    S = out["energy"].shape[1]
    nan = np.full(S, np.nan)
    if scheme == "ensemble":
        var_e, var_f = ensemble_variances(out["energy"], out["forces"])
        return SchemePrediction(out["energy"].mean(0), out["forces"].mean(0), var_f, var_e, nan,
                                out["forces"])
    energy, forces = out["energy"][0], out["forces"][0]
    po = PotentialOutput(energy, forces, out["latent"][0])
    if scheme == "mve":
        if m.head != "mve":
            raise SchemeMismatch(f"mve scheme needs an mve head, model has {m.head!r}")
        po.variance = out["variance"][0]
        return SchemePrediction(energy, forces, mve_uncertainty(po, pooling), nan, nan)
    if scheme == "evidential":
        if m.head != "evidential":
            raise SchemeMismatch(f"evidential scheme needs an evidential head, model has {m.head!r}")
        alea, epi = evidential_terms(out["nu"][0], out["alpha"][0], out["beta"][0])
        return SchemePrediction(energy, forces, epi, alea, nan)
    if scheme == "gmm":
        if g is None:
            raise ValueError("gmm scheme needs a fitted mixture")
        return SchemePrediction(energy, forces, gmm_uncertainty(g, po, pooling), nan, nan)
    raise ValueError(f"unknown scheme {scheme!r}")


def predict_structures(scheme: str, m: ModelBundle, structures, g: Optional[GmmModel] = None,
                       pooling: str = "mean") -> list:
    """Per-structure (energy, forces, UncertaintyRecord) for a mixed list."""
    results = [None] * len(structures)
    groups: dict = {}
    for i, s in enumerate(structures):
        key = (s.composition_key(), None if s.cell is None else s.cell.tobytes())
        groups.setdefault(key, []).append(i)
    for idx in groups.values():
        first = structures[idx[0]]
        pos = np.stack([structures[i].positions for i in idx])
        p = predict_scheme(scheme, m, first.atomic_numbers, pos, first.cell, g, pooling)
        for k, i in enumerate(idx):
            rec = UncertaintyRecord(structures[i].id, scheme, float(p.U[k]), float(p.aux1[k]), float(p.aux2[k]))
            results[i] = (float(p.energy[k]), p.forces[k], rec)
    return results
