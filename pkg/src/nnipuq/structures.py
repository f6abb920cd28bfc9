"""Atomic configurations, labeled samples and JSON-lines persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

# Boltzmann constant in kcal/mol/K.
KB_KCAL = 0.0019872043
# 1 amu * A^2 / fs^2 expressed in kcal/mol.
MVV2E = 2390.057361

ATOMIC_MASSES = {
    1: 1.008, 2: 4.0026, 3: 6.94, 6: 12.011, 7: 14.007, 8: 15.999, 9: 18.998,
    10: 20.180, 11: 22.990, 14: 28.085, 15: 30.974, 16: 32.06, 17: 35.45, 18: 39.948,
}


def mass_of(z: int, registry: Optional[dict] = None) -> float:
    if registry and z in registry:
        return float(registry[z])
    try:
        return ATOMIC_MASSES[int(z)]
    except KeyError:
        raise KeyError(f"no mass known for atomic number {z}") from None


@dataclass
class Structure:
    atomic_numbers: np.ndarray
    positions: np.ndarray
    cell: Optional[np.ndarray] = None
    id: str = ""

    def __post_init__(self):
        self.atomic_numbers = np.asarray(self.atomic_numbers, dtype=np.int64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.cell is not None:
            self.cell = np.asarray(self.cell, dtype=np.float64).reshape(3, 3)
        if len(self.atomic_numbers) != len(self.positions):
            raise ValueError("atomic_numbers and positions disagree in length")
        if (self.atomic_numbers <= 0).any():
            raise ValueError("atomic numbers must be positive")

    @property
    def n_atoms(self) -> int:
        return len(self.atomic_numbers)

    def copy(self, positions=None, id=None) -> "Structure":
        return Structure(self.atomic_numbers.copy(),
                         self.positions.copy() if positions is None else np.array(positions, dtype=float),
                         None if self.cell is None else self.cell.copy(),
                         self.id if id is None else id)

    def composition_key(self) -> tuple:
        return tuple(int(z) for z in self.atomic_numbers)

    def to_dict(self) -> dict:
        d = {"id": self.id,
             "atomic_numbers": self.atomic_numbers.tolist(),
             "positions": self.positions.tolist()}
        if self.cell is not None:
            d["cell"] = self.cell.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Structure":
        return cls(d["atomic_numbers"], d["positions"], d.get("cell"), d.get("id", ""))


@dataclass
class LabeledSample:
    structure: Structure
    energy: float
    forces: np.ndarray
    provenance: str = "initial"

    def __post_init__(self):
        self.energy = float(self.energy)
        self.forces = np.asarray(self.forces, dtype=np.float64).reshape(-1, 3)

    @property
    def id(self) -> str:
        return self.structure.id

    def to_dict(self) -> dict:
        d = self.structure.to_dict()
        d.update(energy=self.energy, forces=self.forces.tolist(), provenance=self.provenance)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LabeledSample":
        return cls(Structure.from_dict(d), d["energy"], d["forces"], d.get("provenance", "initial"))


def write_jsonl(path, records: Iterable) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            obj = rec.to_dict() if hasattr(rec, "to_dict") else rec
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def read_jsonl(path) -> list:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_samples(path, samples: Iterable[LabeledSample]) -> None:
    write_jsonl(path, samples)


def read_samples(path) -> list:
    return [LabeledSample.from_dict(d) for d in read_jsonl(path)]


def group_by_composition(items: list, key=lambda s: s.structure.composition_key()) -> dict:
    groups: dict = {}
    for i, item in enumerate(items):
        groups.setdefault(key(item), []).append(i)
    return groups


def pair_distances(positions: np.ndarray, cell: Optional[np.ndarray] = None) -> np.ndarray:
    """All pairwise distances of an (n, 3) array, minimum image if a cell is given."""
    diff = positions[:, None, :] - positions[None, :, :]
    if cell is not None:
        frac = diff @ np.linalg.inv(cell)
        diff = diff - np.round(frac) @ cell
    return np.sqrt((diff ** 2).sum(-1))
