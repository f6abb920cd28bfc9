"""Adversarial sampling: gradient ascent on Boltzmann-weighted uncertainty.

For a perturbed structure x the objective is ``p(x) U(x)`` with
``p(x) = exp(-E_hat(x)/kT) / sum_train exp(-E/kT)``. Positive uncertainties
are ascended on ``log p + log U``; the mixture NLL, which can be negative, on
``log p + U``. Every step moves each structure a fixed distance along its
normalized gradient.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from . import diffcore as dc
from .diffcore import NumericFailure, Tensor
from .structures import KB_KCAL, Structure, read_jsonl, write_jsonl
from .uq import uncertainty_tensor

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-300


@dataclass
class AdversarialConfig:
    temperature: float = 300.0   # K
    lr: float = 0.01             # A per step
    steps: int = 60
    n_seeds: int = 40
    init_scale: float = 0.01     # A
    dedup: float = 0.05          # A, RMSD threshold in select_batch
    scheme: str = "ensemble"
    pooling: str = "mean"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0 (0 is a no-op)")

    @classmethod
    def from_dict(cls, d: dict) -> "AdversarialConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class AdversarialResult:
    seed_id: str
    structure: Structure
    trace: list                      # p * U after 0..steps updates
    objective_trace: list            # ascended surrogate after 0..steps updates
    p: float
    U: float
    energy: float
    stalled: bool = False
    failure: Optional[str] = None

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "structure"}
        d["structure"] = self.structure.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdversarialResult":
        d = dict(d)
        d["structure"] = Structure.from_dict(d["structure"])
        return cls(**d)


def write_results(path, results: Sequence[AdversarialResult]) -> None:
    write_jsonl(path, results)


def read_results(path) -> list:
    return [AdversarialResult.from_dict(d) for d in read_jsonl(path)]


# -- Boltzmann weight ---------------------------------------------------------------

def _log_partition(train_energies, T: float) -> float:
    e = np.asarray(train_energies, dtype=float)
    if e.size == 0:
        raise ValueError("training energies are empty")
    if not np.isfinite(e).all():
        raise ValueError("training energies contain non-finite values")
    return float(logsumexp(-e / (KB_KCAL * T)))


def log_boltzmann_prob(E_hat, train_energies, T: float):
    if T <= 0:
        raise ValueError("temperature must be positive")
    E_hat = np.asarray(E_hat, dtype=float)
    if np.isnan(E_hat).any():
        raise ValueError("predicted energy is NaN")
    return -E_hat / (KB_KCAL * T) - _log_partition(train_energies, T)


def boltzmann_prob(E_hat, train_energies, T: float):
    """exp(-E_hat/kT) / sum_train exp(-E/kT), evaluated in log space."""
    out = np.exp(log_boltzmann_prob(E_hat, train_energies, T))
    return float(out) if np.ndim(out) == 0 else out


# -- scorers ------------------------------------------------------------------------

Scorer = Callable[[Tensor], tuple]   # positions (S, n, 3) -> (U (S,), E_hat (S,))


def model_scorer(scheme: str, m, atomic_numbers, cell=None, g=None, pooling: str = "mean") -> Scorer:
    def score(pos: Tensor):
        return uncertainty_tensor(scheme, m, atomic_numbers, pos, cell, g, pooling)
    return score


def surrogate(U: Tensor, E: Tensor, log_z: float, kT: float, positive_u: bool) -> Tensor:
    log_p = E * (-1.0 / kT) - log_z
    return log_p + (dc.log(U + LOG_FLOOR) if positive_u else U)


def objective_and_grad(scorer: Scorer, positions: np.ndarray, log_z: float, kT: float, positive_u: bool):
    pos = Tensor(np.asarray(positions, dtype=float), requires_grad=True)
    U, E = scorer(pos)
    J = surrogate(U, E, log_z, kT, positive_u)
    g = dc.grad(J.sum(), pos)
    return J.data.copy(), U.data.copy(), E.data.copy(), g.data


def adversarial_ascend(seeds: Sequence[Structure], scorer: Scorer, train_energies,
                       cfg: AdversarialConfig, positive_u: bool = True, seed: int = 0) -> list:
    """Ascend a batch of same-composition seed structures in parallel."""
    if not seeds:
        return []
    first = seeds[0]
    rng = np.random.default_rng(seed)
    x = np.stack([s.positions for s in seeds]).astype(float)
    x = x + rng.normal(scale=cfg.init_scale, size=x.shape) if cfg.init_scale > 0 else x
    kT = KB_KCAL * cfg.temperature
    log_z = _log_partition(train_energies, cfg.temperature)
    S = len(seeds)
    traces = [[] for _ in range(S)]
    obj_traces = [[] for _ in range(S)]
    moved = np.zeros(S, dtype=bool)
    failure = None
    J = U = E = None
    for step in range(cfg.steps + 1):
        try:
            J, U, E, g = objective_and_grad(scorer, x, log_z, kT, positive_u)
        except NumericFailure as exc:
            failure = f"numeric failure at step {step}: {exc}"
            log.warning("adversarial ascent stopped: %s", failure)
            break
        pU = np.exp(-E / kT - log_z) * U
        for i in range(S):
            traces[i].append(float(pU[i]))
            obj_traces[i].append(float(J[i]))
        if step == cfg.steps:
            break
        norms = np.sqrt((g ** 2).reshape(S, -1).sum(1))
        live = norms > 0
        moved |= live & (cfg.lr > 0)
        step_vec = np.zeros_like(g)
        step_vec[live] = g[live] / norms[live, None, None]
        x = x + cfg.lr * step_vec
    results = []
    for i, s in enumerate(seeds):
        if not traces[i]:
            traces[i], obj_traces[i] = [float("nan")], [float("-inf")]
        res = AdversarialResult(
            seed_id=s.id, structure=Structure(first.atomic_numbers, x[i], first.cell, f"{s.id}-adv"),
            trace=traces[i], objective_trace=obj_traces[i],
            p=float(np.exp(-E[i] / kT - log_z)) if E is not None else float("nan"),
            U=float(U[i]) if U is not None else float("nan"),
            energy=float(E[i]) if E is not None else float("nan"),
            stalled=not moved[i] and cfg.lr > 0, failure=failure)
        results.append(res)
    return results


# -- selection ----------------------------------------------------------------------

def rmsd(a: np.ndarray, b: np.ndarray, cell: Optional[np.ndarray] = None) -> float:
    d = np.asarray(a) - np.asarray(b)
    if cell is not None:
        d = d - np.round(d @ np.linalg.inv(cell)) @ cell
    return float(np.sqrt((d ** 2).sum(-1).mean()))


def select_batch(results: Sequence[AdversarialResult], k: int, threshold: float) -> list:
    """Greedy top-k by final objective, skipping near duplicates (RMSD < threshold)."""
    if k > len(results):
        raise ValueError(f"cannot select {k} of {len(results)} results")
    order = sorted(range(len(results)), key=lambda i: (-results[i].objective, i))
    chosen: list = []
    for i in order:
        if len(chosen) == k:
            break
        s = results[i].structure
        if not np.isfinite(results[i].objective) or not np.isfinite(s.positions).all():
            continue
        if all(rmsd(s.positions, results[j].structure.positions, s.cell) >= threshold
               for j in chosen
               if results[j].structure.n_atoms == s.n_atoms):
            chosen.append(i)
    if len(chosen) < k:
        log.warning("only %d of %d requested adversarial samples survived deduplication", len(chosen), k)
    return [results[i].structure for i in chosen]


def random_batch(seeds: Sequence[Structure], k: int, scale: float, seed: int = 0) -> list:
    """Random-acquisition baseline: isotropic Gaussian perturbations of random seeds."""
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(seeds), size=k, replace=len(seeds) < k)
    out = []
    for j, i in enumerate(picks):
        s = seeds[i]
        out.append(s.copy(positions=s.positions + rng.normal(scale=scale, size=s.positions.shape),
                          id=f"{s.id}-rnd{j}"))
    return out
