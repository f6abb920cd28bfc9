"""Losses and the optimization loop for single networks and ensembles.

All losses are computed in normalized units: energies are divided by the
model's ``energy_scale`` and forces (and force variances) by ``force_scale``,
so the same learning rate works across oracles.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import NumericFailure, Tensor
from .potential import ModelBundle, energy_and_forces

log = logging.getLogger(__name__)

LOSS_FOR_HEAD = {"standard": "mse_ef", "mve": "mve_nll", "evidential": "evidential"}


class TrainingFailure(RuntimeError):
    pass


@dataclass
class LossSpec:
    kind: str = "mse_ef"
    rho_e: float = 0.1
    rho_f: float = 1.0
    lam: float = 0.1   # evidence regularizer weight

    def __post_init__(self):
        if self.kind not in LOSS_FOR_HEAD.values():
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if min(self.rho_e, self.rho_f, self.lam) < 0:
            raise ValueError("loss weights must be non-negative")

    def check_head(self, head: str) -> None:
        if LOSS_FOR_HEAD[head] != self.kind:
            raise ValueError(f"loss {self.kind!r} does not match model head {head!r}")

    @classmethod
    def for_head(cls, head: str, **kw) -> "LossSpec":
        return cls(kind=LOSS_FOR_HEAD[head], **kw)


@dataclass
class TrainHyper:
    epochs: int = 1000
    lr: float = 5e-3
    decay_every: int = 250
    decay: float = 0.5
    patience: Optional[int] = 50   # None disables early stopping
    min_epochs: int = 0            # early stopping cannot fire before this epoch
    val_fraction: float = 0.1
    seed: int = 0
    clip_norm: float = 1e3
    beta1: float = 0.9
    beta2: float = 0.999

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHyper":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TrainReport:
    member: int
    seed: int
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    snapshot_id: str = ""
    wall_time: float = 0.0
    clamp_events: list = field(default_factory=list)
    n_train: int = 0
    n_val: int = 0
    error: Optional[str] = None

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


class _Batch:
    """Same-composition samples stacked into arrays."""

    def __init__(self, samples):
        first = samples[0].structure
        self.z = first.atomic_numbers
        self.cell = first.cell
        self.n = first.n_atoms
        self.pos = np.stack([s.structure.positions for s in samples])
        self.energy = np.array([s.energy for s in samples])
        self.forces = np.stack([s.forces for s in samples])

    def __len__(self):
        return len(self.energy)


def make_batches(samples) -> list:
    groups: dict = {}
    for s in samples:
        st = s.structure
        key = (st.composition_key(), None if st.cell is None else st.cell.tobytes())
        groups.setdefault(key, []).append(s)
    return [_Batch(g) for g in groups.values()]


def split_train_val(samples, fraction: float, seed: int):
    """Seeded disjoint split, stratified by provenance.

    The validation size is round(fraction * n) overall, shared among
    provenance groups by largest remainder, so acquired samples are
    represented in validation as well. At least one training sample is kept.
    """
    n = len(samples)
    n_val = int(round(fraction * n)) if n > 1 else 0
    n_val = min(n_val, n - 1)
    groups: dict = {}
    for i, s in enumerate(samples):
        groups.setdefault(getattr(s, "provenance", ""), []).append(i)
    keys = sorted(groups)
    quota = {k: fraction * len(groups[k]) for k in keys}
    take = {k: min(int(np.floor(quota[k])), len(groups[k])) for k in keys}
    left = n_val - sum(take.values())
    for k in sorted(keys, key=lambda k: (-(quota[k] - take[k]), k)):
        if left <= 0:
            break
        if take[k] < len(groups[k]):
            take[k] += 1
            left -= 1
    while sum(take.values()) > n_val:
        k = max(keys, key=lambda k: (take[k], k))
        take[k] -= 1
    rng = np.random.default_rng(seed)
    val = []
    for k in keys:
        idx = np.asarray(groups[k])
        val += idx[rng.permutation(len(idx))[:take[k]]].tolist()
    vset = set(val)
    return [s for i, s in enumerate(samples) if i not in vset], [samples[i] for i in sorted(val)]


# -- losses -------------------------------------------------------------------------

def nig_nll(y, gamma, nu, alpha, beta) -> Tensor:
    """Normal-Inverse-Gamma negative log marginal likelihood, elementwise."""
    omega = beta * (1.0 + nu) * 2.0
    return (0.5 * dc.log(np.pi / nu) - alpha * dc.log(omega)
            + (alpha + 0.5) * dc.log(nu * (y - gamma) ** 2 + omega)
            + dc.lgamma(alpha) - dc.lgamma(alpha + 0.5))


def batch_loss(m: ModelBundle, theta: Tensor, b: _Batch, spec: LossSpec,
               create_graph: bool = True) -> Tensor:
    """Summed (not averaged) loss over the structures of one batch."""
    out, forces, _ = energy_and_forces(m, 0, b.z, b.pos, b.cell, create_graph=create_graph, theta=theta)
    es, fs = m.energy_scale, m.force_scale
    S = len(b)
    df = (forces - b.forces) * (1.0 / fs)
    de = (out["energy"] - b.energy) * (1.0 / es)
    f_sq = (df * df).reshape(S, b.n * 3).mean(1)
    if spec.kind == "mse_ef":
        per = spec.rho_e * de * de * (1.0 / b.n) + spec.rho_f * f_sq
    elif spec.kind == "mve_nll":
        var = out["variance"] * (1.0 / fs ** 2)  # (S, n)
        var3 = var.reshape(S, b.n, 1)
        nll = 0.5 * (dc.log(var3 * (2 * np.pi)) + df * df / var3)
        per = spec.rho_f * nll.reshape(S, b.n * 3).mean(1) + spec.rho_e * de * de * (1.0 / b.n)
    else:
        nu, alpha = out["nu"], out["alpha"]
        beta = out["beta"] * (1.0 / es ** 2)
        y = b.energy / es
        gamma = out["energy"] * (1.0 / es)
        nll = nig_nll(y, gamma, nu, alpha, beta)
        reg = dc.absolute(y - gamma) * (2.0 * nu + alpha)
        per = spec.rho_e * (nll + spec.lam * reg) + spec.rho_f * f_sq
    return per.sum()


def dataset_loss(m: ModelBundle, theta: Tensor, batches: Sequence[_Batch], spec: LossSpec,
                 create_graph: bool = True) -> Tensor:
    total = None
    count = 0
    for b in batches:
        part = batch_loss(m, theta, b, spec, create_graph)
        total = part if total is None else total + part
        count += len(b)
    return total * (1.0 / count)


def loss_and_grad(m: ModelBundle, values: np.ndarray, batches, spec: LossSpec):
    theta = Tensor(values, requires_grad=True)
    loss = dataset_loss(m, theta, batches, spec, create_graph=True)
    return loss.item(), dc.grad_of_grad(loss, theta)


def evaluate_loss(m: ModelBundle, values: np.ndarray, batches, spec: LossSpec) -> float:
    return dataset_loss(m, Tensor(values), batches, spec, create_graph=False).item()


# -- optimizer ----------------------------------------------------------------------

class Adam:
    def __init__(self, n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _snapshot_id(values: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(values, dtype="<f8").tobytes()).hexdigest()[:16]


def train(m: ModelBundle, member: int, data, spec: LossSpec, hp: TrainHyper = None,
          val_data=None) -> TrainReport:
    """Train one member in place; the best-validation parameters are kept.

    If ``val_data`` is None a seeded fraction of ``data`` is held out.
    """
    hp = hp or TrainHyper()
    spec.check_head(m.head)
    if not data:
        raise ValueError("training data is empty")
    if val_data is None:
        train_set, val_set = split_train_val(list(data), hp.val_fraction, hp.seed)
    else:
        train_set, val_set = list(data), list(val_data)
        overlap = {s.id for s in train_set} & {s.id for s in val_set}
        if overlap:
            raise ValueError(f"train and validation sets share ids: {sorted(overlap)[:3]}")
    tb = make_batches(train_set)
    vb = make_batches(val_set) if val_set else None

    pv = m.members[member]
    seed = m.seeds[member] if member < len(m.seeds) else hp.seed
    rep = TrainReport(member=member, seed=int(seed), n_train=len(train_set), n_val=len(val_set))
    t0 = time.perf_counter()

    params = pv.values.copy()
    best = params.copy()
    best_val = np.inf
    since_best = 0
    opt = Adam(params.size, hp.lr, hp.beta1, hp.beta2)
    for epoch in range(hp.epochs):
        if hp.decay_every and epoch and epoch % hp.decay_every == 0:
            opt.lr *= hp.decay
        try:
            loss, g = loss_and_grad(m, params, tb, spec)
            if not np.isfinite(g).all():
                raise NumericFailure("loss gradient")
        except NumericFailure as exc:
            rep.error = f"non-finite value at epoch {epoch}: {exc}"
            log.warning("member %d: %s; keeping last finite snapshot", member, rep.error)
            break
        gnorm = float(np.linalg.norm(g))
        if gnorm > hp.clip_norm:
            g = g * (hp.clip_norm / gnorm)
            rep.clamp_events.append(epoch)
        rep.train_loss.append(loss)
        if vb:
            try:
                vloss = evaluate_loss(m, params, vb, spec)
            except NumericFailure:
                vloss = np.inf
        else:
            vloss = loss
        rep.val_loss.append(vloss)
        if vloss < best_val:
            best_val, best, rep.best_epoch, since_best = vloss, params.copy(), epoch, 0
        else:
            since_best += 1
            if hp.patience is not None and since_best >= hp.patience and epoch >= hp.min_epochs:
                break
        params = opt.step(params, g)
    if not rep.train_loss:
        rep.error = rep.error or "no finite epoch"
    if not np.isfinite(best_val) and not np.isfinite(params).all():
        best = pv.values.copy()
    pv.values[:] = best
    rep.snapshot_id = _snapshot_id(best)
    rep.wall_time = time.perf_counter() - t0
    if rep.clamp_events:
        log.info("member %d: gradient clamped in %d epochs", member, len(rep.clamp_events))
    return rep


def train_ensemble(m: ModelBundle, data, spec: LossSpec, hp: TrainHyper = None) -> list:
    """Train every member sequentially with its own initialization seed.

    Members whose training failed are dropped as long as two survive.
    """
    hp = hp or TrainHyper()
    if m.n_members < 2:
        raise ValueError("an ensemble needs at least two members")
    reports = [train(m, k, data, spec, hp) for k in range(m.n_members)]
    failed = [r.member for r in reports if r.error]
    if failed:
        if m.n_members - len(failed) < 2:
            raise TrainingFailure(f"ensemble members {failed} failed; fewer than two survive")
        log.warning("dropping failed ensemble members %s", failed)
        m.members = [pv for k, pv in enumerate(m.members) if k not in failed]
        m.seeds = [s for k, s in enumerate(m.seeds) if k not in failed]
    return reports
