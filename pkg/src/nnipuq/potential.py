"""Invariant radial descriptors and MLP potentials with optional UQ heads.

Per-atom features are Gaussian radial basis functions of neighbor distances,
multiplied by a cosine cutoff and summed per neighbor species, plus a one-hot
of the center species. A tanh MLP maps them to a latent vector per atom; the
atomic energy is a linear readout of that latent vector and the total energy
is the sum over atoms. Forces are the negative position gradient of the
total energy.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import NumericFailure, ParamVector, Tensor
from .structures import Structure

FORMAT_VERSION = 1
HEADS = ("standard", "mve", "evidential")


class EmptyStructure(ValueError):
    pass


class PredictionFailure(NumericFailure):
    def __init__(self, structure_id: str, op: str):
        self.structure_id = structure_id
        super().__init__(op, f"structure {structure_id!r}")


@dataclass
class DescriptorConfig:
    cutoff: float = 3.5
    n_basis: int = 10
    r_min: float = 0.5
    width: Optional[float] = None  # Gaussian std in A; default: center spacing
    species: tuple = (1, 7)
    # angular terms 2^(1-zeta) (1 + lambda cos)^zeta exp(-eta (r_ij^2 + r_ik^2)) fc fc,
    # lambda = +-1, summed per neighbor species pair; empty eta disables them
    angular_eta: tuple = (0.05, 0.5)
    angular_zeta: tuple = (1, 4)

    def __post_init__(self):
        if self.cutoff <= 0 or self.n_basis < 1:
            raise ValueError("cutoff must be > 0 and n_basis >= 1")
        self.species = tuple(int(z) for z in self.species)
        self.angular_eta = tuple(float(e) for e in self.angular_eta)
        self.angular_zeta = tuple(int(z) for z in self.angular_zeta)
        if any(z < 1 for z in self.angular_zeta):
            raise ValueError("angular zeta values must be integers >= 1")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(self.r_min, self.cutoff, self.n_basis)

    @property
    def sigma(self) -> float:
        if self.width is not None:
            return float(self.width)
        if self.n_basis == 1:
            return 0.5 * (self.cutoff - self.r_min) or 1.0
        return float((self.cutoff - self.r_min) / (self.n_basis - 1))

    @property
    def species_pairs(self) -> list:
        k = len(self.species)
        return [(a, b) for a in range(k) for b in range(a, k)]

    @property
    def angular_terms(self) -> list:
        """(zeta, lambda) combinations."""
        return [(z, lam) for z in self.angular_zeta for lam in (1.0, -1.0)]

    @property
    def n_radial(self) -> int:
        return self.n_basis * len(self.species)

    @property
    def n_angular(self) -> int:
        if not self.angular_eta:
            return 0
        return len(self.angular_eta) * len(self.angular_terms) * len(self.species_pairs)

    @property
    def n_features(self) -> int:
        return self.n_radial + self.n_angular + len(self.species)

    def to_dict(self) -> dict:
        return {"cutoff": self.cutoff, "n_basis": self.n_basis, "r_min": self.r_min,
                "width": self.width, "species": list(self.species),
                "angular_eta": list(self.angular_eta), "angular_zeta": list(self.angular_zeta)}

    @classmethod
    def from_dict(cls, d: dict) -> "DescriptorConfig":
        d = dict(d)
        d["species"] = tuple(d.get("species", (1, 7)))
        for k in ("angular_eta", "angular_zeta"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _onehot(atomic_numbers: np.ndarray, species: Sequence[int]) -> np.ndarray:
    idx = {z: i for i, z in enumerate(species)}
    oh = np.zeros((len(atomic_numbers), len(species)))
    for a, z in enumerate(atomic_numbers):
        if int(z) not in idx:
            raise ValueError(f"atomic number {z} not in descriptor species {tuple(species)}")
        oh[a, idx[int(z)]] = 1.0
    return oh


def _pair_projector(oh: np.ndarray, pairs: list) -> np.ndarray:
    """(n, n, P) weights selecting unordered neighbor species pairs."""
    P = np.zeros((len(oh), len(oh), len(pairs)))
    for p, (a, b) in enumerate(pairs):
        P[:, :, p] = np.outer(oh[:, a], oh[:, b])
        if a != b:
            P[:, :, p] += np.outer(oh[:, b], oh[:, a])
    return P * (1.0 - np.eye(len(oh)))[..., None]


def featurize_tensor(pos: Tensor, atomic_numbers: np.ndarray, cfg: DescriptorConfig,
                     cell: Optional[np.ndarray] = None) -> Tensor:
    """Batched features: positions (S, n, 3) -> (S, n, F)."""
    S, n, _ = pos.shape
    if n == 0:
        raise EmptyStructure("structure has no atoms")
    diff = pos.reshape(S, n, 1, 3) - pos.reshape(S, 1, n, 3)
    if cell is not None:
        frac = np.round(diff.data @ np.linalg.inv(cell))
        diff = diff - Tensor(frac @ cell)
    eye = np.eye(n)
    r = dc.sqrt((diff * diff).sum(-1) + eye)
    inside = (r.data < cfg.cutoff) & (eye == 0)
    fc = (dc.cos(r * (np.pi / cfg.cutoff)) + 1.0) * (0.5 * inside)
    d = r.reshape(S, n, n, 1) - cfg.centers
    g = dc.exp(d * d * (-0.5 / cfg.sigma ** 2)) * fc.reshape(S, n, n, 1)
    oh = _onehot(atomic_numbers, cfg.species)
    radial = g.transpose(0, 1, 3, 2) @ oh  # (S, n, B, n_species)
    parts = [radial.reshape(S, n, cfg.n_radial)]
    if cfg.n_angular:
        parts.append(_angular_tensor(diff, r, fc, oh, cfg))
    parts.append(Tensor(np.broadcast_to(oh, (S, n, len(cfg.species)))))
    return dc.concatenate(parts, axis=-1)


def _angular_tensor(diff: Tensor, r: Tensor, fc: Tensor, oh: np.ndarray, cfg: DescriptorConfig) -> Tensor:
    S, n = r.shape[0], r.shape[1]
    eta = np.array(cfg.angular_eta)
    E, terms = len(eta), cfg.angular_terms
    # diff[s, i, j] = x_i - x_j, so the dot products of bond vectors from i are unchanged
    dot = diff @ diff.transpose(0, 1, 3, 2)              # (S, n, n, n)
    rr = r.reshape(S, n, n, 1) * r.reshape(S, n, 1, n)
    c = dot / rr
    R = dc.exp((r * r).reshape(S, n, n, 1) * (-eta)) * fc.reshape(S, n, n, 1)   # (S, n, n, E)
    RR = R.reshape(S, n, n, 1, E) * R.reshape(S, n, 1, n, E)                  # (S, n, j, k, E)
    A = []
    for zeta, lam in terms:
        base = c * lam + 1.0
        A.append(dc.power(base, zeta) * 2.0 ** (1 - zeta))
    A = dc.stack(A, axis=-1)                                                  # (S, n, j, k, Z)
    T = RR.reshape(S, n, n, n, E, 1) * A.reshape(S, n, n, n, 1, len(terms))
    T = T.reshape(S, n, n * n, E * len(terms)).transpose(0, 1, 3, 2)
    P = _pair_projector(oh, cfg.species_pairs).reshape(n * n, -1)
    return (T @ P).reshape(S, n, cfg.n_angular)


def featurize(s: Structure, cfg: DescriptorConfig) -> np.ndarray:
    """Per-atom invariant feature matrix (n, F) of one structure."""
    if s.n_atoms == 0:
        raise EmptyStructure("structure has no atoms")
    with dc.no_record():
        x = featurize_tensor(Tensor(s.positions[None]), s.atomic_numbers, cfg, s.cell)
    return x.data[0]


@dataclass
class ModelBundle:
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)
    hidden: tuple = (32, 32)
    latent_dim: int = 16
    head: str = "standard"
    members: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    energy_shift: float = 0.0   # per atom, kcal/mol
    energy_scale: float = 1.0   # kcal/mol
    force_scale: float = 1.0    # kcal/mol/A
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        self.hidden = tuple(int(h) for h in self.hidden)

    @property
    def n_members(self) -> int:
        return len(self.members)

    def layer_shapes(self) -> list:
        sizes = [self.descriptor.n_features, *self.hidden, self.latent_dim]
        shapes = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes += [(f"W{i}", (a, b)), (f"b{i}", (b,))]
        shapes += [("w_energy", (self.latent_dim, 1)), ("b_energy", (1,))]
        if self.head == "mve":
            shapes += [("w_var", (self.latent_dim, 1)), ("b_var", (1,))]
        elif self.head == "evidential":
            shapes += [("w_nig", (self.latent_dim, 3)), ("b_nig", (3,))]
        return shapes

    def init_member(self, seed: int) -> ParamVector:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, seeded."""
        rng = np.random.default_rng(seed)
        shapes = self.layer_shapes()
        pv = ParamVector.from_shapes(shapes)
        fan_in = 1
        for name, shp in shapes:
            # biases follow their weight matrix in layer_shapes
            if len(shp) == 2:
                fan_in = shp[0]
            bound = 1.0 / np.sqrt(fan_in)
            pv.set_segment(name, rng.uniform(-bound, bound, size=shp))
        return pv

    def initialize(self, n_members: int, seeds: Sequence[int]) -> "ModelBundle":
        if len(seeds) != n_members:
            raise ValueError("need one seed per member")
        self.seeds = [int(s) for s in seeds]
        self.members = [self.init_member(s) for s in self.seeds]
        return self

    def set_normalization(self, samples) -> None:
        """Energy shift per atom and output scales from labeled data."""
        e_per_atom = np.array([s.energy / s.structure.n_atoms for s in samples])
        f = np.concatenate([s.forces.ravel() for s in samples])
        self.energy_shift = float(e_per_atom.mean())
        rms = float(np.sqrt(np.mean(f ** 2))) if f.size else 0.0
        self.force_scale = rms if rms > 1e-8 else 1.0
        self.energy_scale = self.force_scale

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layer_shapes())

    # -- serialization -------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "descriptor": self.descriptor.to_dict(),
            "architecture": {"hidden": list(self.hidden), "latent_dim": self.latent_dim},
            "head": self.head,
            "normalization": {"energy_shift": self.energy_shift, "energy_scale": self.energy_scale,
                              "force_scale": self.force_scale},
            "seeds": list(self.seeds),
            "members": [
                {name: base64.b64encode(pv.segment(name).astype("<f8").tobytes()).decode("ascii")
                 for name, _ in self.layer_shapes()}
                for pv in self.members
            ],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelBundle":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {d.get('format_version')}")
        desc = d["descriptor"]
        norm = d["normalization"]
        m = cls(DescriptorConfig.from_dict(desc),
                tuple(d["architecture"]["hidden"]), d["architecture"]["latent_dim"], d["head"],
                seeds=list(d.get("seeds", [])), energy_shift=norm["energy_shift"],
                energy_scale=norm["energy_scale"], force_scale=norm["force_scale"],
                meta=d.get("meta", {}))
        for seg in d["members"]:
            pv = ParamVector.from_shapes(m.layer_shapes())
            for name, shp in m.layer_shapes():
                pv.set_segment(name, np.frombuffer(base64.b64decode(seg[name]), dtype="<f8").reshape(shp))
            m.members.append(pv)
        return m

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class PotentialOutput:
    energy: np.ndarray        # (S,)
    forces: np.ndarray        # (S, n, 3)
    latent: np.ndarray        # (S, n, D)
    variance: Optional[np.ndarray] = None   # (S, n), mve head
    nig: Optional[np.ndarray] = None        # (S, 4): gamma_E, nu, alpha, beta


def forward(m: ModelBundle, theta: Tensor, atomic_numbers: np.ndarray, pos: Tensor,
            cell: Optional[np.ndarray] = None, layout: Optional[ParamVector] = None) -> dict:
    """Differentiable energy, latent features and head extras for a batch."""
    S, n, _ = pos.shape
    layout = layout or ParamVector.from_shapes(m.layer_shapes())
    p = layout.views(theta)
    x = featurize_tensor(pos, atomic_numbers, m.descriptor, cell)
    h = x.reshape(S * n, m.descriptor.n_features)
    n_layers = len(m.hidden) + 1
    for i in range(n_layers):
        h = dc.tanh(h @ p[f"W{i}"] + p[f"b{i}"])
    latent = h
    e_atom = (latent @ p["w_energy"] + p["b_energy"]).reshape(S, n)
    energy = e_atom.sum(1) * m.energy_scale + n * m.energy_shift
    out = {"energy": energy, "latent": latent.reshape(S, n, m.latent_dim)}
    if m.head == "mve":
        raw = (latent @ p["w_var"] + p["b_var"]).reshape(S, n)
        out["variance"] = dc.softplus(raw) * (m.force_scale ** 2)
    elif m.head == "evidential":
        pooled = latent.reshape(S, n, m.latent_dim).mean(1)
        raw = pooled @ p["w_nig"] + p["b_nig"]
        out["nu"] = dc.softplus(raw[:, 0])
        out["alpha"] = dc.softplus(raw[:, 1]) + 1.0
        out["beta"] = dc.softplus(raw[:, 2]) * (m.energy_scale ** 2)
    return out


def energy_and_forces(m: ModelBundle, member: int, atomic_numbers, positions,
                      cell=None, create_graph: bool = False, theta: Optional[Tensor] = None,
                      pos: Optional[Tensor] = None) -> tuple:
    """Graph-level forward pass returning (outputs dict, forces tensor, position tensor)."""
    if pos is None:
        pos = Tensor(np.asarray(positions, dtype=np.float64), requires_grad=True)
    if theta is None:
        theta = Tensor(m.members[member].values)
    out = forward(m, theta, np.asarray(atomic_numbers), pos, cell, m.members[member])
    forces = -dc.grad(out["energy"].sum(), pos, create_graph=create_graph)
    return out, forces, pos


def predict_batch(m: ModelBundle, member: int, atomic_numbers, positions, cell=None,
                  ids: Sequence[str] = ()) -> PotentialOutput:
    """Numeric predictions for a batch of same-composition structures (S, n, 3)."""
    if member >= m.n_members:
        raise IndexError(f"member {member} out of range for {m.n_members} members")
    positions = np.asarray(positions, dtype=np.float64)
    try:
        out, forces, _ = energy_and_forces(m, member, atomic_numbers, positions, cell)
    except NumericFailure as exc:
        sid = ids[0] if len(ids) == 1 else (",".join(ids[:3]) + ("..." if len(ids) > 3 else ""))
        raise PredictionFailure(sid or "<batch>", exc.op) from exc
    res = PotentialOutput(out["energy"].data.copy(), forces.data.copy(), out["latent"].data.copy())
    if m.head == "mve":
        res.variance = out["variance"].data.copy()
    elif m.head == "evidential":
        res.nig = np.stack([out["energy"].data, out["nu"].data, out["alpha"].data, out["beta"].data], axis=1)
    return res


def predict(s: Structure, m: ModelBundle, member: int = 0) -> PotentialOutput:
    """Predictions for one structure; arrays keep a leading batch axis of 1."""
    if s.n_atoms == 0:
        raise EmptyStructure("structure has no atoms")
    return predict_batch(m, member, s.atomic_numbers, s.positions[None], s.cell, ids=[s.id])


def predict_samples(m: ModelBundle, member: int, structures: Sequence[Structure]) -> list:
    """Predict many structures, batching those that share composition and cell."""
    results: list = [None] * len(structures)
    groups: dict = {}
    for i, s in enumerate(structures):
        key = (s.composition_key(), None if s.cell is None else s.cell.tobytes())
        groups.setdefault(key, []).append(i)
    for key, idx in groups.items():
        first = structures[idx[0]]
        pos = np.stack([structures[i].positions for i in idx])
        out = predict_batch(m, member, first.atomic_numbers, pos, first.cell, ids=[structures[i].id for i in idx])
        for k, i in enumerate(idx):
            results[i] = PotentialOutput(
                out.energy[k:k + 1], out.forces[k:k + 1], out.latent[k:k + 1],
                None if out.variance is None else out.variance[k:k + 1],
                None if out.nig is None else out.nig[k:k + 1])
    return results


def _stacked_weights(m: ModelBundle, members: Sequence[int]) -> dict:
    cache = m.__dict__.setdefault("_stack_cache", {})
    key = (tuple(members), tuple(id(m.members[i]) for i in members),
           tuple(float(m.members[i].values.sum()) for i in members))
    if cache.get("key") != key:
        cache.clear()
        cache["key"] = key
        cache["w"] = {name: np.stack([m.members[i].segment(name) for i in members])
                      for name, _ in m.layer_shapes()}
    return cache["w"]


def fast_energy_forces(m: ModelBundle, atomic_numbers, positions, cell=None,
                       members: Optional[Sequence[int]] = None):
    """Energy (M, S) and forces (M, S, n, 3) for several members at once."""
    out = fast_predict(m, atomic_numbers, positions, cell, members)
    return out["energy"], out["forces"]


def _softplus(x):
    return np.logaddexp(0.0, x)


def fast_predict(m: ModelBundle, atomic_numbers, positions, cell=None,
                 members: Optional[Sequence[int]] = None, check: bool = True) -> dict:
    """Numeric predictions for several members at once, without graph recording.

    A hand-written first-derivative path used for molecular dynamics and bulk
    inference; it must agree with :func:`energy_and_forces` to rounding.
    Arrays carry a leading member axis: energy (M, S), forces (M, S, n, 3),
    latent (M, S, n, D) and, per head, variance (M, S, n) or nu/alpha/beta (M, S).
    With ``check=False`` non-finite values are returned instead of raising.
    """
    members = list(range(m.n_members)) if members is None else list(members)
    pos = np.asarray(positions, dtype=np.float64)
    S, n, _ = pos.shape
    cfg = m.descriptor
    W = _stacked_weights(m, members)
    M = len(members)
    nsp = len(cfg.species)
    oh = _onehot(atomic_numbers, cfg.species)

    diff = pos[:, :, None, :] - pos[:, None, :, :]
    if cell is not None:
        diff = diff - np.round(diff @ np.linalg.inv(cell)) @ cell
    eye = np.eye(n)
    r = np.sqrt((diff ** 2).sum(-1) + eye)
    inside = (r < cfg.cutoff) & (eye == 0)
    arg = np.pi / cfg.cutoff
    fc = 0.5 * (np.cos(r * arg) + 1.0) * inside
    dfc = -0.5 * arg * np.sin(r * arg) * inside
    d = r[..., None] - cfg.centers
    inv_s2 = 1.0 / cfg.sigma ** 2
    gauss = np.exp(-0.5 * inv_s2 * d * d)
    g = gauss * fc[..., None]
    dg = gauss * (dfc[..., None] - inv_s2 * d * fc[..., None])
    parts = [np.einsum("sijb,jc->sibc", g, oh).reshape(S, n, cfg.n_radial)]
    if cfg.n_angular:
        ang = _AngularTerms(diff, r, fc, dfc, oh, cfg)
        parts.append(ang.features)
    parts.append(np.broadcast_to(oh, (S, n, nsp)))
    X = np.concatenate(parts, axis=-1).reshape(S * n, -1)

    n_layers = len(m.hidden) + 1
    hs = [np.broadcast_to(X, (M,) + X.shape)]
    for i in range(n_layers):
        hs.append(np.tanh(hs[-1] @ W[f"W{i}"] + W[f"b{i}"][:, None, :]))
    e_atom = (hs[-1] @ W["w_energy"])[..., 0] + W["b_energy"]
    energy = e_atom.reshape(M, S, n).sum(-1) * m.energy_scale + n * m.energy_shift
    if check and not np.isfinite(energy).all():
        raise NumericFailure("fast_predict")
    latent = hs[-1].reshape(M, S, n, m.latent_dim)
    out = {"energy": energy, "latent": latent}
    if m.head == "mve":
        raw = (hs[-1] @ W["w_var"])[..., 0] + W["b_var"]
        out["variance"] = _softplus(raw).reshape(M, S, n) * m.force_scale ** 2
    elif m.head == "evidential":
        raw = latent.mean(2) @ W["w_nig"] + W["b_nig"][:, None, :]
        out["nu"] = _softplus(raw[..., 0])
        out["alpha"] = _softplus(raw[..., 1]) + 1.0
        out["beta"] = _softplus(raw[..., 2]) * m.energy_scale ** 2

    dh = np.broadcast_to(m.energy_scale * W["w_energy"].transpose(0, 2, 1), (M, S * n, m.latent_dim))
    for i in reversed(range(n_layers)):
        da = dh * (1.0 - hs[i + 1] ** 2)
        dh = da @ W[f"W{i}"].transpose(0, 2, 1)
    dX = dh.reshape(M, S, n, -1)
    dG = np.einsum("msibc,jc->msijb", dX[..., : cfg.n_radial].reshape(M, S, n, cfg.n_basis, nsp), oh)
    C = (dG * dg[None]).sum(-1)  # dE/dr_ij seen from center i
    grad = np.zeros((M, S, n, 3))
    if cfg.n_angular:
        dA = dX[..., cfg.n_radial: cfg.n_radial + cfg.n_angular]
        C_ang, G = ang.backward(dA)
        C = C + C_ang
        # G[i, j] = dE/d(x_i - x_j) for the angular cosines
        grad += G.sum(3) - G.sum(2)
    C = C + C.transpose(0, 1, 3, 2)
    grad += np.einsum("msij,sijk->msik", C / r[None], diff)
    out["forces"] = -grad
    return out


class _AngularTerms:
    """Angular features and their hand-derived backward pass."""

    def __init__(self, diff, r, fc, dfc, oh, cfg: DescriptorConfig):
        S, n = r.shape[:2]
        eta = np.array(cfg.angular_eta)
        self.terms = cfg.angular_terms
        self.diff, self.r = diff, r
        self.rr = r[:, :, :, None] * r[:, :, None, :]
        self.c = np.einsum("sijx,sikx->sijk", diff, diff) / self.rr
        ex = np.exp(-(r * r)[..., None] * eta)
        self.R = ex * fc[..., None]                                  # (S, n, n, E)
        self.dR = ex * (dfc[..., None] - 2.0 * eta * (r * fc)[..., None])
        self.A = np.stack([2.0 ** (1 - z) * (1.0 + lam * self.c) ** z for z, lam in self.terms], -1)
        self.dAdc = np.stack([2.0 ** (1 - z) * z * lam * (1.0 + lam * self.c) ** (z - 1)
                              for z, lam in self.terms], -1)         # (S, n, j, k, Z)
        self.P = _pair_projector(oh, cfg.species_pairs)              # (j, k, P)
        self.shape = (S, n, len(eta), len(self.terms), self.P.shape[-1])
        RR = self.R[:, :, :, None, :] * self.R[:, :, None, :, :]     # (S, n, j, k, E)
        self.RR = RR
        self.features = np.einsum("sijke,sijkz,jkp->siezp", RR, self.A, self.P).reshape(S, n, -1)

    def backward(self, dF):
        """dF (M, S, n, F_ang) -> (dE/dr_ij from center i, dE/d diff_ij)."""
        S, n, E, Z, Pn = self.shape
        M = dF.shape[0]
        dF = dF.reshape(M, S, n, E, Z, Pn)
        dT = np.einsum("msiezp,jkp->msijkez", dF, self.P)          # (M, S, i, j, k, E, Z)
        # derivative through the cosine
        dc_ = np.einsum("msijkez,sijke,sijkz->msijk", dT, self.RR, self.dAdc)
        # derivative through the radial factors; T symmetric in (j, k)
        dRj = np.einsum("msijkez,sijkz,sike->msije", dT, self.A, self.R)
        C = 2.0 * (dRj * self.dR[None]).sum(-1)
        # cos_ijk = d_ij . d_ik / (r_ij r_ik), with d_ij = diff[:, i, j]
        w = dc_ / self.rr[None]
        G = 2.0 * (np.einsum("msijk,sikx->msijx", w, self.diff)
                   - (dc_ * self.c[None]).sum(-1)[..., None] * self.diff[None] / (self.r ** 2)[None, ..., None])
        return C, G
