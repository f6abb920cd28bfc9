"""Full-covariance Gaussian mixtures fitted by EM with k-means initialization."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from . import diffcore as dc
from .diffcore import Tensor

log = logging.getLogger(__name__)

GMM_VERSION = 1
LOG_2PI = np.log(2 * np.pi)


class GmmFitError(RuntimeError):
    def __init__(self, msg: str, iteration: int = -1):
        self.iteration = iteration
        super().__init__(f"{msg} (iteration {iteration})")


class DimensionMismatch(ValueError):
    pass


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray        # (K, D)
    covariances: np.ndarray  # (K, D, D)
    loglik_trace: list = field(default_factory=list)
    n_iter: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covariances = np.asarray(self.covariances, dtype=float).reshape(
            len(self.weights), self.means.shape[1], self.means.shape[1])
        self._chol = None

    @property
    def K(self) -> int:
        return len(self.weights)

    @property
    def D(self) -> int:
        return self.means.shape[1]

    def n_params(self) -> int:
        K, D = self.K, self.D
        return K - 1 + K * D + K * D * (D + 1) // 2

    def _cholesky(self):
        if self._chol is None:
            L = np.linalg.cholesky(self.covariances)
            Linv = np.linalg.inv(L)
            logdet = 2 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(1)
            self._chol = (L, Linv, logdet)
        return self._chol

    def component_log_density(self, X: np.ndarray) -> np.ndarray:
        """log(pi_k N(x | mu_k, Sigma_k)) for every point and component, (N, K)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.D:
            raise DimensionMismatch(f"points have dimension {X.shape[1]}, mixture has {self.D}")
        _, Linv, logdet = self._cholesky()
        out = np.empty((len(X), self.K))
        for k in range(self.K):
            y = (X - self.means[k]) @ Linv[k].T
            out[:, k] = np.log(self.weights[k]) - 0.5 * ((y * y).sum(1) + logdet[k] + self.D * LOG_2PI)
        return out

    def log_prob(self, X) -> np.ndarray:
        return logsumexp(self.component_log_density(X), axis=1)

    def nll(self, X) -> np.ndarray:
        return -self.log_prob(X)

    def nll_tensor(self, xi: Tensor) -> Tensor:
        """Differentiable per-point NLL of an (N, D) tensor."""
        if xi.shape[-1] != self.D:
            raise DimensionMismatch(f"latent width {xi.shape[-1]} does not match mixture dimension {self.D}")
        _, Linv, logdet = self._cholesky()
        terms = []
        for k in range(self.K):
            y = (xi - self.means[k]) @ Linv[k].T
            const = np.log(self.weights[k]) - 0.5 * (logdet[k] + self.D * LOG_2PI)
            terms.append((y * y).sum(-1) * -0.5 + const)
        stacked = dc.stack(terms, axis=-1)
        return -dc.logsumexp(stacked, axis=-1)

    def loglik(self, X) -> float:
        return float(self.log_prob(X).sum())

    def bic(self, X) -> float:
        X = np.atleast_2d(X)
        return -2.0 * self.loglik(X) + self.n_params() * np.log(len(X))

    def predict(self, X) -> np.ndarray:
        return self.component_log_density(X).argmax(1)

    def to_dict(self) -> dict:
        return {"version": GMM_VERSION, "K": self.K, "D": self.D,
                "weights": self.weights.tolist(), "means": self.means.tolist(),
                "covariances": [c.ravel().tolist() for c in self.covariances],
                "loglik_trace": list(self.loglik_trace), "n_iter": self.n_iter}

    @classmethod
    def from_dict(cls, d: dict) -> "GmmModel":
        if d.get("version") != GMM_VERSION:
            raise ValueError(f"unsupported mixture version {d.get('version')}")
        K, D = d["K"], d["D"]
        cov = np.array(d["covariances"], dtype=float).reshape(K, D, D)
        return cls(d["weights"], np.array(d["means"]).reshape(K, D), cov,
                   list(d.get("loglik_trace", [])), d.get("n_iter", 0))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "GmmModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _sqdist(X, C):
    return (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :]


def kmeans_init(points, K: int, seed: int = 0, max_iter: int = 300) -> np.ndarray:
    """k-means++ seeding followed by Lloyd iterations until assignments settle."""
    X = np.atleast_2d(np.asarray(points, dtype=float))
    N = len(X)
    if K < 1 or N < K:
        raise ValueError(f"need at least K={K} points, got {N}")
    rng = np.random.default_rng(seed)
    C = np.empty((K, X.shape[1]))
    C[0] = X[rng.integers(N)]
    d2 = _sqdist(X, C[:1]).min(1).clip(min=0)
    for k in range(1, K):
        total = d2.sum()
        idx = rng.choice(N, p=d2 / total) if total > 0 else rng.integers(N)
        C[k] = X[idx]
        d2 = np.minimum(d2, _sqdist(X, C[k:k + 1])[:, 0].clip(min=0))

    labels = None
    for _ in range(max_iter):
        new = _sqdist(X, C).argmin(1)
        if labels is not None and (new == labels).all():
            break
        labels = new
        for k in range(K):
            members = X[labels == k]
            if len(members):
                C[k] = members.mean(0)
            else:
                # empty cluster: move it to the point farthest from its centroid
                far = _sqdist(X, C).min(1).argmax()
                C[k] = X[far]
    return C


def _m_step(X, resp, eps: float, it: int):
    Nk = resp.sum(0) + 1e-300
    weights = Nk / len(X)
    means = (resp.T @ X) / Nk[:, None]
    D = X.shape[1]
    cov = np.empty((len(Nk), D, D))
    for k in range(len(Nk)):
        diff = X - means[k]
        c = (resp[:, k, None] * diff).T @ diff / Nk[k]
        cov[k] = 0.5 * (c + c.T) + eps * np.eye(D)
        try:
            np.linalg.cholesky(cov[k])
        except np.linalg.LinAlgError:
            raise GmmFitError(f"covariance of component {k} is singular", it) from None
    return weights, means, cov


def _penalty(g: GmmModel, eps: float) -> np.ndarray:
    _, Linv, _ = g._cholesky()
    return -0.5 * eps * (Linv ** 2).sum(axis=(1, 2))   # -eps/2 tr(Sigma_k^-1)


def em_fit(points, K: int, seed: int = 0, tol: float = 1e-6, max_iter: int = 500,
           reg: float = 1e-6) -> GmmModel:
    """EM for a full-covariance mixture; stops when the mean objective gain < tol.

    Covariances get ``eps = reg * trace(cov(X)) / D`` added to the diagonal.
    With a fixed eps that M-step is the exact maximizer of the log-likelihood
    penalized by ``-eps/2 * sum_i sum_k r_ik tr(Sigma_k^-1)``, so EM is
    monotone in that objective, which is what ``loglik_trace`` records.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    X = np.atleast_2d(np.asarray(points, dtype=float))
    N, D = X.shape
    if N <= K * D:
        warnings.warn(f"only {N} points for K={K} components in D={D}; covariances will lean on regularization")
    spread = float(np.trace(np.atleast_2d(np.cov(X.T, bias=True)))) / D if N > 1 else 0.0
    eps = reg * spread if spread > 0 else reg
    C = kmeans_init(X, K, seed)
    labels = _sqdist(X, C).argmin(1)
    resp = np.zeros((N, K))
    resp[np.arange(N), labels] = 1.0
    weights, means, cov = _m_step(X, resp, eps, 0)
    g = GmmModel(weights, means, cov)
    prev = -np.inf
    for it in range(1, max_iter + 1):
        comp = g.component_log_density(X) + _penalty(g, eps)
        lse = logsumexp(comp, axis=1)
        ll = float(lse.sum())
        g.loglik_trace.append(ll)
        if ll / N - prev < tol:
            break
        prev = ll / N
        resp = np.exp(comp - lse[:, None])
        weights, means, cov = _m_step(X, resp, eps, it)
        g = GmmModel(weights, means, cov, g.loglik_trace, it)
    return g


def select_K(points, candidates: Sequence[int], seed: int = 0, max_points: int = 50000,
             silhouette_samples: int = 2000, **fit_kw):
    """Choose K by BIC and silhouette.

    The chosen K is the smallest candidate whose BIC lies within 2% of the best
    BIC and whose silhouette is at least 0.9 of the best silhouette. K=1 has no
    silhouette and is not excluded by that test.
    Returns ``(K, fitted model, table)``.
    """
    from sklearn.metrics import silhouette_score

    if not candidates:
        raise ValueError("no candidate K values")
    X = np.atleast_2d(np.asarray(points, dtype=float))
    rng = np.random.default_rng(seed)
    if len(X) > max_points:
        X = X[rng.choice(len(X), max_points, replace=False)]
    table, fits = [], {}
    for K in sorted(set(int(k) for k in candidates)):
        row = {"K": K, "bic": None, "silhouette": None, "loglik": None, "error": None}
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                g = em_fit(X, K, seed, **fit_kw)
        except (GmmFitError, ValueError) as exc:
            row["error"] = str(exc)
            table.append(row)
            continue
        fits[K] = g
        row["bic"] = g.bic(X)
        row["loglik"] = g.loglik(X)
        labels = g.predict(X)
        if K > 1 and len(np.unique(labels)) > 1:
            n_sil = min(silhouette_samples, len(X))
            row["silhouette"] = float(silhouette_score(X, labels, sample_size=n_sil, random_state=seed))
        table.append(row)
    ok = [r for r in table if r["error"] is None]
    if not ok:
        raise GmmFitError("every candidate fit failed")
    best_bic = min(r["bic"] for r in ok)
    sils = [r["silhouette"] for r in ok if r["silhouette"] is not None]
    best_sil = max(sils) if sils else None
    chosen = None
    for r in ok:
        near = r["bic"] - best_bic <= 0.02 * abs(best_bic)
        if r["K"] == 1:
            sil_ok = True
        else:
            sil_ok = r["silhouette"] is not None and best_sil is not None and r["silhouette"] >= 0.9 * best_sil
        if near and sil_ok:
            chosen = r["K"]
            break
    if chosen is None:
        chosen = min(ok, key=lambda r: r["bic"])["K"]
    log.info("selected K=%d from %s", chosen, [(r["K"], r["bic"], r["silhouette"]) for r in table])
    return chosen, fits[chosen], table
