"""Uncertainty evaluation metrics: rank correlation, ROC-AUC, calibration.

``U`` is a predicted uncertainty per structure and ``eps`` the true error.
Calibration-type metrics treat ``U`` as a variance of Gaussian errors and
consume signed error components, each paired with its structure's ``U``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, stats

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2 * np.pi))
VAR_FLOOR = 1e-12


class UndefinedMetric(ValueError):
    pass


class CalibrationError(RuntimeError):
    def __init__(self, msg: str, trace=None):
        self.trace = trace or []
        super().__init__(msg)


@dataclass
class EvalPair:
    structure_id: str
    U: float
    eps: float
    eps_signed: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.eps_signed = np.asarray(self.eps_signed, dtype=float).ravel()
        if not (np.isfinite(self.U) and np.isfinite(self.eps)) or self.eps < 0:
            raise ValueError(f"pair {self.structure_id!r}: U and eps must be finite and eps >= 0")


def write_pairs(path, pairs: Sequence[EvalPair]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    width = max((p.eps_signed.size for p in pairs), default=0)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["structure_id", "U", "eps"] + [f"eps_signed_{i}" for i in range(width)])
        for p in pairs:
            w.writerow([p.structure_id, repr(float(p.U)), repr(float(p.eps))]
                       + [repr(float(x)) for x in p.eps_signed])


def read_pairs(path) -> list:
    pairs = []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows)
        if header[:3] != ["structure_id", "U", "eps"]:
            raise ValueError(f"{path}: expected header structure_id,U,eps[,eps_signed...]")
        for row in rows:
            if not row:
                continue
            signed = [float(x) for x in row[3:] if x != ""]
            pairs.append(EvalPair(row[0], float(row[1]), float(row[2]), signed))
    return pairs


# -- ranking metrics ----------------------------------------------------------------

def spearman(U, eps) -> float:
    """Pearson correlation of average ranks."""
    U, eps = np.asarray(U, dtype=float), np.asarray(eps, dtype=float)
    if U.size < 2:
        raise UndefinedMetric("spearman needs at least two pairs")
    ru, re = stats.rankdata(U), stats.rankdata(eps)
    ru, re = ru - ru.mean(), re - re.mean()
    den = np.sqrt((ru * ru).sum() * (re * re).sum())
    if den == 0:
        raise UndefinedMetric("spearman undefined: U or eps has no rank variance")
    return float(np.clip((ru * re).sum() / den, -1.0, 1.0))


def error_threshold(eps, percentile: float = 20.0) -> float:
    return float(np.percentile(np.asarray(eps, dtype=float), percentile))


def roc_auc(U, eps, percentile: float = 20.0) -> float:
    """AUC for flagging pairs with eps above the given error percentile.

    Equals the probability that a random high-error pair has larger U than a
    random low-error pair, ties counting one half.
    """
    U, eps = np.asarray(U, dtype=float), np.asarray(eps, dtype=float)
    pos = eps > error_threshold(eps, percentile)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("roc_auc undefined: thresholding left a single class")
    ranks = stats.rankdata(U)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# -- calibration --------------------------------------------------------------------

def calibration_curve(var, err, n_grid: int = 100):
    """Expected vs observed coverage of two-sided Gaussian intervals."""
    var, err = np.asarray(var, dtype=float), np.asarray(err, dtype=float)
    p = np.linspace(0.0, 1.0, n_grid)
    with np.errstate(over="ignore"):
        z = stats.norm.ppf(0.5 + 0.5 * p)
    ratio = np.abs(err) / np.sqrt(var)
    observed = (ratio[None, :] <= z[:, None]).mean(1)
    return p, observed


def miscalibration_area(var, err, n_grid: int = 100) -> float:
    """Area between the observed coverage curve and the diagonal."""
    var = np.asarray(var, dtype=float)
    if var.size < 10:
        raise UndefinedMetric("miscalibration area needs at least 10 pairs")
    if (var <= 0).any():
        raise ValueError("miscalibration area needs positive U; calibrate or offset the uncertainties first")
    p, obs = calibration_curve(var, err, n_grid)
    return float(np.trapezoid(np.abs(obs - p), p))


def gaussian_nll_sum(var, err2) -> float:
    var = np.asarray(var, dtype=float)
    return float(0.5 * np.sum(LOG_2PI + np.log(var) + np.asarray(err2) / var))


@dataclass
class Calibration:
    a: float
    b: float
    objective: float
    boundary_hit: bool = False
    starts: int = 0
    trace: list = field(default_factory=list)

    def variance(self, U) -> np.ndarray:
        return np.maximum(self.a * np.asarray(U, dtype=float) + self.b, VAR_FLOOR)

    def to_dict(self) -> dict:
        return asdict(self)


def calibrate(U, err2) -> Calibration:
    """Fit var = a U + b by minimizing the Gaussian NLL of validation errors.

    Optimized over (log a, log b) with Powell's method from a 3 x 3 grid of
    starts; b is floored at 1e-12 and the two closed-form fallbacks
    (a, b) = (1, 0) and (0, mean err^2) are kept if they are better.
    """
    U, err2 = np.asarray(U, dtype=float), np.asarray(err2, dtype=float)
    if U.size < 2:
        raise CalibrationError("calibration needs at least two validation pairs")
    if (U < 0).any():
        raise ValueError("calibration needs U >= 0; offset the uncertainties first")
    lo = np.log(VAR_FLOOR)

    def obj(a, b):
        v = a * U + b
        if (v <= 0).any():
            return np.inf
        return gaussian_nll_sum(v, err2)

    def f(x):
        return obj(np.exp(x[0]), np.exp(x[1]))

    mean_e2 = float(err2.mean())
    mean_u = float(U.mean())
    s_b = mean_e2 if mean_e2 > 0 else 1.0
    s_a = s_b / mean_u if mean_u > 0 else 1.0
    trace = []
    best = None
    for fa in (0.1, 1.0, 10.0):
        for fb in (1e-3, 0.1, 1.0):
            x0 = np.log([s_a * fa, s_b * fb])
            x0[1] = max(x0[1], lo)
            res = optimize.minimize(f, x0, method="Powell",
                                    bounds=[(lo - 20, 50.0), (lo, 50.0)],
                                    options={"xtol": 1e-10, "ftol": 1e-12, "maxfev": 20000})
            trace.append({"start": x0.tolist(), "x": res.x.tolist(), "fun": float(res.fun),
                          "success": bool(res.success)})
            if np.isfinite(res.fun) and (best is None or res.fun < best[2]):
                best = (float(np.exp(res.x[0])), float(np.exp(res.x[1])), float(res.fun))
    candidates = [] if best is None else [best]
    for a, b in ((1.0, 0.0), (0.0, mean_e2)):
        val = obj(a, b)
        if np.isfinite(val):
            candidates.append((a, b, val))
    if not candidates:
        raise CalibrationError("no finite calibration objective found", trace)
    a, b, val = min(candidates, key=lambda c: c[2])
    boundary = b <= VAR_FLOOR * (1 + 1e-6)
    if boundary:
        log.info("calibration offset hit the floor b = %g", VAR_FLOOR)
    return Calibration(a, max(b, 0.0), val, boundary, len(trace), trace)


def cnll(U, err2, cal: Calibration) -> float:
    """Mean Gaussian NLL of errors under the calibrated variances."""
    raw = cal.a * np.asarray(U, dtype=float) + cal.b
    if (raw < VAR_FLOOR).any():
        log.info("%d calibrated variances floored at %g", int((raw < VAR_FLOOR).sum()), VAR_FLOOR)
    v = np.maximum(raw, VAR_FLOOR)
    return gaussian_nll_sum(v, err2) / v.size


# -- reports ------------------------------------------------------------------------

def positive_offset(U) -> float:
    """Shift that makes every U positive (zero when already positive)."""
    U = np.asarray(U, dtype=float)
    lo = float(U.min())
    if lo > 0:
        return 0.0
    span = float(U.max() - lo)
    return -lo + max(1e-6 * span, 1e-12)


def expand_components(pairs: Sequence[EvalPair], offset: float = 0.0):
    """Per-component (U, signed error) arrays from structure-level pairs."""
    U = np.concatenate([np.full(p.eps_signed.size, p.U + offset) for p in pairs]) if pairs else np.zeros(0)
    err = np.concatenate([p.eps_signed for p in pairs]) if pairs else np.zeros(0)
    return U, err


def evaluate(test: Sequence[EvalPair], val: Sequence[EvalPair], percentile: float = 20.0,
             config: Optional[dict] = None) -> dict:
    """Full metric report; calibration is fitted on ``val`` and scored on ``test``."""
    U = np.array([p.U for p in test])
    eps = np.array([p.eps for p in test])
    report = {"n": len(test), "config": dict(config or {})}
    for name, fn in (("spearman", lambda: spearman(U, eps)), ("roc_auc", lambda: roc_auc(U, eps, percentile))):
        try:
            report[name] = fn()
        except UndefinedMetric as exc:
            report[name] = None
            report.setdefault("warnings", []).append(str(exc))
    offset = positive_offset(np.concatenate([U, [p.U for p in val]]) if val else U)
    report["config"]["u_offset"] = offset
    report["config"]["error_percentile"] = percentile
    Ut, et = expand_components(test, offset)
    if et.size:
        report["miscal_area"] = miscalibration_area(Ut, et)
        Uv, ev = expand_components(val, offset)
        cal = calibrate(Uv, ev ** 2) if ev.size >= 2 else calibrate(Ut, et ** 2)
        report["a_star"], report["b_star"] = cal.a, cal.b
        report["calibration_boundary_hit"] = cal.boundary_hit
        report["cnll"] = cnll(Ut, et ** 2, cal)
    else:
        report.update(miscal_area=None, a_star=None, b_star=None, cnll=None)
    return report


def write_report(path, report: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
