"""Active-learning experiment engine.

Layout of an experiment directory::

    <out>/config.yaml
    <out>/shared/initial.jsonl, ladder.jsonl, shared.json
    <out>/<scheme>/gen_<g>/manifest.json      sample ids, provenance, hashes
                           dataset.jsonl      training data of this generation
                           model.json, gmm.json, train_reports.json
                           metrics.json, eval_pairs.csv, uncertainty.csv
                           md_summary.json, adversarial.jsonl, new_samples.jsonl
                           timing.json        wall time and memory (not deterministic)
"""

from __future__ import annotations

import hashlib
import json
import logging
import resource
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import adversarial as adv
from . import md as mdmod
from .config import ExperimentConfig
from .gmm import select_K
from .metrics import EvalPair, evaluate, write_pairs, write_report
from .oracle import OracleSpec, generate_initial_dataset, generate_test_ladder
from .potential import DescriptorConfig, ModelBundle, fast_predict
from .structures import LabeledSample, Structure, read_samples, write_samples
from .training import LossSpec, TrainHyper, split_train_val, train
from .uq import HEAD_FOR_SCHEME, predict_structures, write_records

log = logging.getLogger(__name__)

ENERGY_BIN = 1.0  # kcal/mol, histogram bin width


class StageFailure(RuntimeError):
    def __init__(self, stage: str, generation: int, cause: Exception):
        self.stage, self.generation, self.cause = stage, generation, cause
        super().__init__(f"generation {generation}, stage {stage!r}: {cause}")


class HashMismatch(ValueError):
    pass


@dataclass
class GenerationRecord:
    scheme: str
    generation: int
    manifest: dict
    metrics: dict = field(default_factory=dict)
    md_summary: dict = field(default_factory=dict)
    energy_histogram: dict = field(default_factory=dict)
    mae_e: float = float("nan")
    mae_f: float = float("nan")
    train_wall_time: float = 0.0
    peak_memory_mb: float = 0.0
    pairs: list = field(default_factory=list)
    failure: Optional[str] = None


# -- helpers ------------------------------------------------------------------------

def _json_dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


def samples_hash(samples: Sequence[LabeledSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(json.dumps(s.to_dict(), sort_keys=True).encode())
    return h.hexdigest()[:16]


def _scheme_seed(base: int, scheme: str, generation: int) -> int:
    return (int(base) * 1_000_003 + zlib.crc32(scheme.encode()) + 7919 * generation) % (2 ** 31)


def energy_histogram(energies, width: float = ENERGY_BIN) -> dict:
    e = np.asarray(energies, dtype=float)
    if e.size == 0:
        return {"edges": [], "counts": []}
    lo = np.floor(e.min() / width) * width
    hi = max(np.ceil(e.max() / width) * width, lo + width)
    edges = np.arange(lo, hi + 0.5 * width, width)
    counts, _ = np.histogram(e, edges)
    return {"edges": edges.tolist(), "counts": counts.tolist()}


def oracle_from_config(cfg: ExperimentConfig) -> OracleSpec:
    return OracleSpec.from_dict(cfg["oracle"])


def shared_data(cfg: ExperimentConfig, out: Optional[Path] = None):
    """Initial training set and test ladder, generated once per config and cached on disk."""
    spec = oracle_from_config(cfg)
    d = cfg["data"]
    out = Path(out or cfg["out"]) / "shared"
    meta_path = out / "shared.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("config_hash") != cfg.hash():
            raise HashMismatch(f"{meta_path} was written for config {meta.get('config_hash')}, "
                               f"current config is {cfg.hash()}")
        return read_samples(out / "initial.jsonl"), read_samples(out / "ladder.jsonl")
    initial = generate_initial_dataset(spec, d["n_initial"], d["T_sample"], seed=cfg["seed"], cap=d["energy_cap"])
    ladder = generate_test_ladder(spec, d["ladder_bins"], d["ladder_per_bin"], seed=cfg["seed"] + 1,
                                  ceiling=d["ladder_ceiling"])
    write_samples(out / "initial.jsonl", initial)
    write_samples(out / "ladder.jsonl", ladder)
    _json_dump(meta_path, {"config_hash": cfg.hash(), "initial_hash": samples_hash(initial),
                           "ladder_hash": samples_hash(ladder), "n_initial": len(initial),
                           "n_ladder": len(ladder)})
    return initial, ladder


def build_model(cfg: ExperimentConfig, scheme: str, spec: OracleSpec, seed: int) -> ModelBundle:
    mc = cfg["model"]
    desc = DescriptorConfig.from_dict(dict(mc["descriptor"], species=list(spec.species)))
    m = ModelBundle(desc, tuple(mc["hidden"]), mc["latent_dim"], HEAD_FOR_SCHEME.get(scheme, "standard"))
    n = mc["ensemble_size"] if scheme == "ensemble" else 1
    m.initialize(n, [seed + k for k in range(n)])
    return m


def train_for_scheme(cfg: ExperimentConfig, scheme: str, m: ModelBundle, train_set, val_set, seed: int):
    hp = TrainHyper.from_dict(dict(cfg["train"], seed=seed))
    spec = LossSpec.for_head(m.head, **cfg["loss"])
    m.set_normalization(train_set)
    if m.n_members > 1:
        reps = [train(m, k, train_set, spec, hp, val_data=val_set) for k in range(m.n_members)]
        failed = [r.member for r in reps if r.error]
        if failed and m.n_members - len(failed) < 2:
            raise RuntimeError(f"ensemble members {failed} failed")
        m.members = [pv for k, pv in enumerate(m.members) if k not in failed]
        m.seeds = [s for k, s in enumerate(m.seeds) if k not in failed]
        return reps
    return [train(m, 0, train_set, spec, hp, val_data=val_set)]


def fit_latent_gmm(cfg: ExperimentConfig, m: ModelBundle, samples, seed: int):
    lat = []
    for group in _by_composition([s.structure for s in samples]):
        pos = np.stack([s.positions for s in group])
        out = fast_predict(m, group[0].atomic_numbers, pos, group[0].cell, members=[0])
        lat.append(out["latent"][0].reshape(-1, m.latent_dim))
    X = np.concatenate(lat)
    g = cfg["gmm"]
    K, model, table = select_K(X, g["candidates"], seed, max_points=g["max_points"],
                               tol=g["tol"], max_iter=g["max_iter"])
    return model, table


def _by_composition(structures):
    groups: dict = {}
    for s in structures:
        key = (s.composition_key(), None if s.cell is None else s.cell.tobytes())
        groups.setdefault(key, []).append(s)
    return list(groups.values())


def eval_pairs(scheme: str, m: ModelBundle, samples, g=None, pooling="mean"):
    """EvalPairs (structure force RMSE, signed force errors) plus energy/force MAE."""
    preds = predict_structures(scheme, m, [s.structure for s in samples], g, pooling)
    pairs, records, de, df = [], [], [], []
    for s, (E, F, rec) in zip(samples, preds):
        signed = (s.forces - F).ravel()
        pairs.append(EvalPair(s.id, rec.U, float(np.sqrt(np.mean(signed ** 2))), signed))
        records.append(rec)
        de.append(abs(E - s.energy))
        df.append(np.abs(signed).mean())
    return pairs, records, float(np.mean(de)) if de else float("nan"), float(np.mean(df)) if df else float("nan")


def prediction_mae(m: ModelBundle, samples):
    """Energy and force MAE of the member-averaged prediction (no uncertainty)."""
    de, df = [], []
    for group in _by_composition([s.structure for s in samples]):
        pos = np.stack([s.positions for s in group])
        out = fast_predict(m, group[0].atomic_numbers, pos, group[0].cell)
        E, F = out["energy"].mean(0), out["forces"].mean(0)
        ids = {s.id: k for k, s in enumerate(group)}
        for smp in samples:
            if smp.id in ids:
                k = ids[smp.id]
                de.append(abs(E[k] - smp.energy))
                df.append(np.abs(F[k] - smp.forces).mean())
    return float(np.mean(de)), float(np.mean(df))


def md_batch(cfg: ExperimentConfig, m: ModelBundle, spec: OracleSpec, initial, seed: int, gdir: Optional[Path]):
    """Stability batch from random initial configurations.

    With ``md.temperatures`` set, ``n_trajectories`` run at each temperature
    and the fractions are pooled; the per-temperature split is kept.
    """
    md = cfg["md"]
    temps = list(md["temperatures"] or [md["temperature"]])
    n_traj = md["n_trajectories"]
    rng = np.random.default_rng(seed)
    trajs, ids, per_t = [], [], {}
    z = initial[0].structure.atomic_numbers
    force_fn = mdmod.model_force_fn(m, z, initial[0].structure.cell)
    for k, T in enumerate(temps):
        mc = mdmod.MDConfig.from_dict(dict({k2: v for k2, v in md.items()
                                            if k2 not in ("n_trajectories", "write_xyz", "temperatures")},
                                           temperature=T))
        picks = rng.choice(len(initial), size=n_traj, replace=len(initial) < n_traj)
        batch = mdmod.run_md([initial[i].structure for i in picks], force_fn, spec.mass_array(z), mc,
                             seed=seed + k)
        per_t[str(T)] = mdmod.stability_fraction(batch)[0]
        trajs += batch
        ids += [initial[i].id for i in picks]
    if gdir is not None and md["write_xyz"]:
        for k, t in enumerate(trajs):
            mdmod.write_xyz(gdir / "trajectories" / f"traj_{k:03d}.xyz", t, z)
    return mdmod.summary(trajs, mc, len(z), {"initial_ids": ids, "seed": seed, "temperatures": temps,
                                             "stable_fraction_by_temperature": per_t})


def acquire(cfg: ExperimentConfig, scheme: str, m: ModelBundle, g_model, spec: OracleSpec, dataset,
            generation: int, seed: int):
    """Adversarial (or random) candidates, oracle-labeled; returns (new samples, raw results)."""
    a = cfg["adversarial"]
    k = cfg["al"]["samples_per_generation"]
    rng = np.random.default_rng(seed)
    pool = [s.structure for s in dataset]
    if k == 0:
        return [], []
    if scheme == "random":
        chosen = adv.random_batch(pool, k, a["random_scale"], seed)
        results = []
    else:
        acfg = adv.AdversarialConfig.from_dict(dict(a, scheme=scheme, pooling=cfg["uq"]["pooling"]))
        idx = rng.choice(len(pool), size=a["n_seeds"], replace=len(pool) < a["n_seeds"])
        seeds = [pool[i] for i in idx]
        train_e = np.array([s.energy for s in dataset])
        results = []
        for group in _by_composition(seeds):
            scorer = adv.model_scorer(scheme, m, group[0].atomic_numbers, group[0].cell, g_model,
                                      cfg["uq"]["pooling"])
            results += adv.adversarial_ascend(group, scorer, train_e, acfg, positive_u=scheme != "gmm",
                                              seed=seed)
        chosen = adv.select_batch(results, min(k, len(results)), a["dedup"])
    new = []
    for i, st in enumerate(chosen):
        E, F = spec.energy_forces(st.positions)
        s2 = Structure(st.atomic_numbers, st.positions, st.cell, f"adv-{scheme}-g{generation}-{i:03d}")
        new.append(LabeledSample(s2, float(E), F, provenance=f"adversarial-gen{generation}"))
    return new, results


def _peak_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


# -- the loop -----------------------------------------------------------------------

def run_al_loop(cfg: ExperimentConfig, scheme: Optional[str] = None, out: Optional[Path] = None,
                shared=None) -> list:
    """Train, evaluate, run MD and acquire new data for each generation."""
    scheme = scheme or cfg["scheme"]
    out = Path(out or cfg["out"])
    spec = oracle_from_config(cfg)
    initial, ladder = shared if shared is not None else shared_data(cfg, out)
    ladder_ids = {s.id for s in ladder}
    chash = cfg.hash()
    cfg.save(out / "config.yaml")
    dataset = list(initial)
    records = []
    pooling = cfg["uq"]["pooling"]
    for gen in range(1, cfg["al"]["generations"] + 1):
        gdir = out / scheme / f"gen_{gen}"
        gdir.mkdir(parents=True, exist_ok=True)
        seed = _scheme_seed(cfg["seed"], scheme, gen)
        ids = [s.id for s in dataset]
        if len(set(ids)) != len(ids):
            raise RuntimeError("duplicate sample ids in the training set")
        if ladder_ids & set(ids):
            raise RuntimeError("test ladder samples leaked into the training set")
        prov: dict = {}
        for s in dataset:
            prov[s.provenance] = prov.get(s.provenance, 0) + 1
        manifest = {"config_hash": chash, "scheme": scheme, "generation": gen,
                    "sample_ids": ids, "provenance": [s.provenance for s in dataset],
                    "provenance_counts": prov, "dataset_hash": samples_hash(dataset),
                    "initial_hash": samples_hash(initial), "ladder_hash": samples_hash(ladder)}
        rec = GenerationRecord(scheme, gen, manifest)
        stage = "train"
        t0 = time.perf_counter()
        try:
            write_samples(gdir / "dataset.jsonl", dataset)
            train_set, val_set = split_train_val(dataset, cfg["train"]["val_fraction"], seed)
            m = build_model(cfg, scheme, spec, seed)
            reports = train_for_scheme(cfg, scheme, m, train_set, val_set, seed)
            rec.train_wall_time = sum(r.wall_time for r in reports)
            m.meta.update(config_hash=chash, scheme=scheme, generation=gen)
            m.save(gdir / "model.json")
            _json_dump(gdir / "train_reports.json", [r.to_dict() for r in reports])
            manifest["model_ids"] = [r.snapshot_id for r in reports]
            manifest["train_ids"] = [s.id for s in train_set]
            manifest["val_ids"] = [s.id for s in val_set]
            g_model = None
            if scheme == "gmm":
                stage = "gmm"
                g_model, table = fit_latent_gmm(cfg, m, train_set, seed)
                g_model.save(gdir / "gmm.json")
                _json_dump(gdir / "gmm_selection.json", {"config_hash": chash, "table": table, "K": g_model.K})

            stage = "metrics"
            if scheme == "random":
                rec.mae_e, rec.mae_f = prediction_mae(m, ladder)
                metrics = {"config_hash": chash, "scheme": scheme, "generation": gen,
                           "mae_e": rec.mae_e, "mae_f": rec.mae_f}
                rec.metrics = metrics
                write_report(gdir / "metrics.json", metrics)
            else:
                pairs, urecs, rec.mae_e, rec.mae_f = eval_pairs(scheme, m, ladder, g_model, pooling)
                vpairs = eval_pairs(scheme, m, val_set, g_model, pooling)[0] if val_set else []
                metrics = evaluate(pairs, vpairs, cfg["metrics"]["error_percentile"],
                                   {"config_hash": chash, "scheme": scheme, "generation": gen,
                                    "error": "structure_force_rmse", "pooling": pooling})
                metrics["mae_e"], metrics["mae_f"] = rec.mae_e, rec.mae_f
                rec.metrics, rec.pairs = metrics, pairs
                write_pairs(gdir / "eval_pairs.csv", pairs)
                write_records(gdir / "uncertainty.csv", urecs)
                write_report(gdir / "metrics.json", metrics)

            stage = "md"
            rec.md_summary = md_batch(cfg, m, spec, initial, seed, gdir)
            rec.md_summary["config_hash"] = chash
            mdmod.write_summary(gdir / "md_summary.json", rec.md_summary)

            new = []
            if gen < cfg["al"]["generations"]:
                stage = "adversarial"
                new, results = acquire(cfg, scheme, m, g_model, spec, dataset, gen, seed)
                if results:
                    adv.write_results(gdir / "adversarial.jsonl", results)
                write_samples(gdir / "new_samples.jsonl", new)
            rec.energy_histogram = energy_histogram([s.energy for s in new])
            manifest["new_sample_ids"] = [s.id for s in new]
            manifest["new_energy_histogram"] = rec.energy_histogram
        except Exception as exc:  # persist what we have, then stop the loop
            rec.failure = f"{stage}: {type(exc).__name__}: {exc}"
            log.error("scheme %s generation %d failed in %s: %s", scheme, gen, stage, exc)
            _json_dump(gdir / "FAILED.json", {"stage": stage, "error": str(exc), "type": type(exc).__name__})
            manifest["failure"] = rec.failure
            _json_dump(gdir / "manifest.json", manifest)
            records.append(rec)
            raise StageFailure(stage, gen, exc) from exc
        rec.peak_memory_mb = _peak_mb()
        _json_dump(gdir / "manifest.json", manifest)
        _json_dump(gdir / "timing.json", {"train_wall_time": rec.train_wall_time,
                                          "stage_wall_time": time.perf_counter() - t0,
                                          "peak_memory_mb": rec.peak_memory_mb})
        records.append(rec)
        dataset = dataset + new
    return records


# -- comparison and reports ---------------------------------------------------------

TABLE_FIELDS = ["scheme", "generation", "mae_e", "mae_f", "spearman", "roc_auc", "miscal_area", "cnll",
                "stable_fraction", "mean_stable_time_fs", "train_wall_time", "peak_memory_mb",
                "initial_hash", "failed"]


def record_row(rec: GenerationRecord) -> dict:
    m = rec.metrics or {}
    return {"scheme": rec.scheme, "generation": rec.generation, "mae_e": rec.mae_e, "mae_f": rec.mae_f,
            "spearman": m.get("spearman"), "roc_auc": m.get("roc_auc"), "miscal_area": m.get("miscal_area"),
            "cnll": m.get("cnll"), "stable_fraction": rec.md_summary.get("stable_fraction"),
            "mean_stable_time_fs": rec.md_summary.get("mean_stable_time_fs"),
            "train_wall_time": rec.train_wall_time, "peak_memory_mb": rec.peak_memory_mb,
            "initial_hash": rec.manifest.get("initial_hash"), "failed": rec.failure}


def _run_isolated(cfg_dict: dict, scheme: str, out: str, shared) -> tuple:
    cfg = ExperimentConfig(cfg_dict)
    try:
        return scheme, run_al_loop(cfg, scheme, Path(out), shared), None
    except StageFailure as exc:
        log.error("scheme %s failed: %s", scheme, exc)
        return scheme, load_records(Path(out), scheme), (exc.generation, str(exc))


def compare_schemes(cfg: ExperimentConfig, schemes: Optional[Sequence[str]] = None,
                    out: Optional[Path] = None, workers: int = 1):
    """Run the loop for each scheme on shared data; returns (table rows, records by scheme).

    With ``workers > 1`` schemes run in a process pool; results do not depend
    on the worker count.
    """
    schemes = list(schemes or cfg["schemes"])
    out = Path(out or cfg["out"])
    shared = shared_data(cfg, out)
    jobs = [(cfg.to_dict(), s, str(out), shared) for s in schemes]
    if workers > 1 and len(schemes) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_isolated, *zip(*jobs)))
    else:
        results = [_run_isolated(*j) for j in jobs]
    rows, by_scheme = [], {}
    for scheme, recs, failure in results:
        if failure and not recs:
            rows.append({"scheme": scheme, "generation": failure[0], "failed": failure[1]})
        by_scheme[scheme] = recs
        rows += [record_row(r) for r in recs]
    _json_dump(out / "comparison.json", {"config_hash": cfg.hash(), "rows": rows})
    _write_csv(out / "comparison.csv", rows, TABLE_FIELDS)
    return rows, by_scheme


def _write_csv(path: Path, rows, fields) -> None:
    import csv
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k) for k in fields})


def load_records(out: Path, scheme: str, expected_hash: Optional[str] = None) -> list:
    """Rebuild GenerationRecords from a run directory."""
    from .metrics import read_pairs
    recs = []
    root = Path(out) / scheme
    gens = sorted(root.glob("gen_*"), key=lambda p: int(p.name.split("_")[1])) if root.exists() else []
    for gdir in gens:
        if not (gdir / "manifest.json").exists():
            continue
        manifest = json.loads((gdir / "manifest.json").read_text())
        if expected_hash and manifest.get("config_hash") != expected_hash:
            raise HashMismatch(f"{gdir}: artifact hash {manifest.get('config_hash')} != {expected_hash}")
        rec = GenerationRecord(scheme, manifest["generation"], manifest, failure=manifest.get("failure"))
        if (gdir / "metrics.json").exists():
            rec.metrics = json.loads((gdir / "metrics.json").read_text())
            rec.mae_e, rec.mae_f = rec.metrics.get("mae_e", np.nan), rec.metrics.get("mae_f", np.nan)
        if (gdir / "md_summary.json").exists():
            rec.md_summary = json.loads((gdir / "md_summary.json").read_text())
        if (gdir / "timing.json").exists():
            t = json.loads((gdir / "timing.json").read_text())
            rec.train_wall_time, rec.peak_memory_mb = t["train_wall_time"], t["peak_memory_mb"]
        if (gdir / "eval_pairs.csv").exists():
            rec.pairs = read_pairs(gdir / "eval_pairs.csv")
        rec.energy_histogram = manifest.get("new_energy_histogram", {})
        recs.append(rec)
    return recs


HIGHER_BETTER = {"spearman": True, "roc_auc": True, "stable_fraction": True, "miscal_area": False,
                 "cnll": False, "mae_e": False, "mae_f": False}


def best_per_metric(rows: Sequence[dict]) -> dict:
    """Best scheme(s) per metric over the given rows; ties keep every winner."""
    out = {}
    for metric, higher in HIGHER_BETTER.items():
        vals = [(r["scheme"], r.get(metric)) for r in rows
                if r.get(metric) is not None and np.isfinite(r.get(metric))]
        if not vals:
            continue
        best = max(v for _, v in vals) if higher else min(v for _, v in vals)
        out[metric] = {"value": best, "schemes": sorted({s for s, v in vals if v == best})}
    return out


def emit_report(records_by_scheme: dict, out) -> dict:
    """Plot-ready CSVs and a text summary; returns the written paths."""
    out = Path(out)
    if not any(records_by_scheme.values()):
        raise ValueError("no generation records to report")
    scatter, bars, hist, series = [], [], [], []
    for scheme, recs in records_by_scheme.items():
        for r in recs:
            for p in r.pairs:
                scatter.append({"scheme": scheme, "generation": r.generation, "structure_id": p.structure_id,
                                "U": p.U, "eps": p.eps, "eps_sq": p.eps ** 2})
            for metric in ("spearman", "roc_auc", "miscal_area", "cnll", "mae_e", "mae_f"):
                val = r.metrics.get(metric) if r.metrics else None
                bars.append({"scheme": scheme, "generation": r.generation, "metric": metric, "value": val})
            h = r.energy_histogram or {}
            edges, counts = h.get("edges", []), h.get("counts", [])
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                hist.append({"scheme": scheme, "generation": r.generation, "bin_lo": lo, "bin_hi": hi, "count": c})
            series.append({"scheme": scheme, "generation": r.generation,
                           "stable_fraction": r.md_summary.get("stable_fraction"),
                           "mean_stable_time_fs": r.md_summary.get("mean_stable_time_fs")})
    paths = {
        "scatter": out / "report" / "uncertainty_vs_error.csv",
        "metrics": out / "report" / "metric_bars.csv",
        "histogram": out / "report" / "energy_histogram.csv",
        "stability": out / "report" / "stability_series.csv",
        "summary": out / "report" / "summary.md",
    }
    try:
        _write_csv(paths["scatter"], scatter, ["scheme", "generation", "structure_id", "U", "eps", "eps_sq"])
        _write_csv(paths["metrics"], bars, ["scheme", "generation", "metric", "value"])
        _write_csv(paths["histogram"], hist, ["scheme", "generation", "bin_lo", "bin_hi", "count"])
        _write_csv(paths["stability"], series, ["scheme", "generation", "stable_fraction", "mean_stable_time_fs"])
        last = [record_row(recs[-1]) for recs in records_by_scheme.values() if recs]
        best = best_per_metric(last)
        lines = ["# Active-learning report", "", "Final-generation metrics per scheme:", "",
                 "| scheme | gen | MAE E | MAE F | spearman | AUC | miscal | cNLL | stable |",
                 "|---|---|---|---|---|---|---|---|---|"]
        for r in last:
            lines.append("| " + " | ".join(_fmt(r.get(k)) for k in
                                             ("scheme", "generation", "mae_e", "mae_f", "spearman", "roc_auc",
                                              "miscal_area", "cnll", "stable_fraction")) + " |")
        lines += ["", "Best scheme per metric (ties listed together):", ""]
        for metric, b in best.items():
            lines.append(f"- {metric}: {', '.join(b['schemes'])} ({_fmt(b['value'])})")
        paths["summary"].write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"writing report under {out / 'report'} failed: {exc}") from exc
    return {k: str(v) for k, v in paths.items()}


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)
