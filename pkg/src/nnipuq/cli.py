"""Command-line entry point: ``nnipuq <subcommand> [options]``.

Exit codes: 0 success, 2 config error (including artifact hash mismatch),
3 numeric failure, 4 IO error, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("nnipuq")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="override the output directory")
    common.add_argument("--threads", type=int, help="BLAS threads (set before numpy loads)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nnipuq", description="UQ experiments for small neural-network potentials.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate the initial dataset and the test ladder")

    q = sub.add_parser("train", parents=[common], help="train one scheme's model on a dataset")
    q.add_argument("--scheme", help="override the config scheme")
    q.add_argument("--data", type=Path, help="training JSONL (default: <out>/shared/initial.jsonl)")

    for name, helptext in (("uncertainty", "per-structure uncertainties"), ("metrics", "UQ metrics on a test set")):
        q = sub.add_parser(name, parents=[common], help=helptext)
        q.add_argument("--model-dir", type=Path, help="directory with model.json (default: <out>/model)")
        q.add_argument("--data", type=Path, help="structures JSONL (default: <out>/shared/ladder.jsonl)")
        if name == "metrics":
            q.add_argument("--val", type=Path, help="calibration JSONL (default: validation split of training)")

    q = sub.add_parser("adversarial", parents=[common], help="adversarial sampling from training seeds")
    q.add_argument("--model-dir", type=Path)
    q.add_argument("--data", type=Path, help="seed JSONL (default: the training data of the model)")
    q.add_argument("--k", type=int, help="samples to select (default: al.samples_per_generation)")

    q = sub.add_parser("md", parents=[common], help="MD stability batch with a trained model")
    q.add_argument("--model-dir", type=Path)
    q.add_argument("--data", type=Path, help="initial-configuration JSONL (default: initial dataset)")

    q = sub.add_parser("al-loop", parents=[common], help="run the active-learning loop for one scheme")
    q.add_argument("--scheme")

    q = sub.add_parser("compare", parents=[common], help="run the loop for several schemes on shared data")
    q.add_argument("--schemes", nargs="+")
    q.add_argument("--workers", type=int, default=1, help="parallel scheme workers")

    q = sub.add_parser("report", parents=[common], help="plot-ready CSVs and a summary from finished runs")
    q.add_argument("--schemes", nargs="+")
    return p


def load_config(args):
    from .config import ExperimentConfig
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = str(args.out)
    if getattr(args, "scheme", None):
        over["scheme"] = args.scheme
    return cfg.with_overrides(**over) if over else cfg


def _model_dir(cfg, args) -> Path:
    return Path(args.model_dir) if getattr(args, "model_dir", None) else Path(cfg["out"]) / "model"


def _check_hash(what, found, cfg) -> None:
    from .orchestrator import HashMismatch
    if found != cfg.hash():
        raise HashMismatch(f"{what} was produced with config {found}, current config is {cfg.hash()}")


def _load_model(cfg, args):
    from .gmm import GmmModel
    from .potential import ModelBundle
    d = _model_dir(cfg, args)
    m = ModelBundle.load(d / "model.json")
    _check_hash(d / "model.json", m.meta.get("config_hash"), cfg)
    scheme = m.meta.get("scheme", cfg["scheme"])
    g = GmmModel.load(d / "gmm.json") if scheme == "gmm" else None
    return d, m, scheme, g


def _samples(path, default):
    from .structures import read_samples
    return read_samples(path if path else default)


# -- subcommands --------------------------------------------------------------------

def cmd_gen_data(cfg, args) -> dict:
    from .orchestrator import shared_data
    initial, ladder = shared_data(cfg)
    return {"initial": len(initial), "ladder": len(ladder), "dir": str(Path(cfg["out"]) / "shared")}


def cmd_train(cfg, args) -> dict:
    from .orchestrator import _json_dump, build_model, fit_latent_gmm, oracle_from_config, shared_data, train_for_scheme
    from .training import split_train_val
    from .structures import write_samples
    scheme = cfg["scheme"]
    data = _samples(args.data, None) if args.data else shared_data(cfg)[0]
    seed = cfg["seed"]
    train_set, val_set = split_train_val(data, cfg["train"]["val_fraction"], seed)
    m = build_model(cfg, scheme, oracle_from_config(cfg), seed)
    reports = train_for_scheme(cfg, scheme, m, train_set, val_set, seed)
    d = _model_dir(cfg, args)
    d.mkdir(parents=True, exist_ok=True)
    m.meta.update(config_hash=cfg.hash(), scheme=scheme)
    m.save(d / "model.json")
    write_samples(d / "train.jsonl", train_set)
    write_samples(d / "val.jsonl", val_set)
    _json_dump(d / "train_reports.json", [r.to_dict() for r in reports])
    if scheme == "gmm":
        g, table = fit_latent_gmm(cfg, m, train_set, seed)
        g.save(d / "gmm.json")
        _json_dump(d / "gmm_selection.json", {"config_hash": cfg.hash(), "table": table, "K": g.K})
    return {"model": str(d / "model.json"), "members": m.n_members,
            "val_loss": [min(r.val_loss) if r.val_loss else None for r in reports]}


def cmd_uncertainty(cfg, args) -> dict:
    from .uq import predict_structures, write_records
    d, m, scheme, g = _load_model(cfg, args)
    data = _samples(args.data, Path(cfg["out"]) / "shared" / "ladder.jsonl")
    preds = predict_structures(scheme, m, [s.structure for s in data], g, cfg["uq"]["pooling"])
    write_records(d / "uncertainty.csv", [r for _, _, r in preds])
    return {"records": len(preds), "path": str(d / "uncertainty.csv")}


def cmd_metrics(cfg, args) -> dict:
    from .metrics import evaluate, write_pairs, write_report
    from .orchestrator import eval_pairs
    d, m, scheme, g = _load_model(cfg, args)
    test = _samples(args.data, Path(cfg["out"]) / "shared" / "ladder.jsonl")
    val = _samples(args.val, d / "val.jsonl")
    pooling = cfg["uq"]["pooling"]
    pairs, _, mae_e, mae_f = eval_pairs(scheme, m, test, g, pooling)
    vpairs = eval_pairs(scheme, m, val, g, pooling)[0]
    rep = evaluate(pairs, vpairs, cfg["metrics"]["error_percentile"],
                   {"config_hash": cfg.hash(), "scheme": scheme, "error": "structure_force_rmse",
                    "pooling": pooling})
    rep["mae_e"], rep["mae_f"] = mae_e, mae_f
    write_pairs(d / "eval_pairs.csv", pairs)
    write_report(d / "metrics.json", rep)
    return {k: rep.get(k) for k in ("spearman", "roc_auc", "miscal_area", "cnll", "mae_e", "mae_f")}


def cmd_adversarial(cfg, args) -> dict:
    from . import adversarial as adv
    from .orchestrator import acquire, oracle_from_config
    from .structures import write_samples
    d, m, scheme, g = _load_model(cfg, args)
    data = _samples(args.data, d / "train.jsonl")
    if args.k is not None:
        cfg = cfg.with_overrides(**{"al.samples_per_generation": args.k})
    new, results = acquire(cfg, scheme, m, g, oracle_from_config(cfg), data, 1, cfg["seed"])
    if results:
        adv.write_results(d / "adversarial.jsonl", results)
    write_samples(d / "new_samples.jsonl", new)
    return {"selected": len(new), "candidates": len(results), "path": str(d / "new_samples.jsonl")}


def cmd_md(cfg, args) -> dict:
    from . import md as mdmod
    from .orchestrator import md_batch, oracle_from_config
    d, m, scheme, g = _load_model(cfg, args)
    init = _samples(args.data, Path(cfg["out"]) / "shared" / "initial.jsonl")
    summ = md_batch(cfg, m, oracle_from_config(cfg), init, cfg["seed"], d)
    summ["config_hash"] = cfg.hash()
    mdmod.write_summary(d / "md_summary.json", summ)
    return {"stable_fraction": summ["stable_fraction"], "mean_stable_time_fs": summ["mean_stable_time_fs"]}


def cmd_al_loop(cfg, args) -> dict:
    from .orchestrator import record_row, run_al_loop
    recs = run_al_loop(cfg)
    return {"rows": [record_row(r) for r in recs]}


def cmd_compare(cfg, args) -> dict:
    from .orchestrator import compare_schemes
    rows, _ = compare_schemes(cfg, args.schemes, workers=args.workers)
    return {"rows": rows, "table": str(Path(cfg["out"]) / "comparison.csv")}


def cmd_report(cfg, args) -> dict:
    from .orchestrator import emit_report, load_records
    out = Path(cfg["out"])
    schemes = args.schemes or [s for s in cfg["schemes"] if (out / s).exists()]
    recs = {s: load_records(out, s, expected_hash=cfg.hash()) for s in schemes}
    return emit_report(recs, out)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "uncertainty": cmd_uncertainty,
            "metrics": cmd_metrics, "adversarial": cmd_adversarial, "md": cmd_md,
            "al-loop": cmd_al_loop, "compare": cmd_compare, "report": cmd_report}


def exit_code(exc: BaseException) -> int:
    from .config import ConfigError
    from .diffcore import NumericFailure
    from .orchestrator import HashMismatch, StageFailure
    from .training import TrainingFailure
    if isinstance(exc, StageFailure):
        exc = exc.cause
    if isinstance(exc, (ConfigError, HashMismatch)):
        return EXIT_CONFIG
    if isinstance(exc, (NumericFailure, TrainingFailure, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_OTHER


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        result = COMMANDS[args.command](cfg, args)
    except Exception as exc:
        code = exit_code(exc)
        if code == EXIT_OTHER:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code
    print(json.dumps(result, indent=1, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
