import csv
import json

import numpy as np
import pytest

from nnipuq import cli
from nnipuq.config import ConfigError, ExperimentConfig
from nnipuq.orchestrator import (HashMismatch, StageFailure, best_per_metric, compare_schemes, emit_report,
                                 energy_histogram, load_records, run_al_loop, shared_data)
from nnipuq.structures import read_samples

TINY = {
    "schema_version": 1,
    "data": {"n_initial": 12, "ladder_bins": 4, "ladder_per_bin": 3},
    "model": {"hidden": [8, 8], "latent_dim": 4, "ensemble_size": 2,
              "descriptor": {"n_basis": 4, "angular_eta": [0.5], "angular_zeta": [1]}},
    "train": {"epochs": 8, "min_epochs": 0},
    "gmm": {"candidates": [1, 2]},
    "md": {"steps": 30, "n_trajectories": 2, "stride": 10},
    "adversarial": {"steps": 3, "n_seeds": 4},
    "al": {"generations": 2, "samples_per_generation": 2},
}


def tiny(tmp_path, **over):
    return ExperimentConfig.from_dict(TINY).with_overrides(out=str(tmp_path), **over)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_single_generation_has_no_adversarial_samples(tmp_path):
    cfg = tiny(tmp_path, **{"al.generations": 1})
    recs = run_al_loop(cfg)
    assert len(recs) == 1
    data = read_samples(tmp_path / "ensemble" / "gen_1" / "dataset.jsonl")
    assert all(s.provenance == "initial" for s in data)
    assert recs[0].manifest["new_sample_ids"] == []


def test_three_generations_manifest_counts(tmp_path):
    cfg = tiny(tmp_path, **{"data.n_initial": 78, "al.generations": 3, "al.samples_per_generation": 20,
                            "adversarial.n_seeds": 24, "train.epochs": 3, "md.n_trajectories": 1})
    recs = run_al_loop(cfg)
    man = recs[-1].manifest
    assert len(man["sample_ids"]) == 78 + 40
    assert man["provenance_counts"] == {"initial": 78, "adversarial-gen1": 20, "adversarial-gen2": 20}
    assert len(set(man["sample_ids"])) == 118


def test_rerun_is_identical(tmp_path):
    outs = []
    for k in range(2):
        cfg = tiny(tmp_path / f"r{k}")
        run_al_loop(cfg, "gmm")
        outs.append(tmp_path / f"r{k}" / "gmm")
    for gen in ("gen_1", "gen_2"):
        for name in ("manifest.json", "metrics.json", "dataset.jsonl", "eval_pairs.csv", "md_summary.json"):
            a, b = (o / gen / name for o in outs)
            assert a.read_bytes() == b.read_bytes(), (gen, name)


def test_compare_four_schemes_share_initial_data(tmp_path):
    cfg = tiny(tmp_path, **{"al.generations": 1})
    rows, by = compare_schemes(cfg, ["ensemble", "mve", "evidential", "gmm"])
    assert len(rows) == 4 and len({r["initial_hash"] for r in rows}) == 1
    assert set(by) == {"ensemble", "mve", "evidential", "gmm"}
    table = _read_csv(tmp_path / "comparison.csv")
    assert [r["scheme"] for r in table] == ["ensemble", "mve", "evidential", "gmm"]


def test_single_scheme_table_matches_records(tmp_path):
    cfg = tiny(tmp_path)
    rows, by = compare_schemes(cfg, ["random"])
    assert [(r["scheme"], r["generation"]) for r in rows] == [("random", 1), ("random", 2)]
    assert [r["mae_f"] for r in rows] == [rec.mae_f for rec in by["random"]]
    assert rows[0]["spearman"] is None


def test_report_outputs(tmp_path):
    cfg = tiny(tmp_path, **{"al.generations": 1})
    _, by = compare_schemes(cfg, ["ensemble", "gmm"])
    paths = emit_report(by, tmp_path)
    _, ladder = shared_data(cfg)
    scatter = _read_csv(paths["scatter"])
    assert len([r for r in scatter if r["scheme"] == "ensemble"]) == len(ladder)
    text = open(paths["summary"]).read()
    assert "ensemble" in text and "gmm" in text
    reloaded = {s: load_records(tmp_path, s, cfg.hash()) for s in ("ensemble", "gmm")}
    assert [r.metrics for r in reloaded["gmm"]] == [r.metrics for r in by["gmm"]]


def test_best_per_metric_keeps_ties():
    rows = [{"scheme": "a", "spearman": 0.5, "cnll": 1.0}, {"scheme": "b", "spearman": 0.5, "cnll": 2.0},
            {"scheme": "c", "spearman": 0.1, "cnll": None}]
    best = best_per_metric(rows)
    assert best["spearman"] == {"value": 0.5, "schemes": ["a", "b"]}
    assert best["cnll"]["schemes"] == ["a"]


def test_energy_histogram_uniform_edges():
    h = energy_histogram([0.2, 1.5, 1.7, 4.2])
    assert np.allclose(np.diff(h["edges"]), 1.0)
    assert h["edges"][0] == 0.0 and h["edges"][-1] == 5.0
    assert h["counts"] == [1, 2, 0, 0, 1]
    assert energy_histogram([]) == {"edges": [], "counts": []}


def test_hash_mismatch_refused(tmp_path):
    cfg = tiny(tmp_path)
    shared_data(cfg)
    with pytest.raises(HashMismatch):
        shared_data(cfg.with_overrides(seed=9))


def test_stage_failure_written(tmp_path, monkeypatch):
    import nnipuq.orchestrator as orch

    def boom(*a, **k):
        raise FloatingPointError("nan in md")
    monkeypatch.setattr(orch, "md_batch", boom)
    with pytest.raises(StageFailure) as err:
        run_al_loop(tiny(tmp_path))
    assert err.value.stage == "md" and err.value.generation == 1
    failed = json.loads((tmp_path / "ensemble" / "gen_1" / "FAILED.json").read_text())
    assert failed["stage"] == "md"


def test_config_round_trip_and_errors(tmp_path):
    cfg = ExperimentConfig.from_dict(TINY)
    cfg.save(tmp_path / "c.yaml")
    back = ExperimentConfig.load(tmp_path / "c.yaml")
    assert back.to_dict() == cfg.to_dict() and back.hash() == cfg.hash()
    assert cfg.with_overrides(scheme="gmm", out="elsewhere").hash() == cfg.hash()
    assert cfg.with_overrides(seed=1).hash() != cfg.hash()
    with pytest.raises(ConfigError, match="unknown config key"):
        ExperimentConfig.from_dict({"schema_version": 1, "train": {"epoch": 3}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"schema_version": 2})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"schema_version": 1, "schemes": ["dropout"]})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"schema_version": 1, "md": {"temperatures": []}})


def test_cli_flow_and_exit_codes(tmp_path, capsys):
    cfg = tiny(tmp_path, **{"al.generations": 1})
    path = tmp_path / "c.yaml"
    cfg.save(path)
    base = ["--config", str(path), "--out", str(tmp_path)]
    assert cli.main(["gen-data", *base]) == 0
    assert cli.main(["train", *base, "--scheme", "gmm"]) == 0
    for cmd in ("uncertainty", "metrics", "md"):
        assert cli.main([cmd, *base]) == 0, cmd
    assert cli.main(["adversarial", *base, "--k", "2"]) == 0
    assert len(read_samples(tmp_path / "model" / "new_samples.jsonl")) == 2
    assert cli.main(["metrics", *base, "--seed", "4"]) == cli.EXIT_CONFIG
    assert cli.main(["uncertainty", *base, "--model-dir", str(tmp_path / "nowhere")]) == cli.EXIT_IO
    bad = tmp_path / "bad.yaml"
    bad.write_text("schema_version: 1\nbogus: 1\n")
    assert cli.main(["gen-data", "--config", str(bad)]) == cli.EXIT_CONFIG
    capsys.readouterr()
    assert cli.main(["al-loop", *base, "--scheme", "mve"]) == 0
    assert cli.main(["report", *base, "--schemes", "mve"]) == 0
    assert "summary" in capsys.readouterr().out
