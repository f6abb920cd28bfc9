import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from nnipuq.metrics import (Calibration, CalibrationError, EvalPair, UndefinedMetric, calibrate, cnll, evaluate,
                            miscalibration_area, read_pairs, roc_auc, spearman, write_pairs)

LOG_2PI = np.log(2 * np.pi)


def test_spearman_examples():
    assert spearman([1, 2, 3], [0.1, 0.2, 0.3]) == 1.0
    assert spearman([3, 2, 1], [0.1, 0.2, 0.3]) == -1.0
    assert spearman([1, 2, 3, 4], [0.2, 0.1, 0.4, 0.3]) == pytest.approx(0.6, abs=1e-14)


def test_spearman_undefined():
    with pytest.raises(UndefinedMetric):
        spearman([1], [2])
    with pytest.raises(UndefinedMetric):
        spearman([1, 1, 1], [1, 2, 3])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-50, 50), st.floats(0, 10)), min_size=3, max_size=40))
def test_spearman_matches_scipy_and_monotone_invariance(pairs):
    U = np.array([p[0] for p in pairs], dtype=float)
    e = np.array([p[1] for p in pairs])
    if len(np.unique(U)) < 2 or len(np.unique(e)) < 2:
        return
    ref = stats.spearmanr(U, e).statistic
    assert spearman(U, e) == pytest.approx(ref, abs=1e-12)
    assert spearman(2.0 ** (U / 4), e) == pytest.approx(spearman(U, e), abs=1e-12)


def test_auc_examples():
    eps = np.array([1, 2, 3, 4, 5.0])
    assert roc_auc(eps, eps) == 1.0
    assert roc_auc(np.ones(5), eps) == 0.5
    assert roc_auc([5, 1, 2, 3, 4], eps) == 0.0


def test_auc_single_class_undefined():
    with pytest.raises(UndefinedMetric):
        roc_auc([1, 2, 3], [1, 1, 1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.floats(0, 10)), min_size=5, max_size=30))
def test_auc_matches_pairwise_count(pairs):
    U = np.array([p[0] for p in pairs], dtype=float)
    e = np.array([p[1] for p in pairs])
    thr = np.percentile(e, 20)
    pos, neg = U[e > thr], U[e <= thr]
    if not len(pos) or not len(neg):
        return
    ref = np.mean([1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(pos, neg)])
    assert roc_auc(U, e) == pytest.approx(ref, abs=1e-12)


def test_miscal_calibrated_small(rng):
    U = rng.uniform(0.1, 4, size=10_000)
    err = rng.normal(size=U.size) * np.sqrt(U)
    assert miscalibration_area(U, err) < 0.03


def test_miscal_zero_errors_half():
    assert miscalibration_area(np.ones(20), np.zeros(20)) == pytest.approx(0.5, abs=1e-12)


def test_miscal_inflated_approaches_half(rng):
    U = rng.uniform(0.1, 4, size=10_000)
    err = rng.normal(size=U.size) * np.sqrt(U)
    a = miscalibration_area(U * 1e4, err)
    assert 0.45 < a < 0.5


def test_miscal_requirements():
    with pytest.raises(UndefinedMetric):
        miscalibration_area(np.ones(5), np.zeros(5))
    with pytest.raises(ValueError):
        miscalibration_area(np.zeros(20), np.zeros(20))


def test_calibrate_self_calibrated(rng):
    U = rng.uniform(0.1, 4, size=10_000)
    err = rng.normal(size=U.size) * np.sqrt(U)
    cal = calibrate(U, err ** 2)
    assert abs(cal.a - 1) < 0.1
    assert abs(cal.b) < 0.1 * U.mean()


def test_calibrate_zero_U_gives_mean_square(rng):
    err = rng.normal(size=500) * 1.7
    cal = calibrate(np.zeros(500), err ** 2)
    assert cal.variance(np.zeros(1))[0] == pytest.approx(np.mean(err ** 2), rel=1e-6)


def test_calibrate_zero_errors_hits_floor(rng):
    cal = calibrate(rng.uniform(0.1, 1, size=50), np.zeros(50))
    assert cal.boundary_hit and cal.b >= 0 and cal.b <= 1e-12 * (1 + 1e-6)


def test_calibrate_errors():
    with pytest.raises(CalibrationError):
        calibrate([1.0], [1.0])
    with pytest.raises(ValueError):
        calibrate([-1.0, 1.0], [1.0, 1.0])


def test_cnll_examples():
    assert cnll([0.0], [0.0], Calibration(1.0, 1 / (2 * np.pi), 0.0)) == pytest.approx(0.0, abs=1e-14)
    v = 2.5
    assert cnll([v], [v], Calibration(1.0, 0.0, 0.0)) == pytest.approx(0.5 * (LOG_2PI + np.log(v) + 1), rel=1e-14)


def test_cnll_calibrated_batch(rng):
    v = rng.uniform(0.1, 4, size=20_000)
    err2 = rng.normal(size=v.size) ** 2 * v
    ref = 0.5 * (LOG_2PI + np.log(v).mean() + 1)
    assert cnll(v, err2, Calibration(1.0, 0.0, 0.0)) == pytest.approx(ref, rel=0.02)


def test_evaluate_report_and_pairs_round_trip(tmp_path, rng):
    def pairs(n, tag):
        out = []
        for i in range(n):
            u = rng.uniform(0.2, 2)
            signed = rng.normal(size=6) * np.sqrt(u)
            out.append(EvalPair(f"{tag}{i}", u, float(np.sqrt(np.mean(signed ** 2))), signed))
        return out
    test, val = pairs(60, "t"), pairs(30, "v")
    rep = evaluate(test, val)
    assert set(rep) >= {"spearman", "roc_auc", "miscal_area", "cnll", "a_star", "b_star"}
    assert rep["n"] == 60 and rep["config"]["u_offset"] == 0.0
    write_pairs(tmp_path / "p.csv", test)
    back = read_pairs(tmp_path / "p.csv")
    assert [p.U for p in back] == [p.U for p in test]
    assert np.array_equal(back[3].eps_signed, test[3].eps_signed)


def test_evaluate_offsets_negative_uncertainty(rng):
    test = [EvalPair(str(i), -5.0 + i, 0.1 * i + 0.05, rng.normal(size=3)) for i in range(20)]
    rep = evaluate(test, test[:10])
    assert rep["config"]["u_offset"] > 5.0
    assert rep["spearman"] == pytest.approx(1.0)
