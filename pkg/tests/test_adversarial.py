import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nnipuq import diffcore as dc
from nnipuq.adversarial import (AdversarialConfig, AdversarialResult, adversarial_ascend, boltzmann_prob,
                                log_boltzmann_prob, model_scorer, objective_and_grad, random_batch, read_results,
                                rmsd, select_batch, write_results)
from nnipuq.diffcore import Tensor
from nnipuq.gmm import em_fit
from nnipuq.potential import predict_batch
from nnipuq.structures import KB_KCAL, Structure

from conftest import random_molecule, small_model


def test_boltzmann_uniform_training_set():
    assert boltzmann_prob(-3.0, [-3.0] * 7, 300.0) == pytest.approx(1 / 7, rel=1e-14)


def test_boltzmann_half():
    T = 250.0
    assert boltzmann_prob(2.0 + KB_KCAL * T * np.log(2), [2.0], T) == pytest.approx(0.5, rel=1e-12)


def test_boltzmann_high_temperature_limit():
    gaps = [abs(boltzmann_prob(40.0, [0.0, 1.0, 5.0], T) - 1 / 3) for T in (1e6, 1e8, 1e10)]
    assert gaps[0] < 1e-2 and gaps[1] < gaps[0] / 50 and gaps[2] < gaps[1] / 50


def test_boltzmann_overflow_safe_and_nan():
    p = boltzmann_prob(-5000.0, [-5000.0, 1e4], 1.0)
    assert np.isfinite(p) and p == pytest.approx(1.0)
    with pytest.raises(ValueError):
        boltzmann_prob(np.nan, [0.0], 300.0)
    with pytest.raises(ValueError):
        boltzmann_prob(0.0, [], 300.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.floats(10, 3000), st.floats(-100, 100))
def test_boltzmann_normalized_and_shift_invariant(E, T, c):
    E = np.array(E)
    assert boltzmann_prob(E, E, T).sum() == pytest.approx(1.0, rel=1e-10)
    assert log_boltzmann_prob(E[0] + c, E + c, T) == pytest.approx(log_boltzmann_prob(E[0], E, T), abs=1e-8)


def _const_energy_scorer(U_fn):
    def score(pos):
        S = pos.shape[0]
        return U_fn(pos), Tensor(np.zeros(S))
    return score


def test_zero_learning_rate_is_noop():
    s = Structure(np.array([1, 1]), np.array([[0, 0, 0], [1.0, 0, 0]]), id="a")
    scorer = _const_energy_scorer(lambda p: (p * p).sum((1, 2)) + 1.0)
    cfg = AdversarialConfig(lr=0.0, steps=5, init_scale=0.02)
    res = adversarial_ascend([s], scorer, [0.0], cfg, seed=3)[0]
    noisy = s.positions + np.random.default_rng(3).normal(scale=0.02, size=(1, 2, 3))[0]
    assert np.array_equal(res.structure.positions, noisy)
    assert len(set(res.trace)) == 1 and len(res.trace) == 6


def test_concave_quadratic_converges():
    x0 = np.array([[0.3, -0.2, 0.5], [1.0, 0.4, -0.1]])
    s = Structure(np.array([1, 1]), np.zeros((2, 3)), id="q")
    scorer = _const_energy_scorer(lambda p: ((p - x0) ** 2).sum((1, 2)) * -1.0)
    cfg = AdversarialConfig(lr=0.02, steps=80, init_scale=0.0)
    res = adversarial_ascend([s], scorer, [0.0], cfg, positive_u=False)[0]
    start = np.linalg.norm(x0)
    assert np.linalg.norm(res.structure.positions - x0) < 0.05 * start
    assert res.objective_trace[-1] >= res.objective_trace[0]
    assert not res.stalled


def test_saddle_stalls():
    s = Structure(np.array([1]), np.zeros((1, 3)), id="saddle")
    scorer = _const_energy_scorer(lambda p: p[:, 0, 0] * p[:, 0, 0] - p[:, 0, 1] * p[:, 0, 1])
    res = adversarial_ascend([s], scorer, [0.0], AdversarialConfig(steps=4, init_scale=0.0), positive_u=False)[0]
    assert res.stalled and np.array_equal(res.structure.positions, s.positions)


def test_result_trace_length_and_json(tmp_path, rng):
    m = small_model(members=2)
    seeds = [random_molecule(rng, spread=0.7) for _ in range(3)]
    scorer = model_scorer("ensemble", m, seeds[0].atomic_numbers)
    res = adversarial_ascend(seeds, scorer, [0.0, 1.0], AdversarialConfig(steps=3))
    assert all(len(r.trace) == 4 and np.isfinite(r.structure.positions).all() for r in res)
    write_results(tmp_path / "a.jsonl", res)
    back = read_results(tmp_path / "a.jsonl")
    assert back[1].objective_trace == res[1].objective_trace
    assert np.array_equal(back[2].structure.positions, res[2].structure.positions)


@pytest.mark.parametrize("scheme,head,members", [("ensemble", "standard", 3), ("mve", "mve", 1),
                                                 ("evidential", "evidential", 1), ("gmm", "standard", 1)])
def test_objective_gradient_matches_fd(scheme, head, members, rng):
    m = small_model(head, members=members)
    z = np.array([7, 1, 1, 1])
    g = None
    if scheme == "gmm":
        lat = predict_batch(m, 0, z, np.stack([random_molecule(rng).positions for _ in range(30)])).latent
        g = em_fit(lat.reshape(-1, m.latent_dim), 2)
    scorer = model_scorer(scheme, m, z, g=g)
    x = random_molecule(rng).positions[None]
    kT, log_z = KB_KCAL * 300, 0.3
    pos_u = scheme != "gmm"
    J, _, _, grad = objective_and_grad(scorer, x, log_z, kT, pos_u)
    for i, k in [(0, 1), (2, 0), (3, 2)]:
        d = np.zeros_like(x)
        d[0, i, k] = 1e-6
        num = (objective_and_grad(scorer, x + d, log_z, kT, pos_u)[0][0]
               - objective_and_grad(scorer, x - d, log_z, kT, pos_u)[0][0]) / 2e-6
        assert grad[0, i, k] == pytest.approx(num, rel=1e-4, abs=1e-6)


def _result(pos, obj, i):
    s = Structure(np.array([1, 1]), np.asarray(pos, dtype=float), id=f"r{i}")
    return AdversarialResult(f"s{i}", s, [obj], [obj], 1.0, obj, 0.0)


def test_select_all_sorted():
    rs = [_result(np.eye(2, 3) * i, float(o), i) for i, o in enumerate([0.3, 2.0, -1.0, 0.7])]
    out = select_batch(rs, 4, 0.0)
    assert [s.id for s in out] == ["r1", "r3", "r0", "r2"]


def test_select_drops_duplicates(caplog):
    same = np.array([[0, 0, 0], [1, 0, 0.]])
    rs = [_result(same, 1.0, 0), _result(same, 0.5, 1), _result(same + 3, 0.2, 2)]
    out = select_batch(rs, 3, 0.01)
    assert [s.id for s in out] == ["r0", "r2"]
    assert "survived" in caplog.text


def test_select_matches_brute_force_greedy(rng):
    rs = [_result(rng.normal(scale=0.08, size=(2, 3)), float(rng.normal()), i) for i in range(30)]
    out = [s.id for s in select_batch(rs, 20, 0.1)]
    ref = []
    for r in sorted(rs, key=lambda r: -r.objective):
        if len(ref) == 20:
            break
        ok = True
        for q in ref:
            d = r.structure.positions - q.structure.positions
            if np.sqrt(np.mean(np.sum(d * d, axis=1))) < 0.1:
                ok = False
        if ok:
            ref.append(r)
    assert out == [r.structure.id for r in ref]


def test_select_k_too_large():
    with pytest.raises(ValueError):
        select_batch([_result(np.zeros((2, 3)), 0.0, 0)], 2, 0.0)


def test_rmsd_minimum_image():
    cell = np.eye(3) * 5.0
    a = np.array([[0.1, 0, 0]])
    b = np.array([[4.9, 0, 0]])
    assert rmsd(a, b, cell) == pytest.approx(0.2)


def test_random_batch_deterministic(rng):
    seeds = [random_molecule(rng) for _ in range(5)]
    a = random_batch(seeds, 7, 0.1, seed=2)
    b = random_batch(seeds, 7, 0.1, seed=2)
    assert len(a) == 7 and len({s.id for s in a}) == 7
    assert all(np.array_equal(x.positions, y.positions) for x, y in zip(a, b))


def test_config_validation():
    with pytest.raises(ValueError):
        AdversarialConfig(temperature=0)
    with pytest.raises(ValueError):
        AdversarialConfig(steps=0)
    with pytest.raises(ValueError):
        AdversarialConfig(lr=-1)
