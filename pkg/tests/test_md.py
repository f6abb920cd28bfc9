import numpy as np
import pytest

from nnipuq.md import (MDConfig, StabilityRules, Trajectory, _violations, kinetic_energy, model_force_fn, run_md,
                       stability_fraction, summary, write_xyz)
from nnipuq.structures import KB_KCAL, MVV2E, Structure

from conftest import small_model


def _zero_forces(pos):
    return np.zeros(len(pos)), np.zeros_like(pos)


def _harmonic(k):
    def fn(pos):
        return 0.5 * k * (pos ** 2).sum((1, 2)), -k * pos
    return fn


def test_zero_forces_positions_constant():
    s = Structure(np.array([1, 1]), np.array([[0, 0, 0], [1.0, 0, 0]]))
    cfg = MDConfig(ensemble="nve", temperature=0.0, steps=200, stride=50, rules=StabilityRules())
    t = run_md([s], _zero_forces, np.ones(2), cfg, velocities=np.zeros((1, 2, 3)))[0]
    assert t.stable and all(np.array_equal(p, s.positions) for p in t.positions)


def test_harmonic_nve_energy_drift():
    s = Structure(np.array([1]), np.array([[0.2, 0.0, 0.0]]))
    cfg = MDConfig(ensemble="nve", temperature=0.0, dt=0.5, steps=10_000, stride=10, rules=StabilityRules(),
                   remove_com=False)
    v0 = np.array([[[0.0, 0.002, 0.0]]])
    t = run_md([s], _harmonic(1.0), np.ones(1), cfg, velocities=v0)[0]
    tot = np.array(t.energies) + np.array(t.kinetic)
    assert np.abs(tot - tot[0]).max() / tot[0] < 1e-4


def test_min_distance_rule():
    rules = StabilityRules.preset("ammonia")
    pos = np.array([[[0, 0, 0], [0.5, 0, 0], [0, 1.0, 0], [0, 0, 1.0]]])
    assert _violations(rules, pos, np.array([1.0]), np.array([0.1])) == ["min_distance"]
    ok = pos.copy()
    ok[0, 1, 0] = 1.0
    assert _violations(rules, ok, np.array([1.0]), np.array([0.1])) == [None]
    assert _violations(rules, ok, np.array([-0.1]), np.array([0.1])) == ["min_energy"]


def test_min_distance_fails_trajectory_at_step():
    s = Structure(np.array([7, 1]), np.array([[0, 0, 0], [0.5, 0, 0]]))
    cfg = MDConfig(ensemble="nve", steps=10, rules=StabilityRules(min_distance=0.75))
    t = run_md([s], _zero_forces, np.ones(2), cfg, velocities=np.zeros((1, 2, 3)))[0]
    assert t.stable_steps == 0 and t.reason == "min_distance" and not t.stable


def _traj(stable_steps, steps=100, dt=0.5):
    return Trajectory(steps, dt, stable_steps, None if stable_steps == steps else "x")


def test_stability_fraction_cases():
    assert stability_fraction([_traj(100)] * 3) == (1.0, 50.0)
    frac, t = stability_fraction([_traj(100), _traj(0), _traj(100), _traj(0)])
    assert frac == 0.5 and t == 100 * 0.5 / 2
    trajs = [_traj(s) for s in (100, 40, 100, 7, 99)]
    frac, t = stability_fraction(trajs)
    assert frac == 2 / 5 and t == pytest.approx(np.mean([50, 20, 50, 3.5, 49.5]))
    with pytest.raises(ValueError):
        stability_fraction([])


def test_momentum_conserved_with_model_forces(rng):
    m = small_model(members=2)
    eq = np.array([[0, 0, 0.38], [0.94, 0, 0], [-0.47, 0.81, 0], [-0.47, -0.81, 0]])
    z = np.array([7, 1, 1, 1])
    masses = np.array([14.007, 1.008, 1.008, 1.008])
    cfg = MDConfig(ensemble="nve", steps=300, stride=10, rules=StabilityRules())
    v0 = rng.normal(scale=0.005, size=(1, 4, 3))
    t = run_md([Structure(z, eq)], model_force_fn(m, z), masses, cfg, velocities=v0)[0]
    p0 = (masses[:, None] * t.velocities[0]).sum(0)
    for v in t.velocities:
        assert np.abs((masses[:, None] * v).sum(0) - p0).max() < 1e-10


def test_nvt_holds_temperature(oracle):
    eq = oracle.equilibrium()
    masses = oracle.mass_array(eq.atomic_numbers)
    cfg = MDConfig(ensemble="nvt", temperature=300.0, dt=0.5, steps=6000, stride=5, rules=StabilityRules())
    trajs = run_md([eq] * 8, oracle.energy_forces, masses, cfg, seed=1)
    ke = np.array([t.kinetic[len(t.kinetic) // 3:] for t in trajs])
    T = 2 * ke.mean() / (cfg.n_dof(4) * KB_KCAL)
    assert T == pytest.approx(300.0, rel=0.05)


def test_deterministic_and_xyz(tmp_path, oracle):
    eq = oracle.equilibrium()
    masses = oracle.mass_array(eq.atomic_numbers)
    cfg = MDConfig(steps=200, stride=50)
    a = run_md([eq, eq], oracle.energy_forces, masses, cfg, seed=5)
    b = run_md([eq, eq], oracle.energy_forces, masses, cfg, seed=5)
    for ta, tb in zip(a, b):
        assert all(np.array_equal(x, y) for x, y in zip(ta.positions, tb.positions))
    write_xyz(tmp_path / "t.xyz", a[0], eq.atomic_numbers)
    lines = (tmp_path / "t.xyz").read_text().splitlines()
    assert len(lines) == len(a[0].frame_steps) * 6
    assert lines[0] == "4" and "step=50" in lines[7] and lines[2].startswith("N ")
    assert summary(a, cfg, 4)["stable_fraction"] == 1.0


def test_initial_temperature_and_com(oracle):
    eq = oracle.equilibrium()
    masses = oracle.mass_array(eq.atomic_numbers)
    cfg = MDConfig(steps=1, stride=1, temperature=500.0)
    trajs = run_md([eq] * 400, oracle.energy_forces, masses, cfg, seed=0)
    v0 = np.array([t.velocities[0] for t in trajs])
    assert np.abs((masses[None, :, None] * v0).sum(1)).max() < 1e-12
    T = 2 * kinetic_energy(v0, masses).mean() / (cfg.n_dof(4) * KB_KCAL)
    assert T == pytest.approx(500.0, rel=0.05)
    assert MVV2E == pytest.approx(2390.057361)


def test_config_validation():
    with pytest.raises(ValueError):
        MDConfig(ensemble="npt")
    with pytest.raises(ValueError):
        MDConfig(dt=0)
    with pytest.raises(ValueError):
        StabilityRules.from_dict({"preset": "ammonia", "bogus": 1})
    assert MDConfig(rules="silica").rules.zero_kinetic
