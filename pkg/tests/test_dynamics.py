import math

import numpy as np
import pytest

from sdgame.dynamics import (
    TimeGrid, build_tree, moment_check, moment_refinement_report,
    sample_scenarios, simulate_forward,
)
from conftest import make_spec


def test_time_grid_invariants():
    g = TimeGrid(t0=0.0, T=1.0, M=4)
    assert g.dt == 0.25
    assert np.all(np.diff(g.nodes) > 0)
    assert g.nodes[0] == 0.0 and g.nodes[-1] == 1.0
    with pytest.raises(ValueError):
        TimeGrid(t0=0.0, T=1.0, M=0)
    with pytest.raises(ValueError):
        TimeGrid(t0=1.0, T=1.0, M=2)


def test_scenarios_reproducible():
    g = TimeGrid(t0=0.0, T=1.0, M=5)
    a = sample_scenarios(g, 0.7, 64, seed=11)
    b = sample_scenarios(g, 0.7, 64, seed=11)
    assert np.array_equal(a.dB, b.dB) and np.array_equal(a.dN, b.dN)
    c = sample_scenarios(g, 0.7, 64, seed=12)
    assert not np.array_equal(a.dB, c.dB)


def test_scenarios_zero_intensity():
    g = TimeGrid(t0=0.0, T=1.0, M=3)
    sc = sample_scenarios(g, 0.0, 32, seed=5)
    assert np.all(sc.dN == 0)


def test_brownian_mean_within_4_sigma():
    g = TimeGrid(t0=0.0, T=1.0, M=1)
    n = 1_000_000
    sc = sample_scenarios(g, 0.0, n, seed=3)
    mean = float(np.mean(sc.dB[:, 0, 0]))
    assert abs(mean) <= 4.0 * math.sqrt(g.dt / n)


def test_poisson_mean_within_4_se():
    g = TimeGrid(t0=0.0, T=1.0, M=1)
    lam, n = 0.8, 1_000_000
    sc = sample_scenarios(g, lam, n, seed=3)
    mean = float(np.mean(sc.dN[:, 0]))
    assert abs(mean - lam * g.dt) <= 4.0 * math.sqrt(lam * g.dt / n)


def test_tree_leaf_counts_and_probabilities():
    spec = make_spec(diffusion=1.0, lam=0.5)
    g1 = TimeGrid(t0=0.0, T=1.0, M=1)
    tree = build_tree(g1, spec.lam, 0.0, spec)
    assert tree.level_size(1) == 3
    assert int(np.count_nonzero(tree.probs[1])) == 6  # 3 spatial x 2 jump branches

    g2 = TimeGrid(t0=0.0, T=1.0, M=2)
    tree2 = build_tree(g2, spec.lam, 0.0, spec)
    assert tree2.level_size(2) == 5  # recombining: linear spatial growth
    for k in range(3):
        assert abs(float(np.sum(tree2.probs[k])) - 1.0) <= 1e-12


def test_tree_rejects_multidimensional_state():
    spec = make_spec(diffusion=1.0)
    object.__setattr__(spec, "state_dim", 2)
    with pytest.raises(ValueError):
        build_tree(TimeGrid(t0=0.0, T=1.0, M=1), spec.lam, 0.0, spec)


def test_tree_euler_consistency_constant_coefficients():
    b0, s0 = 0.7, 1.3
    spec = make_spec(drift=b0, diffusion=s0, lam=0.4)
    g = TimeGrid(t0=0.0, T=1.0, M=4)
    tree = build_tree(g, spec.lam, 0.5, spec)
    for k in range(4):
        xk = tree.states[k]
        xn = tree.states[k + 1]
        pk = tree.probs[k]
        # conditional one-step increment from any reachable node
        r = int(np.argmax(pk[:, 0] > 0))
        x = xk[r, 0]
        kids = np.array([xn[r, 0], xn[r + 1, 0], xn[r + 2, 0]])
        w = np.array([1 / 6, 2 / 3, 1 / 6])
        mean = float(w @ (kids - x))
        var = float(w @ (kids - x) ** 2) - mean ** 2
        assert mean == pytest.approx(b0 * g.dt, abs=1e-12)
        assert var == pytest.approx(s0 ** 2 * g.dt, abs=1e-12)


def test_tree_refuses_large_jump_probability():
    spec = make_spec(diffusion=1.0, lam=8.0)
    with pytest.raises(ValueError):
        build_tree(TimeGrid(t0=0.0, T=1.0, M=4), spec.lam, 0.0, spec)


def test_simulate_frozen_dynamics():
    spec = make_spec()
    g = TimeGrid(t0=0.0, T=1.0, M=6)
    sc = sample_scenarios(g, spec.lam, 16, seed=1)
    path = simulate_forward(spec, g, sc, 0.0, 0.0, 1.25)
    assert np.all(path.X == 1.25)


def test_simulate_constant_drift_exact():
    spec = make_spec(drift=1.0)
    g = TimeGrid(t0=0.0, T=1.0, M=10)
    sc = sample_scenarios(g, spec.lam, 4, seed=1)
    path = simulate_forward(spec, g, sc, 0.0, 0.0, 0.5)
    np.testing.assert_allclose(path.X[:, -1], 1.5, rtol=0, atol=1e-15)


def test_simulate_brownian_variance():
    spec = make_spec(diffusion=1.0, lam=0.0)
    g = TimeGrid(t0=0.0, T=1.0, M=16)
    sc = sample_scenarios(g, 0.0, 100_000, seed=7)
    path = simulate_forward(spec, g, sc, 0.0, 0.0, 0.0)
    var = float(np.var(path.X[:, -1]))
    assert abs(var - 1.0) <= 0.05


def test_regime_track():
    spec = make_spec(lam=1.0)
    g = TimeGrid(t0=0.0, T=1.0, M=8)
    sc = sample_scenarios(g, spec.lam, 256, seed=9)
    path = simulate_forward(spec, g, sc, 0.0, 0.0, 0.0)
    k = 5
    want1 = np.where((1 + path.cumN[:, k]) % 2 == 1, 1, 2)
    np.testing.assert_array_equal(path.regime(1, k), want1)
    # the two starting indices always sit in opposite regimes
    assert np.all(path.regime(1, k) != path.regime(2, k))


def test_moment_check_degenerate_cases():
    spec = make_spec()
    g = TimeGrid(t0=0.0, T=1.0, M=4)
    sc = sample_scenarios(g, spec.lam, 32, seed=2)
    r = moment_check(spec, g, sc, 0.3, 0.3, 0.0, 0.0)
    assert r["shift_ratio"] == 0.0
    assert r["excursion_ratio"] == 0.0


def test_moment_ratios_stable_under_refinement():
    spec = make_spec(drift={"expr": "0.3*x"}, diffusion={"expr": "0.2*x + 0.5"}, lam=0.5)
    rep = moment_refinement_report(
        spec, spec.lam, 0.0, 1.0, (16, 32, 64), 0.4, 0.9, 0.0, 0.0,
        S=4000, seed=13)
    assert not rep["diverging"]
    assert all(row["shift_ratio"] > 0 for row in rep["rows"])
