import math

import numpy as np
import pytest

from sdgame.bsde import (
    BsdeProblem, comparison_check, decouple_check, regime_driver,
    regime_terminal, semigroup_apply, solve_coupled,
    solve_decoupled_regression, solve_regression, solve_tree,
    stability_estimate_check,
)
from sdgame.dynamics import TimeGrid, build_tree, sample_scenarios, simulate_forward
from conftest import make_spec


def drv_const(c):
    return lambda t, x, q, y, h, z, u, v: c + 0.0 * np.asarray(y)


def term_const(c):
    return lambda x, q: c + 0.0 * np.asarray(x) + 0.0 * np.asarray(q)


def grid_tree(spec, M, T=1.0, x0=0.0):
    g = TimeGrid(t0=0.0, T=T, M=M)
    return g, build_tree(g, spec.lam, x0, spec)


def test_constant_terminal_is_flat():
    spec = make_spec(diffusion=1.0, lam=0.5)
    _, tree = grid_tree(spec, 5)
    sol = solve_tree(BsdeProblem(tree=tree, driver=drv_const(0.0), terminal=term_const(5.0)))
    for k in range(6):
        assert np.all(sol.Y[k] == 5.0)
    for k in range(5):
        assert np.all(sol.Z[k] == 0.0)
        assert np.all(sol.H[k] == 0.0)


@pytest.mark.parametrize("M", [1, 3, 8, 17])
def test_unit_driver_integrates_exactly(M):
    spec = make_spec(diffusion=1.0, lam=0.5)
    _, tree = grid_tree(spec, M)
    sol = solve_tree(BsdeProblem(tree=tree, driver=drv_const(1.0), terminal=term_const(0.0)))
    assert sol.root == pytest.approx(1.0, abs=1e-13)


@pytest.mark.parametrize("M", [8, 32, 128])
def test_linear_driver_against_exponential(M):
    # dy/dt = -0.3 y backward from y(T) = 2 has y(0) = 2 e^{0.3}
    a = 0.3
    spec = make_spec(diffusion=1.0, lam=0.5)
    _, tree = grid_tree(spec, M)
    sol = solve_tree(BsdeProblem(
        tree=tree,
        driver=lambda t, x, q, y, h, z, u, v: a * y,
        terminal=term_const(2.0)))
    assert abs(sol.root - 2.0 * math.exp(a)) <= 10.0 / M


def test_compensated_zero_driver_is_martingale():
    # driver lam*h makes the compensated-form driver vanish: Y_k = E_k[Y_{k+1}]
    spec = make_spec(diffusion=1.0, lam=0.8)
    g, tree = grid_tree(spec, 6)
    pi = tree.jump_prob
    sol = solve_tree(BsdeProblem(
        tree=tree,
        driver=lambda t, x, q, y, h, z, u, v: tree.lam * h,
        terminal=lambda x, q: np.tanh(x) + 0.3 * q))
    w = np.array([1 / 6, 2 / 3, 1 / 6])
    for k in range(6):
        V = sol.Y[k + 1]
        A = w[0] * V[:-2] + w[1] * V[1:-1] + w[2] * V[2:]
        E = (1 - pi) * A + pi * A[:, ::-1]
        np.testing.assert_allclose(sol.Y[k], E, rtol=0, atol=1e-14)


def test_coupled_zero_drivers_decouple_exactly():
    spec_a = make_spec(diffusion=1.0, lam=0.6, phi1={"expr": "x"}, phi2={"expr": "tanh(x)"})
    spec_b = make_spec(diffusion=1.0, lam=0.6, phi1={"expr": "x"}, phi2=3.5)
    _, tree = grid_tree(spec_a, 5)
    y1a, _ = solve_coupled(spec_a, tree)
    y1b, _ = solve_coupled(spec_b, tree)
    # component 1 never reads component 2 when the drivers vanish
    for k in range(6):
        np.testing.assert_array_equal(y1a.Y[k], y1b.Y[k])
    # and it equals the plain conditional-expectation sweep of its terminal
    w = np.array([1 / 6, 2 / 3, 1 / 6])
    V = tree.states[5].copy()
    for k in range(4, -1, -1):
        V = w[0] * V[:-2] + w[1] * V[1:-1] + w[2] * V[2:]
    np.testing.assert_allclose(y1a.Y[0], V, rtol=0, atol=1e-13)


@pytest.mark.parametrize("M", [16, 64, 256])
def test_coupled_linear_system_cosh_sinh(M):
    # y1' = -y2, y2' = -y1 backward from (1, 0): (cosh(T-t), sinh(T-t))
    spec = make_spec(f1={"expr": "y2"}, f2={"expr": "y1"}, phi1=1.0, phi2=0.0,
                     lam=0.0, K=0.0)
    _, tree = grid_tree(spec, M)
    s1, s2 = solve_coupled(spec, tree)
    assert abs(s1.root - math.cosh(1.0)) <= 10.0 / M
    assert abs(s2.root - math.sinh(1.0)) <= 10.0 / M


def test_coupled_one_step_matches_leaf_enumeration():
    spec = make_spec(drift=0.2, diffusion=1.0, lam=0.6,
                     f1={"expr": "0.5*y2 + u"}, f2={"expr": "0.3*y1 + v"},
                     phi1={"expr": "x"}, phi2={"expr": "tanh(x)"},
                     U=(0.5,), V=(-0.5,))
    g = TimeGrid(t0=0.0, T=1.0, M=1)
    tree = build_tree(g, spec.lam, 0.4, spec)
    s1, s2 = solve_coupled(spec, tree)

    # hand enumeration over the six leaves
    dt = 1.0
    pi = spec.lam * dt
    step = math.sqrt(3.0 * dt)
    x0, u, v = 0.4, 0.5, -0.5
    offs = (-1, 0, 1)
    probs = (1 / 6, 2 / 3, 1 / 6)
    kids = [x0 + 0.2 * dt + 1.0 * d * step for d in offs]
    phi = {1: lambda x: x, 2: lambda x: math.tanh(x)}
    out = {}
    for c, other in ((1, 2), (2, 1)):
        A = sum(p * phi[c](xx) for p, xx in zip(probs, kids))
        Bf = sum(p * phi[other](xx) for p, xx in zip(probs, kids))
        E = (1 - pi) * A + pi * Bf
        H = Bf - A
        Zraw = (1 - pi) * step * (phi[c](kids[2]) - phi[c](kids[0])) / 6 \
            + pi * step * (phi[other](kids[2]) - phi[other](kids[0])) / 6
        Z = Zraw / dt

        def f(w):
            if c == 1:
                return 0.5 * (w + H) + u
            return 0.3 * (w + H) + v

        y_star = E + dt * (f(E) - spec.lam * H)
        out[c] = E + dt * (f(y_star) - spec.lam * H)
    assert s1.root == pytest.approx(out[1], abs=1e-12)
    assert s2.root == pytest.approx(out[2], abs=1e-12)


def test_decouple_identity_zero_driver():
    spec = make_spec(diffusion=1.0, lam=0.5, phi1={"expr": "x"}, phi2={"expr": "tanh(x)"})
    _, tree = grid_tree(spec, 4)
    assert decouple_check(spec, tree)["max_discrepancy"] == 0.0


def test_decouple_identity_coupled_linear():
    spec = make_spec(f1={"expr": "y2"}, f2={"expr": "y1"}, phi1=1.0, phi2=0.0,
                     lam=0.4, K=0.0)
    _, tree = grid_tree(spec, 6)
    assert decouple_check(spec, tree)["max_discrepancy"] <= 1e-10


def test_decouple_identity_randomized(rng):
    for trial in range(20):
        coef = rng.uniform(-0.5, 0.5, size=8)
        lam = rng.uniform(0.1, 0.9)
        spec = make_spec(
            drift={"expr": f"{coef[0]:.4f}*x + {coef[1]:.4f}*u"},
            diffusion={"expr": f"{coef[2]:.4f}*x + 0.8 + {coef[3]:.4f}*v"},
            f1={"expr": f"{coef[4]:.4f}*y2 + {coef[5]:.4f}*z + u"},
            f2={"expr": f"{coef[6]:.4f}*y1 + {coef[7]:.4f}*x + v"},
            phi1={"expr": "tanh(x)"}, phi2={"expr": "0.5*x"},
            U=(0.0, 1.0), V=(-1.0, 1.0), lam=lam, K=-0.5)
        M = int(rng.integers(1, 5))
        g = TimeGrid(t0=0.0, T=1.0, M=M)
        utab = rng.choice(spec.control_set_U, size=M)
        vtab = rng.choice(spec.control_set_V, size=M)
        tree = build_tree(g, lam, float(rng.normal()), spec,
                          u=lambda k, x, q: utab[k] + 0 * x,
                          v=lambda k, x, q: vtab[k] + 0 * x)
        assert decouple_check(spec, tree)["max_discrepancy"] <= 1e-9


def test_semigroup_identity_and_restriction():
    spec = make_spec(diffusion=1.0, lam=0.5, f1={"expr": "0.2*y1 + 0.1*y2"},
                     f2={"expr": "0.3*y2"}, phi1={"expr": "x"}, phi2=1.0, K=0.0)
    _, tree = grid_tree(spec, 6)
    eta = np.asarray(regime_terminal(spec, 1)(tree.states[3],
                                              np.broadcast_to([0, 1], tree.states[3].shape)))
    same = semigroup_apply(spec, tree, 1, 3, 3, eta)
    np.testing.assert_array_equal(same, eta)

    # terminal data at M reproduces the full decoupled solve on [k1, M]
    full = solve_tree(BsdeProblem(tree=tree, driver=regime_driver(spec, 1),
                                  terminal=regime_terminal(spec, 1)))
    etaM = full.Y[6]
    got = semigroup_apply(spec, tree, 1, 2, 6, etaM)
    np.testing.assert_allclose(got, full.Y[2], rtol=0, atol=1e-14)


def test_semigroup_flow_composition_exact():
    spec = make_spec(diffusion=0.8, lam=0.6, f1={"expr": "0.2*y1 + 0.3*y2 + z"},
                     f2={"expr": "0.1*y1"}, phi1={"expr": "tanh(x)"}, phi2={"expr": "x"},
                     K=0.0)
    _, tree = grid_tree(spec, 8)
    qM = np.broadcast_to([0, 1], tree.states[8].shape)
    eta = np.asarray(regime_terminal(spec, 2)(tree.states[8], qM), dtype=float)
    inner = semigroup_apply(spec, tree, 2, 5, 8, eta)
    nested = semigroup_apply(spec, tree, 2, 1, 5, inner)
    direct = semigroup_apply(spec, tree, 2, 1, 8, eta)
    np.testing.assert_allclose(nested, direct, rtol=0, atol=1e-12)


def test_comparison_terminal_shift():
    spec = make_spec(diffusion=1.0, lam=0.5)
    _, tree = grid_tree(spec, 5)
    f = lambda t, x, q, y, h, z, u, v: 0.2 * y
    p1 = BsdeProblem(tree=tree, driver=f, terminal=lambda x, q: np.tanh(x) + 1.0)
    p2 = BsdeProblem(tree=tree, driver=f, terminal=lambda x, q: np.tanh(x) + 0.0)
    rep = comparison_check(p1, p2)
    assert rep["verdict"] == "pass"
    s1, s2 = solve_tree(p1), solve_tree(p2)
    assert s1.root - s2.root > 0


def test_comparison_driver_domination():
    spec = make_spec(diffusion=1.0, lam=0.5)
    _, tree = grid_tree(spec, 5)
    p1 = BsdeProblem(tree=tree, driver=drv_const(1.0), terminal=lambda x, q: np.tanh(x))
    p2 = BsdeProblem(tree=tree, driver=drv_const(0.0), terminal=lambda x, q: np.tanh(x))
    assert comparison_check(p1, p2)["verdict"] == "pass"


def test_comparison_inconclusive_on_unordered_data():
    spec = make_spec(diffusion=1.0, lam=0.5)
    _, tree = grid_tree(spec, 3)
    p1 = BsdeProblem(tree=tree, driver=drv_const(0.0), terminal=lambda x, q: -x)
    p2 = BsdeProblem(tree=tree, driver=drv_const(0.0), terminal=lambda x, q: x)
    assert comparison_check(p1, p2)["verdict"] == "inconclusive"


def test_stability_estimate_identical_and_shift():
    spec = make_spec(diffusion=1.0, lam=0.5)
    _, tree = grid_tree(spec, 6)
    f21 = lambda t, y, z, h: 0.3 * y + 0.1 * z
    xi = lambda x, q: np.tanh(x)
    xi_up = lambda x, q: np.tanh(x) + 1.0
    zero = lambda t: 0.0
    rep = stability_estimate_check(tree, f21, zero, zero, xi, xi, C=0.5)
    assert rep["verdict"] == "pass" and rep["lhs"] <= 1e-12
    rep = stability_estimate_check(tree, f21, zero, zero, xi_up, xi, C=0.5)
    assert rep["verdict"] == "pass"
    assert rep["beta"] == pytest.approx(2 + 2 * 0.5 + 4 * 0.25)


def test_regression_martingale_linear_terminal():
    spec = make_spec(diffusion=0.7, lam=0.5)
    g = TimeGrid(t0=0.0, T=1.0, M=8)
    sc = sample_scenarios(g, spec.lam, 4000, seed=21)
    path = simulate_forward(spec, g, sc, 0.0, 0.0, 0.3)
    sol = solve_regression(spec.lam, sc, path,
                           drv_const(0.0), lambda x, q: 2.0 * x, degree=2)
    assert abs(sol.root - 0.6) <= 3.0 * sol.meta["root_se"] + 1e-9


def test_regression_agrees_with_tree_linear_driver():
    a = 0.3
    spec = make_spec(diffusion=1.0, lam=0.5)
    g = TimeGrid(t0=0.0, T=1.0, M=16)
    tree = build_tree(g, spec.lam, 0.0, spec)
    tree_sol = solve_tree(BsdeProblem(
        tree=tree, driver=lambda t, x, q, y, h, z, u, v: a * y,
        terminal=term_const(2.0)))
    sc = sample_scenarios(g, spec.lam, 4000, seed=22)
    path = simulate_forward(spec, g, sc, 0.0, 0.0, 0.0)
    reg = solve_regression(spec.lam, sc, path,
                           lambda t, x, q, y, h, z, u, v: a * y,
                           term_const(2.0), degree=2)
    assert abs(reg.root - tree_sol.root) <= 3.0 * reg.meta["root_se"] + 5e-3


def test_regression_standard_error_rate():
    spec = make_spec(diffusion=1.0, lam=0.4)
    g = TimeGrid(t0=0.0, T=1.0, M=6)

    def run(S, seed):
        sc = sample_scenarios(g, spec.lam, S, seed=seed)
        path = simulate_forward(spec, g, sc, 0.0, 0.0, 0.0)
        sol = solve_regression(spec.lam, sc, path, drv_const(0.0),
                               lambda x, q: np.tanh(x), degree=3)
        return sol.meta["root_se"]

    se1 = run(10_000, 31)
    se2 = run(40_000, 31)
    assert se1 / se2 == pytest.approx(2.0, rel=0.30)


def test_root_lipschitz_ratio_stable_under_doubling():
    spec = make_spec(diffusion={"expr": "0.3*x + 0.8"}, drift={"expr": "0.2*x"},
                     lam=0.5, f1={"expr": "0.3*y1 + 0.2*y2"}, f2={"expr": "0.2*y1"},
                     phi1={"expr": "tanh(x)"}, phi2={"expr": "0.5*x"}, K=0.0)
    ratios = []
    for M in (16, 32):
        g = TimeGrid(t0=0.0, T=1.0, M=M)
        roots = []
        for x0 in (0.2, 0.45):
            tree = build_tree(g, spec.lam, x0, spec)
            sol = solve_tree(BsdeProblem(tree=tree, driver=regime_driver(spec, 1),
                                         terminal=regime_terminal(spec, 1)))
            roots.append(sol.root)
        ratios.append(abs(roots[1] - roots[0]) / 0.25)
    assert ratios[1] == pytest.approx(ratios[0], rel=0.2)
