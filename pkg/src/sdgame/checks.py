"""Named verification checks and the randomized instance generators.

Each report function returns a JSON-ready dict with a "verdict" key in
{"PASS", "FAIL", "INCONCLUSIVE"}. The CLI dispatches onto these; the
acceptance suite calls them directly with its own sizes.
"""

from __future__ import annotations

import numpy as np

from .bsde import (
    BsdeProblem, comparison_check, decouple_check, regime_terminal,
    semigroup_apply, solve_tree, stability_estimate_check, regime_driver,
)
from .dynamics import TimeGrid, build_tree
from .game import dpp_refinement_report
from .isaacs_pde import (
    SpaceGrid, coincidence_check, isaacs_gap, regularity_refinement_report,
    solve_coupled_isaacs,
)
from .model import GameSpec, Coefficient


# ---------------------------------------------------------------------------
# randomized instances
# ---------------------------------------------------------------------------

def random_small_spec(seed, max_M=6, max_controls=3):
    """Small random game with state/control-dependent coefficients.

    Constants are kept modest so the one-step recursion stays contractive;
    the intensity respects lam*dt < 1 and K - lam > -1.
    """
    rng = np.random.default_rng(seed)
    M = int(rng.integers(1, max_M + 1))
    T = float(rng.uniform(0.5, 1.0))
    lam = float(rng.uniform(0.05, 0.9))
    nu = int(rng.integers(1, max_controls + 1))
    nv = int(rng.integers(1, max_controls + 1))
    U = tuple(np.round(np.sort(rng.uniform(-1, 1, size=nu)), 3))
    V = tuple(np.round(np.sort(rng.uniform(-1, 1, size=nv)), 3))
    c = rng.uniform(-0.4, 0.4, size=12)
    K = 0.0
    spec = GameSpec(
        T=T,
        drift=Coefficient({"expr": f"{c[0]:.4f}*x + {c[1]:.4f}*u + {c[2]:.4f}*v"}, "drift"),
        diffusion=Coefficient({"expr": f"{c[3]:.4f}*x + 0.9 + {c[4]:.4f}*u"}, "diffusion"),
        ftilde1=Coefficient({"expr": f"{abs(c[5]):.4f}*y2 + {c[6]:.4f}*z + {c[7]:.4f}*u + tanh(x)"}, "driver"),
        ftilde2=Coefficient({"expr": f"{abs(c[8]):.4f}*y1 + {c[9]:.4f}*x + {c[10]:.4f}*v"}, "driver"),
        phi1=Coefficient({"expr": "tanh(x)"}, "terminal"),
        phi2=Coefficient({"expr": f"{c[11]:.4f}*x"}, "terminal"),
        control_set_U=U, control_set_V=V,
        lam=lam, K=K, lipschitz_bound=3.0,
    )
    grid = TimeGrid(t0=0.0, T=T, M=M)
    x0 = float(rng.normal(0.0, 0.5))
    utab = rng.choice(U, size=M)
    vtab = rng.choice(V, size=M)
    u_ctrl = lambda k, x, q: utab[k] + 0.0 * x
    v_ctrl = lambda k, x, q: vtab[k] + 0.0 * x
    return spec, grid, x0, u_ctrl, v_ctrl


def random_ordered_problems(seed, max_M=6):
    """A lattice plus two problems with ordered terminals and drivers.

    The driver jump slopes are kept nonnegative, which makes the explicit
    one-step recursion monotone at these step sizes, so the ordering must
    propagate exactly.
    """
    rng = np.random.default_rng(seed)
    spec, grid, x0, u_ctrl, v_ctrl = random_small_spec(seed + 10_000, max_M=max_M)
    tree = build_tree(grid, spec.lam, x0, spec, u=u_ctrl, v=v_ctrl)
    ay, az, ah = rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(0.0, 0.4)
    gap_f = float(rng.uniform(0.0, 0.5))
    gap_xi = float(rng.uniform(0.0, 0.5))
    scale = float(rng.uniform(0.5, 1.5))

    def f_lo(t, x, q, y, h, z, u, v):
        return ay * y + az * z + ah * h + 0.3 * np.tanh(x)

    def f_hi(t, x, q, y, h, z, u, v):
        return f_lo(t, x, q, y, h, z, u, v) + gap_f

    def xi_lo(x, q):
        return scale * np.tanh(x) + 0.1 * q

    def xi_hi(x, q):
        return xi_lo(x, q) + gap_xi

    hi = BsdeProblem(tree=tree, driver=f_hi, terminal=xi_hi)
    lo = BsdeProblem(tree=tree, driver=f_lo, terminal=xi_lo)
    return hi, lo, tree


def random_estimate_instance(seed, max_M=8):
    """Tree plus the pieces of an additive-perturbation stability instance."""
    rng = np.random.default_rng(seed)
    spec, grid, x0, u_ctrl, v_ctrl = random_small_spec(seed + 20_000, max_M=max_M)
    tree = build_tree(grid, spec.lam, x0, spec, u=u_ctrl, v=v_ctrl)
    ay, az, ak = (float(rng.uniform(-0.5, 0.5)) for _ in range(3))
    C = abs(ay) + abs(az) + abs(ak) + 1e-6
    w1, w2 = float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))
    s1, s2 = float(rng.uniform(0.5, 1.5)), float(rng.uniform(-0.5, 0.5))

    def f21(t, y, z, k):
        return ay * y + az * z + ak * k

    phi_1 = lambda t: w1 * np.sin(3.0 * t)
    phi_2 = lambda t: w2 * np.cos(2.0 * t)
    xi1 = lambda x, q: s1 * np.tanh(x) + 0.2 * q
    xi2 = lambda x, q: s1 * np.tanh(x) + s2 * np.cos(x)
    return tree, f21, phi_1, phi_2, xi1, xi2, C


# ---------------------------------------------------------------------------
# named reports
# ---------------------------------------------------------------------------

def decouple_report(spec, tree_M=8, seed=0, tol=1e-9):
    rng = np.random.default_rng(seed)
    grid = TimeGrid(t0=0.0, T=spec.T, M=tree_M)
    utab = rng.choice(spec.control_set_U, size=tree_M)
    vtab = rng.choice(spec.control_set_V, size=tree_M)
    tree = build_tree(grid, spec.lam, 0.0, spec,
                      u=lambda k, x, q: utab[k] + 0.0 * x,
                      v=lambda k, x, q: vtab[k] + 0.0 * x)
    rep = decouple_check(spec, tree)
    rep["tolerance"] = tol
    rep["verdict"] = "PASS" if rep["max_discrepancy"] <= tol else "FAIL"
    return rep


def decouple_suite_report(instances=100, seed0=0, tol=1e-9, max_M=6):
    worst = 0.0
    for i in range(instances):
        spec, grid, x0, u_ctrl, v_ctrl = random_small_spec(seed0 + i, max_M=max_M)
        tree = build_tree(grid, spec.lam, x0, spec, u=u_ctrl, v=v_ctrl)
        worst = max(worst, decouple_check(spec, tree)["max_discrepancy"])
    return {"check": "decouple", "instances": instances,
            "max_discrepancy": worst, "tolerance": tol,
            "verdict": "PASS" if worst <= tol else "FAIL"}


def comparison_suite_report(instances=200, seed0=0, tol=1e-10):
    violations = 0
    inconclusive = 0
    worst = 0.0
    for i in range(instances):
        hi, lo, _tree = random_ordered_problems(seed0 + i)
        rep = comparison_check(hi, lo, tol=tol)
        if rep["verdict"] == "inconclusive":
            inconclusive += 1
        elif rep["verdict"] == "fail":
            violations += 1
            worst = max(worst, rep["violation"])
        else:
            worst = max(worst, rep["violation"])
    return {"check": "comparison", "instances": instances,
            "violations": violations, "inconclusive": inconclusive,
            "max_signed_gap": worst, "tolerance": tol,
            "verdict": "PASS" if violations == 0 else "FAIL"}


def estimate_suite_report(instances=100, seed0=0, tol=1e-10):
    violations = 0
    margin = np.inf
    for i in range(instances):
        tree, f21, p1, p2, xi1, xi2, C = random_estimate_instance(seed0 + i)
        rep = stability_estimate_check(tree, f21, p1, p2, xi1, xi2, C, tol=tol)
        if rep["verdict"] == "fail":
            violations += 1
        margin = min(margin, rep["rhs"] - rep["lhs"])
    return {"check": "estimate", "instances": instances,
            "violations": violations, "min_margin": float(margin),
            "tolerance": tol,
            "verdict": "PASS" if violations == 0 else "FAIL"}


def semigroup_flow_report(spec, tree_M=8, seed=0, tol=1e-12):
    rng = np.random.default_rng(seed)
    grid = TimeGrid(t0=0.0, T=spec.T, M=tree_M)
    tree = build_tree(grid, spec.lam, 0.0, spec)
    worst = 0.0
    for i in (1, 2):
        full = solve_tree(BsdeProblem(tree=tree, driver=regime_driver(spec, i),
                                      terminal=regime_terminal(spec, i)))
        eta = full.Y[tree_M]
        cuts = sorted(set(int(k) for k in rng.integers(1, tree_M, size=3)))
        for kmid in cuts:
            inner = semigroup_apply(spec, tree, i, kmid, tree_M, eta)
            nested = semigroup_apply(spec, tree, i, 0, kmid, inner)
            direct = semigroup_apply(spec, tree, i, 0, tree_M, eta)
            worst = max(worst, float(np.max(np.abs(nested - direct))))
    return {"check": "semigroup-flow", "max_residual": worst, "tolerance": tol,
            "verdict": "PASS" if worst <= tol else "FAIL"}


def dpp_report(spec, x_min, x_max, J, M, levels=3, delta=1, shrink=1.5,
               abs_tol=None):
    xg = SpaceGrid(x_min, x_max, J)
    rep = dpp_refinement_report(spec, xg, 0.0, spec.T, M, levels=levels,
                                delta=delta)
    rep["check"] = "dpp"
    res0 = rep["rows"][0]["residual"]
    if abs_tol is not None and res0 <= abs_tol:
        rep["verdict"] = "PASS"
    elif all(s >= shrink for s in rep["shrink_factors"]):
        rep["verdict"] = "PASS"
    else:
        rep["verdict"] = "FAIL"
    return rep


def regularity_report(spec, x_min, x_max, Ms=(64, 128, 256), rel_band=0.2):
    rows = []
    for M in Ms:
        # space resolution follows the parabolic step bound
        J = max(9, int(np.sqrt(M)) * 4 + 1)
        xg = SpaceGrid(x_min, x_max, J)
        rep = regularity_refinement_report(spec, xg, 0.0, spec.T, (M,))
        rows.append({"M": M, "J": J, "stats": rep["rows"][0]["stats"]})
    stable = True
    details = {}
    for label in rows[0]["stats"]:
        for key in ("spatial_quotient", "time_hoelder", "growth"):
            vals = [r["stats"][label][key] for r in rows]
            ref = max(abs(v) for v in vals)
            band = (max(vals) - min(vals)) <= rel_band * ref if ref > 1e-12 else True
            details[f"{label}.{key}"] = {"values": vals, "stable": bool(band)}
            stable = stable and band
    return {"check": "regularity", "rows": rows, "details": details,
            "verdict": "PASS" if stable else "FAIL"}


def coincidence_report(spec, x_min, x_max, J, M, levels=3):
    xg = SpaceGrid(x_min, x_max, J)
    tg = TimeGrid(t0=0.0, T=spec.T, M=M)
    rep = coincidence_check(spec, xg, tg, levels=levels)
    rep["check"] = "coincidence"
    rep["verdict"] = {"pass": "PASS", "fail": "FAIL"}.get(
        rep["verdict"], "INCONCLUSIVE")
    return rep


def isaacs_report(spec):
    rep = isaacs_gap(spec)
    rep["check"] = "isaacs-gap"
    rep["verdict"] = "PASS" if rep["isaacs"] else "FAIL"
    return rep


def solve_fields(spec, x_min, x_max, J, M, orientations=("p1", "p2"),
                 kinds=("lower",)):
    xg = SpaceGrid(x_min, x_max, J)
    tg = TimeGrid(t0=0.0, T=spec.T, M=M)
    out = {}
    for o in orientations:
        for kind in kinds:
            out[(o, kind)] = solve_coupled_isaacs(spec, xg, tg, o, kind)
    return out
