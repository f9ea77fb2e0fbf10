"""Hamiltonians, minimax-order gaps, and the coupled explicit field solver.

The two value components of one optimization orientation solve a coupled
pair of degenerate parabolic equations: each component's nonlinearity reads
both components' values at the same point (the jump coupling collapses to a
same-point read because the driving noise never displaces the state at a
jump). The scheme is explicit and monotone under the stated step bound:
central second differences, drift-upwinded first differences, coupling
arguments taken from the already-computed later slice.

Orientation fixes the optimization order for both components:

    p1 lower  sup_u inf_v   components labelled (W1, W2')
    p2 lower  sup_v inf_u   components labelled (W1', W2)
    p1 upper  inf_v sup_u   components labelled (U1, U2')
    p2 upper  inf_u sup_v   components labelled (U1', U2)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import TimeGrid


class CflError(RuntimeError):
    def __init__(self, msg, suggested_M=None):
        super().__init__(msg)
        self.suggested_M = suggested_M


@dataclass(frozen=True)
class SpaceGrid:
    x_min: float
    x_max: float
    J: int
    boundary: str = "linear-extrapolation"

    def __post_init__(self):
        if self.x_min >= self.x_max:
            raise ValueError("x_min must be below x_max")
        if self.J < 3:
            raise ValueError("need at least three space nodes")

    @property
    def dx(self):
        return (self.x_max - self.x_min) / (self.J - 1)

    @property
    def nodes(self):
        return self.x_min + self.dx * np.arange(self.J)


FIELD_LABELS = {
    ("p1", "lower"): ("W1", "W2p"),
    ("p2", "lower"): ("W1p", "W2"),
    ("p1", "upper"): ("U1", "U2p"),
    ("p2", "upper"): ("U1p", "U2"),
}

ORDER_OF = {
    ("p1", "lower"): "sup_u_inf_v",
    ("p2", "lower"): "sup_v_inf_u",
    ("p1", "upper"): "inf_v_sup_u",
    ("p2", "upper"): "inf_u_sup_v",
}


@dataclass(frozen=True)
class ValueField:
    orientation: str            # "p1" | "p2"
    kind: str                   # "lower" | "upper"
    tgrid: TimeGrid
    xgrid: SpaceGrid
    comp1: np.ndarray           # (M+1, J), payoff-1 component
    comp2: np.ndarray           # (M+1, J), payoff-2 component

    @property
    def labels(self):
        return FIELD_LABELS[(self.orientation, self.kind)]

    def component(self, c):
        return self.comp1 if c == 1 else self.comp2

    def interp(self, c, k, x):
        """Linear interpolation of component c on time slice k (clipped)."""
        xs = self.xgrid.nodes
        return np.interp(np.clip(x, xs[0], xs[-1]), xs, self.component(c)[k])


@dataclass(frozen=True)
class HamiltonianInputs:
    t: float
    x: float
    y1: float
    y2: float
    p: float
    A: float
    u: float | None = None
    v: float | None = None


def hamiltonian(spec, i, inp):
    """0.5*sigma^2*A + p*b + running cost at explicit controls."""
    sig = spec.sigma(inp.t, inp.x, inp.u, inp.v)
    b = spec.b(inp.t, inp.x, inp.u, inp.v)
    f = spec.ftilde(i, inp.t, inp.x, inp.y1, inp.y2, inp.p * sig, inp.u, inp.v)
    return 0.5 * sig * sig * inp.A + inp.p * b + f


_ORDERS = ("sup_u_inf_v", "inf_v_sup_u", "sup_v_inf_u", "inf_u_sup_v")


def minimax_hamiltonian(spec, i, inp, order):
    """Exact optimization over the finite control grids; ties at lowest index."""
    if order not in _ORDERS:
        raise ValueError(f"order must be one of {_ORDERS}")
    U, V = spec.control_set_U, spec.control_set_V
    table = np.array([[hamiltonian(spec, i, HamiltonianInputs(
        inp.t, inp.x, inp.y1, inp.y2, inp.p, inp.A, u, v)) for v in V] for u in U])

    def scan(vals, want_max):
        best, arg = vals[0], 0
        for idx in range(1, len(vals)):
            better = vals[idx] > best if want_max else vals[idx] < best
            if better:
                best, arg = vals[idx], idx
        return best, arg

    outer_is_u = order in ("sup_u_inf_v", "inf_u_sup_v")
    outer_max = order.startswith("sup")
    outer_vals = []
    inner_args = []
    n_outer = len(U) if outer_is_u else len(V)
    for io in range(n_outer):
        row = table[io, :] if outer_is_u else table[:, io]
        val, ai = scan(row, not outer_max)
        outer_vals.append(val)
        inner_args.append(ai)
    val, ao = scan(outer_vals, outer_max)
    if outer_is_u:
        pair = (U[ao], V[inner_args[ao]])
    else:
        pair = (U[inner_args[ao]], V[ao])
    return float(val), pair


def default_gap_sample(spec, x_lo=-2.0, x_hi=2.0):
    """Tensor sample over (t, x, y1, y2, p, A) for the order-gap scan."""
    ts = np.array([0.0, 0.5 * spec.T, spec.T])
    xs = np.linspace(x_lo, x_hi, 5)
    ys = np.array([-1.0, 0.0, 1.0])
    ps = np.array([-1.0, 0.0, 1.0])
    As = np.array([-2.0, 0.0, 2.0])
    grids = np.meshgrid(ts, xs, ys, ys, ps, As, indexing="ij")
    flat = [g.ravel() for g in grids]
    return np.stack(flat, axis=1)  # columns t, x, y1, y2, p, A


def isaacs_gap(spec, samples=None, tol=1e-12):
    """Max over samples of both order gaps; flags the pair interchangeable."""
    if samples is None:
        samples = default_gap_sample(spec)
    samples = np.asarray(samples, dtype=float)
    U = np.asarray(spec.control_set_U)
    V = np.asarray(spec.control_set_V)
    t, x, y1, y2, p, A = (samples[:, j][:, None, None] for j in range(6))
    u = U[None, :, None]
    v = V[None, None, :]
    gap_lower = 0.0
    gap_primed = 0.0
    for i in (1, 2):
        sig = np.broadcast_to(spec.sigma(t, x, u, v), (len(samples), len(U), len(V)))
        b = np.broadcast_to(spec.b(t, x, u, v), sig.shape)
        f = np.broadcast_to(spec.ftilde(i, t, x, y1, y2, p * sig, u, v), sig.shape)
        H = 0.5 * sig * sig * A + p * b + f
        sup_u_inf_v = H.min(axis=2).max(axis=1)
        inf_v_sup_u = H.max(axis=1).min(axis=1)
        sup_v_inf_u = H.min(axis=1).max(axis=1)
        inf_u_sup_v = H.max(axis=2).min(axis=1)
        gap_lower = max(gap_lower, float(np.max(np.abs(inf_v_sup_u - sup_u_inf_v))))
        gap_primed = max(gap_primed, float(np.max(np.abs(inf_u_sup_v - sup_v_inf_u))))
    return {
        "gap_lower_order": gap_lower,
        "gap_primed_order": gap_primed,
        "isaacs": bool(gap_lower <= tol and gap_primed <= tol),
        "samples": len(samples),
    }


# ---------------------------------------------------------------------------
# explicit coupled solver
# ---------------------------------------------------------------------------

def _coefficient_maxima(spec, xgrid, n_t=5):
    ts = np.linspace(0.0, spec.T, n_t)
    xs = xgrid.nodes
    smax = bmax = 0.0
    for u in spec.control_set_U:
        for v in spec.control_set_V:
            for t in ts:
                smax = max(smax, float(np.max(np.abs(spec.sigma(t, xs, u, v)))))
                bmax = max(bmax, float(np.max(np.abs(spec.b(t, xs, u, v)))))
    return smax, bmax


def cfl_max_dt(spec, xgrid):
    """Step bound dx^2 / (max sigma^2 + dx max|b| + dx^2 (C + lam))."""
    smax, bmax = _coefficient_maxima(spec, xgrid)
    dx = xgrid.dx
    denom = smax * smax + dx * bmax + dx * dx * (spec.lipschitz_bound + spec.lam)
    return dx * dx / denom if denom > 0 else math.inf


def check_cfl(spec, xgrid, tgrid):
    bound = cfl_max_dt(spec, xgrid)
    if tgrid.dt > bound * (1.0 + 1e-12):
        need = int(math.ceil((tgrid.T - tgrid.t0) / bound))
        raise CflError(
            f"dt = {tgrid.dt:.3g} exceeds the stability bound {bound:.3g}; "
            f"use M >= {need}", suggested_M=need)


def _differences(V, dx):
    """Central second, one-sided first at the edges, central first inside.

    Ghost values are linear extrapolations, so the boundary second difference
    vanishes and the boundary first differences are one-sided.
    """
    J = V.shape[0]
    d2 = np.zeros(J)
    d2[1:-1] = (V[2:] - 2.0 * V[1:-1] + V[:-2]) / (dx * dx)
    fwd = np.empty(J)
    fwd[:-1] = (V[1:] - V[:-1]) / dx
    fwd[-1] = (V[-1] - V[-2]) / dx
    bwd = np.empty(J)
    bwd[1:] = (V[1:] - V[:-1]) / dx
    bwd[0] = (V[1] - V[0]) / dx
    ctr = 0.5 * (fwd + bwd)
    return d2, fwd, bwd, ctr


def _optimize(cands, order, nU, nV):
    """Reduce a (nU, nV, J) candidate table; ties resolved at lowest index."""
    if order == "sup_u_inf_v":
        return cands.min(axis=1).max(axis=0)
    if order == "inf_v_sup_u":
        return cands.max(axis=0).min(axis=0)
    if order == "sup_v_inf_u":
        return cands.min(axis=0).max(axis=0)
    if order == "inf_u_sup_v":
        return cands.max(axis=1).min(axis=0)
    raise ValueError(order)


def solve_coupled_isaacs(spec, xgrid, tgrid, orientation="p1", kind="lower"):
    """Backward explicit sweep of the coupled pair for one orientation."""
    if spec.state_dim != 1:
        raise ValueError("field solver is one-dimensional")
    if (orientation, kind) not in FIELD_LABELS:
        raise ValueError(f"unknown orientation/kind {(orientation, kind)!r}")
    check_cfl(spec, xgrid, tgrid)
    order = ORDER_OF[(orientation, kind)]
    xs = xgrid.nodes
    dx = xgrid.dx
    dt = tgrid.dt
    M = tgrid.M
    times = tgrid.nodes
    U, V = spec.control_set_U, spec.control_set_V
    comp = {1: np.empty((M + 1, xgrid.J)), 2: np.empty((M + 1, xgrid.J))}
    comp[1][M] = spec.phi(1, xs)
    comp[2][M] = spec.phi(2, xs)
    for k in range(M - 1, -1, -1):
        later = {c: comp[c][k + 1] for c in (1, 2)}
        diffs = {c: _differences(later[c], dx) for c in (1, 2)}
        for c in (1, 2):
            d2, fwd, bwd, ctr = diffs[c]
            cands = np.empty((len(U), len(V), xgrid.J))
            for iu, u in enumerate(U):
                for iv, v in enumerate(V):
                    sig = np.broadcast_to(np.asarray(
                        spec.sigma(times[k], xs, u, v), dtype=float), xs.shape)
                    b = np.broadcast_to(np.asarray(
                        spec.b(times[k], xs, u, v), dtype=float), xs.shape)
                    dv = np.where(b > 0, fwd, np.where(b < 0, bwd, ctr))
                    f = spec.ftilde(i=c, t=times[k], x=xs, y1=later[1],
                                    y2=later[2], z=ctr * sig, u=u, v=v)
                    cands[iu, iv] = later[c] + dt * (
                        0.5 * sig * sig * d2 + b * dv + f)
            comp[c][k] = _optimize(cands, order, len(U), len(V))
        bad = ~np.isfinite(comp[1][k]) | ~np.isfinite(comp[2][k])
        if bad.any():
            j = int(np.argmax(bad))
            raise FloatingPointError(f"non-finite field value at (k={k}, j={j})")
    return ValueField(orientation=orientation, kind=kind, tgrid=tgrid,
                      xgrid=xgrid, comp1=comp[1], comp2=comp[2])


# ---------------------------------------------------------------------------
# field diagnostics
# ---------------------------------------------------------------------------

def _interior(xgrid, margin=3):
    return slice(margin, xgrid.J - margin)


def coincidence_check(spec, xgrid, tgrid, levels=3, gap_tol=1e-12):
    """Upper-vs-lower sup differences across a refinement ladder."""
    gaps = isaacs_gap(spec, tol=gap_tol)
    report = {"isaacs": gaps, "levels": [], "verdict": "inconclusive"}
    if not gaps["isaacs"]:
        return report
    diffs = []
    for lev in range(levels):
        J = (xgrid.J - 1) * (2 ** lev) + 1
        M = tgrid.M * (4 ** lev)  # parabolic scaling keeps the step bound
        xg = SpaceGrid(xgrid.x_min, xgrid.x_max, J)
        tg = TimeGrid(tgrid.t0, tgrid.T, M)
        inner = _interior(xg)
        level = {"J": J, "M": M, "dx": xg.dx, "dt": tg.dt, "diffs": {}}
        worst = 0.0
        for orient in ("p1", "p2"):
            lo = solve_coupled_isaacs(spec, xg, tg, orient, "lower")
            hi = solve_coupled_isaacs(spec, xg, tg, orient, "upper")
            for c in (1, 2):
                d = float(np.max(np.abs(hi.component(c)[:, inner]
                                        - lo.component(c)[:, inner])))
                level["diffs"][f"{hi.labels[c - 1]}-{lo.labels[c - 1]}"] = d
                worst = max(worst, d)
        level["max_diff"] = worst
        report["levels"].append(level)
        diffs.append(worst)
    shrinks = [diffs[i] / diffs[i + 1] if diffs[i + 1] > 0 else math.inf
               for i in range(len(diffs) - 1)]
    report["shrink_factors"] = shrinks
    if diffs[0] == 0.0:
        report["verdict"] = "pass"
    else:
        report["verdict"] = "pass" if all(s >= 1.5 for s in shrinks) else "fail"
    # fitted tolerance model: diff ~ c1*dx + c2*dt
    A = np.array([[lv["dx"], lv["dt"]] for lv in report["levels"]])
    c, *_ = np.linalg.lstsq(A, np.array(diffs), rcond=None)
    report["fitted_c1_c2"] = [float(c[0]), float(c[1])]
    return report


def field_regularity_check(field, margin=3, time_pairs=64):
    """Spatial quotient, time-Hoelder ratio, and growth statistics."""
    xg, tg = field.xgrid, field.tgrid
    inner = _interior(xg, margin)
    xs = xg.nodes[inner]
    times = tg.nodes
    out = {}
    ks = np.unique(np.linspace(0, tg.M, min(time_pairs, tg.M + 1)).astype(int))
    for c, label in ((1, field.labels[0]), (2, field.labels[1])):
        V = field.component(c)[:, inner]
        sq = float(np.max(np.abs(np.diff(V, axis=1)))) / xg.dx if V.shape[1] > 1 else 0.0
        growth = float(np.max(np.abs(V) / (1.0 + np.abs(xs))[None, :]))
        hoelder = 0.0
        for a_i, ka in enumerate(ks):
            for kb in ks[a_i + 1:]:
                dtp = math.sqrt(abs(times[kb] - times[ka]))
                r = np.max(np.abs(V[kb] - V[ka]) / (1.0 + np.abs(xs))) / dtp
                hoelder = max(hoelder, float(r))
        out[label] = {"spatial_quotient": sq, "time_hoelder": hoelder,
                      "growth": growth}
    return out


def regularity_refinement_report(spec, xgrid, t0, T, Ms, orientation="p1",
                                 kind="lower", margin=3):
    """Regularity statistics across time refinements; flags >2x growth."""
    rows = []
    for M in Ms:
        tg = TimeGrid(t0=t0, T=T, M=M)
        field = solve_coupled_isaacs(spec, xgrid, tg, orientation, kind)
        stats = field_regularity_check(field, margin=margin)
        rows.append({"M": M, "stats": stats})
    flagged = False
    for a, b in zip(rows, rows[1:]):
        for label in a["stats"]:
            for key in ("spatial_quotient", "time_hoelder", "growth"):
                va, vb = a["stats"][label][key], b["stats"][label][key]
                if va > 1e-12 and vb > 2.0 * va:
                    flagged = True
    return {"rows": rows, "diverging": flagged}


def dump_field(path, fields):
    """CSV dump k,t,j,x,<labels...> for one or more fields on common grids."""
    fields = list(fields)
    f0 = fields[0]
    cols = []
    for f in fields:
        cols.append((f.labels[0], f.comp1))
        cols.append((f.labels[1], f.comp2))
    header = "k,t,j,x," + ",".join(lbl for lbl, _ in cols)
    times = f0.tgrid.nodes
    xs = f0.xgrid.nodes
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(header + "\r\n")
        for k in range(f0.tgrid.M + 1):
            for j in range(f0.xgrid.J):
                vals = ",".join(f"{arr[k, j]:.17g}" for _, arr in cols)
                fh.write(f"{k},{times[k]:.17g},{j},{xs[j]:.17g},{vals}\r\n")
