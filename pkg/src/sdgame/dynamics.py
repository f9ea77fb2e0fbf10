"""Time grids, scenario sampling, the noise lattice, and forward simulation.

Monte Carlo scenarios carry exact Brownian/Poisson increments per (scenario,
step) from counter-based streams, so regeneration is bit-identical and
order-independent. The lattice (MarkovTree) discretizes the driving noise:
a three-point Brownian increment matched to Normal(0, dt) through fourth
moments and a two-point jump branch with probability lam*dt, recombining on
(spatial index, jump parity). Node states follow the one-step Euler map;
where recombining paths disagree (state- or control-dependent coefficients)
the state is the probability-weighted merge of the incoming images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import m_parity

SPATIAL_OFFSETS = (-1, 0, 1)
SPATIAL_PROBS = (1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0)


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    M: int

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("step count M must be at least 1")
        if self.T <= self.t0:
            raise ValueError("horizon must exceed start time")

    @property
    def dt(self):
        return (self.T - self.t0) / self.M

    @property
    def nodes(self):
        return self.t0 + self.dt * np.arange(self.M + 1)


@dataclass(frozen=True)
class ScenarioBundle:
    """Brownian and Poisson increments, (S, M, d) and (S, M) arrays."""

    grid: TimeGrid
    lam: float
    seed: int
    dB: np.ndarray
    dN: np.ndarray

    @property
    def scenario_count(self):
        return self.dB.shape[0]


def _step_rng(seed, k, kind):
    # counter-based stream per (seed, step, kind): order-independent generation
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed), int(k), kind))))


def sample_scenarios(grid, lam, S, seed, brownian_dim=1, warn=None):
    """Draw S scenarios of per-step increments; deterministic in the seed."""
    if S < 1:
        raise ValueError("need at least one scenario")
    dt = grid.dt
    if lam * dt >= 1.0 and warn is not None:
        warn(f"lam*dt = {lam * dt:.3g} >= 1; jump branch on trees would degenerate")
    dB = np.empty((S, grid.M, brownian_dim))
    dN = np.empty((S, grid.M), dtype=np.int64)
    scale = np.sqrt(dt)
    for k in range(grid.M):
        dB[:, k, :] = scale * _step_rng(seed, k, 0).standard_normal((S, brownian_dim))
        if lam > 0.0:
            dN[:, k] = _step_rng(seed, k, 1).poisson(lam * dt, S)
        else:
            dN[:, k] = 0
    return ScenarioBundle(grid=grid, lam=lam, seed=seed, dB=dB, dN=dN)


# ---------------------------------------------------------------------------
# recombining noise lattice
# ---------------------------------------------------------------------------

def as_tree_control(c, default):
    """Normalize a control input to a callable (k, x_array, parity) -> array."""
    if c is None:
        return lambda k, x, q: np.full_like(np.asarray(x, dtype=float), default)
    if np.isscalar(c):
        return lambda k, x, q: np.full_like(np.asarray(x, dtype=float), float(c))
    if callable(c):
        return lambda k, x, q: np.broadcast_to(
            np.asarray(c(k, x, q), dtype=float), np.shape(x)).copy()
    raise TypeError(f"cannot interpret control {c!r}")


@dataclass(frozen=True)
class MarkovTree:
    """Recombining lattice over (step, spatial index, jump parity)."""

    grid: TimeGrid
    lam: float
    x0: float
    states: tuple          # level k: array (2k+1, 2), x at (index, parity)
    probs: tuple           # level k: array (2k+1, 2), node probabilities
    u_ctrl: object         # callables (k, x, parity) -> control arrays
    v_ctrl: object

    @property
    def dt(self):
        return self.grid.dt

    @property
    def jump_prob(self):
        return self.lam * self.dt

    @property
    def brownian_step(self):
        return np.sqrt(3.0 * self.dt)

    def level_size(self, k):
        return 2 * k + 1

    def controls_at(self, k):
        x = self.states[k]
        q = np.broadcast_to(np.array([0, 1]), x.shape)
        return self.u_ctrl(k, x, q), self.v_ctrl(k, x, q)


def build_tree(grid, lam, x0, spec, u=None, v=None):
    """Construct the lattice and propagate node states via the Euler map."""
    if spec.state_dim != 1 or spec.brownian_dim != 1:
        raise ValueError("the lattice oracle is one-dimensional by design")
    dt = grid.dt
    pi = lam * dt
    if pi >= 1.0:
        raise ValueError(f"lam*dt = {pi:.3g} >= 1: refine the time grid")
    uf = as_tree_control(u, spec.control_set_U[0])
    vf = as_tree_control(v, spec.control_set_V[0])
    step = np.sqrt(3.0 * dt)
    jump_branches = ((0, 1.0 - pi), (1, pi)) if pi > 0.0 else ((0, 1.0),)

    states = [np.full((1, 2), float(x0))]
    probs = [np.array([[1.0, 0.0]])]
    times = grid.nodes
    for k in range(grid.M):
        n_next = 2 * (k + 1) + 1
        acc_w = np.zeros((n_next, 2))
        acc_x = np.zeros((n_next, 2))
        xk = states[k]
        pk = probs[k]
        qcols = np.broadcast_to(np.array([0, 1]), xk.shape)
        uk = uf(k, xk, qcols)
        vk = vf(k, xk, qcols)
        drift = spec.b(times[k], xk, uk, vk) * dt
        vol = spec.sigma(times[k], xk, uk, vk)
        for d_idx, (off, p_sp) in enumerate(zip(SPATIAL_OFFSETS, SPATIAL_PROBS)):
            img = xk + drift + vol * (off * step)
            for jmp, p_j in jump_branches:
                w = pk * (p_sp * p_j)
                if jmp == 0:
                    tgt = slice(1 + off, 1 + off + 2 * k + 1)
                    acc_w[tgt, :] += w
                    acc_x[tgt, :] += w * img
                else:
                    acc_w[1 + off: 1 + off + 2 * k + 1, ::-1] += w
                    acc_x[1 + off: 1 + off + 2 * k + 1, ::-1] += w * img
        reached = acc_w > 0.0
        x_next = np.where(reached, acc_x / np.where(reached, acc_w, 1.0), 0.0)
        # unreachable parity slots mirror the reachable one so coefficients stay finite
        other = x_next[:, ::-1]
        x_next = np.where(reached, x_next, other)
        both_empty = ~(reached[:, 0] | reached[:, 1])
        if np.any(both_empty):
            x_next[both_empty, :] = float(x0)
        states.append(x_next)
        probs.append(acc_w)
    return MarkovTree(grid=grid, lam=lam, x0=float(x0), states=tuple(states),
                      probs=tuple(probs), u_ctrl=uf, v_ctrl=vf)


# ---------------------------------------------------------------------------
# forward simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StatePath:
    """Simulated states plus jump counts; regimes per starting index."""

    grid: TimeGrid
    X: np.ndarray        # (S, M+1) or (S, M+1, n)
    cumN: np.ndarray     # (S, M+1) cumulative jump counts
    controls_u: np.ndarray
    controls_v: np.ndarray

    def regime(self, i, k):
        return np.where((self.cumN[:, k] + i) % 2 == 1, 1, 2)

    def parity(self, k):
        return self.cumN[:, k] % 2


def _as_path_control(c, S, M):
    if np.isscalar(c):
        arr = np.full((S, M), float(c))
        return lambda k, t, x, parity: arr[:, k], arr
    if isinstance(c, np.ndarray):
        if c.shape != (S, M):
            raise ValueError(f"open-loop control array must have shape {(S, M)}, got {c.shape}")
        return lambda k, t, x, parity: c[:, k], c.astype(float)
    if callable(c):
        store = np.empty((S, M))

        def fb(k, t, x, parity):
            store[:, k] = np.asarray(c(k, t, x, parity), dtype=float)
            return store[:, k]

        return fb, store
    raise TypeError(f"cannot interpret control {c!r}")


def simulate_forward(spec, grid, scenarios, u, v, x0):
    """Euler step of the controlled diffusion plus the jump-count track."""
    S, M = scenarios.dN.shape
    scalar = spec.state_dim == 1
    uf, u_store = _as_path_control(u, S, M)
    vf, v_store = _as_path_control(v, S, M)
    X = np.empty((S, M + 1)) if scalar else np.empty((S, M + 1, spec.state_dim))
    X[:, 0] = x0
    cumN = np.zeros((S, M + 1), dtype=np.int64)
    times = grid.nodes
    dt = grid.dt
    for k in range(M):
        parity = cumN[:, k] % 2
        uk = uf(k, times[k], X[:, k], parity)
        vk = vf(k, times[k], X[:, k], parity)
        if scalar:
            dx = spec.b(times[k], X[:, k], uk, vk) * dt \
                + spec.sigma(times[k], X[:, k], uk, vk) * scenarios.dB[:, k, 0]
        else:
            bmat = np.asarray(spec.b(times[k], X[:, k], uk, vk))
            smat = np.asarray(spec.sigma(times[k], X[:, k], uk, vk))
            dx = bmat * dt + np.einsum("...ij,...j->...i", smat, scenarios.dB[:, k, :])
        X[:, k + 1] = X[:, k] + dx
        bad = ~np.isfinite(np.atleast_1d(X[:, k + 1]).reshape(S, -1)).all(axis=1)
        if bad.any():
            s_idx = int(np.argmax(bad))
            raise FloatingPointError(
                f"non-finite state at scenario {s_idx}, step {k + 1}")
        cumN[:, k + 1] = cumN[:, k] + scenarios.dN[:, k]
    return StatePath(grid=grid, X=X, cumN=cumN, controls_u=u_store, controls_v=v_store)


def moment_check(spec, grid, scenarios, x0, x0p, u, v):
    """Sampled forms of the flow estimates: shift ratio and excursion ratio."""
    p1 = simulate_forward(spec, grid, scenarios, u, v, x0)
    p2 = simulate_forward(spec, grid, scenarios, u, v, x0p)
    dev = np.max(np.abs(p1.X - p2.X), axis=1)
    exc = np.max(np.abs(p1.X - (x0 if np.isscalar(x0) else np.asarray(x0))), axis=1)
    denom = abs(x0 - x0p) ** 2 if np.isscalar(x0) else float(np.sum((np.asarray(x0) - np.asarray(x0p)) ** 2))
    shift_ratio = 0.0 if denom == 0.0 else float(np.mean(dev ** 2) / denom)
    if denom == 0.0 and float(np.max(dev)) > 0.0:
        shift_ratio = float("inf")
    x0n = abs(x0) if np.isscalar(x0) else float(np.linalg.norm(x0))
    exc_ratio = float(np.mean(exc ** 2) / ((1.0 + x0n ** 2) * (grid.T - grid.t0)))
    return {"shift_ratio": shift_ratio, "excursion_ratio": exc_ratio}


def moment_refinement_report(spec, lam, t0, T, Ms, x0, x0p, u, v, S, seed):
    """Ratios across grid refinements; flags growth by more than 2x per doubling."""
    rows = []
    for M in Ms:
        grid = TimeGrid(t0=t0, T=T, M=M)
        sc = sample_scenarios(grid, lam, S, seed, brownian_dim=spec.brownian_dim)
        r = moment_check(spec, grid, sc, x0, x0p, u, v)
        rows.append({"M": M, **r})
    flagged = False
    for a, b in zip(rows, rows[1:]):
        for key in ("shift_ratio", "excursion_ratio"):
            if a[key] > 0 and b[key] > 2.0 * a[key]:
                flagged = True
    return {"rows": rows, "diverging": flagged}


def dump_paths(path, state_path, scenarios):
    """CSV path dump: scenario,k,t,x,regime1,regime2,dB,dN."""
    times = state_path.grid.nodes
    S, Mp1 = state_path.X.shape[0], state_path.X.shape[1]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("scenario,k,t,x,regime1,regime2,dB,dN\r\n")
        for s in range(S):
            for k in range(Mp1):
                r1 = m_parity(1 + int(state_path.cumN[s, k]))
                r2 = m_parity(2 + int(state_path.cumN[s, k]))
                db = scenarios.dB[s, k, 0] if k < Mp1 - 1 else 0.0
                dn = scenarios.dN[s, k] if k < Mp1 - 1 else 0
                xval = state_path.X[s, k] if state_path.X.ndim == 2 else state_path.X[s, k, 0]
                fh.write(f"{s},{k},{times[k]:.17g},{xval:.17g},{r1},{r2},{db:.17g},{dn}\r\n")
