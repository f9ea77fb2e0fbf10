"""Game specification: coefficients, regime maps, and assumption probes.

A game is specified by drift/diffusion coefficients b, sigma, two running-cost
drivers ftilde_1, ftilde_2 (each may read both players' value components), two
terminal costs Phi_1, Phi_2, finite control grids U and V, a jump intensity
lam, and the structural constants (K, lipschitz_bound, coefficient_bound).

Coefficients come either from a small parametric catalog or from expression
strings over {t, x, y1, y2, z, u, v}; both evaluate vectorized over numpy
arrays. Structural assumptions (Lipschitz bounds, monotonicity in the
coupling argument, intensity condition) are semidecidable, so they are probed
on a fixed low-discrepancy sample rather than proven.
"""

from __future__ import annotations

import ast
import json
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.stats import qmc

DIV_GUARD = 1e-12
PROBE_POINTS = 10_000


class ConfigError(ValueError):
    """Raised for malformed specification documents or expressions."""


# ---------------------------------------------------------------------------
# regime bookkeeping
# ---------------------------------------------------------------------------

def m_parity(j):
    """Map a jump count to a regime index: 1 for odd j, 2 for even j."""
    if j < 0:
        raise ValueError(f"jump count must be nonnegative, got {j}")
    return 1 if j % 2 == 1 else 2


def regime_at(i, jump_count):
    """Regime after `jump_count` Poisson jumps when starting from index i."""
    if i not in (1, 2):
        raise ValueError(f"start index must be 1 or 2, got {i}")
    return m_parity(i + jump_count)


def flip_regime(r):
    return 2 if r == 1 else 1


class FieldLabel(NamedTuple):
    """Value-field label: a component index plus a primed flag."""

    value: int
    primed: bool

    def __str__(self):
        return f"{self.value}'" if self.primed else f"{self.value}"


def n_map(j, l):
    """Label of the reference field for payoff j observed in regime l.

    Plain j when the regime matches the payoff index, primed l otherwise.
    """
    if j not in (1, 2) or l not in (1, 2):
        raise ValueError(f"indices must be in {{1,2}}, got ({j}, {l})")
    if l == j:
        return FieldLabel(j, False)
    return FieldLabel(l, True)


# ---------------------------------------------------------------------------
# coefficient catalog and expression trees
# ---------------------------------------------------------------------------

_ROLE_VARS = {
    "drift": ("t", "x", "u", "v"),
    "diffusion": ("t", "x", "u", "v"),
    "driver": ("t", "x", "y1", "y2", "z", "u", "v"),
    "terminal": ("x",),
}

_FUNCS = {
    "min": np.minimum,
    "max": np.maximum,
    "abs": np.abs,
    "exp": np.exp,
    "tanh": np.tanh,
    "sin": np.sin,
    "cos": np.cos,
}

_guard_hits = [0]


def _guarded_div(a, b):
    """Total division: denominators below DIV_GUARD are clamped (and counted)."""
    b = np.asarray(b, dtype=float)
    small = np.abs(b) < DIV_GUARD
    if np.any(small):
        _guard_hits[0] += int(np.count_nonzero(small))
        b = np.where(small, np.where(b < 0, -DIV_GUARD, DIV_GUARD), b)
    return a / b


def _compile_expr(text, role):
    """Compile an expression string into a vectorized closure over the role's variables."""
    allowed = set(_ROLE_VARS[role])
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse expression {text!r}: {exc}") from exc

    def build(node):
        if isinstance(node, ast.Expression):
            return build(node.body)
        if isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)):
                raise ConfigError(f"non-numeric constant in {text!r}")
            val = float(node.value)
            return lambda env: val
        if isinstance(node, ast.Name):
            if node.id not in allowed:
                raise ConfigError(
                    f"variable {node.id!r} not allowed in a {role} expression"
                )
            name = node.id
            return lambda env: env[name]
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            inner = build(node.operand)
            if isinstance(node.op, ast.USub):
                return lambda env: -inner(env)
            return inner
        if isinstance(node, ast.BinOp) and isinstance(
            node.op, (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)
        ):
            lhs, rhs = build(node.left), build(node.right)
            if isinstance(node.op, ast.Add):
                return lambda env: lhs(env) + rhs(env)
            if isinstance(node.op, ast.Sub):
                return lambda env: lhs(env) - rhs(env)
            if isinstance(node.op, ast.Mult):
                return lambda env: lhs(env) * rhs(env)
            if isinstance(node.op, ast.Div):
                return lambda env: _guarded_div(lhs(env), rhs(env))
            # integer powers only, to keep evaluation total
            if not (isinstance(node.right, ast.Constant) and isinstance(node.right.value, int)):
                raise ConfigError(f"only integer powers allowed in {text!r}")
            return lambda env: lhs(env) ** rhs(env)
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
            fn = _FUNCS.get(node.func.id)
            if fn is None or node.keywords:
                raise ConfigError(f"unknown function {node.func.id!r} in {text!r}")
            args = [build(a) for a in node.args]
            if node.func.id in ("min", "max"):
                if len(args) < 2:
                    raise ConfigError(f"{node.func.id} needs at least two arguments")

                def reduced(env, fn=fn, args=args):
                    out = fn(args[0](env), args[1](env))
                    for a in args[2:]:
                        out = fn(out, a(env))
                    return out

                return reduced
            if len(args) != 1:
                raise ConfigError(f"{node.func.id} takes one argument")
            return lambda env, fn=fn, a=args[0]: fn(a(env))
        raise ConfigError(f"unsupported syntax in expression {text!r}")

    return build(tree)


def _catalog_fn(doc, role):
    kind = doc["kind"]
    p = {k: float(v) for k, v in doc.items() if k != "kind" and k != "of"}
    if kind == "constant":
        val = p.get("value", 0.0)
        return lambda env: val + 0.0 * env.get("x", 0.0)
    if kind == "affine":
        terms = [(name, p[name]) for name in _ROLE_VARS[role] if name in p]
        c0 = p.get("c0", 0.0)

        def affine(env):
            out = c0 + 0.0 * env.get("x", 0.0)
            for name, c in terms:
                out = out + c * env[name]
            return out

        return affine
    if kind == "bilinear_control":
        if role not in ("drift", "diffusion", "driver"):
            raise ConfigError("bilinear_control needs control arguments")
        s, c0 = p.get("scale", 1.0), p.get("offset", 0.0)
        return lambda env: s * env["u"] * env["v"] + c0 + 0.0 * env.get("x", 0.0)
    if kind == "bounded_nonlinear":
        var = doc.get("of", "x")
        if var not in _ROLE_VARS[role]:
            raise ConfigError(f"bounded_nonlinear of {var!r} not allowed for {role}")
        s, r = p.get("scale", 1.0), p.get("rate", 1.0)
        h, c0 = p.get("shift", 0.0), p.get("offset", 0.0)
        return lambda env: s * np.tanh(r * env[var] + h) + c0
    raise ConfigError(f"unknown catalog kind {kind!r}")


class Coefficient:
    """A game coefficient: catalog entry, expression string, or raw callable.

    Calling signature is keyword based (subset of t, x, y1, y2, z, u, v) and
    broadcasts over numpy arrays. Instances are immutable and hashable by id,
    safe to share across workers.
    """

    __slots__ = ("role", "doc", "_fn")

    def __init__(self, doc, role):
        if role not in _ROLE_VARS:
            raise ConfigError(f"unknown coefficient role {role!r}")
        self.role = role
        self.doc = doc
        if callable(doc):
            self._fn = None
        elif isinstance(doc, (int, float)):
            self._fn = _catalog_fn({"kind": "constant", "value": doc}, role)
        elif isinstance(doc, dict) and "expr" in doc:
            self._fn = _compile_expr(doc["expr"], role)
        elif isinstance(doc, dict) and "kind" in doc:
            self._fn = _catalog_fn(doc, role)
        else:
            raise ConfigError(f"coefficient document not understood: {doc!r}")

    def __call__(self, **kw):
        if self._fn is None:
            return self.doc(**kw)
        missing = [v for v in _ROLE_VARS[self.role] if v not in kw]
        if missing:
            raise TypeError(f"{self.role} coefficient needs arguments {missing}")
        return self._fn(kw)


def as_coefficient(doc, role):
    return doc if isinstance(doc, Coefficient) else Coefficient(doc, role)


# ---------------------------------------------------------------------------
# the specification object
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GameSpec:
    """Immutable container for one game's coefficients and constants."""

    T: float
    drift: Coefficient
    diffusion: Coefficient
    ftilde1: Coefficient
    ftilde2: Coefficient
    phi1: Coefficient
    phi2: Coefficient
    control_set_U: tuple
    control_set_V: tuple
    lam: float
    K: float
    lipschitz_bound: float
    coefficient_bound: float | None = None
    state_dim: int = 1
    brownian_dim: int = 1
    probe_radius: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "control_set_U", tuple(float(u) for u in self.control_set_U))
        object.__setattr__(self, "control_set_V", tuple(float(v) for v in self.control_set_V))

    def b(self, t, x, u, v):
        return self.drift(t=t, x=x, u=u, v=v)

    def sigma(self, t, x, u, v):
        return self.diffusion(t=t, x=x, u=u, v=v)

    def ftilde(self, i, t, x, y1, y2, z, u, v):
        f = self.ftilde1 if i == 1 else self.ftilde2
        return f(t=t, x=x, y1=y1, y2=y2, z=z, u=u, v=v)

    def phi(self, i, x):
        f = self.phi1 if i == 1 else self.phi2
        return f(x=x)


def decoupled_driver(spec, i):
    """Regime-indexed driver with the coupling folded into the jump argument.

    Component 1 reads the partner value as y + h, component 2 symmetrically;
    h is the solution's own jump coefficient.
    """
    if i == 1:
        def f1(t, x, y, h, z, u, v):
            return spec.ftilde1(t=t, x=x, y1=y, y2=y + h, z=z, u=u, v=v)

        return f1
    if i == 2:
        def f2(t, x, y, h, z, u, v):
            return spec.ftilde2(t=t, x=x, y1=y + h, y2=y, z=z, u=u, v=v)

        return f2
    raise ValueError(f"component must be 1 or 2, got {i}")


# ---------------------------------------------------------------------------
# validation probes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Finding:
    check: str
    passed: bool
    detail: str
    value: float | None = None


def _probe_sample(spec, n=PROBE_POINTS):
    """Deterministic low-discrepancy sample of coefficient arguments."""
    r = spec.probe_radius
    dims = 1 + 1 + 2 + 1 + 2  # t, x, y1, y2, z, (u,v) selectors
    pts = qmc.Halton(d=dims, scramble=False).random(n)
    t = pts[:, 0] * spec.T
    x = (2.0 * pts[:, 1] - 1.0) * r
    y1 = (2.0 * pts[:, 2] - 1.0) * 2.0
    y2 = (2.0 * pts[:, 3] - 1.0) * 2.0
    z = (2.0 * pts[:, 4] - 1.0) * 2.0
    U, V = spec.control_set_U, spec.control_set_V
    u = np.asarray(U)[np.minimum((pts[:, 5] * len(U)).astype(int), len(U) - 1)]
    v = np.asarray(V)[np.minimum((pts[:, 6] * len(V)).astype(int), len(V) - 1)]
    return dict(t=t, x=x, y1=y1, y2=y2, z=z, u=u, v=v)


def validate_spec(spec):
    """Probe the structural assumptions; failures are findings, not exceptions."""
    findings = []

    gap = spec.K - spec.lam
    findings.append(Finding(
        "intensity_condition", gap > -1.0,
        f"K - lambda = {gap:.6g} must exceed -1", gap))

    ok_controls = len(spec.control_set_U) > 0 and len(spec.control_set_V) > 0
    findings.append(Finding(
        "control_sets", ok_controls,
        f"|U| = {len(spec.control_set_U)}, |V| = {len(spec.control_set_V)}"))
    if not ok_controls:
        return findings

    s = _probe_sample(spec)
    half = len(s["t"]) // 2
    a = {k: w[:half] for k, w in s.items()}
    bb = {k: w[half: 2 * half] for k, w in s.items()}
    # pairs share (t, u, v): Lipschitz is uniform in those arguments
    for k in ("t", "u", "v"):
        bb[k] = a[k]

    _guard_hits[0] = 0

    def lip(fn, keys):
        # one coordinate perturbed at a time: sum-norm Lipschitz bound holds
        # exactly when every partial difference quotient does
        base = fn(a)
        ratio = 0.0
        for key in keys:
            shifted = dict(a)
            shifted[key] = bb[key]
            denom = np.abs(a[key] - bb[key])
            mask = denom > 1e-9
            if mask.any():
                r = float(np.max(np.abs(base - fn(shifted))[mask] / denom[mask]))
                ratio = max(ratio, r)
        return ratio

    C = spec.lipschitz_bound
    checks = [
        ("drift", lambda e: spec.b(e["t"], e["x"], e["u"], e["v"]), ("x",)),
        ("diffusion", lambda e: spec.sigma(e["t"], e["x"], e["u"], e["v"]), ("x",)),
        ("ftilde1", lambda e: spec.ftilde(1, e["t"], e["x"], e["y1"], e["y2"], e["z"], e["u"], e["v"]),
         ("x", "y1", "y2", "z")),
        ("ftilde2", lambda e: spec.ftilde(2, e["t"], e["x"], e["y1"], e["y2"], e["z"], e["u"], e["v"]),
         ("x", "y1", "y2", "z")),
        ("phi1", lambda e: spec.phi(1, e["x"]), ("x",)),
        ("phi2", lambda e: spec.phi(2, e["x"]), ("x",)),
    ]
    worst = 0.0
    finite = True
    for _name, fn, keys in checks:
        r = lip(fn, keys)
        worst = max(worst, r)
        finite = finite and math.isfinite(r)
    findings.append(Finding(
        "lipschitz_probe", finite and worst <= C * (1.0 + 1e-9),
        f"max sampled ratio {worst:.6g} vs declared bound {C:.6g}", worst))

    # monotonicity of the coupling argument, slope at least K
    dy = np.abs(a["y2"] - bb["y2"]) + 1e-12
    f1a = spec.ftilde(1, a["t"], a["x"], a["y1"], np.maximum(a["y2"], bb["y2"]), a["z"], a["u"], a["v"])
    f1b = spec.ftilde(1, a["t"], a["x"], a["y1"], np.minimum(a["y2"], bb["y2"]), a["z"], a["u"], a["v"])
    s1 = float(np.min((f1a - f1b) / dy))
    f2a = spec.ftilde(2, a["t"], a["x"], np.maximum(a["y2"], bb["y2"]), a["y1"], a["z"], a["u"], a["v"])
    f2b = spec.ftilde(2, a["t"], a["x"], np.minimum(a["y2"], bb["y2"]), a["y1"], a["z"], a["u"], a["v"])
    s2 = float(np.min((f2a - f2b) / dy))
    slope = min(s1, s2)
    findings.append(Finding(
        "coupling_monotonicity", slope >= spec.K - 1e-9,
        f"min sampled coupling slope {slope:.6g} vs declared K {spec.K:.6g}", slope))

    if spec.coefficient_bound is not None:
        zero = np.zeros_like(a["x"])
        mags = [
            np.max(np.abs(spec.b(a["t"], a["x"], a["u"], a["v"]))),
            np.max(np.abs(spec.sigma(a["t"], a["x"], a["u"], a["v"]))),
            np.max(np.abs(spec.ftilde(1, a["t"], a["x"], zero, zero, zero, a["u"], a["v"]))),
            np.max(np.abs(spec.ftilde(2, a["t"], a["x"], zero, zero, zero, a["u"], a["v"]))),
            np.max(np.abs(spec.phi(1, a["x"]))),
            np.max(np.abs(spec.phi(2, a["x"]))),
        ]
        m = float(max(mags))
        findings.append(Finding(
            "coefficient_bound", m <= spec.coefficient_bound * (1.0 + 1e-9),
            f"max sampled magnitude {m:.6g} vs declared bound {spec.coefficient_bound:.6g}", m))

    # totality probe on exact corner points (zeros and bounds hit guards that
    # a continuous sample misses)
    r = spec.probe_radius
    corners = np.array([0.0, r, -r, 1e-13])
    ce = {
        "t": np.array([0.0, spec.T, spec.T / 2, 0.0]),
        "x": corners, "y1": corners, "y2": corners, "z": corners,
        "u": np.full(4, spec.control_set_U[0]),
        "v": np.full(4, spec.control_set_V[0]),
    }
    zero4 = np.zeros(4)
    for fn in (lambda: spec.b(ce["t"], ce["x"], ce["u"], ce["v"]),
               lambda: spec.sigma(ce["t"], ce["x"], ce["u"], ce["v"]),
               lambda: spec.ftilde(1, ce["t"], ce["x"], ce["y1"], ce["y2"], ce["z"], ce["u"], ce["v"]),
               lambda: spec.ftilde(2, ce["t"], ce["x"], ce["y1"], ce["y2"], ce["z"], ce["u"], ce["v"]),
               lambda: spec.ftilde(1, ce["t"], ce["x"], zero4, zero4, zero4, ce["u"], ce["v"]),
               lambda: spec.phi(1, ce["x"]),
               lambda: spec.phi(2, ce["x"])):
        fn()
    findings.append(Finding(
        "division_guard", _guard_hits[0] == 0,
        f"{_guard_hits[0]} guarded divisions hit on the probe sample",
        float(_guard_hits[0])))
    return findings


# ---------------------------------------------------------------------------
# configuration documents
# ---------------------------------------------------------------------------

def spec_from_dict(doc):
    try:
        controls = doc["controls"]
        spec = GameSpec(
            T=float(doc["T"]),
            drift=as_coefficient(doc["drift"], "drift"),
            diffusion=as_coefficient(doc["diffusion"], "diffusion"),
            ftilde1=as_coefficient(doc["ftilde_1"], "driver"),
            ftilde2=as_coefficient(doc["ftilde_2"], "driver"),
            phi1=as_coefficient(doc["Phi_1"], "terminal"),
            phi2=as_coefficient(doc["Phi_2"], "terminal"),
            control_set_U=tuple(controls["U"]),
            control_set_V=tuple(controls["V"]),
            lam=float(doc["lambda"]),
            K=float(doc["K"]),
            lipschitz_bound=float(doc["lipschitz_bound"]),
            coefficient_bound=(float(doc["coefficient_bound"])
                               if doc.get("coefficient_bound") is not None else None),
            state_dim=int(doc.get("state_dim", 1)),
            brownian_dim=int(doc.get("brownian_dim", 1)),
            probe_radius=float(doc.get("probe_radius", 3.0)),
        )
    except KeyError as exc:
        raise ConfigError(f"specification document missing field {exc}") from exc
    if spec.T <= 0:
        raise ConfigError("horizon T must be positive")
    if spec.lam < 0:
        raise ConfigError("jump intensity must be nonnegative")
    if spec.state_dim < 1 or spec.brownian_dim < 1:
        raise ConfigError("dimensions must be positive")
    if not spec.control_set_U or not spec.control_set_V:
        raise ConfigError("control sets must be nonempty")
    return spec


def load_spec(path):
    with open(path, "r", encoding="utf-8") as fh:
        return spec_from_dict(json.load(fh))
