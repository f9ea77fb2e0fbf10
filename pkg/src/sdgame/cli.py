"""Command line surface: configuration ingestion, solves, checks, reports.

Commands:
    solve  --config F [--orientation p1|p2|both] [--upper]
    verify CHECK --config F [--seeds N]
    nash   find|check --config F [--pair P] [--eps-schedule a,b,c]
    report --dir D

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error,
3 precondition failure (stability bound, order-interchange gap, or an
inconclusive verdict). The output directory may be overridden with the
SDGAME_OUT environment variable; there is no other environment coupling.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field

from . import checks
from .dynamics import TimeGrid
from .game import NashCertificate, OpenLoopStrategy, ConstantStrategy, extract_nash_payoff, nash_characterization_check
from .isaacs_pde import CflError, SpaceGrid, check_cfl, dump_field, solve_coupled_isaacs
from .model import ConfigError, load_spec, spec_from_dict, validate_spec

VERIFY_CHECKS = ("decouple", "comparison", "estimate", "dpp",
                 "semigroup-flow", "regularity", "coincidence")

NUMERICS_DEFAULTS = {
    "M": 64, "J": 33, "x_min": -3.0, "x_max": 3.0,
    "scenario_count": 10_000, "seed": 20240817, "regression_degree": 3,
    "epsilon_schedule": [0.2, 0.1, 0.05], "cell_size": None,
    "tree_M": 8, "dpp_levels": 3, "dpp_delta": 1,
    "regularity_Ms": [64, 128, 256], "coincidence_levels": 3,
}


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    spec: object
    numerics: dict
    output_dir: str
    digest: str


@dataclass
class RunReport:
    command: str
    config_digest: str
    verdicts: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({
            "command": self.command, "config_digest": self.config_digest,
            "verdicts": self.verdicts, "artifacts": self.artifacts,
            "timings": self.timings,
        }, indent=2, sort_keys=True)


def load_run_config(path):
    if not os.path.exists(path):
        raise UsageError(f"configuration file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise UsageError(f"cannot parse {path}: line {exc.lineno}: {exc.msg}") from exc
    spec_ref = doc.get("spec")
    if spec_ref is None:
        raise UsageError(f"{path}: missing 'spec' entry")
    base = os.path.dirname(os.path.abspath(path))
    if isinstance(spec_ref, str):
        spec_path = os.path.join(base, spec_ref)
        if not os.path.exists(spec_path):
            raise UsageError(f"spec document not found: {spec_path}")
        try:
            spec = load_spec(spec_path)
        except ConfigError as exc:
            raise UsageError(f"{spec_path}: {exc}") from exc
    else:
        try:
            spec = spec_from_dict(spec_ref)
        except ConfigError as exc:
            raise UsageError(f"{path}: {exc}") from exc
    numerics = dict(NUMERICS_DEFAULTS)
    numerics.update(doc.get("numerics", {}))
    for key in ("M", "J", "scenario_count", "tree_M"):
        if numerics[key] <= 0:
            raise UsageError(f"{path}: numerics entry {key} must be positive")
    out_dir = os.environ.get("SDGAME_OUT") or doc.get("output_dir") or "out"
    if not os.path.isabs(out_dir):
        out_dir = os.path.join(base, out_dir)
    digest = hashlib.sha256(raw.encode("utf-8")).hexdigest()[:16]
    return RunConfig(spec=spec, numerics=numerics, output_dir=out_dir, digest=digest)


def _emit(report, out_dir, payload=None, name="report.json"):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() if payload is None else payload)
        fh.write("\n")
    return path


def _write_json(out_dir, name, obj):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


class _Timer:
    def __init__(self, enabled):
        self.enabled = enabled
        self.marks = {}

    def time(self, name, fn):
        t0 = time.perf_counter()
        out = fn()
        self.marks[name] = round(time.perf_counter() - t0, 6) if self.enabled else 0.0
        return out


def _grids(cfg):
    n = cfg.numerics
    return (SpaceGrid(n["x_min"], n["x_max"], int(n["J"])),
            TimeGrid(t0=0.0, T=cfg.spec.T, M=int(n["M"])))


def cmd_solve(args):
    cfg = load_run_config(args.config)
    timer = _Timer(not args.no_timings)
    report = RunReport(command="solve", config_digest=cfg.digest)
    findings = timer.time("validate", lambda: validate_spec(cfg.spec))
    report.verdicts["validate"] = "PASS" if all(f.passed for f in findings) else "FAIL"
    report.verdicts["findings"] = [
        {"check": f.check, "passed": f.passed, "detail": f.detail} for f in findings]
    gaps = timer.time("isaacs_gap", lambda: checks.isaacs_report(cfg.spec))
    report.verdicts["isaacs_gap"] = gaps
    xg, tg = _grids(cfg)
    try:
        check_cfl(cfg.spec, xg, tg)
    except CflError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    orientations = ("p1", "p2") if args.orientation == "both" else (args.orientation,)
    kinds = ("lower", "upper") if args.upper else ("lower",)
    solved = []
    for o in orientations:
        for kind in kinds:
            fld = timer.time(f"solve_{o}_{kind}",
                             lambda o=o, kind=kind: solve_coupled_isaacs(
                                 cfg.spec, xg, tg, o, kind))
            solved.append(fld)
    csv_path = os.path.join(cfg.output_dir, "fields.csv")
    os.makedirs(cfg.output_dir, exist_ok=True)
    dump_field(csv_path, solved)
    report.artifacts.append(csv_path)
    report.timings = timer.marks
    report.artifacts.append(_emit(report, cfg.output_dir))
    ok = report.verdicts["validate"] == "PASS"
    print(f"solve: validate={report.verdicts['validate']} "
          f"isaacs={gaps['verdict']} fields={len(solved)} -> {csv_path}")
    return 0 if ok else 1


def cmd_verify(args):
    cfg = load_run_config(args.config)
    n = cfg.numerics
    timer = _Timer(not args.no_timings)
    spec = cfg.spec
    name = args.check

    def run():
        if name == "decouple":
            return checks.decouple_report(spec, tree_M=int(n["tree_M"]),
                                          seed=int(n["seed"]))
        if name == "comparison":
            return checks.comparison_suite_report(instances=args.seeds,
                                                  seed0=int(n["seed"]))
        if name == "estimate":
            return checks.estimate_suite_report(instances=args.seeds,
                                                seed0=int(n["seed"]))
        if name == "dpp":
            return checks.dpp_report(spec, n["x_min"], n["x_max"], int(n["J"]),
                                     int(n["M"]), levels=int(n["dpp_levels"]),
                                     delta=int(n["dpp_delta"]))
        if name == "semigroup-flow":
            return checks.semigroup_flow_report(spec, tree_M=int(n["tree_M"]),
                                                seed=int(n["seed"]))
        if name == "regularity":
            return checks.regularity_report(spec, n["x_min"], n["x_max"],
                                            Ms=tuple(n["regularity_Ms"]))
        if name == "coincidence":
            return checks.coincidence_report(spec, n["x_min"], n["x_max"],
                                             int(n["J"]), int(n["M"]),
                                             levels=int(n["coincidence_levels"]))
        raise UsageError(f"unknown check {name!r}; valid: {', '.join(VERIFY_CHECKS)}")

    try:
        rep = timer.time(name, run)
    except CflError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    report = RunReport(command=f"verify {name}", config_digest=cfg.digest,
                       verdicts={name: rep}, timings=timer.marks)
    path = _write_json(cfg.output_dir, f"verify_{name}.json", rep)
    report.artifacts.append(path)
    report.artifacts.append(_emit(report, cfg.output_dir,
                                  name=f"report_{name}.json"))
    print(f"verify {name}: {rep['verdict']} -> {path}")
    if rep["verdict"] == "PASS":
        return 0
    return 3 if rep["verdict"] == "INCONCLUSIVE" else 1


def _load_pair(path, M):
    if not os.path.exists(path):
        raise UsageError(f"pair file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    def mk(side):
        if f"{side}_const" in doc:
            return ConstantStrategy(float(doc[f"{side}_const"]))
        vals = doc.get(side)
        if vals is None:
            raise UsageError(f"pair file {path} missing '{side}' entry")
        if len(vals) != M:
            raise UsageError(f"pair file {path}: '{side}' must have {M} entries")
        return OpenLoopStrategy(vals)
    target = None
    if "e1" in doc and "e2" in doc:
        target = (float(doc["e1"]), float(doc["e2"]))
    return mk("u"), mk("v"), target


def cmd_nash(args):
    cfg = load_run_config(args.config)
    n = cfg.numerics
    timer = _Timer(not args.no_timings)
    spec = cfg.spec
    gaps = checks.isaacs_report(spec)
    if args.mode == "find" and gaps["verdict"] != "PASS":
        print("error: order-interchange gap check failed: "
              f"lower-order gap {gaps['gap_lower_order']:.3g}, "
              f"primed-order gap {gaps['gap_primed_order']:.3g}", file=sys.stderr)
        return 3
    xg, tg = _grids(cfg)
    try:
        check_cfl(spec, xg, tg)
    except CflError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    fields = timer.time("fields", lambda: {
        o: solve_coupled_isaacs(spec, xg, tg, o, "lower") for o in ("p1", "p2")})
    schedule = tuple(float(e) for e in args.eps_schedule.split(",")) \
        if args.eps_schedule else tuple(n["epsilon_schedule"])
    x0 = float(n.get("x0", 0.0))
    report = RunReport(command=f"nash {args.mode}", config_digest=cfg.digest)
    report.verdicts["isaacs_gap"] = gaps
    if args.mode == "find":
        out = timer.time("extract", lambda: extract_nash_payoff(
            spec, fields, x0=x0, S=int(n["scenario_count"]), seed=int(n["seed"]),
            schedule=schedule, degree=int(n["regression_degree"])))
        cert = next((c for c in out["certificates"]
                     if c.epsilon == out["best_epsilon"]), out["certificates"][-1])
        cert_path = os.path.join(cfg.output_dir, "certificate.json")
        os.makedirs(cfg.output_dir, exist_ok=True)
        with open(cert_path, "w", encoding="utf-8") as fh:
            fh.write(cert.to_json())
            fh.write("\n")
        report.artifacts.append(cert_path)
        report.verdicts["nash"] = {
            "verdict": out["verdict"], "payoff": list(out["payoff"]),
            "best_epsilon": out["best_epsilon"],
            "measured_drop": out["measured_drop"],
            "cauchy_gaps": out["cauchy_gaps"],
            "epsilons": [c.epsilon for c in out["certificates"]],
            "per_eps_verdicts": [c.verdict for c in out["certificates"]],
        }
        verdict = out["verdict"]
        print(f"nash find: {verdict} payoff=({out['payoff'][0]:.6g}, "
              f"{out['payoff'][1]:.6g}) eps={out['best_epsilon']} -> {cert_path}")
    else:
        if not args.pair:
            raise UsageError("nash check needs --pair")
        alpha, beta, target = _load_pair(args.pair, tg.M)
        eps = schedule[-1]
        cert = timer.time("check", lambda: nash_characterization_check(
            spec, alpha, beta, eps, fields, int(n["scenario_count"]),
            int(n["seed"]), x0, degree=int(n["regression_degree"]),
            payoff_target=target))
        cert_path = os.path.join(cfg.output_dir, "certificate.json")
        os.makedirs(cfg.output_dir, exist_ok=True)
        with open(cert_path, "w", encoding="utf-8") as fh:
            fh.write(cert.to_json())
            fh.write("\n")
        report.artifacts.append(cert_path)
        report.verdicts["nash"] = {"verdict": cert.verdict,
                                   "payoff": [cert.e1, cert.e2],
                                   "epsilon": cert.epsilon}
        verdict = cert.verdict
        print(f"nash check: {verdict} e1={cert.e1:.6g} e2={cert.e2:.6g} -> {cert_path}")
    report.timings = timer.marks
    report.artifacts.append(_emit(report, cfg.output_dir, name="report_nash.json"))
    return 0 if verdict == "PASS" else 1


def cmd_report(args):
    if not os.path.isdir(args.dir):
        raise UsageError(f"not a directory: {args.dir}")
    names = sorted(fn for fn in os.listdir(args.dir)
                   if fn.startswith("report") and fn.endswith(".json"))
    if not names:
        raise UsageError(f"no report files in {args.dir}")
    worst = 0
    for fn in names:
        with open(os.path.join(args.dir, fn), "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        flat = json.dumps(doc.get("verdicts", {}), sort_keys=True)
        bad = '"FAIL"' in flat
        print(f"{fn}: command={doc.get('command')!r} "
              f"{'FAIL' if bad else 'PASS'} artifacts={len(doc.get('artifacts', []))}")
        worst = max(worst, 1 if bad else 0)
    return worst


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--no-timings", action="store_true",
                        help="zero out wall-clock entries for byte-stable output")
    p = argparse.ArgumentParser(
        prog="sdgame",
        description="Coupled-cost stochastic game solver and verifier")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("solve", parents=[common],
                        help="solve the coupled field systems")
    ps.add_argument("--config", required=True)
    ps.add_argument("--orientation", choices=("p1", "p2", "both"), default="both")
    ps.add_argument("--upper", action="store_true",
                    help="also solve the swapped-order systems")
    ps.set_defaults(fn=cmd_solve)

    pv = sub.add_parser("verify", parents=[common],
                        help="run a named consistency check")
    pv.add_argument("check", choices=VERIFY_CHECKS)
    pv.add_argument("--config", required=True)
    pv.add_argument("--seeds", type=int, default=200,
                    help="instance count for randomized suites")
    pv.set_defaults(fn=cmd_verify)

    pn = sub.add_parser("nash", parents=[common],
                        help="construct or check equilibrium candidates")
    pn.add_argument("mode", choices=("find", "check"))
    pn.add_argument("--config", required=True)
    pn.add_argument("--pair", default=None,
                    help="JSON pair file for check mode")
    pn.add_argument("--eps-schedule", default=None,
                    help="comma-separated decreasing tolerances")
    pn.set_defaults(fn=cmd_nash)

    pr = sub.add_parser("report", parents=[common], help="summarize emitted reports")
    pr.add_argument("--dir", required=True)
    pr.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
