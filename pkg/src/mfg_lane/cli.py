"""Command-line entry point: run, equilibrium, plan, ngsim, check."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

from .core import SCENARIO_NAMES, ScenarioConfig, build_scenario, load_scenario, save_scenario
from .equilibrium import EquilibriumState, SolverParams, run_equilibrium
from .grid import export_snapshots
from .interaction import InteractionParams
from .planner import EvalWeights, SamplingRanges, export_evaluations_json, export_path_csv
from .safety import SafetyParams
from .simulate import SimParams, plan_from_equilibrium, simulate

log = logging.getLogger("mfg_lane")


class UsageError(Exception):
    pass


# sections of the --params override file and the dataclass each one feeds
PARAM_SECTIONS = {
    "solver": SolverParams,
    "safety": SafetyParams,
    "interaction": InteractionParams,
    "sim": SimParams,
    "eval": EvalWeights,
    "sampling": SamplingRanges,
}


@dataclasses.dataclass
class Config:
    solver: SolverParams
    safety: SafetyParams
    interaction: InteractionParams
    sim: SimParams
    eval: EvalWeights
    sampling: SamplingRanges
    snapshots: list


def _coerce(cls, overrides: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    kw = {}
    for k, v in overrides.items():
        if k not in names:
            raise UsageError(f"unknown parameter {k!r} for {cls.__name__}")
        kw[k] = tuple(v) if isinstance(v, list) else v
    return kw


def parse_grid(text: str):
    try:
        k, j = text.lower().split("x")
        k, j = int(k), int(j)
    except ValueError:
        raise UsageError(f"--grid expects KxJ, got {text!r}") from None
    if k < 4 or j < 3:
        raise UsageError("--grid needs K >= 4 and J >= 3")
    return k, j


def parse_times(text: str | None, horizon: float):
    if text is None:
        return [0.0, round(horizon / 2, 6), horizon]
    if not text.strip():
        return []
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--snapshots expects comma-separated seconds, got {text!r}") from None


def load_overrides(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise UsageError(f"cannot read --params file: {e}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"--params file is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise UsageError("--params file must hold a JSON object")
    bad = set(doc) - set(PARAM_SECTIONS) - {"scenario"}
    if bad:
        raise UsageError(f"unknown --params sections: {sorted(bad)}")
    return doc


def resolve_scenario(name: str, args, overrides: dict) -> ScenarioConfig:
    if name in SCENARIO_NAMES:
        sc = build_scenario(name)
    elif Path(name).is_file():
        sc = load_scenario(name)
    else:
        raise UsageError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIO_NAMES)} or a JSON file")
    kw = dict(overrides.get("scenario", {}))
    unknown = set(kw) - {"horizon", "dt", "ego_s", "target_lane"}
    if unknown:
        raise UsageError(f"unsupported scenario overrides: {sorted(unknown)}")
    if getattr(args, "horizon", None) is not None:
        kw["horizon"] = args.horizon
    if getattr(args, "dt", None) is not None:
        kw["dt"] = args.dt
    return sc.replace(**kw) if kw else sc


def build_config(args, sc: ScenarioConfig, overrides: dict) -> Config:
    sections = {}
    for name, cls in PARAM_SECTIONS.items():
        sections[name] = _coerce(cls, overrides.get(name, {}))
    s = sections["solver"]
    s.setdefault("dt", sc.dt)
    s["T"] = sc.horizon
    s["seed"] = args.seed
    if getattr(args, "grid", None):
        s["K"], s["J"] = parse_grid(args.grid)
    if getattr(args, "gamma", None) is not None:
        s["gamma"] = args.gamma
    if getattr(args, "eps_conv", None) is not None:
        s["eps_conv"] = args.eps_conv
    sections["sim"]["seed"] = args.seed
    if abs(s["dt"] - sc.dt) > 1e-12:
        raise UsageError("solver dt must equal the scenario dt (use --dt)")
    built = {}
    for name, cls in PARAM_SECTIONS.items():
        try:
            built[name] = cls(**sections[name])
        except (TypeError, ValueError) as e:
            raise UsageError(f"invalid {name} parameters: {e}") from None
    snaps = parse_times(getattr(args, "snapshots", None), sc.horizon)
    return Config(snapshots=snaps, **built)


def sha256_of(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, files, meta: dict) -> dict:
    entries = []
    for p in sorted(set(files), key=lambda q: str(q.relative_to(out))):
        entries.append({"file": str(p.relative_to(out)), "sha256": sha256_of(p), "bytes": p.stat().st_size})
    doc = {**meta, "files": entries}
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def write_residuals(eq: EquilibriumState, path: Path) -> Path:
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["iter", "residual"])
        for i, r in enumerate(eq.residuals, start=1):
            wr.writerow([i, repr(float(r))])
    return path


def _eq_summary(eq: EquilibriumState) -> dict:
    c = eq.contraction
    return {"iterations": eq.iterations, "converged": bool(eq.converged),
            "contraction": None if not math.isfinite(c) else round(c, 9),
            "final_residual": None if not eq.residuals else float(eq.residuals[-1])}


def _solve(sc: ScenarioConfig, cfg: Config, quiet: bool) -> EquilibriumState:
    prog = None if quiet else (lambda it, r: log.info("iteration %d residual %.3e", it, r))
    return run_equilibrium(sc, cfg.solver, sp=cfg.safety, ip=cfg.interaction, progress=prog)


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise OSError(f"output directory {out} is not writable: {e.strerror or e}") from None
    return out


def emit_outputs(results: dict, out_dir) -> dict:
    """Write every available result plus a hashed manifest; returns the manifest document."""
    out = _prepare_out(out_dir)
    files = []
    sc = results["scenario"]
    eq = results.get("equilibrium")
    if results.get("log") is not None:
        files.append(results["log"].to_csv(out / "trajectory.csv"))
    if results.get("metrics") is not None:
        files.append(results["metrics"].to_json(out / "metrics.json"))
    if eq is not None:
        files.append(write_residuals(eq, out / "residuals.csv"))
        snaps = results.get("snapshots") or []
        if snaps:
            files.extend(export_snapshots(eq.rho_seq, eq.setup.dt, snaps, out / "density"))
    plan = results.get("plan")
    if plan is not None:
        files.append(export_evaluations_json(plan.candidates, plan.evaluations, out / "candidates.json", plan.index))
        if plan.selected is not None:
            files.append(export_path_csv(plan.selected, out / "selected_path.csv"))
    for extra in results.get("extra_files", []):
        files.append(extra)
    meta = {"command": results["command"], "scenario": sc.name, "seed": results["seed"]}
    if eq is not None:
        meta["equilibrium"] = _eq_summary(eq)
    return write_manifest(out, files, meta)


def cmd_run(args, overrides):
    sc = resolve_scenario(args.scenario, args, overrides)
    cfg = build_config(args, sc, overrides)
    eq = _solve(sc, cfg, args.quiet)
    x0 = sc.initial_states()[sc.ego_id]
    plan = plan_from_equilibrium(sc, eq, x0, 0, cfg.sim.seed, cfg.sim.n_paths, cfg.eval, cfg.safety,
                                 use_field=cfg.sim.plan_with_field, ranges=cfg.sampling)
    traj, metrics = simulate(sc, eq, plan, cfg.sim, cfg.safety, cfg.eval)
    man = emit_outputs({"command": "run", "scenario": sc, "seed": args.seed, "equilibrium": eq, "plan": plan,
                        "log": traj, "metrics": metrics, "snapshots": cfg.snapshots}, args.out)
    print(f"{sc.name}: collisions={metrics.collision_count} danger_steps={metrics.danger_count} "
          f"min_distance={min(metrics.min_distance):.2f} m ego_final_d={metrics.ego_final_d:.3f} "
          f"files={len(man['files'])}")
    return 0


def cmd_equilibrium(args, overrides):
    sc = resolve_scenario(args.scenario, args, overrides)
    cfg = build_config(args, sc, overrides)
    eq = _solve(sc, cfg, args.quiet)
    emit_outputs({"command": "equilibrium", "scenario": sc, "seed": args.seed, "equilibrium": eq,
                  "snapshots": cfg.snapshots}, args.out)
    s = _eq_summary(eq)
    print(f"{sc.name}: iterations={s['iterations']} converged={s['converged']} "
          f"residual={s['final_residual']} contraction={s['contraction']}")
    return 0


def cmd_plan(args, overrides):
    sc = resolve_scenario(args.scenario, args, overrides)
    cfg = build_config(args, sc, overrides)
    eq = _solve(sc, cfg, args.quiet)
    x0 = sc.initial_states()[sc.ego_id]
    plan = plan_from_equilibrium(sc, eq, x0, 0, cfg.sim.seed, cfg.sim.n_paths, cfg.eval, cfg.safety,
                                 use_field=cfg.sim.plan_with_field, ranges=cfg.sampling)
    emit_outputs({"command": "plan", "scenario": sc, "seed": args.seed, "equilibrium": eq, "plan": plan,
                  "snapshots": []}, args.out)
    best = "none (lane keeping)" if plan.index is None else str(plan.index)
    print(f"{sc.name}: {len(plan.candidates)} candidates, selected {best}")
    return 0


def cmd_ngsim(args, overrides):
    from .ngsim import attach_replay, parse_ngsim_csv, resample_all, summarize_gaps
    from .core import LaneGeometry, StyleClass, VehicleSpec

    if not Path(args.file).is_file():
        raise UsageError(f"no such file: {args.file}")
    recs = parse_ngsim_csv(args.file, imperial=args.imperial)
    segs = resample_all(recs, args.dt or 0.1)
    out = _prepare_out(args.out)
    files = []
    for vid, seg in segs.items():
        files.append(seg.to_csv(out / f"segment_{vid}.csv"))
    report = {"records": len(recs), "errors": [{"line": ln, "message": m} for ln, m in recs.errors],
              "vehicles": {str(v): {"samples": len(s.states), "span_s": round(s.span, 9), "lane": s.lane}
                           for v, s in segs.items()}}
    roles = {"subject": args.subject, "front": args.front, "rear": args.rear}
    if all(v in segs for v in roles.values()):
        report["gaps"] = summarize_gaps(segs, args.subject, args.front, args.rear)
        subj = segs[args.subject]
        t0 = max(segs[i].start_time for i in roles.values())
        x0 = subj.trimmed(t0).states[0]
        geo = LaneGeometry()
        base = ScenarioConfig(name="ngsim_replay", ego_id=1, target_lane=segs[args.rear].lane,
                              vehicles=[VehicleSpec(1, StyleClass.EGO, geo.nearest_lane(x0.d), 0.0, x0.v_s)],
                              horizon=args.horizon or 30.0, ego_s=x0.s, geometry=geo)
        sc = attach_replay(base, segs, {"front": args.front, "rear": args.rear}, t0)
        p = out / "replay_scenario.json"
        save_scenario(sc, p)
        files.append(p)
        report["replayed"] = [args.front, args.rear]
    p = out / "ingest_report.json"
    p.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    files.append(p)
    write_manifest(out, files, {"command": "ngsim", "source": Path(args.file).name, "seed": args.seed})
    print(f"{Path(args.file).name}: {len(recs)} records, {len(recs.errors)} rejected, {len(segs)} vehicles")
    return 0


def cmd_check(args, overrides):
    from .checks import run_checks
    results = run_checks()
    failed = [r for r in results if not r[1]]
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfg-lane", description="Mean-field lane-change planning and simulation.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        if scenario:
            p.add_argument("scenario", help=f"one of {', '.join(SCENARIO_NAMES)} or a scenario JSON file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--horizon", type=float, default=None, help="seconds")
        p.add_argument("--dt", type=float, default=None, help="seconds")
        p.add_argument("--grid", default=None, help="KxJ cells, e.g. 150x15")
        p.add_argument("--gamma", type=float, default=None, help="relaxation in (0, 1)")
        p.add_argument("--eps-conv", dest="eps_conv", type=float, default=None)
        p.add_argument("--out", default="out")
        p.add_argument("--snapshots", default=None, help="comma-separated seconds; empty for none")
        p.add_argument("--params", default=None, help="JSON file of parameter overrides")
        p.add_argument("--quiet", action="store_true")

    common(sub.add_parser("run", help="equilibrium, planning and closed-loop simulation"))
    common(sub.add_parser("equilibrium", help="fixed-point solver only"))
    common(sub.add_parser("plan", help="candidate generation and scoring"))
    ng = sub.add_parser("ngsim", help="ingest an NGSIM-format CSV")
    ng.add_argument("file")
    ng.add_argument("--imperial", action="store_true", help="source lengths are in feet")
    ng.add_argument("--subject", type=int, default=2460)
    ng.add_argument("--front", type=int, default=2467)
    ng.add_argument("--rear", type=int, default=2155)
    ng.add_argument("--seed", type=int, default=0)
    ng.add_argument("--dt", type=float, default=None)
    ng.add_argument("--horizon", type=float, default=None)
    ng.add_argument("--out", default="out")
    ng.add_argument("--params", default=None)
    sub.add_parser("check", help="run the built-in invariant checks")
    return ap


COMMANDS = {"run": cmd_run, "equilibrium": cmd_equilibrium, "plan": cmd_plan, "ngsim": cmd_ngsim,
            "check": cmd_check}


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", True) else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        overrides = load_overrides(getattr(args, "params", None))
        if getattr(args, "horizon", None) is not None and args.horizon <= 0:
            raise UsageError("--horizon must be positive")
        if getattr(args, "dt", None) is not None and args.dt <= 0:
            raise UsageError("--dt must be positive")
        return COMMANDS[args.command](args, overrides)
    except UsageError as e:
        ap.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError, KeyError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
