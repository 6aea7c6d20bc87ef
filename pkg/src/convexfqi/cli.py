"""Command-line interface: ``convexfqi {run,sweep,verify,report}``.

Exit codes: 0 ok, 1 verification failure, 2 configuration error, 3 runtime abort.
"""
from __future__ import annotations

import argparse
import copy
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import verify as verify_mod
from .artifacts import (
    config_hash,
    read_csv,
    run_rows,
    write_json,
    write_run_csv,
    write_sweep_csv,
)
from .fqi import STEP_MODES, FqiSchedule, fqi_run, theorem_bounds
from .mdp import benchmark_mdp, mdp_from_dict, mdp_to_dict, value_iteration_qstar
from .sweep import SweepCell, sample_complexity_sweep, summarize_cells

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

TOP_KEYS = {"mdp", "feature_dim", "schedule", "sweep", "output_dir", "seed", "timing"}
SCHEDULE_KEYS = {"iterations", "samples", "steps", "step_size", "gates", "nu", "theorem"}
SWEEP_KEYS = {"n_grid", "seeds"}
THEOREM_KEYS = {"epsilon", "phi", "C", "eta", "beta", "C_prime", "l", "L", "u_norm"}
MDP_KEYS = {"num_states", "num_actions", "gamma", "r_max", "transition", "reward",
            "reward_noise", "feature_dim", "seed"}
MDP_REQUIRED = ("num_states", "num_actions", "gamma", "r_max", "transition", "reward")
BENCHMARK_KEYS = {"benchmark", "feature_dim", "seed"}


class ConfigError(ValueError):
    pass


def _locate(text: str, key: str) -> str:
    needle = f'"{key}"'
    for lineno, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return f"line {lineno}: "
    return ""


class _Checker:
    def __init__(self, text: str):
        self.text = text

    def fail(self, path: str, message: str, key: str | None = None):
        where = _locate(self.text, key) if key else ""
        raise ConfigError(f"{where}{path}: {message}")

    def keys(self, obj, path, allowed, required=()):
        if not isinstance(obj, dict):
            self.fail(path, "expected a JSON object")
        for key in required:
            if key not in obj:
                self.fail(f"{path}.{key}" if path else key, "missing required key")
        for key in obj:
            if key not in allowed:
                self.fail(f"{path}.{key}" if path else key, "unknown key", key)

    def int_at_least(self, value, path, lo, key):
        if isinstance(value, bool) or not isinstance(value, int) or value < lo:
            self.fail(path, f"expected an integer >= {lo}, got {value!r}", key)
        return value


def _resolve_mdp(chk: _Checker, raw, base_dir: Path) -> dict:
    if isinstance(raw, str):
        path = Path(raw)
        if not path.is_absolute():
            path = base_dir / path
        try:
            text = path.read_text()
            raw = json.loads(text)
        except OSError as exc:
            chk.fail("mdp", f"cannot read MDP file {path}: {exc}", "mdp")
        except json.JSONDecodeError as exc:
            chk.fail("mdp", f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}", "mdp")
        chk = _Checker(text)
    if not isinstance(raw, dict):
        chk.fail("mdp", "expected an object or a path to an MDP file", "mdp")
    if "benchmark" in raw:
        chk.keys(raw, "mdp", BENCHMARK_KEYS)
        try:
            mdp = benchmark_mdp(raw["benchmark"])
        except KeyError as exc:
            chk.fail("mdp.benchmark", str(exc), "benchmark")
        spec = mdp_to_dict(mdp, raw.get("feature_dim", 4), raw.get("seed", 0))
    else:
        chk.keys(raw, "mdp", MDP_KEYS, MDP_REQUIRED)
        spec = dict(raw)
    try:
        mdp_from_dict(spec)
    except (KeyError, ValueError, TypeError, IndexError) as exc:
        chk.fail("mdp", f"invalid MDP definition: {exc}")
    return spec


def _budget(chk, value, name, iterations, theorem):
    path = f"schedule.{name}"
    if isinstance(value, str):
        if value != "theorem":
            chk.fail(path, f"expected an integer, a list, 'theorem' or a constant policy, got {value!r}", name)
        if theorem is None:
            chk.fail(path, "'theorem' policy needs a schedule.theorem block", name)
        return [max(1, math.ceil(theorem["n" if name == "samples" else "T"]))] * iterations
    if isinstance(value, dict):
        if set(value) != {"policy", "value"} or value["policy"] != "constant":
            chk.fail(path, "constant policy must be {\"policy\": \"constant\", \"value\": N}", name)
        value = value["value"]
    if isinstance(value, list):
        if len(value) != iterations:
            chk.fail(path, f"expected {iterations} entries (one per iteration), got {len(value)}", name)
        return [chk.int_at_least(v, path, 1, name) for v in value]
    return [chk.int_at_least(value, path, 1, name)] * iterations


def load_config(path, overrides: dict | None = None) -> dict:
    """Parse and validate a config file; returns the fully resolved config."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno} column {exc.colno}: invalid JSON: {exc.msg}") from None
    return resolve_config(raw, text, path.parent, overrides)


def resolve_config(raw: dict, text: str = "", base_dir: Path = Path("."), overrides: dict | None = None) -> dict:
    chk = _Checker(text)
    chk.keys(raw, "", TOP_KEYS, ("mdp", "schedule"))
    raw = copy.deepcopy(raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    mdp_spec = _resolve_mdp(chk, raw["mdp"], base_dir)
    if "feature_dim" in raw:
        mdp_spec["feature_dim"] = chk.int_at_least(raw["feature_dim"], "feature_dim", 2, "feature_dim")
    mdp, _ = mdp_from_dict(mdp_spec)

    sched = raw["schedule"]
    chk.keys(sched, "schedule", SCHEDULE_KEYS, ("iterations", "samples", "steps"))
    iterations = chk.int_at_least(sched["iterations"], "schedule.iterations", 1, "iterations")
    theorem = None
    if "theorem" in sched:
        th = sched["theorem"]
        chk.keys(th, "schedule.theorem", THEOREM_KEYS, ("epsilon",))
        try:
            theorem = theorem_bounds(mdp.gamma, mdp.r_max, **th)
        except (TypeError, ValueError) as exc:
            chk.fail("schedule.theorem", str(exc), "theorem")
    step_size = sched.get("step_size", "backtracking")
    if step_size not in STEP_MODES:
        chk.fail("schedule.step_size", f"expected one of {STEP_MODES}, got {step_size!r}", "step_size")
    resolved_sched = {
        "iterations": iterations,
        "samples": _budget(chk, sched["samples"], "samples", iterations, theorem),
        "steps": _budget(chk, sched["steps"], "steps", iterations, theorem),
        "step_size": step_size,
        "gates": chk.int_at_least(sched.get("gates", 32), "schedule.gates", 1, "gates"),
        "nu": sched.get("nu"),
    }
    if "theorem" in sched:
        resolved_sched["theorem"] = sched["theorem"]
    seed = raw.get("seed", 0)
    chk.int_at_least(seed, "seed", 0, "seed")
    try:
        FqiSchedule(resolved_sched["samples"], resolved_sched["steps"], resolved_sched["gates"],
                    step_size, resolved_sched["nu"], seed)
    except (TypeError, ValueError) as exc:
        chk.fail("schedule", str(exc), "schedule")
    if resolved_sched["nu"] is not None and len(np.ravel(resolved_sched["nu"])) != mdp.num_pairs:
        chk.fail("schedule.nu", f"expected {mdp.num_pairs} probabilities", "nu")

    config = {
        "mdp": mdp_spec,
        "schedule": resolved_sched,
        "output_dir": str(raw.get("output_dir", "out")),
        "seed": seed,
        "timing": bool(raw.get("timing", False)),
    }
    if "sweep" in raw:
        sw = raw["sweep"]
        chk.keys(sw, "sweep", SWEEP_KEYS, ("n_grid", "seeds"))
        if not isinstance(sw["n_grid"], list):
            chk.fail("sweep.n_grid", "expected a list of sample counts", "n_grid")
        grid = [chk.int_at_least(n, "sweep.n_grid", 1, "n_grid") for n in sw["n_grid"]]
        seeds = sw["seeds"]
        if isinstance(seeds, int) and not isinstance(seeds, bool):
            seeds = [seed + i for i in range(chk.int_at_least(seeds, "sweep.seeds", 1, "seeds"))]
        elif isinstance(seeds, list):
            seeds = [chk.int_at_least(s, "sweep.seeds", 0, "seeds") for s in seeds]
        else:
            chk.fail("sweep.seeds", "expected a count or a list of seeds", "seeds")
        config["sweep"] = {"n_grid": grid, "seeds": seeds}
    return config


def build_run(config: dict):
    mdp, features = mdp_from_dict(config["mdp"])
    s = config["schedule"]
    schedule = FqiSchedule(s["samples"], s["steps"], s["gates"], s["step_size"], s["nu"], config["seed"])
    return mdp, features, schedule


def _prepare(args, need_sweep=False):
    overrides = {"output_dir": args.out, "seed": args.seed}
    config = load_config(args.config, overrides)
    if need_sweep and "sweep" not in config:
        raise ConfigError("sweep: missing required block for the sweep command")
    if need_sweep and not config["sweep"]["n_grid"]:
        raise ConfigError("sweep.n_grid: empty grid")
    out = Path(config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return config, out


def cmd_run(args) -> int:
    config, out = _prepare(args)
    mdp, features, schedule = build_run(config)
    q_star = value_iteration_qstar(mdp, 1e-10)
    result = fqi_run(mdp, features, schedule, timing=config["timing"], q_star=q_star)
    digest = config_hash(config)
    write_json(out / "config.resolved.json", config)
    write_run_csv(out / "run.csv", run_rows(f"run-{digest[:8]}", result.record))
    last = result.record.iterations[-1]
    write_json(out / "summary.json", {
        "config_hash": digest,
        "final_gap": result.final_gap,
        "final_train_loss": last.train_loss,
        "final_bellman_error": last.bellman_error,
        "iterations": schedule.iterations,
        "total_samples": result.record.samples_used,
        "policy": result.policy.tolist(),
        "q_final": result.q_table.tolist(),
        "q_star": q_star.tolist(),
        "network": result.network.to_dict(),
    })
    print(f"final gap {result.final_gap:.6g} after {schedule.iterations} iterations "
          f"({result.record.samples_used} samples); artifacts in {out}")
    return EXIT_OK


def _sweep_rows(cells, timing: bool):
    # wall-clock columns stay blank unless timing is on, so CSVs are reproducible
    return [{"run_id": f"n{c.n}-s{c.seed}", "n": c.n, "seed": c.seed, "final_gap": c.final_gap,
             "wall_ms": c.wall_ms if timing else None, "status": c.status, "error": c.error}
            for c in cells]


def cmd_sweep(args) -> int:
    config, out = _prepare(args, need_sweep=True)
    mdp, features, schedule = build_run(config)
    sw = config["sweep"]
    try:
        result = sample_complexity_sweep(mdp, features, schedule, sw["n_grid"], sw["seeds"], jobs=args.jobs)
    except ValueError as exc:
        raise ConfigError(f"sweep: {exc}") from None
    write_json(out / "config.resolved.json", config)
    write_sweep_csv(out / "sweep.csv", _sweep_rows(result.cells, config["timing"]))
    rows = []
    for c in result.cells:
        if c.ok:
            rows.extend(run_rows(f"n{c.n}-s{c.seed}", c.record))
    write_run_csv(out / "runs.csv", rows)
    summary = result.summary()
    summary["config_hash"] = config_hash(config)
    summary["failures"] = [{"n": c.n, "seed": c.seed, "error": c.error} for c in result.cells if not c.ok]
    write_json(out / "sweep_summary.json", summary)
    print(_format_sweep(summary))
    if result.success_fraction < 0.9:
        print(f"only {result.success_fraction:.0%} of cells succeeded", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _format_sweep(summary) -> str:
    lines = ["n        median_gap"]
    for n, m in summary["median_gap"].items():
        lines.append(f"{int(n):<8d} {m:.6g}")
    ident = "" if summary["identifiable"] else " (not identifiable)"
    lines.append(f"floor {summary['floor']:.6g}  slope {summary['slope']:.4f}{ident}")
    if summary["failed_cells"]:
        lines.append(f"{summary['failed_cells']} failed cell(s)")
    return "\n".join(lines)


def cmd_verify(args) -> int:
    results = verify_mod.run_suites(seed=args.seed or 0)
    print(verify_mod.format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_report(args) -> int:
    out = Path(args.out or ".")
    sweep_csv, run_csv = out / "sweep.csv", out / "run.csv"
    if sweep_csv.exists():
        rows = read_csv(sweep_csv)
        cells = [SweepCell(int(r["n"]), int(r["seed"]), float(r["final_gap"]) if r["final_gap"] else float("nan"),
                           float(r["wall_ms"] or 0.0), r["status"], r["error"]) for r in rows]
        grid = sorted({c.n for c in cells})
        seeds = sorted({c.seed for c in cells})
        summary = summarize_cells(cells, grid, seeds).summary()
        write_json(out / "report.json", summary)
        print(_format_sweep(summary))
        return EXIT_OK
    if run_csv.exists():
        rows = read_csv(run_csv)
        print("k    n_k      T_k    train_loss    bellman_error  gap")
        for r in rows:
            print(f"{int(r['k']):<4d} {int(r['n_k']):<8d} {int(r['T_k']):<6d} {float(r['train_loss']):<13.6g} "
                  f"{float(r['bellman_error']):<14.6g} {float(r['gap']):.6g}")
        summary = {"iterations": len(rows), "final_gap": float(rows[-1]["gap"]) if rows else None,
                   "total_samples": sum(int(r["n_k"]) for r in rows)}
        write_json(out / "report.json", summary)
        return EXIT_OK
    print(f"no run.csv or sweep.csv in {out}", file=sys.stderr)
    return EXIT_CONFIG


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convexfqi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run fitted Q-iteration once"),
                           ("sweep", "run a sample-complexity sweep")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="master seed (overrides seed)")
        p.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    p = sub.add_parser("verify", help="run the built-in property suites")
    p.add_argument("--seed", type=int, default=0)
    p = sub.add_parser("report", help="re-render summaries from CSV artifacts")
    p.add_argument("--out", help="directory holding run.csv or sweep.csv")
    return parser


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "verify": cmd_verify, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
