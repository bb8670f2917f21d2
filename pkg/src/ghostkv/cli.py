"""``ghostkv`` command line: profiling, allocation, runs, sweeps and comparisons.

Every command is deterministic given its inputs.  Wall-clock numbers live
only under the report's ``timing`` key so reports can be compared with that
key removed.  Errors go to stderr as ``error_code=<CODE> <message>``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import formats
from .baselines import POLICY_KINDS, PolicyConfig, make_engine
from .budget import BudgetPlan, LayerProfile, allocate_budgets, mean_cosine_profile
from .core import DEFAULT_FRAME_TOKENS, GhostError, ScoreWeights
from .engine import ABLATIONS
from .simgen import TrajectoryConfig, generate_stream, run_experiment, synthetic_activation_samples

log = logging.getLogger("ghostkv")

REPORT_FORMAT = "ghostkv-report/1"
SWEEP_FORMAT = "ghostkv-sweep-point/1"
TAU_GRID = (0.3, 0.5, 0.7, 1.0)
WEIGHT_PERTURBATIONS = (
    ("w_cam", +0.1), ("w_geo", -0.1), ("w_temp", +0.1),
    ("w_sal", +0.1), ("w_dc", -0.1), ("w_pc", +0.1),
)
COVERAGE_FIELDS = ("pose_dispersion", "retained_depth_variance_mass",
                   "retained_confidence_mass", "special_survival_rate")
DEFAULT_BATTERY = 20


class UsageError(GhostError):
    code = "E_USAGE"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- shared helpers -------------------------------------------------------------

def parse_policy(spec) -> PolicyConfig:
    """``kind`` or ``kind:key=value,key=value`` or a dict {"kind", "params"}."""
    if isinstance(spec, PolicyConfig):
        return spec
    if isinstance(spec, dict):
        kind, params = spec.get("kind", "ghost"), dict(spec.get("params", {}))
    else:
        kind, _, rest = str(spec).partition(":")
        params = {}
        for item in filter(None, rest.split(",")):
            key, sep, value = item.partition("=")
            if not sep:
                raise UsageError(f"policy parameter {item!r} is not key=value")
            params[key] = int(value) if value.lstrip("-").isdigit() else value
    if kind not in POLICY_KINDS:
        raise UsageError(f"unknown policy {kind!r}; valid policies: {', '.join(POLICY_KINDS)}")
    return PolicyConfig(kind, params)


def _read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise formats.TraceParseError(path, exc.lineno, f"invalid JSON: {exc.msg}") from None


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def load_weights(path) -> ScoreWeights:
    return ScoreWeights() if path is None else ScoreWeights.from_dict(_read_json(path))


def load_stream(path, seed: Optional[int] = None):
    """A frame trace (``.jsonl``) or a TrajectoryConfig JSON; returns (frames, config or None)."""
    path = Path(path)
    if path.suffix == ".jsonl":
        if seed is not None:
            log.info("--seed ignored for a recorded trace")
        return formats.read_trace(path), None
    data = _read_json(path)
    if seed is not None:
        data = {**data, "noise_seed": seed}
    cfg = TrajectoryConfig.from_dict(data)
    return generate_stream(cfg), cfg


def steady_state(results) -> dict:
    last = results[-1]
    return {"retained_tokens": int(sum(last.pre_append)),
            "retained_tokens_post_append": int(sum(last.post_append)),
            "peak_post_append_tokens": int(max(sum(r.post_append) for r in results))}


def build_report(stream, cfg, plan, policy, weights, mode, ablation, bytes_per_token, source, seed):
    """Run one experiment and assemble its report dict."""
    t0 = time.perf_counter()
    results, cov = run_experiment(stream, policy, plan, weights, mode=mode, ablation=ablation,
                                  registers=cfg.registers if cfg else 4)
    total = time.perf_counter() - t0
    summary = steady_state(results)
    summary["bytes_per_token"] = bytes_per_token
    summary["modeled_cache_bytes"] = summary["retained_tokens"] * bytes_per_token
    summary["modeled_peak_cache_bytes"] = summary["peak_post_append_tokens"] * bytes_per_token
    coverage = cov.to_dict()
    coverage.pop("occupancy")
    return {
        "format": REPORT_FORMAT,
        "config": {
            "source": source,
            "trajectory": cfg.to_dict() if cfg else None,
            "seed": seed,
            "policy": policy.to_dict(),
            "mode": mode,
            "ablation": ablation,
            "weights": weights.to_dict(),
            "plan": plan.to_dict(),
        },
        "steps": [{"frame": r.frame_index, "pre_append": r.pre_append, "post_append": r.post_append,
                   "evicted": r.num_evicted()} for r in results],
        "coverage": coverage,
        "summary": summary,
        "timing": {"step_seconds": [r.step_time for r in results], "total_seconds": total},
    }


def mask_timing(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timing"}


# -- commands ---------------------------------------------------------------------

def cmd_profile(trace_path, out_path) -> int:
    profile = mean_cosine_profile(formats.read_activation_trace(trace_path))
    formats.write_profile_csv(out_path, profile)
    log.info("profiled %d layers", profile.num_layers)
    return 0


def cmd_allocate(profile_path, out_path, tau: float = 0.5, total: int = 1_200_000,
                 floor: int = DEFAULT_FRAME_TOKENS) -> int:
    plan = allocate_budgets(formats.read_profile_csv(profile_path), tau, total, floor)
    formats.write_plan_json(out_path, plan)
    return 0


def cmd_run(source, plan_path, out_path, policy="ghost", weights_file=None, mode="standard",
            ablation="full", seed=None, bytes_per_token: int = 1) -> int:
    policy = parse_policy(policy)
    plan = formats.read_plan_json(plan_path)
    weights = load_weights(weights_file)
    stream, cfg = load_stream(source, seed)
    report = build_report(stream, cfg, plan, policy, weights, mode, ablation, bytes_per_token,
                          Path(source).name, seed)
    Path(out_path).write_text(_dump(report), encoding="utf-8")
    return 0


def _resolve(base: Path, value):
    return value if value is None or Path(value).is_absolute() else base / value


def load_run_config(path) -> dict:
    """Base config for sweep/compare.

    Keys: ``stream`` (TrajectoryConfig fields), ``battery`` (number of seeds,
    default 20) or ``seeds``, ``profile`` (CSV path or {"rho_bar": [...]})
    with ``tau``/``total``/``floor``, or ``plan`` (JSON path or dict);
    optional ``policy``, ``weights``, ``mode``, ``ablation``, ``bytes_per_token``.
    """
    path = Path(path)
    data = _read_json(path)
    known = {"stream", "battery", "seeds", "profile", "plan", "tau", "total", "floor",
             "policy", "weights", "mode", "ablation", "bytes_per_token"}
    unknown = set(data) - known
    if unknown:
        raise UsageError(f"unknown config key {sorted(unknown)[0]!r}")
    if "stream" not in data:
        raise UsageError("config needs a 'stream' section")
    cfg = {
        "stream": TrajectoryConfig.from_dict(data["stream"]),
        "seeds": list(data.get("seeds", range(int(data.get("battery", DEFAULT_BATTERY))))),
        "tau": float(data.get("tau", 0.5)),
        "total": int(data.get("total", 1_200_000)),
        "floor": int(data.get("floor", DEFAULT_FRAME_TOKENS)),
        "policy": parse_policy(data.get("policy", "ghost")),
        "weights": ScoreWeights.from_dict(data.get("weights", {})),
        "mode": data.get("mode", "standard"),
        "ablation": data.get("ablation", "full"),
        "bytes_per_token": int(data.get("bytes_per_token", 1)),
        "profile": None,
        "plan": None,
    }
    prof = data.get("profile")
    if isinstance(prof, dict):
        cfg["profile"] = LayerProfile.from_values(prof["rho_bar"])
    elif prof is not None:
        cfg["profile"] = formats.read_profile_csv(_resolve(path.parent, prof))
    plan = data.get("plan")
    if isinstance(plan, dict):
        cfg["plan"] = BudgetPlan.from_dict(plan)
    elif plan is not None:
        cfg["plan"] = formats.read_plan_json(_resolve(path.parent, plan))
    if cfg["plan"] is None and cfg["profile"] is None:
        raise UsageError("config needs 'profile' or 'plan'")
    if not cfg["seeds"]:
        raise UsageError("empty seed battery")
    return cfg


def _plan_for(cfg, tau=None) -> BudgetPlan:
    if cfg["profile"] is None:
        return cfg["plan"]
    return allocate_budgets(cfg["profile"], cfg["tau"] if tau is None else tau, cfg["total"], cfg["floor"])


def _battery_run(job):
    traj, seed, plan, policy, weights, mode, ablation, bpt = job
    traj = TrajectoryConfig(**{**traj.to_dict(), "noise_seed": seed})
    report = build_report(generate_stream(traj), traj, plan, policy, weights, mode, ablation, bpt,
                          "generated", seed)
    return {"seed": seed, "coverage": report["coverage"], "summary": report["summary"]}


def _map(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _sweep_points(cfg, kind: str):
    if kind == "tau":
        if cfg["profile"] is None:
            raise UsageError("a tau sweep needs a profile in the base config")
        for tau in TAU_GRID:
            yield f"tau_{tau}", {"tau": tau}, _plan_for(cfg, tau), cfg["weights"]
        return
    plan = _plan_for(cfg)
    yield "default", {}, plan, cfg["weights"]
    base = cfg["weights"].to_dict()
    for name, delta in WEIGHT_PERTURBATIONS:
        w = ScoreWeights.from_dict({**base, name: base[name] + delta})
        yield f"{name}{delta:+.1f}", {name: w.to_dict()[name]}, plan, w


def cmd_sweep(config_path, out_dir, sweep: str, jobs: int = 1) -> int:
    if sweep not in ("tau", "weights"):
        raise UsageError("--sweep must be 'tau' or 'weights'")
    cfg = load_run_config(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, change, plan, weights in _sweep_points(cfg, sweep):
        runs = _map(_battery_run, [(cfg["stream"], s, plan, cfg["policy"], weights, cfg["mode"],
                                    cfg["ablation"], cfg["bytes_per_token"]) for s in cfg["seeds"]], jobs)
        mean = {k: float(np.mean([r["coverage"][k] for r in runs])) for k in COVERAGE_FIELDS}
        mean["retained_tokens"] = float(np.mean([r["summary"]["retained_tokens"] for r in runs]))
        point = {
            "format": SWEEP_FORMAT, "point": name, "change": change,
            "plan": plan.to_dict(), "weights": weights.to_dict(),
            "budget_variance": float(np.var(plan.budgets)),
            "runs": runs, "mean": mean,
        }
        (out / f"{name}.json").write_text(_dump(point), encoding="utf-8")
        rows.append({"point": name, "budget_variance": point["budget_variance"], **mean})
        log.info("sweep point %s done", name)
    with (out / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.9f}" if isinstance(v, float) else v) for k, v in row.items()})
    return 0


def _compare_run(job):
    stream_src, seed, plan, policy, weights, mode, ablation, bpt = job
    stream, cfg = load_stream(stream_src, seed)
    return build_report(stream, cfg, plan, policy, weights, mode, ablation, bpt, Path(stream_src).name, seed)


def cmd_compare(source, plan_path, policies: Sequence, out_dir, weights_file=None, mode="standard",
                ablation="full", seed=None, bytes_per_token: int = 1, jobs: int = 1) -> int:
    policies = [parse_policy(p) for p in policies]
    if not policies:
        raise UsageError("no policies given")
    plan = formats.read_plan_json(plan_path)
    weights = load_weights(weights_file)
    reports = _map(_compare_run, [(source, seed, plan, p, weights, mode, ablation, bytes_per_token)
                                  for p in policies], jobs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = [_label(p) for p in policies]
    with (out / "coverage.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", *COVERAGE_FIELDS, "retained_tokens", "modeled_cache_bytes"])
        for label, rep in zip(labels, reports):
            cov, summ = rep["coverage"], rep["summary"]
            w.writerow([label, *(f"{cov[k]:.9f}" for k in COVERAGE_FIELDS),
                        summ["retained_tokens"], summ["modeled_cache_bytes"]])
    with (out / "plot_data.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "step", "frame", "pre_append_tokens", "post_append_tokens",
                    "reference_layer_tokens", "pose_dispersion"])
        for label, rep in zip(labels, reports):
            ref = rep["coverage"]["reference_layer"]
            for i, (st, disp) in enumerate(zip(rep["steps"], rep["coverage"]["dispersion_series"])):
                w.writerow([label, i, st["frame"], sum(st["pre_append"]), sum(st["post_append"]),
                            st["pre_append"][ref], f"{disp:.9f}"])
    return 0


def _label(policy: PolicyConfig) -> str:
    if not policy.params:
        return policy.kind
    return policy.kind + ":" + ",".join(f"{k}={v}" for k, v in sorted(policy.params.items()))


def cmd_gen_trace(config_path, out_path, seed=None) -> int:
    stream, _ = load_stream(config_path, seed)
    formats.write_trace(out_path, stream)
    return 0


def cmd_gen_activations(rho: Sequence[float], out_path, samples: int = 8, dim: int = 64, seed: int = 0) -> int:
    formats.write_activation_trace(out_path, synthetic_activation_samples(rho, samples, dim, seed))
    return 0


# -- argument parsing -------------------------------------------------------------

def _float_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated float list: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ghostkv", description="Geometry-aware KV-cache eviction experiments.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def run_flags(sp):
        sp.add_argument("--weights-file")
        sp.add_argument("--mode", choices=("standard", "strict"), default="standard")
        sp.add_argument("--ablation", choices=ABLATIONS, default="full")
        sp.add_argument("--seed", type=int, help="override noise_seed of a generator config")
        sp.add_argument("--bytes-per-token", type=int, default=1)

    sp = sub.add_parser("profile", help="per-layer mean cosine profile from an activation trace")
    sp.add_argument("trace")
    sp.add_argument("out")

    sp = sub.add_parser("allocate", help="budget plan from a profile")
    sp.add_argument("profile")
    sp.add_argument("out")
    sp.add_argument("--tau", type=float, default=0.5)
    sp.add_argument("--total", type=int, default=1_200_000)
    sp.add_argument("--floor", type=int, default=DEFAULT_FRAME_TOKENS)

    sp = sub.add_parser("run", help="drive one policy over a trace or generator config")
    sp.add_argument("source", help="frame trace (.jsonl) or trajectory config (.json)")
    sp.add_argument("plan")
    sp.add_argument("out")
    sp.add_argument("--policy", default="ghost")
    run_flags(sp)

    sp = sub.add_parser("sweep", help="tau grid or weight perturbations over a seed battery")
    sp.add_argument("config")
    sp.add_argument("out_dir")
    sp.add_argument("--sweep", choices=("tau", "weights"), required=True)
    sp.add_argument("--jobs", type=int, default=1)

    sp = sub.add_parser("compare", help="several policies on one stream")
    sp.add_argument("source")
    sp.add_argument("plan")
    sp.add_argument("out_dir")
    sp.add_argument("--policies", nargs="+", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    run_flags(sp)

    sp = sub.add_parser("gen-trace", help="render a trajectory config to a frame trace")
    sp.add_argument("config")
    sp.add_argument("out")
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("gen-activations", help="synthetic activation trace with given per-layer cosines")
    sp.add_argument("out")
    sp.add_argument("--rho", type=_float_list, required=True)
    sp.add_argument("--samples", type=int, default=8)
    sp.add_argument("--dim", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    return p


def _dispatch(args) -> int:
    c = args.command
    if c == "profile":
        return cmd_profile(args.trace, args.out)
    if c == "allocate":
        return cmd_allocate(args.profile, args.out, args.tau, args.total, args.floor)
    if c == "run":
        return cmd_run(args.source, args.plan, args.out, args.policy, args.weights_file, args.mode,
                       args.ablation, args.seed, args.bytes_per_token)
    if c == "sweep":
        return cmd_sweep(args.config, args.out_dir, args.sweep, args.jobs)
    if c == "compare":
        return cmd_compare(args.source, args.plan, args.policies, args.out_dir, args.weights_file,
                           args.mode, args.ablation, args.seed, args.bytes_per_token, args.jobs)
    if c == "gen-trace":
        return cmd_gen_trace(args.config, args.out, args.seed)
    if c == "gen-activations":
        return cmd_gen_activations(args.rho, args.out, args.samples, args.dim, args.seed)
    raise UsageError("no command given; try --help")


def _configure_logging() -> None:
    level = os.environ.get("GHOST_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(stream=sys.stderr, level=levels.get(level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    _configure_logging()
    try:
        return _dispatch(build_parser().parse_args(argv))
    except UsageError as exc:
        print(f"error_code={exc.code} {exc}", file=sys.stderr)
        return 2
    except GhostError as exc:
        print(f"error_code={exc.code} {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error_code=E_IO file not found: {exc.filename}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error_code=E_IO {exc.filename}: {exc.strerror}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
