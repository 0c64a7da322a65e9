"""Experiment presets, the run executor and the ``werank`` command line.

A preset is a JSON file::

    {"kind": "toy_overparam", "name": "overparam", "seeds": [0],
     "params": {"k": 0.1}, "grid": {"alpha": [0.0, 0.1]}}

``params`` override the defaults of ``kind``; ``grid`` axes are expanded as
a cartesian product (times ``seeds``). A grid value that is an object is
merged into the params, which lets one axis switch several settings.
"""

from __future__ import annotations

import argparse
import copy
import itertools
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np

from . import autodiff as ad
from . import plots
from .data import (AugmentConfig, ToyDataConfig, gen_synthetic_graph, gen_toy_dataset,
                   load_graph_bundle)
from .evaluation import ProbeConfig, derive_ranks, probe_over_splits, write_ranks
from .linalg import effective_rank, numerical_rank, svd
from .losses import InfoNceConfig, VicregConfig, WERankConfig, werank_layer
from .models import NetworkSpec, init_weights
from .rng import substream
from .training import (GraphViews, OptimizerConfig, RunResult, ToyViews, TrainingDivergence,
                       TrainRunConfig, encode, minimize_werank, train_ema, train_siamese)

log = logging.getLogger(__name__)

OUT_ENV = "WERANK_OUT"
DEFAULT_OUT = "runs"

KINDS = ("toy_overparam", "toy_aug_sweep", "toy_depth", "prop_check", "ema_optimizer_check",
         "graph_bgrl", "coeff_sweep", "aug_magnitude_sweep", "complexity_bench")

PRESET_SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": list(KINDS)},
        "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "description": {"type": "string"},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "params": {"type": "object"},
        "grid": {"type": "object", "additionalProperties": {"type": "array", "minItems": 1}},
        "output_dir": {"type": "string"},
    },
}

_TOY = dict(loss="vicreg", width=16, depth=2, k=0.1, alpha=0.0, variant="frobenius",
            normalize_by_d2=False, epochs=10000, lr=0.05, optimizer="sgd", weight_decay=0.0,
            trace_every=100, n_points=1000, data_seed=0, inv_coeff=10.0, var_coeff=10.0,
            cov_coeff=1.0, inv_reduction="entry", temperature=0.5, ema_decay=0.995,
            predictor=True, probe_epoch=5000)

_GRAPH = dict(bundle=None, n_nodes=300, n_blocks=4, p_in=0.1, p_out=0.01, feat_dim=32,
              graph_seed=0, signal=1.0, noise=1.0, hidden=64, embed=32, predictor_hidden=64,
              norm=None, alpha=0.1, variant="frobenius", normalize_by_d2=True, epochs=500,
              lr=1e-3, weight_decay=1e-5, ema_decay=0.995, trace_every=50, p_f1=0.2, p_f2=0.3,
              p_e1=0.4, p_e2=0.4, multiplier=1.0, cap_at_one=True, probe_iters=2000,
              probe_lr=0.1, probe_splits=5, random_init_arm=True)

DEFAULTS = {
    "toy_overparam": dict(_TOY),
    "toy_aug_sweep": dict(_TOY, depth=1, k=0.1),
    "toy_depth": dict(_TOY),
    "prop_check": dict(width=16, alpha=1.0, variant="frobenius", normalize_by_d2=False,
                       lr=5e-4, max_steps=20000, tol=1e-3, init_scale=1.0),
    "ema_optimizer_check": dict(_TOY, loss="byol", depth=1, epochs=1000, trace_every=1),
    "graph_bgrl": dict(_GRAPH),
    "coeff_sweep": dict(_GRAPH, random_init_arm=False),
    "aug_magnitude_sweep": dict(_GRAPH, random_init_arm=False),
    "complexity_bench": dict(dims=[64, 128, 256, 512], repeats=7, min_time=0.1),
}

# preset grids standing in for values the source leaves open
DERIVED_GRIDS = {
    "toy_aug_sweep": {"k": [0.01, 0.1, 0.5, 1.0]},
    "toy_depth": {"depth": [2, 4, 6]},
    "aug_magnitude_sweep": {"multiplier": [0.01, 0.05, 0.1, 0.5, 2.0]},
}

GRAPH_KINDS = ("graph_bgrl", "coeff_sweep", "aug_magnitude_sweep")


# ------------------------------------------------------------------ presets

class PresetError(ValueError):
    pass


def load_preset(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        preset = json.loads(text)
    except json.JSONDecodeError as e:
        raise PresetError(f"{path}: not valid JSON ({e})") from None
    preset.setdefault("name", Path(path).stem)
    return preset


def validate_preset(preset: dict):
    try:
        jsonschema.validate(preset, PRESET_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise PresetError(f"invalid preset at {where}: {e.message}") from None
    unknown = set(preset.get("params", {})) - set(DEFAULTS[preset["kind"]])
    axes = {a for a, vals in preset.get("grid", {}).items() if not isinstance(vals[0], dict)}
    unknown |= axes - set(DEFAULTS[preset["kind"]])
    if unknown:
        raise PresetError(f"unknown parameter(s) for {preset['kind']}: {sorted(unknown)}")


def _label(axis: str, value) -> str:
    if isinstance(value, dict):
        return str(value.get("label", "-".join(f"{k}{v}" for k, v in sorted(value.items()))))
    return f"{axis}{value:g}" if isinstance(value, (int, float)) else f"{axis}{value}"


def _default_axes(kind: str) -> dict:
    axes = dict(DERIVED_GRIDS.get(kind, {}))
    if kind in ("toy_overparam", "toy_aug_sweep", "toy_depth", "graph_bgrl", "aug_magnitude_sweep"):
        axes["alpha"] = [0.0, 0.1]
    if kind == "coeff_sweep":
        axes["alpha"] = [0.02, 0.05, 0.1, 0.2, 0.5, 0.8, 1.0]
    return axes


def _covered_axes(grid: dict) -> set:
    """Parameter names a grid already varies, including keys set by object values."""
    out = set()
    for axis, values in grid.items():
        out.add(axis)
        for v in values:
            if isinstance(v, dict):
                out |= set(v) - {"label"}
    return out


def resolve_preset(preset: dict, seed_override: Optional[int] = None,
                   bundle: Optional[str] = None) -> list[dict]:
    """Expand a preset into run plans. Pure: same preset, same plans."""
    validate_preset(preset)
    kind = preset["kind"]
    base = copy.deepcopy(DEFAULTS[kind])
    base.update(copy.deepcopy(preset.get("params", {})))
    if bundle is not None:
        if kind not in GRAPH_KINDS:
            raise PresetError(f"--bundle only applies to graph presets, not {kind}")
        base["bundle"] = str(bundle)
    grid = dict(preset.get("grid", {}))
    for axis, values in _default_axes(kind).items():
        if axis not in _covered_axes(grid):
            grid[axis] = values
    seeds = [seed_override] if seed_override is not None else preset.get("seeds", [0])
    axes = list(grid)
    plans = []
    for seed in seeds:
        for combo in itertools.product(*(grid[a] for a in axes)):
            params = copy.deepcopy(base)
            parts = []
            for axis, value in zip(axes, combo):
                if isinstance(value, dict):
                    params.update({k: v for k, v in value.items() if k != "label"})
                else:
                    params[axis] = value
                parts.append(_label(axis, value))
            name = "_".join(parts + [f"seed{seed}"])
            plans.append({"kind": kind, "name": name, "seed": int(seed), "params": params})
        if kind in GRAPH_KINDS and base.get("random_init_arm"):
            plans.append({"kind": kind, "name": f"random_init_seed{seed}", "seed": int(seed),
                          "params": dict(copy.deepcopy(base), random_init=True)})
    if kind == "complexity_bench":
        plans = [{"kind": kind, "name": "bench", "seed": 0, "params": base}]
    return plans


# ---------------------------------------------------------------- executors

def _werank_cfg(p, n_layers) -> Optional[WERankConfig]:
    if p["alpha"] == 0:
        return None
    return WERankConfig.uniform(p["alpha"], n_layers, variant=p["variant"],
                                normalize_by_d2=p["normalize_by_d2"])


def _optimizer(p) -> OptimizerConfig:
    return OptimizerConfig(p["optimizer"], learning_rate=p["lr"], weight_decay=p["weight_decay"])


def toy_run_config(p: dict, seed: int) -> TrainRunConfig:
    width, depth = p["width"], p["depth"]
    predictor = None
    if p["loss"] == "byol" and p["predictor"]:
        predictor = NetworkSpec.linear_chain([width, width])
    return TrainRunConfig(
        model=NetworkSpec.linear_chain([width] * (depth + 1)), loss=p["loss"],
        vicreg=VicregConfig(p["inv_coeff"], p["var_coeff"], p["cov_coeff"],
                            inv_reduction=p["inv_reduction"]),
        infonce=InfoNceConfig(p["temperature"]), werank=_werank_cfg(p, depth),
        optimizer=_optimizer(p), epochs=p["epochs"], trace_every=p["trace_every"], seed=seed,
        aug_amplitude=p["k"], ema_decay=p["ema_decay"], predictor=predictor)


def graph_run_config(p: dict, seed: int, feat_dim: int) -> TrainRunConfig:
    dims = [feat_dim, p["hidden"], p["embed"]]
    return TrainRunConfig(
        model=NetworkSpec.gcn_encoder(dims, norm=p["norm"]), loss="byol",
        werank=_werank_cfg(p, len(dims) - 1),
        optimizer=OptimizerConfig("adamw", learning_rate=p["lr"], weight_decay=p["weight_decay"]),
        epochs=p["epochs"], trace_every=p["trace_every"], seed=seed, ema_decay=p["ema_decay"],
        predictor=NetworkSpec.mlp_predictor(p["embed"], p["predictor_hidden"]))


def _final_metrics(result: RunResult) -> dict:
    rep = result.report
    out = {}
    weights = [m for m in rep.matrix_ids() if m.startswith("W")]
    for mid in rep.matrix_ids():
        s = rep.final(mid)
        out[mid] = {"sigmas": s.sigmas.tolist(), "numerical_rank": numerical_rank(s),
                    "effective_rank": effective_rank(s) if s.sigmas.sum() > 0 else 0.0}
    allw = np.concatenate([rep.final(m).sigmas for m in weights])
    out["weights"] = {"mean_sigma": float(allw.mean()), "min_sigma": float(allw.min()),
                      "max_sigma": float(allw.max()),
                      "below_half": {m: int(np.sum(rep.final(m).sigmas < 0.5)) for m in weights}}
    return out


def _write_run(result: RunResult, out: Path):
    result.write(out)
    write_ranks(derive_ranks(result.report), out / "ranks.csv")


def _run_toy(plan: dict, out: Path) -> dict:
    p, seed = plan["params"], plan["seed"]
    cfg = toy_run_config(p, seed)
    data = gen_toy_dataset(ToyDataConfig(n_points=p["n_points"], dim=p["width"], seed=p["data_seed"]))
    if p["loss"] == "byol":
        result = train_ema(cfg, ToyViews(data, p["k"], seed))
    else:
        result = train_siamese(cfg, data)
    result.meta["toy_data_seed"] = p["data_seed"]
    _write_run(result, out)
    metrics = _final_metrics(result)
    weights = [m for m in result.report.matrix_ids() if m.startswith("W")]
    epochs, _ = result.report.series(weights[0])
    at = p["probe_epoch"]
    if at in set(epochs.tolist()):
        idx = int(np.where(epochs == at)[0][0])
        metrics["min_sigma_at_probe_epoch"] = float(min(
            result.report.series(m)[1][idx].min() for m in weights))
    drift = 0.0
    for m in weights:
        _, sig = result.report.series(m)
        if len(sig) > 1:
            drift = max(drift, float(np.max(np.abs(np.diff(sig, axis=0)))))
    metrics["max_trace_step_drift"] = drift
    return metrics


def _run_prop(plan: dict, out: Path) -> dict:
    p, seed = plan["params"], plan["seed"]
    d = p["width"]
    w0 = substream(seed, "prop-init").standard_normal((d, d)) * p["init_scale"] / math.sqrt(d)
    cfg = WERankConfig([p["alpha"]], variant=p["variant"], normalize_by_d2=p["normalize_by_d2"])
    w, steps, err = minimize_werank(w0, cfg, OptimizerConfig(learning_rate=p["lr"]),
                                    p["max_steps"], tol=p["tol"])
    from .evaluation import RankReport
    report = RankReport()
    report.add(0, "W1", svd(w0)[1])
    report.add(max(steps, 1), "W1", svd(w)[1])
    meta = {"config": p, "seed": seed, "trainer": "werank_only"}
    RunResult(None, report, [], meta).write(out)
    write_ranks(derive_ranks(report), out / "ranks.csv")
    return {"steps": steps, "max_abs_sigma_minus_one": err, "converged": err < p["tol"]}


def _load_graph(p: dict):
    if p["bundle"]:
        return load_graph_bundle(p["bundle"])
    return gen_synthetic_graph(p["n_nodes"], p["n_blocks"], p["p_in"], p["p_out"], p["feat_dim"],
                               p["graph_seed"], p["signal"], p["noise"])


def _run_graph(plan: dict, out: Path) -> dict:
    p, seed = plan["params"], plan["seed"]
    g = _load_graph(p)
    augment = AugmentConfig(p["p_f1"], p["p_f2"], p["p_e1"], p["p_e2"], p["multiplier"],
                            p["cap_at_one"])
    cfg = graph_run_config(p, seed, g.feat_dim)
    provider = GraphViews(g, augment, seed)
    if p.get("random_init"):
        cfg.epochs = 0
    result = train_ema(cfg, provider)
    result.meta.update({"graph": p["bundle"] or "synthetic_sbm", "augment_effective": augment.effective(),
                        "random_init": bool(p.get("random_init")),
                        "probe_representation": "online encoder output H"})
    _write_run(result, out)
    h = encode(provider, result.stack, cfg.model)
    probe = probe_over_splits(h, g.labels, ProbeConfig(max_iters=p["probe_iters"],
                                                       learning_rate=p["probe_lr"],
                                                       n_splits=p["probe_splits"], seed=seed))
    probe.write_csv(out / "probe.csv")
    metrics = _final_metrics(result)
    metrics["probe"] = {"mean": probe.mean, "std": probe.std, "test_accuracies": probe.test_accuracies}
    return metrics


def complexity_bench(dims: Sequence[int] = (64, 128, 256, 512), repeats: int = 7,
                     min_time: float = 0.1) -> dict:
    """Time one WERank evaluation per square size; fit a log-log slope."""
    try:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(1)
    except ImportError:  # timing still works, just with the BLAS default pool
        limiter = None
    rows = []
    try:
        for d in dims:
            w = ad.const(substream(0, "bench", int(d)).standard_normal((d, d)) / math.sqrt(d))
            werank_layer(w)
            inner, best = 1, math.inf
            while True:
                t0 = time.perf_counter()
                for _ in range(inner):
                    werank_layer(w)
                if time.perf_counter() - t0 >= min_time:
                    break
                inner *= 2
            for _ in range(repeats):
                t0 = time.perf_counter()
                for _ in range(inner):
                    werank_layer(w)
                best = min(best, (time.perf_counter() - t0) / inner)
            rows.append({"d": int(d), "seconds": best})
    finally:
        if limiter is not None:
            limiter.unregister()
    logd = np.log([r["d"] for r in rows])
    logt = np.log([r["seconds"] for r in rows])
    slope = float(np.polyfit(logd, logt, 1)[0]) if len(rows) > 1 else float("nan")
    ratios = [b["seconds"] / a["seconds"] for a, b in zip(rows, rows[1:])]
    return {"rows": rows, "exponent": slope, "doubling_ratios": ratios}


def _run_bench(plan: dict, out: Path) -> dict:
    p = plan["params"]
    res = complexity_bench(p["dims"], p["repeats"], p["min_time"])
    lines = ["d,seconds"] + [f"{r['d']},{r['seconds']!r}" for r in res["rows"]]
    (out / "bench.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return res


_EXECUTORS = {"prop_check": _run_prop, "complexity_bench": _run_bench}
_EXECUTORS.update({k: _run_toy for k in ("toy_overparam", "toy_aug_sweep", "toy_depth",
                                          "ema_optimizer_check")})
_EXECUTORS.update({k: _run_graph for k in GRAPH_KINDS})


def execute_plan(plan: dict, root) -> dict:
    """Run one grid point into ``root / plan['name']``; never raises on divergence."""
    out = Path(root) / plan["name"]
    out.mkdir(parents=True, exist_ok=True)
    try:
        metrics = _EXECUTORS[plan["kind"]](plan, out)
        return {"name": plan["name"], "status": "ok", "metrics": metrics}
    except TrainingDivergence as e:
        log.error("run %s diverged: %s", plan["name"], e)
        (out / "error.txt").write_text(str(e) + "\n", encoding="utf-8")
        return {"name": plan["name"], "status": "diverged", "error": str(e)}


def _execute_star(args):
    return execute_plan(*args)


def run_experiment(preset, out_root=None, jobs: int = 1, seed_override: Optional[int] = None,
                   bundle: Optional[str] = None) -> tuple[Path, dict]:
    """Resolve, execute and summarize a preset; returns (experiment dir, summary)."""
    if not isinstance(preset, dict):
        preset = load_preset(preset)
    plans = resolve_preset(preset, seed_override, bundle)
    root = Path(out_root or preset.get("output_dir") or os.environ.get(OUT_ENV, DEFAULT_OUT))
    exp_dir = root / preset["name"]
    exp_dir.mkdir(parents=True, exist_ok=True)
    args = [(plan, exp_dir) for plan in plans]
    if jobs > 1 and len(plans) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_execute_star, args))
    else:
        results = [_execute_star(a) for a in args]
    derived = {axis: vals for axis, vals in DERIVED_GRIDS.get(preset["kind"], {}).items()
               if axis not in _covered_axes(preset.get("grid", {}))}
    summary = {"name": preset["name"], "kind": preset["kind"], "plans": plans, "runs": results,
               "derived_grids": derived, "all_finite": all(r["status"] == "ok" for r in results)}
    (exp_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
    return exp_dir, summary


# -------------------------------------------------------------------- plots

def _run_dirs(paths: Sequence) -> list[Path]:
    dirs = []
    for p in map(Path, paths):
        if (p / "trace.csv").is_file():
            dirs.append(p)
        elif p.is_dir():
            dirs.extend(sorted(d for d in p.iterdir() if (d / "trace.csv").is_file()))
    return dirs


def emit_plots(run_dirs: Sequence, kind: str = "spectra", out: Optional[Path] = None,
               matrix_id: Optional[str] = None) -> list[Path]:
    dirs = _run_dirs(run_dirs)
    if not dirs:
        raise ValueError("no run directories with a trace.csv")
    if kind == "spectra":
        return [plots.plot_spectra(d, matrix_id) for d in dirs]
    target = Path(out) if out else dirs[0].parent / f"{kind}{'_' + matrix_id if matrix_id else ''}.svg"
    if kind == "ranks":
        return [plots.plot_ranks(dirs, target, matrix_id)]
    if kind == "final":
        return [plots.plot_final(dirs, target, matrix_id or "W1")]
    raise ValueError(f"unknown plot kind {kind!r}")


# ---------------------------------------------------------------------- CLI

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="werank", description="WERank experiments and diagnostics")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a preset")
    run.add_argument("preset", type=Path)
    run.add_argument("--out", type=Path, default=None,
                     help=f"output root (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--seed-override", type=int, default=None)
    run.add_argument("--bundle", type=Path, default=None, help="graph bundle directory")

    plot = sub.add_parser("plot", help="render SVGs from run directories")
    plot.add_argument("dirs", nargs="+", type=Path)
    plot.add_argument("--kind", choices=("spectra", "ranks", "final"), default="spectra")
    plot.add_argument("--matrix", default=None)
    plot.add_argument("--out", type=Path, default=None)

    bench = sub.add_parser("bench", help="time WERank evaluation against width")
    bench.add_argument("--dims", type=int, nargs="+", default=[64, 128, 256, 512])
    bench.add_argument("--repeats", type=int, default=7)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            exp_dir, summary = run_experiment(args.preset, args.out, args.jobs,
                                              args.seed_override, args.bundle)
            bad = [r["name"] for r in summary["runs"] if r["status"] != "ok"]
            print(f"{len(summary['runs'])} run(s) written to {exp_dir}")
            if bad:
                print(f"diverged: {', '.join(bad)}", file=sys.stderr)
                return 1
            return 0
        if args.command == "plot":
            for path in emit_plots(args.dirs, args.kind, args.out, args.matrix):
                print(path)
            return 0
        res = complexity_bench(args.dims, args.repeats)
        print("d,seconds")
        for r in res["rows"]:
            print(f"{r['d']},{r['seconds']:.6g}")
        print(f"fitted exponent {res['exponent']:.3f}")
        return 0
    except (PresetError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
