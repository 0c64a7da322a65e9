"""End-to-end acceptance criteria, one test per criterion.

Each test records a ``criterion N PASS|FAIL|REPORT|SKIP`` line (echoed in the
terminal summary) before asserting. Runtime bounds are part of the check.
"""

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from werank import autodiff as ad
from werank.data import ToyDataConfig, gen_toy_dataset
from werank.harness import complexity_bench, load_preset, run_experiment
from werank.linalg import frob_dist_to_identity
from werank.losses import (InfoNceConfig, VicregConfig, WERankConfig, byol_loss, infonce_loss,
                           total_loss, vicreg_loss, werank, werank_layer)
from werank.models import NetworkSpec
from werank.training import OptimizerConfig, ToyViews, TrainRunConfig, train_ema, train_siamese

pytestmark = pytest.mark.acceptance

PRESETS = Path(__file__).resolve().parents[1] / "presets"
CORA_ENV = "WERANK_CORA_BUNDLE"


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _runs(summary):
    return {r["name"]: r for r in summary["runs"]}


def _verdict(ok):
    return "PASS" if ok else "FAIL"


# 1 -------------------------------------------------------------------------

def test_c01_spectral_identity(report_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 17))
        a = rng.normal(size=(d, int(rng.integers(1, 2 * d + 1))))
        c = a @ a.T / a.shape[1]
        lam = np.linalg.eigvalsh(c)
        worst = max(worst, abs(frob_dist_to_identity(c) - np.sqrt(np.sum((lam - 1) ** 2))))
    dt = time.perf_counter() - t0
    ok = worst < 1e-9 and dt < 5
    report_criterion(1, _verdict(ok), f"max |entrywise - eigen| = {worst:.2e} (< 1e-9), {dt:.2f}s (< 5s)")
    assert ok


# 2 -------------------------------------------------------------------------

def _cases():
    rng = np.random.default_rng(2)
    r = lambda *s: rng.normal(size=s)

    def pos(*s):
        return rng.uniform(0.5, 2.0, size=s)

    def away(*s):  # bounded away from kinks at 0
        return rng.choice([-1, 1], size=s) * rng.uniform(0.2, 1.5, size=s)

    w = lambda shape: ad.const(r(*shape))  # fixed contraction weights

    def contract(f, shape):
        c = w(shape)
        return lambda *xs: ad.sum_all(f(*xs) * c)

    vic = VicregConfig()
    vic_entry = VicregConfig(inv_reduction="entry")
    return {
        "matmul": (contract(lambda a, b: a @ b, (3, 2)), [r(3, 4), r(4, 2)]),
        "add_broadcast": (contract(lambda a, b: a + b, (3, 4)), [r(3, 4), r(1, 4)]),
        "sub": (contract(lambda a, b: a - b, (3, 4)), [r(3, 4), r(3, 4)]),
        "mul": (contract(lambda a, b: a * b, (3, 4)), [r(3, 4), r(1, 4)]),
        "scale": (contract(lambda a: ad.scale(a, -1.7), (2, 3)), [r(2, 3)]),
        "concat_rows": (contract(lambda a, b: ad.concat_rows(a, b), (5, 3)), [r(2, 3), r(3, 3)]),
        "transpose": (contract(lambda a: a.T, (4, 3)), [r(3, 4)]),
        "relu": (contract(ad.relu, (3, 4)), [away(3, 4)]),
        "prelu": (contract(ad.prelu, (3, 4)), [away(3, 4), np.full((1, 1), 0.25)]),
        "square": (contract(ad.square, (3, 3)), [r(3, 3)]),
        "abs": (contract(ad.abs_, (3, 3)), [away(3, 3)]),
        "sqrt": (contract(ad.sqrt, (3, 3)), [pos(3, 3)]),
        "log": (contract(ad.log, (3, 3)), [pos(3, 3)]),
        "exp": (contract(ad.exp, (3, 3)), [r(3, 3)]),
        "sum_all": (ad.sum_all, [r(3, 4)]),
        "mean_all": (ad.mean_all, [r(3, 4)]),
        "row_sum": (contract(ad.row_sum, (5, 1)), [r(5, 3)]),
        "col_mean": (contract(ad.col_mean, (1, 3)), [r(5, 3)]),
        "col_var": (contract(ad.col_var, (1, 3)), [r(5, 3)]),
        "row_logsumexp": (contract(ad.row_logsumexp, (4, 1)), [r(4, 5) * 3]),
        "row_normalize": (contract(ad.row_normalize, (4, 3)), [r(4, 3)]),
        "frobenius": (ad.frobenius, [r(3, 4)]),
        "offdiag": (contract(ad.offdiag, (4, 4)), [r(4, 4)]),
        "vicreg_row": (lambda a, b: vicreg_loss(a, b, vic), [r(8, 4) * 0.5, r(8, 4) * 0.5]),
        "vicreg_entry": (lambda a, b: vicreg_loss(a, b, vic_entry), [r(8, 4) * 0.5, r(8, 4) * 0.5]),
        "infonce": (lambda a, b: infonce_loss(a, b, InfoNceConfig()), [r(6, 4), r(6, 4)]),
        "byol": (lambda p1, t2, p2, t1: byol_loss(p1, t2, p2, t1), [r(5, 3) for _ in range(4)]),
        "werank_square": (lambda a: werank_layer(a), [r(4, 4)]),
        "werank_tall": (lambda a: werank_layer(a, normalize_by_d2=True), [r(6, 3)]),
        "werank_wide": (lambda a: werank_layer(a), [r(3, 6)]),
        "werank_l1": (lambda a: werank_layer(a, "entrywise_l1"), [r(3, 3) + 0.3]),
        "werank_multi": (lambda a, b: werank([a, b], WERankConfig([0.3, 1.1])), [r(4, 3), r(3, 3)]),
        "total": (lambda a, b, w1: total_loss(vicreg_loss(a @ w1, b @ w1, vic), [w1],
                                              WERankConfig([0.1])),
                  [r(8, 3) * 0.5, r(8, 3) * 0.5, r(3, 3)]),
    }


def test_c02_gradient_suite(report_criterion):
    t0 = time.perf_counter()
    errs = {name: ad.gradcheck(fn, inputs) for name, (fn, inputs) in _cases().items()}
    # stop_gradient has a zero Jacobian by definition, so it is checked directly
    x = ad.leaf(np.random.default_rng(3).normal(size=(2, 3)))
    y = ad.stop_gradient(x)
    grads = ad.backward(ad.sum_all(y * y) + ad.sum_all(x))
    sg_ok = np.array_equal(y.value, x.value) and np.array_equal(grads[x], np.ones((2, 3)))
    dt = time.perf_counter() - t0
    name, worst = max(errs.items(), key=lambda kv: kv[1])
    ok = worst < 1e-4 and sg_ok and dt < 30
    report_criterion(2, _verdict(ok), f"{len(errs)} ops/losses, worst {name} rel err {worst:.2e} "
                                      f"(< 1e-4); stop_gradient identity/zero-Jacobian {sg_ok}; "
                                      f"{dt:.1f}s (< 30s)")
    assert ok, errs


# 3 -------------------------------------------------------------------------

def test_c03_proposition(tmp_path, report_criterion):
    t0 = time.perf_counter()
    _, s = run_experiment(load_preset(PRESETS / "prop_check.json"), tmp_path)
    dt = time.perf_counter() - t0
    m = s["runs"][0]["metrics"]
    ok = m["max_abs_sigma_minus_one"] < 1e-3 and m["steps"] <= 20000 and dt < 10
    report_criterion(3, _verdict(ok), f"max|sigma-1| = {m['max_abs_sigma_minus_one']:.2e} after "
                                      f"{m['steps']} steps (< 1e-3, <= 20000), {dt:.1f}s (< 10s)")
    assert ok


# 4 -------------------------------------------------------------------------

def test_c04_toy_overparameterization(tmp_path, report_criterion):
    t0 = time.perf_counter()
    _, s = run_experiment(load_preset(PRESETS / "toy_overparam.json"), tmp_path)
    dt = time.perf_counter() - t0
    runs = _runs(s)
    base, reg = runs["alpha0_seed0"]["metrics"], runs["alpha0.1_seed0"]["metrics"]
    below = base["weights"]["below_half"]
    base_ok = all(v >= 4 for v in below.values())
    sig = np.concatenate([reg["W1"]["sigmas"], reg["W2"]["sigmas"]])
    reg_ok = sig.size == 32 and sig.min() >= 0.85 and sig.max() <= 1.15
    rank_ok = reg["Z"]["numerical_rank"] == 16
    ok = base_ok and reg_ok and rank_ok and dt < 180
    report_criterion(4, _verdict(ok),
                     f"baseline sigmas < 0.5 per layer {below} (need >= 4 each: {base_ok}); "
                     f"WERank sigmas in [{sig.min():.3f}, {sig.max():.3f}] (need [0.85, 1.15]: {reg_ok}); "
                     f"Z rank {reg['Z']['numerical_rank']} (need 16); {dt:.0f}s (< 180s)")
    assert ok


# 5 -------------------------------------------------------------------------

def test_c05_augmentation_sweep(tmp_path, report_criterion):
    t0 = time.perf_counter()
    _, s = run_experiment(load_preset(PRESETS / "toy_aug_sweep.json"), tmp_path)
    dt = time.perf_counter() - t0
    runs = _runs(s)
    ks = sorted({p["params"]["k"] for p in s["plans"]})
    gaps = []
    for k in ks:
        tag = f"k{k:g}"
        pick = lambda a: next(r for n, r in runs.items() if n.startswith(tag + "_") and f"_alpha{a}_" in n)
        gaps.append(pick("0.1")["metrics"]["weights"]["mean_sigma"]
                    - pick("0")["metrics"]["weights"]["mean_sigma"])
    inversions = sum(b > a for a, b in zip(gaps, gaps[1:]))
    ok = inversions <= 1 and dt < 300
    report_criterion(5, _verdict(ok), "gap by k " + ", ".join(f"{k:g}:{g:+.4f}" for k, g in zip(ks, gaps))
                     + f"; {inversions} inversion(s) (<= 1); {dt:.0f}s (< 300s)")
    assert ok


# 6 -------------------------------------------------------------------------

def test_c06_depth_ablation(tmp_path, report_criterion):
    t0 = time.perf_counter()
    _, s = run_experiment(load_preset(PRESETS / "toy_depth.json"), tmp_path)
    dt = time.perf_counter() - t0
    depths, worst, base_min = [], [], []
    for plan, run in zip(s["plans"], s["runs"]):
        p = plan["params"]
        if run["status"] != "ok":
            worst.append(np.inf)
            continue
        m = run["metrics"]
        if p["alpha"] > 0:
            depths.append(p["depth"])
            worst.append(max(abs(m["weights"]["min_sigma"] - 1), abs(m["weights"]["max_sigma"] - 1)))
        else:
            base_min.append((p["depth"], m["min_sigma_at_probe_epoch"]))
    base_min.sort()
    reg_ok = len(worst) == 3 and max(worst) < 0.1
    mono_ok = len(base_min) == 3 and all(b[1] <= a[1] for a, b in zip(base_min, base_min[1:]))
    ok = reg_ok and mono_ok and dt < 480
    report_criterion(6, _verdict(ok),
                     "WERank max|sigma-1| by L " + ", ".join(f"{d}:{w:.3f}" for d, w in zip(depths, worst))
                     + " (< 0.1); baseline min sigma@5000 " + ", ".join(f"{d}:{v:.3f}" for d, v in base_min)
                     + f" (non-increasing: {mono_ok}); {dt:.0f}s (< 480s)")
    assert ok


# 7 -------------------------------------------------------------------------

def test_c07_ema_sgd_observation(tmp_path, report_criterion):
    _, s = run_experiment(load_preset(PRESETS / "ema_optimizer_check.json"), tmp_path)
    drift = {n: r["metrics"]["max_trace_step_drift"] for n, r in _runs(s).items()}
    sgd = drift["sgd_alpha0_seed0"]
    report_criterion(7, "REPORT", f"max per-epoch sigma drift: sgd {sgd:.2e} (observation < 1e-6: "
                                  f"{sgd < 1e-6}), sgd+WERank {drift['sgd_alpha0.02_seed0']:.2e}, "
                                  f"adamw {drift['adamw_alpha0_seed0']:.2e}; non-gating")
    assert np.isfinite(sgd)


# 8 -------------------------------------------------------------------------

def test_c08_graph_rank_separation(tmp_path, report_criterion):
    t0 = time.perf_counter()
    _, s = run_experiment(load_preset(PRESETS / "graph_bgrl.json"), tmp_path)
    dt = time.perf_counter() - t0
    runs = _runs(s)
    base, reg = runs["alpha0_seed0"]["metrics"], runs["alpha0.1_seed0"]["metrics"]
    rand = runs["random_init_seed0"]["metrics"]
    er = {k: (reg[k]["effective_rank"], base[k]["effective_rank"]) for k in ("H", "Z")}
    rank_ok = all(a >= b for a, b in er.values())
    probe_ok = reg["probe"]["mean"] >= rand["probe"]["mean"]
    ok = rank_ok and probe_ok and dt < 600
    report_criterion(8, _verdict(ok),
                     "erank WERank/baseline " + ", ".join(f"{k} {a:.3f}/{b:.3f}" for k, (a, b) in er.items())
                     + f"; probe {reg['probe']['mean']:.4f} vs random init {rand['probe']['mean']:.4f}; "
                     f"{dt:.0f}s (< 600s)")
    assert ok


# 9 -------------------------------------------------------------------------

def test_c09_cora_optional(tmp_path, report_criterion):
    bundle = os.environ.get(CORA_ENV)
    if not bundle:
        report_criterion(9, "SKIP", f"no Cora bundle supplied (set {CORA_ENV}); non-gating")
        pytest.skip("Cora bundle not supplied")
    _, s = run_experiment(load_preset(PRESETS / "cora_bgrl.json"), tmp_path, bundle=bundle)
    runs = _runs(s)
    base, reg = runs["alpha0_seed0"]["metrics"], runs["alpha0.1_seed0"]["metrics"]
    acc = reg["probe"]["mean"]
    ok = acc >= 0.75 and reg["H"]["effective_rank"] >= base["H"]["effective_rank"]
    report_criterion(9, "REPORT", f"{'meets' if ok else 'misses'} target: probe {acc:.4f} (>= 0.75), "
                                  f"erank H {reg['H']['effective_rank']:.3f} vs "
                                  f"{base['H']['effective_rank']:.3f}; non-gating")


# 10 ------------------------------------------------------------------------

def test_c10_alpha_zero_degeneracy(tmp_path, report_criterion):
    t0 = time.perf_counter()
    data = gen_toy_dataset(ToyDataConfig())
    spec = NetworkSpec.linear_chain([16, 16, 16])
    same = {}
    for loss in ("vicreg", "infonce"):
        digests = []
        for wr in (None, WERankConfig.uniform(0.0, 2)):
            cfg = TrainRunConfig(model=spec, loss=loss, werank=wr, trace_every=10,
                                 epochs=300 if loss == "vicreg" else 30,
                                 vicreg=VicregConfig(inv_reduction="entry"))
            digests.append(_digest(train_siamese(cfg, data).write(tmp_path / f"{loss}{wr is None}")
                                   / "trace.csv"))
        same[loss] = digests[0] == digests[1]
    digests = []
    for wr in (None, WERankConfig([0.0])):
        cfg = TrainRunConfig(model=NetworkSpec.linear_chain([16, 16]), loss="byol", werank=wr,
                             epochs=200, trace_every=20, predictor=NetworkSpec.linear_chain([16, 16]),
                             optimizer=OptimizerConfig("adamw", learning_rate=0.01, weight_decay=3e-4))
        out = train_ema(cfg, ToyViews(data, 0.1, 0)).write(tmp_path / f"ema{wr is None}")
        digests.append(_digest(out / "trace.csv"))
    same["ema"] = digests[0] == digests[1]
    dt = time.perf_counter() - t0
    ok = all(same.values()) and dt < 60
    report_criterion(10, _verdict(ok), f"trace.csv checksums equal {same}; {dt:.0f}s (< 60s)")
    assert ok


# 11 ------------------------------------------------------------------------

def test_c11_complexity_bench(report_criterion):
    t0 = time.perf_counter()
    res = complexity_bench((64, 128, 256, 512))
    dt = time.perf_counter() - t0
    exp = res["exponent"]
    ok = 2.3 <= exp <= 3.5 and len(res["rows"]) == 4 and dt < 60
    report_criterion(11, _verdict(ok), f"fitted exponent {exp:.2f} (in [2.3, 3.5]); doubling ratios "
                                       + ", ".join(f"{r:.1f}" for r in res["doubling_ratios"])
                                       + f"; {dt:.1f}s (< 60s)")
    assert ok


# 12 ------------------------------------------------------------------------

_SHORT = {"toy_overparam": {"epochs": 300}, "toy_aug_sweep": {"epochs": 200},
          "toy_depth": {"epochs": 200}, "ema_optimizer_check": {"epochs": 100},
          "graph_bgrl": {"epochs": 40, "probe_iters": 200, "probe_splits": 2},
          "coeff_sweep": {"epochs": 20, "probe_iters": 100, "probe_splits": 2},
          "aug_magnitude_sweep": {"epochs": 20, "probe_iters": 100, "probe_splits": 2}}


def test_c12_determinism(tmp_path, report_criterion):
    checked, mismatched = 0, []
    for path in sorted(PRESETS.glob("*.json")):
        preset = load_preset(path)
        if preset["kind"] == "complexity_bench" or path.stem == "cora_bgrl":
            continue  # wall-clock timings, and an external bundle
        preset["params"] = dict(preset.get("params", {}), **_SHORT.get(preset["kind"], {}))
        da, _ = run_experiment(preset, tmp_path / "a")
        db, _ = run_experiment(preset, tmp_path / "b")
        files = sorted(p.relative_to(da) for p in da.rglob("*")
                       if p.name in ("trace.csv", "summary.json"))
        for rel in files:
            checked += 1
            if _digest(da / rel) != _digest(db / rel):
                mismatched.append(str(rel))
    ok = checked > 0 and not mismatched
    report_criterion(12, _verdict(ok), f"{checked} trace.csv/summary.json files compared across reruns, "
                                       f"{len(mismatched)} differ")
    assert ok, mismatched
