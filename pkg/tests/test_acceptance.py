"""Acceptance gate: one test per headline criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are repeated in the
terminal summary) or directly with ``python3 tests/test_acceptance.py``.
The planted-data experiments train about 40 small networks and take roughly
an hour on one core; results are cached so criteria share runs.
"""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from ofscnn.cli import main as cli_main
from ofscnn.config import load_config
from ofscnn.gradcheck import (PerturbationTarget, check_report, finite_diff, relative_error,
                              tiny_sample, tiny_spec)
from ofscnn.network import Network, exhaustive_sweep, run_one, sweep_configurations
from ofscnn.ofs import OfsConv2d, bounds_of, expand_filters, ring_mask, shrink_filters
from ofscnn.tensor import conv2d_same

ROOT = Path(__file__).resolve().parents[1]
PLANTED_CONFIG = ROOT / "configs" / "planted.json"
SEEDS = (0, 1, 2, 3, 4)

RESULTS: list[str] = []


def record(name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert passed, line


# -- planted-data runs, shared between criteria ------------------------------------

@lru_cache(maxsize=None)
def planted_config(resolution=(64, 48), positive=7, negative=3):
    cfg = load_config(PLANTED_CONFIG)
    cfg.data.resolution = list(resolution)
    cfg.data.positive_extent = positive
    cfg.data.negative_extent = negative
    return cfg


@lru_cache(maxsize=None)
def planted_data(resolution=(64, 48), positive=7, negative=3):
    return planted_config(resolution, positive, negative).datasets()


_ROWS: dict = {}


def _cached_job(job):
    name, spec, opt, train_data, test_data, threshold = job
    key = (name, spec.input_resolution, id(train_data), opt.seed)
    if key not in _ROWS:
        _ROWS[key] = run_one(*job)
    return _ROWS[key]


def planted_sweep(resolution=(64, 48), positive=7, negative=3, sizes=(3, 5, 7, 9), seeds=SEEDS):
    cfg = planted_config(resolution, positive, negative)
    train_data, test_data = planted_data(resolution, positive, negative)
    return exhaustive_sweep(cfg.network_spec(), list(sizes), cfg.optimizer, train_data, test_data,
                            list(seeds), layer=cfg.sweep.layer, k0=cfg.sweep.k0,
                            runner=lambda jobs: [_cached_job(j) for j in jobs])


def learned_size(resolution, positive, negative, seed):
    """Converged first-layer k of the learned-size network (k0 and rates from the config)."""
    cfg = planted_config(resolution, positive, negative)
    train_data, test_data = planted_data(resolution, positive, negative)
    (name, spec), = [c for c in sweep_configurations(cfg.network_spec(), [], cfg.sweep.layer, cfg.sweep.k0)]
    row = _cached_job((name, spec, replace(cfg.optimizer, seed=seed), train_data, test_data, 0.5))
    return row.converged_sizes[0]


# -- 1. Single-convolution equivalence ----------------------------------------------------------

def test_single_convolution_equivalence():
    rng = np.random.default_rng(20240601)
    start = time.perf_counter()
    worst = 0.0
    n = 1000
    for i in range(n):
        kp = (3, 5, 7, 9)[i % 4]
        k = kp - 2 + 2 * rng.uniform(0, 1)
        if k >= kp:
            k = kp - 2.0
        cin, cout = rng.integers(1, 9, size=2)
        b = int(rng.integers(1, 5))
        h, w = rng.integers(1, 17, size=2)
        layer = OfsConv2d(int(cin), int(cout), k, rng=rng, bias=rng.standard_normal(cout))
        x = rng.standard_normal((b, int(cin), int(h), int(w)))
        worst = max(worst, float(np.max(np.abs(layer.forward(x) - layer.forward_interp_oracle(x)))))
    elapsed = time.perf_counter() - start
    record("single-convolution equivalence", worst <= 1e-10 and elapsed < 30,
           f"max |composite - two-conv blend| = {worst:.2e} over {n} pairs (<= 1e-10), {elapsed:.1f}s (< 30s)")


# -- 2. Gradient suite ---------------------------------------------------------------

def _layer_errors(rng, k):
    cin, cout = 2, 3
    layer = OfsConv2d(cin, cout, k, rng=rng, bias=rng.standard_normal(cout))
    x = rng.standard_normal((2, cin, 7, 6))
    up = rng.standard_normal((2, cout, 7, 6))

    def loss():
        return float(np.sum(up * layer.forward(x)))

    layer.forward(x)
    errors = {"size": [], "filters": [], "input": [], "bias": []}
    errors["size"].append(relative_error(layer.grad_size(up),
                                         finite_diff(loss, PerturbationTarget("size_k"), model=layer)))
    gw, gx, gb = layer.grad_filters(up), layer.grad_input(up), layer.grad_bias(up)
    for idx in np.ndindex(layer.weight.shape):
        num = finite_diff(loss, PerturbationTarget("filter_weight", index=idx), model=layer)
        errors["filters"].append(relative_error(gw[idx], num))
    for flat in rng.choice(x.size, 40, replace=False):
        idx = np.unravel_index(flat, x.shape)
        num = finite_diff(loss, PerturbationTarget("input", index=idx), model=layer, inputs=x)
        errors["input"].append(relative_error(gx[idx], num))
    for c in range(cout):
        num = finite_diff(loss, PerturbationTarget("bias", index=(c,)), model=layer)
        errors["bias"].append(relative_error(gb[c], num))
    return {key: max(v) for key, v in errors.items()}


def test_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    layer_max = {"size": 0.0, "filters": 0.0, "input": 0.0, "bias": 0.0}
    for k in (1.3, 2.5, 3.7, 4.0, 5.9, 7.2, 8.6):
        for key, value in _layer_errors(rng, k).items():
            layer_max[key] = max(layer_max[key], value)
    reports = [check_report(Network(tiny_spec(), seed=s), tiny_sample(s), n_coords=200, seed=s)
               for s in range(3)]
    net_err = max(r["max_error"] for r in reports)
    checked = sum(r["n_checked"] for r in reports)
    elapsed = time.perf_counter() - start
    ok = max(layer_max.values()) <= 1e-5 and net_err <= 1e-4 and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in layer_max.items())
    record("gradient suite", ok,
           f"layer-level max rel err [{detail}] (<= 1e-5); tiny network {net_err:.1e} over "
           f"{checked} targets (<= 1e-4); {elapsed:.0f}s (< 120s)")


# -- 3. Bounds algebra ---------------------------------------------------------------

def test_bounds_algebra():
    ks = np.random.default_rng(3).uniform(1.0, 11.0, size=100_000)
    ks[:4] = [1.0, 3.0, 10.999999999, 11.0]
    bad = 0
    worst = 0.0
    for k in ks:
        b = bounds_of(float(k))
        ok = (b.k_minus % 2 == 1 and b.k_plus % 2 == 1 and b.k_plus == b.k_minus + 2
              and b.k_minus <= k < b.k_plus and 0 <= b.alpha < 1)
        worst = max(worst, abs(b.k_minus + 2 * b.alpha - k))
        bad += not ok
    record("bounds algebra", bad == 0 and worst <= 1e-12,
           f"{bad} violations over {ks.size} k values; max |k - (k_minus + 2 alpha)| = {worst:.1e} (<= 1e-12)")


# -- 4. Interpolation linearity ------------------------------------------------------

def test_interpolation_linearity():
    rng = np.random.default_rng(11)
    worst = 0.0
    for trial in range(200):
        km = int(rng.choice([1, 3, 5, 7, 9]))
        layer = OfsConv2d(2, 3, float(km), rng=rng, bias=rng.standard_normal(3))
        x = rng.standard_normal((2, 2, 9, 8))
        a1, a2, a3 = np.sort(rng.uniform(0, 1, size=3))
        ys = []
        for a in (a1, a2, a3):
            layer.set_size(km + 2 * a)
            ys.append(layer.forward(x))
        t = (a2 - a1) / (a3 - a1)
        worst = max(worst, float(np.max(np.abs(ys[1] - (ys[0] + t * (ys[2] - ys[0]))))))
    record("interpolation linearity", worst <= 1e-10,
           f"max three-point collinearity residual {worst:.1e} over 200 layers (<= 1e-10)")


# -- 5. Transformation continuity and preservation -----------------------------------

def test_transformation_continuity():
    rng = np.random.default_rng(5)
    eps = 1e-4
    preserved = True
    worst_ratio = 0.0
    for boundary in (3.0, 5.0, 7.0, 9.0):
        for _ in range(10):
            w = rng.standard_normal((3, 2, int(boundary), int(boundary)))
            preserved &= np.array_equal(expand_filters(w)[:, :, 1:-1, 1:-1], w)
            shrunk = shrink_filters(w)
            preserved &= np.array_equal(shrunk[:, :, 1:-1, 1:-1], w[:, :, 1:-1, 1:-1])
            preserved &= not np.any(shrunk[:, :, ring_mask(int(boundary))])
            layer = OfsConv2d(2, 3, boundary - 1.0, rng=rng, bias=rng.standard_normal(3))
            x = rng.standard_normal((2, 2, 10, 9))
            layer.set_size(boundary - eps)
            inner = layer.weight.copy()
            before = layer.forward(x)
            event = layer.transform_if_needed(boundary + eps)
            after = layer.forward(x)
            preserved &= event == "expand" and np.array_equal(layer.weight[:, :, 1:-1, 1:-1], inner)
            layer.transform_if_needed(boundary - eps)
            preserved &= np.array_equal(layer.weight, inner)
            layer.transform_if_needed(boundary + eps)
            bound = 10 * eps * np.max(np.abs(layer.weight)) * np.max(np.abs(x)) * layer.size.k_plus ** 2
            worst_ratio = max(worst_ratio, float(np.max(np.abs(after - before))) / bound)
    record("transformation continuity", preserved and worst_ratio <= 1.0,
           f"inner blocks bit-exact: {bool(preserved)}; max jump / bound = {worst_ratio:.3f} (<= 1)")


# -- 6. Planted-size convergence -------------------------------------------------------

@pytest.mark.slow
def test_planted_size_convergence():
    start = time.perf_counter()
    large = [learned_size((64, 48), 7, 3, s) for s in SEEDS]
    small = [learned_size((64, 48), 3, 1, s) for s in SEEDS]
    n_large = sum(k > 4.5 for k in large)
    n_small = sum(k < 3.5 for k in small)
    elapsed = time.perf_counter() - start
    record("planted-size convergence", n_large >= 4 and n_small >= 4,
           f"extent 7: k = {_fmt(large)} ({n_large}/5 > 4.5); extent 3: k = {_fmt(small)} "
           f"({n_small}/5 < 3.5); {elapsed / 60:.1f} min")


# -- 7. Sweep dominance ----------------------------------------------------------------

@pytest.mark.slow
def test_sweep_dominance():
    start = time.perf_counter()
    _, agg = planted_sweep()
    by_name = {r.config: r for r in agg}
    fixed = {name: r.f1 for name, r in by_name.items() if name.startswith("fixed")}
    best = max(fixed, key=fixed.get)
    ofs = by_name["ofs"].f1
    elapsed = time.perf_counter() - start
    record("sweep dominance", ofs >= fixed[best] - 0.02,
           f"learned-size mean F1 {ofs:.4f} vs best fixed ({best}) {fixed[best]:.4f} - 0.02; "
           f"all fixed {json.dumps({k: round(v, 4) for k, v in fixed.items()})}; {elapsed / 60:.1f} min")


# -- 8. Resolution adaptation ----------------------------------------------------------

@pytest.mark.slow
def test_resolution_adaptation():
    low = [learned_size((64, 48), 7, 3, s) for s in SEEDS]
    # extents doubled and rounded up to the next odd value: 7 -> 15, 3 -> 7
    high = [learned_size((128, 96), 15, 7, s) for s in SEEDS]
    wins = sum(h > l for h, l in zip(high, low))
    record("resolution adaptation", wins >= 4,
           f"128x96 k = {_fmt(high)} vs 64x48 k = {_fmt(low)}; larger in {wins}/5 seeds")


# -- 9. Cost parity --------------------------------------------------------------------

def test_cost_parity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((16, 8, 32, 24))
    layer = OfsConv2d(8, 16, 4.6, rng=rng)
    fixed_w = rng.standard_normal((16, 8, 5, 5))
    bias = np.zeros(16)

    def timed(fn):
        out = []
        for _ in range(100):
            t0 = time.perf_counter()
            fn()
            out.append(time.perf_counter() - t0)
        return statistics.median(out)

    timed(lambda: layer.forward(x))
    t_ofs = timed(lambda: layer.forward(x))
    t_fixed = timed(lambda: conv2d_same(x, fixed_w, bias))
    ratio = t_ofs / t_fixed
    record("cost parity", ratio <= 1.5,
           f"median learned-size forward {t_ofs * 1e3:.2f} ms vs fixed 5x5 {t_fixed * 1e3:.2f} ms, "
           f"ratio {ratio:.2f} (<= 1.5)")


# -- 10. Determinism -------------------------------------------------------------------

def test_determinism(tmp_path):
    raw = json.loads(PLANTED_CONFIG.read_text())
    raw["optimizer"]["iterations"] = 300
    raw["data"]["n_train"] = 1000
    raw["data"]["n_test"] = 200
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(raw))
    codes = [cli_main(["train", "--config", str(cfg), "--out", str(tmp_path / run)]) for run in ("a", "b")]
    a = (tmp_path / "a" / "trace.csv").read_bytes()
    b = (tmp_path / "b" / "trace.csv").read_bytes()
    rows = a.count(b"\n") - 1
    record("determinism", codes == [0, 0] and a == b and rows == 300,
           f"two runs of the same config and seed: trace.csv byte-identical = {a == b} "
           f"({len(a)} bytes, {rows} rows)")


def _fmt(values):
    return "[" + ", ".join(f"{v:.2f}" for v in values) + "]"


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
