"""Exit criteria for the package, one test per criterion.

Each test records a PASS/FAIL line (shown in the pytest terminal summary)
before asserting, at the tolerance pinned here.
"""

import statistics
import time

import numpy as np
import pytest

from fastobq.core import fastobq_quantize_layer, layer_error
from fastobq.grid import fit_grid, quantize, quantize_value
from fastobq.harness import SyntheticLayerSpec, bench_speedup, generate_synthetic_layer
from fastobq.linalg import Hessian, build_hessian, downdate_inverse, invert_spd
from fastobq.obq import NONE, OrderingStrategy, compensate, obq_quantize_layer, rtn_quantize_layer
from fastobq.tensor_io import read_tensor
from oracles import kkt_compensation, random_spd

SENSI_DES = OrderingStrategy("sensitivity", "descending")
SENSI_ASC = OrderingStrategy("sensitivity", "ascending")

DOWNDATE_TOL = 1e-8
KKT_TOL = 1e-8
CLOSURE_TOL = 1e-12
EQUIV_TOL = 1e-10
PARITY_FACTOR = 1.1
SPEEDUP_FLOOR = 10.0
RTN_WIN_RATE = 0.95


def _quantize_synthetic(spec, strategies_obq, strategies_fast):
    layer = generate_synthetic_layer(spec)
    W, X = layer.weight, layer.calib
    H, g = build_hessian(X, 0.1), fit_grid(W, 4)
    out = {"rtn": layer_error(W, rtn_quantize_layer(W, g), X)}
    for s in strategies_obq:
        out["obq", s.label] = layer_error(W, obq_quantize_layer(W, H, g, s)[0], X)
    for s in strategies_fast:
        out["fastobq", s.label] = fastobq_quantize_layer(W, H, g, s, X=X).error_total
    return out


@pytest.fixture(scope="module")
def ordering_ensemble():
    """50 gaussian + 50 long_tail 64x64 layers at 4 bits, timed as one run."""
    t0 = time.perf_counter()
    runs = {}
    for dist in ("gaussian", "long_tail"):
        runs[dist] = [
            _quantize_synthetic(SyntheticLayerSpec(64, 64, weight_dist=dist, seed=seed),
                                [SENSI_DES, SENSI_ASC], [SENSI_DES, SENSI_ASC, NONE])
            for seed in range(50)
        ]
    return runs, time.perf_counter() - t0


def test_c1_downdate_correctness(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        H = random_spd(rng, 32, damping=0.1)
        hinv = invert_spd(Hessian(H))
        for k in rng.permutation(32)[: rng.integers(1, 32)]:
            downdate_inverse(hinv, int(k), inplace=True)
            keep = np.flatnonzero(hinv.live)
            worst = max(worst, float(np.max(np.abs(hinv.live_block() - np.linalg.inv(H[np.ix_(keep, keep)])))))
    elapsed = time.perf_counter() - t0
    ok = record("C1 downdate", worst <= DOWNDATE_TOL and elapsed < 10,
                f"max|diff|={worst:.2e} (tol {DOWNDATE_TOL}), {elapsed:.2f}s (<10s)")
    assert ok


def test_c2_compensation_optimality(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_kkt = worst_cost = 0.0
    for _ in range(100):
        w = rng.standard_normal(6)
        X = rng.standard_normal((6, 24))
        H, g = build_hessian(X, 0.1), fit_grid(w[None, :], 4)
        hinv = invert_spd(H)
        k = int(rng.integers(6))
        target = quantize_value(w[k], 0, g) - w[k]
        dw = compensate(w, hinv, k, g, 0) - w
        worst_kkt = max(worst_kkt, float(np.max(np.abs(dw - kkt_compensation(H.values, k, target)))))
        L = target**2 / (2 * hinv.values[k, k])
        worst_cost = max(worst_cost, abs(0.5 * dw @ H.values @ dw - L))
    elapsed = time.perf_counter() - t0
    ok = record("C2 compensation", worst_kkt <= KKT_TOL and worst_cost <= KKT_TOL and elapsed < 5,
                f"KKT max|diff|={worst_kkt:.2e}, step cost vs L_q={worst_cost:.2e} (tol {KKT_TOL}), {elapsed:.2f}s")
    assert ok


def test_c3_closure(record):
    worst = 0.0
    frozen_ok = True
    for seed in range(10):
        layer = generate_synthetic_layer(SyntheticLayerSpec(16, 16, seed=seed))
        W, X = layer.weight, layer.calib
        H, g = build_hessian(X, 0.1), fit_grid(W, 4)
        fixed = {}

        def obq_step(t, row, k, w):
            nonlocal worst, frozen_ok
            worst = max(worst, abs(w[k] - quantize_value(w[k], row, g)))
            fixed[row, k] = w[k]
            frozen_ok &= all(w[c] == v for (r, c), v in fixed.items() if r == row)

        Wq, trace = obq_quantize_layer(W, H, g, SENSI_DES, on_step=obq_step)
        # replay: every traced (row, col) holds the value it was frozen at
        frozen_ok &= all(Wq[r, c] == fixed[r, c] for r, c in zip(trace.rows, trace.cols))

        cols = []

        def fast_step(t, k, Wc):
            nonlocal worst, frozen_ok
            worst = max(worst, float(np.max(np.abs(Wc[:, k] - quantize(Wc[:, k], g, np.arange(16))))))
            cols.append((k, Wc[:, k].copy()))
            frozen_ok &= all(np.array_equal(Wc[:, c], v) for c, v in cols)

        res = fastobq_quantize_layer(W, H, g, SENSI_DES, on_step=fast_step)
        frozen_ok &= [c for c, _ in cols] == res.schedule.permutation.tolist()
    ok = record("C3 closure", worst <= CLOSURE_TOL and frozen_ok,
                f"max off-grid={worst:.2e} (tol {CLOSURE_TOL}), frozen-once={'yes' if frozen_ok else 'NO'}")
    assert ok


def test_c4_cross_implementation(record):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((64, 512))
        H = build_hessian(X, 0.1)
        order = rng.permutation(64)
        # single row
        w = rng.standard_normal((1, 64))
        g = fit_grid(w, 4)
        a = fastobq_quantize_layer(w, H, g, order=order).W_q
        b, _ = obq_quantize_layer(w, H, g, order=order)
        worst = max(worst, float(np.max(np.abs(a - b))))
        # identical rows
        Wrep = np.tile(w, (8, 1))
        a = fastobq_quantize_layer(Wrep, H, fit_grid(Wrep, 4), order=order).W_q
        worst = max(worst, float(np.max(np.abs(a - b[0]))))
    ok = record("C4 cross-implementation", worst <= EQUIV_TOL, f"max|diff|={worst:.2e} (tol {EQUIV_TOL})")
    assert ok


def _median(runs, key):
    return statistics.median(r[key] for r in runs)


def test_c5_ordering_claim(record, ordering_ensemble):
    runs, elapsed = ordering_ensemble
    parts, ok = [], elapsed < 120
    for dist, rs in runs.items():
        for q in ("obq", "fastobq"):
            des, asc = _median(rs, (q, "sensi_des")), _median(rs, (q, "sensi_asc"))
            ok &= des <= asc
            parts.append(f"{dist}/{q} des={des:.1f} asc={asc:.1f}")
    ok = record("C5 descending<=ascending", ok, "; ".join(parts) + f"; ensemble {elapsed:.1f}s (<120s)")
    assert ok


def test_c6_parallel_parity(record, ordering_ensemble):
    runs, _ = ordering_ensemble
    parts, ok = [], True
    for dist, rs in runs.items():
        fast, ref = _median(rs, ("fastobq", "sensi_des")), _median(rs, ("obq", "sensi_des"))
        ok &= fast <= PARITY_FACTOR * ref
        parts.append(f"{dist} fastobq/obq median ratio={fast / ref:.3f}")
    ok = record("C6 parallel parity", ok, "; ".join(parts) + f" (<= {PARITY_FACTOR})")
    assert ok


def test_c7_sorting_vs_none(record, ordering_ensemble):
    runs, _ = ordering_ensemble
    allruns = runs["gaussian"] + runs["long_tail"]
    des = statistics.fmean(r["fastobq", "sensi_des"] for r in allruns)
    none = statistics.fmean(r["fastobq", "none"] for r in allruns)
    ok = record("C7 sorted<=unsorted", des <= none, f"mean fastobq sensi_des={des:.1f} none={none:.1f}")
    assert ok


@pytest.fixture(scope="module")
def bench_rows():
    t0 = time.perf_counter()
    rows = bench_speedup([64, 128, 256], cols=256, bits=4, repeats=5)
    return rows, time.perf_counter() - t0


def test_c8_speedup(record, bench_rows):
    rows, elapsed = bench_rows
    speedups = [r.speedup for r in rows]
    increasing = all(a < b for a, b in zip(speedups, speedups[1:]))
    ok = record("C8 speedup", speedups[-1] >= SPEEDUP_FLOOR and increasing and elapsed < 300,
                "speedups " + ", ".join(f"d_row={r.d_row}: {r.speedup:.1f}x" for r in rows)
                + f" (>= {SPEEDUP_FLOOR} at 256, strictly increasing), {elapsed:.0f}s (<300s)")
    assert ok


def test_c9_memory(record, bench_rows):
    rows, _ = bench_rows
    ok = all(r.obq_hinv_matrices == r.d_row and r.fastobq_hinv_matrices == 1 for r in rows)
    ok = record("C9 memory", ok, "; ".join(
        f"d_row={r.d_row}: obq {r.obq_hinv_matrices} ({r.obq_hinv_bytes / 2**20:.0f} MiB), "
        f"fastobq {r.fastobq_hinv_matrices} ({r.fastobq_hinv_bytes / 2**20:.1f} MiB)" for r in rows))
    assert ok


def test_c10_rtn_dominance(record):
    strategies = [OrderingStrategy.parse(s) for s in ("sensi_des", "err_des", "w_des")]
    wins = {}
    for seed in range(100):
        out = _quantize_synthetic(SyntheticLayerSpec(64, 64, seed=seed), strategies, strategies)
        for key, err in out.items():
            if key != "rtn":
                wins.setdefault(key, []).append(err < out["rtn"])
    rates = {f"{q}/{s}": float(np.mean(v)) for (q, s), v in wins.items()}
    ok = record("C10 beats RTN", min(rates.values()) >= RTN_WIN_RATE,
                ", ".join(f"{k}={v:.2f}" for k, v in rates.items()) + f" (>= {RTN_WIN_RATE})")
    assert ok


def test_c11_golden_format(record, data_dir):
    path = data_dir / "golden_f32_2x3.ftns"
    t = read_tensor(path)
    values_ok = t.dims == (2, 3) and t.to_array().tolist() == [[1.0, -2.0, 0.5], [3.25, 0.0, -0.125]]
    bytes_ok = t.to_bytes() == path.read_bytes()
    ok = record("C11 golden format", values_ok and bytes_ok,
                f"values {'match' if values_ok else 'DIFFER'}, reserialization {'identical' if bytes_ok else 'DIFFERS'}")
    assert ok
