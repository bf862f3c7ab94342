"""Experiment driver: synthetic layers, quantizer sweeps, benchmarks, reports."""

from __future__ import annotations

import csv
import json
import logging
import resource
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import fastobq_quantize_layer, layer_error, layer_error_normalized
from .errors import ConfigError, FastOBQError, MixedGrids, NotPositiveDefinite
from .grid import QuantGrid, fit_grid, normalize_scheme
from .linalg import HinvCounter, build_hessian, invert_spd
from .obq import OrderingStrategy, QuantTrace, obq_quantize_layer, rtn_quantize_layer
from .tensor_io import LayerBundle, load_bundle

log = logging.getLogger(__name__)

QUANTIZERS = ("rtn", "obq", "fastobq")
WEIGHT_DISTS = ("gaussian", "long_tail")
INPUT_DISTS = ("iid", "correlated")
TIMING_FIELDS = ("wall_time_ms", "rss_peak_mb")


@dataclass(frozen=True)
class SyntheticLayerSpec:
    d_row: int
    d_col: int
    n_samples: int | None = None  # default 8 * d_col
    weight_dist: str = "gaussian"
    seed: int = 0
    input_dist: str = "iid"

    def __post_init__(self):
        if min(self.d_row, self.d_col) < 1 or (self.n_samples is not None and self.n_samples < 1):
            raise ConfigError(f"synthetic layer dims must be >= 1: {self}")
        if self.weight_dist not in WEIGHT_DISTS:
            raise ConfigError(f"weight_dist must be one of {WEIGHT_DISTS}")
        if self.input_dist not in INPUT_DISTS:
            raise ConfigError(f"input_dist must be one of {INPUT_DISTS}")

    @property
    def name(self) -> str:
        tag = self.weight_dist if self.input_dist == "iid" else f"{self.weight_dist}-{self.input_dist}"
        return f"{tag}_{self.d_row}x{self.d_col}"


def generate_synthetic_layer(spec: SyntheticLayerSpec) -> LayerBundle:
    """Deterministic random layer.

    ``gaussian``: i.i.d. N(0, 1) weights. ``long_tail``: same, with 1% of the
    entries (at least one) scaled by 8. Inputs are i.i.d. N(0, 1); the
    ``correlated`` input mode mixes them through a random matrix with
    geometrically decaying column scales, which gives a strongly
    anisotropic Hessian.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_samples or 8 * spec.d_col
    W = rng.standard_normal((spec.d_row, spec.d_col))
    if spec.weight_dist == "long_tail":
        k = max(1, round(0.01 * W.size))
        idx = rng.choice(W.size, size=k, replace=False)
        W.flat[idx] *= 8.0
    X = rng.standard_normal((spec.d_col, n))
    if spec.input_dist == "correlated":
        mix = rng.standard_normal((spec.d_col, spec.d_col)) * 0.8 ** np.arange(spec.d_col)
        X = mix @ X
    meta = {"synthetic": asdict(spec) | {"n_samples": n}}
    return LayerBundle(spec.name, W, X, meta)


@dataclass
class ExperimentConfig:
    bundles: object  # manifest path, or {"synthetic": [spec, ...]}
    quantizers: list = field(default_factory=lambda: ["rtn", "obq", "fastobq"])
    strategies: list = field(default_factory=lambda: ["sensi_des"])
    bits: int = 4
    scheme: str = "symmetric"
    damping: float = 0.1
    damping_mode: str = "absolute"
    granularity: str = "row"
    seeds: list = field(default_factory=lambda: [0])
    output: str | None = None
    greedy: bool = False
    threads: int | None = None
    figures: bool = True

    def __post_init__(self):
        self.scheme = normalize_scheme(self.scheme)
        if not self.quantizers:
            raise ConfigError("at least one quantizer is required")
        bad = set(self.quantizers) - set(QUANTIZERS)
        if bad:
            raise ConfigError(f"unknown quantizers {sorted(bad)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.strategies:
            raise ConfigError("at least one strategy is required")
        if not 2 <= int(self.bits) <= 8:
            raise ConfigError(f"bits must be in 2..8, got {self.bits}")
        try:
            self.strategy_objs = [OrderingStrategy.parse(s) if isinstance(s, str) else s for s in self.strategies]
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "bundles" not in d:
            raise ConfigError("config needs 'bundles' (manifest path or synthetic spec list)")
        if base is not None and isinstance(d["bundles"], str):
            d["bundles"] = str(base / d["bundles"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(doc, path.parent)

    def layers_for_seed(self, seed: int) -> list[LayerBundle]:
        b = self.bundles
        if isinstance(b, (str, Path)):
            return load_bundle(b)
        if isinstance(b, dict) and "manifest" in b:
            return load_bundle(b["manifest"])
        if isinstance(b, dict) and "synthetic" in b:
            specs = b["synthetic"]
            specs = specs if isinstance(specs, list) else [specs]
            out = []
            for s in specs:
                s = dict(s) if isinstance(s, dict) else asdict(s)
                s["seed"] = seed
                out.append(generate_synthetic_layer(SyntheticLayerSpec(**s)))
            return out
        raise ConfigError(f"cannot interpret bundles={b!r}")


@dataclass
class LayerReport:
    layer: str
    quantizer: str
    strategy: str
    seed: int
    bits: int
    scheme: str
    greedy: bool = False
    d_row: int = 0
    d_col: int = 0
    error_total: float = float("nan")
    error_normalized: float = float("nan")
    error_rtn_baseline: float = float("nan")
    wall_time_ms: float = 0.0
    hinv_matrices_allocated: int = 0
    hinv_bytes_peak: int = 0
    warnings: dict = field(default_factory=dict)
    status: str = "ok"
    message: str = ""
    rss_peak_mb: float = 0.0

    @property
    def curve_label(self) -> str:
        """Strategy label as used in the error-curve files (``para_`` marks FastOBQ)."""
        if self.quantizer == "rtn":
            return "rtn"
        if self.quantizer == "fastobq":
            return f"para_{self.strategy}"
        return f"greedy_{self.strategy}" if self.greedy else self.strategy

    def to_dict(self) -> dict:
        return asdict(self)


def _rss_peak_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def quantize_bundle(bundle: LayerBundle, quantizer: str, strategy: OrderingStrategy, g: QuantGrid,
                    damping: float = 0.1, damping_mode: str = "absolute", greedy: bool = False,
                    threads=None, H=None):
    """Run one quantizer on one layer. Returns ``(W_q, error_total, counter, trace, wall_s, warnings)``."""
    W, X = bundle.weight, bundle.calib
    counter = HinvCounter(bundle.d_col)
    trace = None
    warnings = {}
    t0 = time.perf_counter()
    if quantizer == "rtn":
        Wq = rtn_quantize_layer(W, g)
    else:
        if H is None:
            H = build_hessian(X, damping, damping_mode)
        if quantizer == "obq":
            Wq, trace = obq_quantize_layer(W, H, g, strategy, greedy, threads=threads, counter=counter)
        elif quantizer == "fastobq":
            res = fastobq_quantize_layer(W, H, g, strategy, threads=threads, counter=counter)
            Wq, warnings = res.W_q, res.warnings
        else:
            raise ConfigError(f"unknown quantizer {quantizer!r}")
    wall = time.perf_counter() - t0
    return Wq, layer_error(W, Wq, X), counter, trace, wall, warnings


def run_experiment(cfg: ExperimentConfig) -> list[LayerReport]:
    """Execute layer x quantizer x strategy x seed; write reports if ``cfg.output`` is set.

    A failing cell is recorded with ``status="error"`` and the sweep continues.
    """
    reports: list[LayerReport] = []
    grids: dict = {}
    for seed in cfg.seeds:
        try:
            layers = cfg.layers_for_seed(seed)
        except FastOBQError as exc:
            if isinstance(exc, ConfigError):
                raise
            reports.append(LayerReport("<bundle>", "-", "-", seed, cfg.bits, cfg.scheme, status="error",
                                       message=f"{type(exc).__name__}: {exc}"))
            continue
        for bundle in layers:
            base = dict(layer=bundle.name, seed=seed, bits=cfg.bits, scheme=cfg.scheme,
                        d_row=bundle.d_row, d_col=bundle.d_col)
            try:
                g = fit_grid(bundle.weight, cfg.bits, cfg.scheme, cfg.granularity)
                rtn_err = layer_error(bundle.weight, rtn_quantize_layer(bundle.weight, g), bundle.calib)
                H = None
                if any(q != "rtn" for q in cfg.quantizers):
                    H = build_hessian(bundle.calib, cfg.damping, cfg.damping_mode)
            except FastOBQError as exc:
                for q in cfg.quantizers:
                    for s in cfg.strategy_objs:
                        reports.append(LayerReport(quantizer=q, strategy=s.label, greedy=cfg.greedy, **base,
                                                   status="error", message=f"{type(exc).__name__}: {exc}"))
                continue
            grids[f"{bundle.name}/seed{seed}"] = g.to_dict()
            ref_norm = float(np.sum((bundle.weight @ bundle.calib) ** 2))
            for q in cfg.quantizers:
                for s in cfg.strategy_objs:
                    rep = LayerReport(quantizer=q, strategy=s.label, greedy=cfg.greedy and q == "obq", **base,
                                      error_rtn_baseline=rtn_err)
                    try:
                        _, err, counter, _, wall, warns = quantize_bundle(
                            bundle, q, s, g, cfg.damping, cfg.damping_mode, cfg.greedy, cfg.threads, H)
                        rep.error_total = err
                        rep.error_normalized = err / ref_norm if ref_norm > 0 else 0.0
                        rep.wall_time_ms = wall * 1e3
                        rep.hinv_matrices_allocated = counter.peak
                        rep.hinv_bytes_peak = counter.bytes_peak
                        rep.warnings = warns
                    except FastOBQError as exc:
                        rep.status, rep.message = "error", f"{type(exc).__name__}: {exc}"
                    rep.rss_peak_mb = _rss_peak_mb()
                    reports.append(rep)
                    log.info("%s seed=%d %s/%s err=%.6g", bundle.name, seed, q, s.label, rep.error_total)

    if cfg.output:
        write_reports(reports, cfg.output, grids)
        ok = [r for r in reports if r.status == "ok"]
        if len({r.curve_label for r in ok}) >= 2:
            out = Path(cfg.output)
            emit_error_curves(ok, out / "error_curves.csv")
            if cfg.figures:
                from .plotting import plot_error_curves
                plot_error_curves(ok, out / "error_curves.png")
    return reports


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o).__name__)


SUMMARY_FIELDS = ["layer", "quantizer", "strategy", "greedy", "seed", "bits", "scheme", "d_row", "d_col",
                  "error_total", "error_normalized", "error_rtn_baseline", "wall_time_ms",
                  "hinv_matrices_allocated", "hinv_bytes_peak", "status"]


def write_reports(reports, outdir, grids=None) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "reports.jsonl").open("w") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_dict(), default=_json_default, sort_keys=True) + "\n")
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in reports:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.to_dict().items()})
    if grids is not None:
        (out / "grids.json").write_text(json.dumps(grids, sort_keys=True) + "\n")


def emit_error_curves(reports, path) -> int:
    """Long-format CSV ``layer,strategy,seed,error_total,error_normalized``; returns the row count."""
    reports = [r for r in reports if r.status == "ok"]
    grids = {(r.bits, r.scheme) for r in reports}
    if len(grids) > 1:
        raise MixedGrids(f"reports mix grids {sorted(grids)}")
    rows = sorted(reports, key=lambda r: (r.layer, r.curve_label, r.seed))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "strategy", "seed", "error_total", "error_normalized"])
        for r in rows:
            w.writerow([r.layer, r.curve_label, r.seed, repr(r.error_total), repr(r.error_normalized)])
    return len(rows)


@dataclass
class BenchRow:
    d_row: int
    d_col: int
    t_obq_s: float
    t_fastobq_s: float
    speedup: float
    obq_hinv_matrices: int
    fastobq_hinv_matrices: int
    obq_hinv_bytes: int
    fastobq_hinv_bytes: int


def bench_speedup(rows, cols: int = 256, bits: int = 4, repeats: int = 5, seed: int = 0,
                  strategy: OrderingStrategy | str = "sensi_des", damping: float = 0.1,
                  threads=None) -> list[BenchRow]:
    """Median wall time of reference OBQ vs FastOBQ on identical synthetic layers.

    One untimed warmup run of each quantizer precedes the measurements.
    """
    if isinstance(strategy, str):
        strategy = OrderingStrategy.parse(strategy)
    out = []
    warm = generate_synthetic_layer(SyntheticLayerSpec(min(rows), cols, seed=seed))
    Hw, gw = build_hessian(warm.calib, damping), fit_grid(warm.weight, bits)
    obq_quantize_layer(warm.weight, Hw, gw, strategy, threads=threads)
    fastobq_quantize_layer(warm.weight, Hw, gw, strategy, threads=threads)
    for d_row in rows:
        layer = generate_synthetic_layer(SyntheticLayerSpec(d_row, cols, seed=seed))
        H, g = build_hessian(layer.calib, damping), fit_grid(layer.weight, bits)
        t_obq, t_fast = [], []
        c_obq, c_fast = HinvCounter(cols), HinvCounter(cols)
        for _ in range(repeats):
            t0 = time.perf_counter()
            obq_quantize_layer(layer.weight, H, g, strategy, threads=threads, counter=c_obq)
            t_obq.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            fastobq_quantize_layer(layer.weight, H, g, strategy, threads=threads, counter=c_fast)
            t_fast.append(time.perf_counter() - t0)
        a, b = statistics.median(t_obq), statistics.median(t_fast)
        out.append(BenchRow(d_row, cols, a, b, a / b, c_obq.peak, c_fast.peak, c_obq.bytes_peak, c_fast.bytes_peak))
        log.info("bench d_row=%d obq=%.3fs fastobq=%.3fs speedup=%.1f", d_row, a, b, a / b)
    return out


def write_bench(rows: list[BenchRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(BenchRow.__dataclass_fields__))
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


def inspect_layer(bundle: LayerBundle, bits: int = 4, scheme: str = "symmetric",
                  damping: float = 0.1, damping_mode: str = "absolute") -> str:
    """Preflight summary: dims, grid scales, Hessian conditioning, RTN error."""
    g = fit_grid(bundle.weight, bits, scheme)
    Wq = rtn_quantize_layer(bundle.weight, g)
    rtn = layer_error(bundle.weight, Wq, bundle.calib)
    lines = [
        f"layer {bundle.name}: d_row={bundle.d_row} d_col={bundle.d_col} N={bundle.n_samples}",
        f"  grid {g.scheme} {bits}-bit: scale min={g.scales.min():.6g} "
        f"median={np.median(g.scales):.6g} max={g.scales.max():.6g}",
    ]
    try:
        H = build_hessian(bundle.calib, damping, damping_mode)
        invert_spd(H)
        eig = np.linalg.eigvalsh(H.values)
        lines.append(f"  hessian damping={H.damping_applied:.6g} condition~{eig[-1] / eig[0]:.6g}")
    except NotPositiveDefinite as exc:
        lines.append(f"  hessian NotPositiveDefinite: {exc}")
    norm = layer_error_normalized(bundle.weight, Wq, bundle.calib)
    lines.append(f"  rtn error={rtn!r} normalized={norm:.6g}")
    return "\n".join(lines)


def strip_timing(record: dict) -> dict:
    return {k: v for k, v in record.items() if k not in TIMING_FIELDS}


__all__ = [
    "BenchRow", "ExperimentConfig", "LayerReport", "SyntheticLayerSpec", "QuantTrace",
    "bench_speedup", "emit_error_curves", "generate_synthetic_layer", "inspect_layer",
    "quantize_bundle", "run_experiment", "write_bench", "write_reports",
]
