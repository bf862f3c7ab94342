"""Command line entry point: ``fastobq quantize|compare|bench|inspect``.

Exit codes: 0 success, 1 a quantization run failed, 2 config or IO error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .core import layer_error_normalized
from .errors import ConfigError, FastOBQError
from .grid import fit_grid, normalize_scheme
from .harness import (
    ExperimentConfig,
    LayerReport,
    bench_speedup,
    inspect_layer,
    quantize_bundle,
    run_experiment,
    write_bench,
    write_reports,
)
from .obq import OrderingStrategy
from .tensor_io import load_bundle, save_array

log = logging.getLogger("fastobq")


def _strategy(text):
    try:
        return OrderingStrategy.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _bits(text):
    b = int(text)
    if not 2 <= b <= 8:
        raise argparse.ArgumentTypeError("bits must be in 2..8")
    return b


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def cmd_quantize(args) -> int:
    bundles = load_bundle(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scheme = normalize_scheme(args.scheme)
    reports, grids, manifest = [], {}, []
    failed = False
    for b in bundles:
        rep = LayerReport(b.name, args.quantizer, args.strategy.label, 0, args.bits, scheme,
                          greedy=args.greedy and args.quantizer == "obq", d_row=b.d_row, d_col=b.d_col)
        try:
            g = fit_grid(b.weight, args.bits, scheme)
            grids[b.name] = g.to_dict()
            _, rtn_err, _, _, _, _ = quantize_bundle(b, "rtn", args.strategy, g)
            Wq, err, counter, trace, wall, warns = quantize_bundle(
                b, args.quantizer, args.strategy, g, args.damping, args.damping_mode, args.greedy)
        except FastOBQError as exc:
            rep.status, rep.message = "error", f"{type(exc).__name__}: {exc}"
            failed = True
            reports.append(rep)
            log.error("%s: %s", b.name, rep.message)
            continue
        rep.error_total, rep.error_rtn_baseline = err, rtn_err
        rep.error_normalized = layer_error_normalized(b.weight, Wq, b.calib)
        rep.wall_time_ms, rep.warnings = wall * 1e3, warns
        rep.hinv_matrices_allocated, rep.hinv_bytes_peak = counter.peak, counter.bytes_peak
        reports.append(rep)
        save_array(Wq, out / f"{b.name}.wq.ftns", "f64")
        manifest.append({"name": b.name, "weight": f"{b.name}.wq.ftns"})
        if trace is not None:
            trace.to_csv(out / f"{b.name}.trace.csv")
            if not args.no_figures:
                from .plotting import plot_order_heatmap
                plot_order_heatmap(trace.order_matrix(b.weight.shape), out / f"{b.name}.order.png",
                                   f"{b.name} ({args.strategy.label})")
        print(f"{b.name}: {args.quantizer}/{args.strategy.label} error={err:.6g} rtn={rtn_err:.6g} "
              f"time={wall * 1e3:.1f}ms hinv={counter.peak}")
    write_reports(reports, out, grids)
    (out / "quantized.json").write_text(json.dumps({"layers": manifest}, indent=2) + "\n")
    return 1 if failed else 0


def cmd_compare(args) -> int:
    cfg = ExperimentConfig.from_json(args.config)
    if args.out:
        cfg.output = args.out
    if args.no_figures:
        cfg.figures = False
    reports = run_experiment(cfg)
    for r in reports:
        print(f"{r.layer}\tseed={r.seed}\t{r.quantizer}\t{r.curve_label}\t{r.status}\t"
              f"error={r.error_total:.6g}\trtn={r.error_rtn_baseline:.6g}")
    return 1 if any(r.status != "ok" for r in reports) else 0


def cmd_bench(args) -> int:
    rows = bench_speedup(args.rows, args.cols, args.bits, args.repeats, args.seed, args.strategy)
    print("d_row,d_col,t_obq_s,t_fastobq_s,speedup,obq_hinv,fastobq_hinv")
    for r in rows:
        print(f"{r.d_row},{r.d_col},{r.t_obq_s:.4f},{r.t_fastobq_s:.4f},{r.speedup:.2f},"
              f"{r.obq_hinv_matrices},{r.fastobq_hinv_matrices}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_bench(rows, out / "bench.csv")
        if not args.no_figures:
            from .plotting import plot_speedup
            plot_speedup(rows, out / "speedup.png")
    return 0


def cmd_inspect(args) -> int:
    for b in load_bundle(args.manifest):
        print(inspect_layer(b, args.bits, normalize_scheme(args.scheme), args.damping, args.damping_mode))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fastobq", description="Sensitivity-ordered layer-wise weight quantization.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def damping_args(sp):
        sp.add_argument("--damping", type=float, default=0.1)
        sp.add_argument("--damping-mode", choices=["absolute", "relative"], default="absolute")

    q = sub.add_parser("quantize", help="quantize every layer of a manifest")
    q.add_argument("--manifest", required=True)
    q.add_argument("--quantizer", choices=["rtn", "obq", "fastobq"], default="fastobq")
    q.add_argument("--strategy", type=_strategy, default=OrderingStrategy.parse("sensi_des"))
    q.add_argument("--greedy", action="store_true", help="obq only: re-rank live weights after every step")
    q.add_argument("--bits", type=_bits, default=4)
    q.add_argument("--scheme", choices=["sym", "asym", "symmetric", "asymmetric"], default="sym")
    damping_args(q)
    q.add_argument("--out", required=True)
    q.add_argument("--no-figures", action="store_true")
    q.set_defaults(func=cmd_quantize)

    c = sub.add_parser("compare", help="run a quantizer x strategy x seed sweep from a JSON config")
    c.add_argument("--config", required=True)
    c.add_argument("--out", help="override the config's output directory")
    c.add_argument("--no-figures", action="store_true")
    c.set_defaults(func=cmd_compare)

    b = sub.add_parser("bench", help="time reference OBQ against FastOBQ")
    b.add_argument("--rows", type=_int_list, default=[64, 128, 256])
    b.add_argument("--cols", type=int, default=256)
    b.add_argument("--bits", type=_bits, default=4)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--strategy", type=_strategy, default=OrderingStrategy.parse("sensi_des"))
    b.add_argument("--out")
    b.add_argument("--no-figures", action="store_true")
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("inspect", help="preflight summary of each layer")
    i.add_argument("--manifest", required=True)
    i.add_argument("--bits", type=_bits, default=4)
    i.add_argument("--scheme", choices=["sym", "asym", "symmetric", "asymmetric"], default="sym")
    damping_args(i)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FastOBQError, OSError) as exc:
        print(f"fastobq: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
