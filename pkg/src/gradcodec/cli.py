"""``gradcodec`` command line.

Every subcommand prints a short human summary on stdout and, when given
``--report``/``--out``, writes a machine-readable JSON or CSV file.  Files are
written atomically, so a failed run leaves nothing behind.  Exit status: 0 on
success, 1 on a domain or file error (one-line diagnostic on stderr), 2 on a
usage error.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import distfit, encode, fpquant, mcsim, prune, tensorio
from .errors import GradcodecError

SCHEMA_PREFIX = "gradcodec"


# -- argument helpers --------------------------------------------------------------

def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _sigma_values(text: str) -> list[float]:
    """``v``, ``v1,v2,...`` or an inclusive grid ``lo:hi:step``."""
    if ":" not in text:
        return _float_list(text)
    parts = text.split(":")
    try:
        lo, hi, step = (float(p) for p in parts) if len(parts) == 3 else (float(parts[0]), float(parts[1]), 0.1)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi[:step], got {text!r}") from None
    if not hi >= lo or not step > 0:
        raise argparse.ArgumentTypeError(f"need lo <= hi and step > 0, got {text!r}")
    return [float(s) for s in fpquant.sigma_grid(lo, hi, step)]


def _jsonable(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def _write_json(path, kind: str, payload: dict) -> None:
    doc = {"schema": f"{SCHEMA_PREFIX}.{kind}/1", **payload}
    text = json.dumps(_jsonable(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"
    tensorio.atomic_write(path, lambda fh: fh.write(text), mode="w")


def _derived_path(path: str, tag: str, suffix: str | None = None) -> Path:
    p = Path(path)
    return p.with_name(f"{p.stem}.{tag}{suffix if suffix is not None else p.suffix}")


# -- subcommands ------------------------------------------------------------------

def cmd_fit(args) -> int:
    dump = tensorio.read_tensor(args.tensor)
    families = args.families or list(distfit.FAMILIES)
    unknown = [f for f in families if f not in distfit.FAMILIES]
    if unknown:
        raise GradcodecError(f"unknown family {unknown[0]!r}; expected one of {', '.join(distfit.FAMILIES)}")
    params = distfit.fit_lognormal(dump.values, args.quantile)
    report = distfit.fit_report(dump.values, families)

    print(f"lognormal fit: mu={params.mu:.6g} sigma={params.sigma:.6g} k={params.k:.6g} (q={args.quantile})")
    for rank, r in enumerate(report, 1):
        if r.error is None:
            print(f"{rank}. {r.family:<10} ks={r.ks_stat:.6f}  [{r.convention}]")
        else:
            print(f"-  {r.family:<10} failed: {r.error}")
    if args.report:
        _write_json(args.report, "fit", {
            "tensor": str(args.tensor),
            "layer_id": dump.layer_id,
            "quantile": args.quantile,
            "lognormal": params.as_dict(),
            "families": [r.as_dict() for r in report],
        })
    return 0


FPOPT_COLUMNS = ("sigma", "N", "n2", "n1", "expected_error")


def cmd_fpopt(args) -> int:
    sigmas, bits = args.sigma, args.bits
    if len(sigmas) == 1 and len(bits) == 1:
        best = fpquant.optimal_allocation(sigmas[0], bits[0], args.prior, args.variant)
        print(best)
        for fmt, err in fpquant.format_errors(sigmas[0], bits[0], args.prior, args.variant):
            print(f"  {fmt}  {err:.6f}{'  *' if fmt == best else ''}")
    rows = []
    for n in bits:
        for s in sigmas:
            fmt = fpquant.optimal_allocation(s, n, args.prior, args.variant)
            rows.append({
                "sigma": s, "N": n, "n2": fmt.exponent_bits, "n1": fmt.mantissa_bits,
                "expected_error": fpquant.expected_relative_error(s, fmt, args.prior, args.variant),
            })
    if len(rows) > 1:
        for n in bits:
            steps, last = [], None
            for r in rows:
                if r["N"] == n and r["n2"] != last:
                    steps.append(f"sigma>={r['sigma']:g}: 1-{r['n2']}-{r['n1']}")
                    last = r["n2"]
            print(f"N={n} ({args.prior}): " + ", ".join(steps))
    if args.out:
        mcsim.write_csv(rows, FPOPT_COLUMNS, args.out)
    return 0


def cmd_quantize(args) -> int:
    dump = tensorio.read_tensor(args.tensor)
    fmt = fpquant.FpFormat.parse(args.format)
    qt = fpquant.quantize_tensor(dump.values, fmt, args.scale)
    s = qt.stats
    print(f"format {fmt} scale_log2={qt.scale_log2:g}: {s['overflow_count']} overflow, "
          f"{s['underflow_count']} underflow, mean relative error {s['mean_relative_error']:.6f}")
    if args.out:
        tensorio.write_tensor(tensorio.TensorDump(qt.values.astype(np.float32), dump.layer_id, dump.metadata), args.out)
    if args.report:
        _write_json(args.report, "quantize", {
            "tensor": str(args.tensor), "format": str(fmt), "scale_mode": args.scale,
            "scale_log2": qt.scale_log2, "stats": s,
        })
    return 0


def cmd_threshold(args) -> int:
    params = distfit.LognormalParams(args.mu, args.sigma)
    if args.left_ratio is not None:
        alpha = prune.bimodal_threshold(args.sparsity, args.left_ratio, params)
        right = prune.sparsity_given_threshold(alpha, args.mu, args.sigma)
        check = args.left_ratio + (1 - args.left_ratio) * right
    else:
        alpha = prune.threshold_for_sparsity(args.sparsity, args.mu, args.sigma)
        check = prune.sparsity_given_threshold(alpha, args.mu, args.sigma)
    print(f"alpha = {alpha:.10g}")
    print(f"round trip: S(alpha) = {check:.9f} (target {args.sparsity}, error {abs(check - args.sparsity):.2e})")
    if args.report:
        _write_json(args.report, "threshold", {
            "mu": args.mu, "sigma": args.sigma, "target_S": args.sparsity,
            "left_ratio": args.left_ratio, "alpha": alpha, "round_trip_S": check,
        })
    return 0


def cmd_prune(args) -> int:
    dump = tensorio.read_tensor(args.tensor)
    mask = tensorio.read_mask(args.mask) if args.mask else tensorio.load_mask_for(dump, args.tensor)
    if mask is not None and len(mask) != dump.element_count:
        raise GradcodecError(f"mask has {len(mask)} bits for {dump.element_count} elements")
    spec = prune.PruneSpec(args.sparsity, seed=args.seed)
    right = dump.values if mask is None else dump.values[~mask.bits]
    params = distfit.fit_lognormal(right)
    pruned, rep, achieved = prune.predict_and_prune(dump.values, spec, mask, params)
    out = Path(args.out) if args.out else _derived_path(args.tensor, "pruned")

    print(f"alpha={rep.alpha:.8g} target S={args.sparsity} achieved S={achieved:.6f}")
    emp = "n/a" if rep.empirical_cos is None else f"{rep.empirical_cos:.6f}"
    print(f"cosine: analytic {rep.analytic_cos:.6f}, empirical {emp}; seed {args.seed}")
    tensorio.write_tensor(tensorio.TensorDump(pruned, dump.layer_id, dump.metadata), out)
    print(f"wrote {out}")
    if args.report:
        _write_json(args.report, "prune", {
            "tensor": str(args.tensor), "output": str(out), "seed": args.seed,
            "alpha": rep.alpha, "target_S": args.sparsity, "achieved_S": achieved,
            "analytic_cos": rep.analytic_cos, "empirical_cos": rep.empirical_cos,
            "params": params.as_dict(),
            "left_ratio": None if mask is None else float(mask.bits.mean()),
        })
    return 0


def cmd_allocate(args) -> int:
    try:
        raw = json.loads(Path(args.layers).read_text())
        layers = [prune.LayerProfile.from_dict(d) for d in raw]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, GradcodecError):
            raise
        raise GradcodecError(f"{args.layers}: malformed layer profile ({exc})") from None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", prune.ShortfallWarning)
        alloc = prune.heterogeneous_allocate(layers, args.sparsity, args.max_cap, args.seed)
    for a in alloc.layers:
        tag = " (cosine-constrained)" if a.constrained else ""
        print(f"{a.layer_id:<16} n={a.n:<10} S={a.sparsity:.6f} alpha={a.spec.alpha:.6g} cos={a.analytic_cos:.6f}{tag}")
    print(f"overall sparsity {alloc.overall_sparsity:.6f} (target {args.sparsity})")
    for w in alloc.warnings:
        print(f"warning: {w}")
    if args.report:
        _write_json(args.report, "allocate", {
            "target_S": alloc.target_sparsity, "overall_S": alloc.overall_sparsity,
            "rest_S_demanded": alloc.rest_sparsity, "max_cap": alloc.max_cap, "seed": args.seed,
            "warnings": alloc.warnings, "layers": [a.as_dict() for a in alloc.layers],
        })
    return 0


def cmd_encode(args) -> int:
    dump = tensorio.read_tensor(args.pruned)
    stream = encode.encode_stream(dump.values, args.alpha, args.width)
    counts = encode.symbol_counts(dump.values, args.alpha)
    out = Path(args.out) if args.out else Path(str(args.pruned) + ".enc")
    encode.write_stream(stream, out)
    bpv = encode.compression_ratio(counts, args.width) if counts.total else 0.0
    print(f"{counts.zeros} zeros, {counts.alphas} +-alpha, {counts.passthrough} passthrough; "
          f"{bpv:.4f} bits/value; wrote {out}")
    if args.report:
        _write_json(args.report, "encode", {
            "input": str(args.pruned), "output": str(out), "alpha": stream.alpha, "width": args.width,
            "count": stream.count, "zeros": counts.zeros, "alphas": counts.alphas,
            "passthrough": counts.passthrough, "bit_length": stream.bit_length, "bits_per_value": bpv,
        })
    return 0


def cmd_decode(args) -> int:
    stream = encode.read_stream(args.stream)
    values = encode.decode_stream(stream)
    out = Path(args.out) if args.out else _derived_path(args.stream, "decoded", ".grd")
    tensorio.write_tensor(tensorio.TensorDump(values), out)
    print(f"decoded {values.size} values (alpha={stream.alpha:.8g}, w={stream.width}); wrote {out}")
    return 0


def cmd_simulate(args) -> int:
    base = mcsim.SimConfig(n=args.n or (mcsim.RELERR_N if args.kind == "relerr" else mcsim.PRUNE_N),
                           seed=args.seed, repetitions=args.repetitions)
    if args.kind == "relerr":
        rows = mcsim.relerr_rows(args.sigma, args.bits, base, args.variant)
        columns = mcsim.RELERR_COLUMNS
    elif args.kind == "sparsity":
        rows = mcsim.sparsity_rows(args.sigma, args.sparsity, args.mu, mcsim.SimConfig(
            n=base.n, seed=base.seed, repetitions=base.repetitions, signed=True), args.prior)
        columns = mcsim.SPARSITY_COLUMNS
    else:
        rows = mcsim.cosine_rows(args.sigma, args.sparsity, args.k, args.convention, base)
        columns = mcsim.COSINE_COLUMNS
    mcsim.write_csv(rows, columns, args.out)
    worst = max(rows, key=lambda r: r["abs_gap"])
    print(f"{len(rows)} rows, seed {args.seed}; largest |analytic - empirical| = {worst['abs_gap']:.5f}; wrote {args.out}")
    return 0


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradcodec", description="Lognormal gradient statistics, low-bit formats, pruning and encoding.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    f = sub.add_parser("fit", help="fit distributions and rank them by KS distance")
    f.add_argument("tensor")
    f.add_argument("--families", type=lambda s: [t for t in s.split(",") if t], help="comma-separated subset of " + ",".join(distfit.FAMILIES))
    f.add_argument("--quantile", type=float, default=distfit.DEFAULT_QUANTILE)
    f.add_argument("--report", help="JSON report path")
    f.set_defaults(func=cmd_fit)

    o = sub.add_parser("fpopt", help="optimal exponent/mantissa split",
                       description="CSV columns: " + ",".join(FPOPT_COLUMNS))
    o.add_argument("--sigma", type=_sigma_values, required=True, help="value, list, or lo:hi[:step]")
    o.add_argument("--bits", type=_int_list, required=True)
    o.add_argument("--prior", choices=fpquant.PRIORS, default="lognormal")
    o.add_argument("--variant", choices=fpquant.VARIANTS, default="natural")
    o.add_argument("--out", help="CSV output path")
    o.set_defaults(func=cmd_fpopt)

    q = sub.add_parser("quantize", help="emulate a low-bit float format on a tensor")
    q.add_argument("tensor")
    q.add_argument("--format", required=True, help="1-<exponent bits>-<mantissa bits>")
    q.add_argument("--scale", default="none", help="none | fixed=<c> | per-layer | per-layer-max")
    q.add_argument("--out", help="quantized tensor output path")
    q.add_argument("--report", help="JSON report path")
    q.set_defaults(func=cmd_quantize)

    t = sub.add_parser("threshold", help="solve the pruning threshold for a target sparsity")
    t.add_argument("--mu", type=float, required=True)
    t.add_argument("--sigma", type=float, required=True)
    t.add_argument("--sparsity", type=float, required=True)
    t.add_argument("--left-ratio", type=float)
    t.add_argument("--report", help="JSON report path")
    t.set_defaults(func=cmd_threshold)

    r = sub.add_parser("prune", help="stochastically prune a tensor to a target sparsity")
    r.add_argument("tensor")
    r.add_argument("--sparsity", type=float, required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--mask", help="zero-mask file marking left-mode entries")
    r.add_argument("--out", help="pruned tensor path (default <stem>.pruned<suffix>)")
    r.add_argument("--report", help="JSON report path")
    r.set_defaults(func=cmd_prune)

    a = sub.add_parser("allocate", help="per-layer sparsity under cosine constraints")
    a.add_argument("--layers", required=True, help="JSON array of layer profiles")
    a.add_argument("--sparsity", type=float, required=True)
    a.add_argument("--max-cap", type=float, default=prune.DEFAULT_MAX_CAP)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--report", help="JSON report path")
    a.set_defaults(func=cmd_allocate)

    e = sub.add_parser("encode", help="encode a pruned tensor")
    e.add_argument("pruned")
    e.add_argument("--alpha", type=float, required=True)
    e.add_argument("--width", type=int, choices=encode.WIDTHS, default=32)
    e.add_argument("--out", help="stream path (default <input>.enc)")
    e.add_argument("--report", help="JSON report path")
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="decode a stream back to a tensor")
    d.add_argument("stream")
    d.add_argument("--out", help="tensor path (default <stem>.decoded.grd)")
    d.set_defaults(func=cmd_decode)

    s = sub.add_parser("simulate", help="Monte-Carlo vs closed-form comparison grids",
                       description="CSV columns -- relerr: " + ",".join(mcsim.RELERR_COLUMNS)
                       + "; sparsity: " + ",".join(mcsim.SPARSITY_COLUMNS)
                       + "; cosine: " + ",".join(mcsim.COSINE_COLUMNS))
    s.add_argument("kind", choices=("relerr", "sparsity", "cosine"))
    s.add_argument("--sigma", type=_sigma_values, required=True)
    s.add_argument("--bits", type=_int_list, default=[8], help="relerr: total bit widths")
    s.add_argument("--sparsity", type=_float_list, default=[0.5, 0.7, 0.8, 0.9, 0.95])
    s.add_argument("--mu", type=_float_list, default=[0.0], help="sparsity: log-scale locations")
    s.add_argument("--prior", choices=("lognormal", "normal"), default="lognormal")
    s.add_argument("--variant", choices=fpquant.VARIANTS, default="natural")
    s.add_argument("--k", type=float, default=2.5, help="cosine: truncation multiplier")
    s.add_argument("--convention", choices=("log", "linear"), default="log")
    s.add_argument("--n", type=int, help="elements per repetition")
    s.add_argument("--repetitions", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="CSV output path")
    s.set_defaults(func=cmd_simulate)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (GradcodecError, OSError) as exc:
        print(f"gradcodec {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
