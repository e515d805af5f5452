"""Command-line entry point: simulate, verify, sweep, traffic, bram.

Exit status: 0 success, 1 usage or configuration error, 2 failed property
or audit.  Output files land in ``--out`` (default: $SINGLELOAD_OUT or
./singleload-out) and each carries the hash of the run manifest.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .config import (ConfigError, HardwareConfig, ModelConfig, builtin_models, dump_config,
                     get_model, load_hw_config, load_model_config)

OUT_ENV = "SINGLELOAD_OUT"
EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2

REPORT_CONVENTIONS = (
    "int8 symmetric per-tensor quantization, int32 accumulators",
    "requantization: fixed-point multiplier + round-half-even shift",
    "timing: block pair = inner + pair_latency cycles, one fill per row-block sweep",
    "geometry: patch size and MLP expansion ratio are conventions, not measured values",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


@dataclass(frozen=True)
class RunManifest:
    command: str
    model: str
    model_config: str | None
    hw_config: str | None
    seed: int
    out: str
    options: tuple = ()
    version: str = __version__

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- helpers

def parse_range(text: str) -> range:
    """'4..80' (inclusive) or a single integer."""
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
        else:
            lo = hi = int(text)
    except ValueError:
        raise UsageError(f"bad range {text!r}; expected LO..HI") from None
    if hi < lo:
        raise UsageError(f"empty range {text!r}")
    return range(lo, hi + 1)


# roofline and bram cover every builtin model unless one is named
_DEFAULT_ALL = ("bram",)


def _models(args) -> list[ModelConfig]:
    if args.model_config:
        return [load_model_config(args.model_config)]
    label = args.model
    if label is None:
        all_default = args.command in _DEFAULT_ALL or getattr(args, "kind", None) == "roofline"
        label = "all" if all_default else "deit-b"
    if label == "all":
        return builtin_models()
    return [get_model(label)]


def _hw(args) -> HardwareConfig:
    hw = load_hw_config(args.hw_config) if args.hw_config else HardwareConfig()
    kw = {}
    if args.psys is not None:
        kw["p_sys"] = args.psys
    if args.freq is not None:
        kw["clock_freq"] = args.freq
    if args.bandwidth is not None:
        kw["dram_bandwidth"] = args.bandwidth
    return replace(hw, **kw).validate()


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "singleload-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args, extra=()) -> RunManifest:
    return RunManifest(args.command, args.model, args.model_config, args.hw_config, args.seed,
                       str(args.out or os.environ.get(OUT_ENV) or "singleload-out"), tuple(extra))


def _write(path: Path, text: str, digest: str, comment: str = "# ") -> Path:
    path.write_text(f"{comment}manifest {digest}\n{text}")
    return path


def _stem(model: ModelConfig, hw: HardwareConfig) -> str:
    return f"{model.name.lower()}_p{hw.p_sys}"


# --------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    from .schedule import audit_single_load, check_array_exclusive, check_buffers, run_inference_schedule, weights_manifest
    from .traffic import single_load_traffic

    hw = _hw(args)
    out = _out_dir(args)
    status = EXIT_OK
    for model in _models(args):
        man = _manifest(args, (model.name, dump_config(hw)))
        dg = man.digest()
        rep, trace = run_inference_schedule(model, hw)
        verdict = audit_single_load(trace.dram, weights_manifest(model))
        conflicts = check_array_exclusive(trace.events)
        overflow = check_buffers(trace)
        stem = _stem(model, hw)
        lines = [f"# {c}" for c in REPORT_CONVENTIONS]
        lines.append(rep.summary().rstrip())
        if verdict.passed:
            tr = single_load_traffic(model, hw, rep, trace.dram)
            lines += [f"bytes_loaded = {tr.total_loaded}", f"bytes_stored = {tr.total_stored}",
                      f"average_bandwidth = {tr.average_bandwidth:.6e}",
                      f"peak_mode = {tr.peak_mode}", f"peak_bandwidth = {tr.peak_bandwidth:.6e}"]
            _write(out / f"{stem}_bandwidth.csv", tr.to_csv(), dg)
        lines += [f"audit = {'pass' if verdict.passed else 'fail'}",
                  f"array_conflicts = {len(conflicts)}", f"buffer_overflows = {len(overflow)}"]
        _write(out / f"{stem}_report.txt", "\n".join(lines) + "\n", dg)
        modes = rep.mode_cycles_with_embedding()
        fr = rep.mode_fractions
        csv_text = "mode,cycles,fraction\n" + "".join(f"{m},{modes[m]},{fr[m]!r}\n" for m in modes)
        _write(out / f"{stem}_modes.csv", csv_text, dg)
        if not args.no_trace:
            head = json.dumps({"type": "manifest", "hash": dg, "model": model.name, "p_sys": hw.p_sys})
            (out / f"{stem}_trace.jsonl").write_text(head + "\n" + trace.to_lines())
        print(f"{model.name} P={hw.p_sys}: {rep.latency_s * 1e3:.3f} ms, {rep.fps:.2f} FPS, "
              f"MLP {fr['MLP']:.3f}, {verdict.summary()}")
        if not verdict.passed or conflicts or overflow:
            status = EXIT_FAIL
    return status


def _verify_properties(quick: bool, seed: int, fault: str | None = None):
    """Yield (name, passed, detail) for every self-check."""
    from . import functional as fn
    from .packing import exhaustive_packing_check, pack_raw, sampled_packing_check, unpack_operands
    from .schedule import audit_single_load, check_array_exclusive, check_buffers, replay_schedule, run_inference_schedule, weights_manifest

    hook = (lambda hi, lo: (hi ^ (lo < -1000), lo)) if fault == "packing" else None
    if quick:
        ok, n, bad = sampled_packing_check(1_000_000, seed, hook)
    else:
        ok, n, bad = exhaustive_packing_check(fault=hook)
    yield "packing", ok, f"{n} cases" + (f", first failures {bad[:3]}" if bad else "")

    v = np.arange(-128, 128)
    b, c = np.meshgrid(v, v, indexing="ij")
    rb, rc = unpack_operands(pack_raw(b.ravel(), c.ravel()))
    yield "pack-roundtrip", bool((rb == b.ravel()).all() and (rc == c.ravel()).all()), "65536 pairs"

    rng = np.random.default_rng(seed)
    worst, mono = 0.0, True
    for _ in range(400):
        n = int(rng.integers(1, 258))
        x = np.clip(rng.integers(-40, 41, n), -127, 128)
        p = fn.pseudo_softmax_row(x)
        worst = max(worst, float(np.abs(p - fn.softmax_base2_exact(x)).max()))
        order = np.argsort(x, kind="stable")
        mono &= bool((np.diff(p[order]) >= 0).all() and p.min() >= 0 and p.max() <= 1)
    yield "softmax-bound", worst < 2.0 ** -8, f"max abs error {worst:.6f} (bound 2^-8 = {2.0 ** -8:.6f})"
    yield "softmax-range-order", mono, "outputs in [0, 1], monotone in the scores"

    worst = 0.0
    for _ in range(200):
        row = rng.integers(-128, 128, int(rng.integers(2, 769)))
        ref = (row - row.mean()) / np.sqrt(row.var() + 2.0 ** -16)
        worst = max(worst, float(np.abs(fn.layernorm_two_pass(row) - ref).max()))
    yield "layernorm-oracle", worst < 1.0 / 127, f"max abs error {worst:.2e} (one int8 step at unit scale {1 / 127:.2e})"

    same = True
    for _ in range(200):
        row = rng.integers(-128, 128, int(rng.integers(1, 3073)))
        same &= Fraction(*fn.variance_two_pass(row)) == Fraction(*fn.variance_parallel(row))
    yield "variance-identity", bool(same), "two-pass and single-pass variance equal as exact fractions"

    same = True
    for p in (8, 16, 32):
        m_, k_, n_ = (int(x) for x in rng.integers(1, 200, 3))
        A = rng.integers(-128, 128, (m_, k_))
        B = rng.integers(-128, 128, (k_, n_))
        same &= bool((fn.block_matmul(A, B, p, packed=True) == A @ B).all())
    yield "block-matmul", same, "packed block matmul equals dense matmul"

    toy = ModelConfig("toy", 64, 16, 64, 2, 2)
    w = fn.generate_weights(toy, seed)
    img = fn.random_image(toy, seed + 1)
    for p in (8, 16):
        rep, trace = run_inference_schedule(toy, HardwareConfig(p_sys=p))
        y = replay_schedule(trace, img, w)
        y0 = fn.encoder_forward(img, w, p)
        yield f"schedule-equivalence-p{p}", bool((y == y0).all()), "replayed schedule vs encoder_forward"
        ok = (audit_single_load(trace.dram, weights_manifest(toy)).passed
              and not check_array_exclusive(trace.events) and not check_buffers(trace))
        yield f"schedule-audit-p{p}", ok, "single-load audit, array exclusivity, buffer capacity"


def cmd_verify(args) -> int:
    out = _out_dir(args)
    dg = _manifest(args, ("quick" if args.quick else "full", args.inject_fault or "")).digest()
    lines, failed = [], []
    for name, ok, detail in _verify_properties(args.quick, args.seed, args.inject_fault):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        print(line, flush=True)
        lines.append(line)
        if not ok:
            failed.append(name)
    _write(out / "verify_report.txt", "\n".join(lines) + "\n", dg)
    if failed:
        print("failed properties: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_sweep(args) -> int:
    from . import analysis as an
    from .schedule import run_inference_schedule
    from .traffic import baseline_traffic, single_load_traffic

    out = _out_dir(args)
    hw = _hw(args)
    dg = _manifest(args, (args.kind, args.p, args.k, args.policy, args.demand, dump_config(hw))).digest()
    summary = []
    models = _models(args)
    pool = ThreadPoolExecutor(max_workers=max(1, args.workers))
    if args.kind == "efficiency":
        prange = parse_range(args.p)
        if prange.start < 4 or prange.stop - 1 > 128:
            raise UsageError("--p must lie within 4..128")
        for model, pts in zip(models, pool.map(lambda m: an.efficiency_sweep(m, prange), models)):
            _write(out / f"efficiency_{model.name.lower()}.csv",
                   an.xy_csv([p.p_sys for p in pts], [p.efficiency for p in pts], "p_sys", "efficiency"), dg)
            summary.append(f"{model.name} local maxima (P > 8): {an.local_maxima(pts)}")
    elif args.kind == "multi-pe":
        krange = parse_range(args.k)
        if krange.start < 1:
            raise UsageError("--k must start at 1 or more")

        def one(model):
            rep, trace = run_inference_schedule(model, hw)
            tr = (single_load_traffic(model, hw, rep, trace.dram) if args.policy == "me-vit"
                  else baseline_traffic(model, hw, cycle_report=rep))
            res = [an.multi_pe(model, hw, k, tr, rep, args.demand) for k in krange]
            return res, an.max_unconstrained_pes(hw, tr, args.demand)

        for model, (res, knee) in zip(models, pool.map(one, models)):
            _write(out / f"multi_pe_{model.name.lower()}_{args.policy}.csv",
                   an.xy_csv([r.pe_count for r in res], [r.fps for r in res], "pe_count", "fps"), dg)
            summary.append(f"{model.name} {args.policy}: knee at k={knee} ({args.demand} demand); "
                           + ", ".join(f"k={r.pe_count} {r.fps:.2f} FPS" + (" (limited)" if r.bandwidth_limited else "")
                                       for r in res))
    else:
        def one(model):
            rep, trace = run_inference_schedule(model, hw)
            tr = single_load_traffic(model, hw, rep, trace.dram)
            return an.roofline(model, hw, tr, rep, args.pes)

        pts = list(pool.map(one, models))
        _write(out / "roofline.csv", an.xy_csv([p.operational_intensity for p in pts],
                                               [p.achieved for p in pts], "ops_per_byte", "ops_per_s"), dg)
        for p in pts:
            under = p.achieved <= p.attainable
            summary.append(f"{p.model}: intensity {p.operational_intensity:.1f} ops/B, achieved "
                           f"{p.achieved / 1e9:.1f} G, roof {p.attainable / 1e9:.1f} G, "
                           f"{'under' if under else 'ABOVE'} the roof")
    pool.shutdown()
    text = "\n".join(summary) + "\n"
    _write(out / f"sweep_{args.kind}_summary.txt", text, dg)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_traffic(args) -> int:
    from .schedule import run_inference_schedule
    from .traffic import baseline_traffic, improvement_ratios, single_load_traffic

    out = _out_dir(args)
    hw = _hw(args)
    for model in _models(args):
        dg = _manifest(args, (model.name, dump_config(hw))).digest()
        rep, trace = run_inference_schedule(model, hw)
        me = single_load_traffic(model, hw, rep, trace.dram)
        base = baseline_traffic(model, hw, cycle_report=rep)
        r = improvement_ratios(me, base)
        stem = _stem(model, hw)
        _write(out / f"{stem}_traffic_me-vit.csv", me.to_csv(), dg)
        _write(out / f"{stem}_traffic_baseline.csv", base.to_csv(), dg)
        print(f"{model.name} P={hw.p_sys}: total ratio {r['total_ratio']:.2f}, peak ratio "
              f"{r['peak_ratio']:.2f} in {r['peak_mode']}")
    return EXIT_OK


def cmd_bram(args) -> int:
    from .analysis import bram_estimate

    hw = _hw(args)
    for model in _models(args):
        est = bram_estimate(model, hw)
        extra = f" (published {est['published']}, delta {est['delta']:+d})" if "published" in est else ""
        print(f"{model.name} P={hw.p_sys}: Weight {est['Weight']} + Feature {est['Feature']} + "
              f"Layer {est['Layer']} = {est['total']}{extra}")
    return EXIT_OK


# ------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", help="builtin label or 'all' (default deit-b; all for bram and roofline)")
    common.add_argument("--model-config", help="key = value model file")
    common.add_argument("--hw-config", help="key = value hardware file")
    common.add_argument("--psys", type=int)
    common.add_argument("--freq", type=float)
    common.add_argument("--bandwidth", type=float, help="DRAM bytes/s")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./singleload-out)")
    common.add_argument("--seed", type=int, default=0)

    ap = _Parser(prog="singleload", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("simulate", parents=[common], help="cycle report, traffic, traces")
    s.add_argument("--no-trace", action="store_true", help="skip the event trace file")
    v = sub.add_parser("verify", parents=[common], help="numeric and schedule self-checks")
    v.add_argument("--quick", action="store_true", help="sample 10^6 packing triples")
    v.add_argument("--inject-fault", choices=["packing"], help=argparse.SUPPRESS)
    w = sub.add_parser("sweep", parents=[common], help="efficiency, multi-pe or roofline data")
    w.add_argument("kind", choices=["efficiency", "multi-pe", "roofline"])
    w.add_argument("--p", default="4..80", help="P range for efficiency, e.g. 4..80")
    w.add_argument("--k", default="1..6", help="PE-count range for multi-pe")
    w.add_argument("--policy", choices=["me-vit", "baseline"], default="me-vit")
    w.add_argument("--demand", choices=["peak", "average"], default="peak",
                   help="per-PE bandwidth used for the shared-channel cap")
    w.add_argument("--pes", type=int, default=1, help="PE count for roofline points")
    w.add_argument("--workers", type=int, default=4, help="worker threads")
    sub.add_parser("traffic", parents=[common], help="single-load vs baseline traffic")
    sub.add_parser("bram", parents=[common], help="BRAM36 estimate")
    return ap


COMMANDS = {"simulate": cmd_simulate, "verify": cmd_verify, "sweep": cmd_sweep,
            "traffic": cmd_traffic, "bram": cmd_bram}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        parser.print_usage(sys.stderr)
        print(f"singleload: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
