"""Command-line workbench: synth, quantize, eval, ablate, bench, inspect.

Manifests are JSON: {"layers": [{"id", "weight_npy", "calib_npy"}]} with
relative paths resolved against the manifest's directory. Exit codes:
0 success, 1 configuration error, 2 numeric failure, 3 I/O or file format
error.
"""

from __future__ import annotations

import argparse
import csv
import json
import re
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from .deploy import bench_dequant, read_artifact, stream_dequant, write_artifact
from .errors import ConfigError, FileFormatError, NumericError
from .figures import plot_ablation, plot_layer_errors
from .gptq import GptqOptions, accumulate_hessian, gptq_quantize
from .quant import GroupDim, QuantConfig, dequantize_layer, rtn_quantize
from .search import LayerResult, gptq_ada, quantize_model, rtn_ada
from .synth import SyntheticSpec, gen_synthetic
from .tensor import forward, mse, npy_read, npy_write

MODES = ("oc", "ic", "ada", "heuristic-qkvdown")
METHODS = ("rtn", "gptq")

# The legal ablation grid: every round-to-nearest mode, plus the
# compensated solver in its plain per-OC form, the best per-OC form
# (reorder with static groups), and the best per-IC form (reorder).
DEFAULT_GRID = (
    ("rtn", "oc", False, False),
    ("rtn", "ic", False, False),
    ("rtn", "ada", False, False),
    ("gptq", "oc", False, False),
    ("gptq", "oc", True, True),
    ("gptq", "ic", True, False),
)

ABLATION_COLUMNS = (
    "layer_id", "method", "mode", "act_order", "static_groups",
    "recon_error", "wall_time_ms", "chosen_dim",
)


@dataclass(frozen=True)
class RunConfig:
    method: str = "rtn"
    mode: str = "ada"
    bits: int = 3
    group_size: int | None = 128
    act_order: bool = False
    static_groups: bool = False
    damp_percent: float = 0.01
    calib_samples: int = 256
    calib_seq_len: int = 512

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.method == "rtn" and (self.act_order or self.static_groups):
            raise ConfigError("--act-order/--static-groups only apply to --method gptq")
        if self.static_groups and self.mode == "ic":
            raise ConfigError("static groups are only defined for per-OC grouping")

    def gptq_options(self, dim: GroupDim | None = None) -> GptqOptions:
        return GptqOptions(
            act_order=self.act_order,
            static_groups=self.static_groups,
            damp_percent=self.damp_percent,
            dim=dim,
        )


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; keep 1 for config
        raise ConfigError(message)


def _parse_groupsize(text: str) -> int | None:
    if text.lower() == "full":
        return None
    try:
        value = int(text)
    except ValueError:
        raise ConfigError(f"--groupsize takes an integer or 'full', got {text!r}")
    if value < 1:
        raise ConfigError(f"--groupsize must be >= 1, got {value}")
    return value


def _safe_name(layer_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", layer_id)


def load_manifest(path) -> list[dict]:
    """Parse and validate a manifest; paths become absolute."""
    base = Path(path).parent
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(doc, dict) or "layers" not in doc:
        raise ConfigError(f"{path}: manifest must be an object with key 'layers'")
    layers = doc["layers"]
    if not isinstance(layers, list):
        raise ConfigError(f"{path}: 'layers' must be a list")
    out = []
    for i, entry in enumerate(layers):
        if not isinstance(entry, dict):
            raise ConfigError(f"{path}: layers[{i}] must be an object")
        for key in ("id", "weight_npy", "calib_npy"):
            if key not in entry or not isinstance(entry[key], str):
                raise ConfigError(f"{path}: layers[{i}].{key} missing or not a string")
        out.append(
            {
                "id": entry["id"],
                "weight_npy": str((base / entry["weight_npy"]).resolve())
                if not Path(entry["weight_npy"]).is_absolute()
                else entry["weight_npy"],
                "calib_npy": str((base / entry["calib_npy"]).resolve())
                if not Path(entry["calib_npy"]).is_absolute()
                else entry["calib_npy"],
            }
        )
    return out


def _result_json(r: LayerResult) -> dict:
    doc = {
        "layer_id": r.layer_id,
        "error": r.error,
        "wall_time_ms": r.wall_time_ms,
    }
    if r.report is not None:
        doc["search"] = r.report.as_dict()
    if r.failure is not None:
        doc["failure"] = r.failure
    return doc


def cmd_quantize(args) -> int:
    cfg = RunConfig(
        method=args.method, mode=args.dim, bits=args.wbits,
        group_size=args.groupsize, act_order=args.act_order,
        static_groups=args.static_groups, damp_percent=args.damp,
    )
    if (
        cfg.method == "gptq"
        and cfg.mode == "oc"
        and cfg.act_order
        and not cfg.static_groups
    ):
        raise ConfigError(
            "per-OC gptq with --act-order needs --static-groups to produce a "
            "packable artifact (dynamic groups would follow the permuted order)"
        )
    layers = load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    opts = cfg.gptq_options() if cfg.method == "gptq" else None
    results = quantize_model(
        layers, method=cfg.method, mode=cfg.mode,
        bits=cfg.bits, group_size=cfg.group_size, opts=opts,
    )
    chosen_counts = {"oc": 0, "ic": 0}
    worse_sum = 0.0
    best_sum = 0.0
    for r in results:
        if r.layer is None:
            continue
        write_artifact(out_dir / f"{_safe_name(r.layer_id)}.adim", r.layer)
        with open(out_dir / f"{_safe_name(r.layer_id)}.report.json", "w") as f:
            json.dump(_result_json(r), f, indent=2)
        chosen_counts[r.layer.config.dim.value] += 1
        if r.report is not None:
            worse_sum += max(r.report.err_oc, r.report.err_ic)
            best_sum += min(r.report.err_oc, r.report.err_ic)
    failures = [
        {"layer_id": r.layer_id, "failure": r.failure, "kind": r.failure_kind}
        for r in results
        if r.failure is not None
    ]
    summary = {
        "layers": len(results),
        "quantized": sum(1 for r in results if r.layer is not None),
        "method": cfg.method,
        "mode": cfg.mode,
        "bits": cfg.bits,
        "group_size": 0 if cfg.group_size is None else cfg.group_size,
        "chosen_dims": chosen_counts,
        "error_savings_ratio": (worse_sum / best_sum) if best_sum > 0 else None,
        "failures": failures,
    }
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    plot_layer_errors(results, out_dir / "errors.png")
    print(json.dumps(summary, indent=2))
    if failures:
        codes = {"config": 1, "numeric": 2, "io": 3}
        return codes.get(failures[0]["kind"], 1)
    return 0


def cmd_eval(args) -> int:
    layers = load_manifest(args.manifest)
    art_dir = Path(args.artifacts)
    rows = []
    for entry in layers:
        art = read_artifact(art_dir / f"{_safe_name(entry['id'])}.adim")
        w = npy_read(entry["weight_npy"])
        x = npy_read(entry["calib_npy"])
        err = mse(forward(w, x), forward(stream_dequant(art), x))
        rows.append({"layer_id": entry["id"], "recon_error": err})
    doc = {"layers": rows}
    if args.out:
        with open(args.out, "w") as f:
            json.dump(doc, f, indent=2)
    print(json.dumps(doc, indent=2))
    return 0


def run_ablation(
    layers: list[dict],
    grid=DEFAULT_GRID,
    bits: int = 3,
    group_size: int | None = 128,
    damp_percent: float = 0.01,
) -> list[dict]:
    """One row per (combo, layer): quantize and score on the calibration set.

    Illegal combos raise instead of being silently dropped; callers build
    legal grids (the default grid already is).
    """
    rows = []
    for method, mode, act_order, static_groups in grid:
        if method == "rtn" and (act_order or static_groups):
            raise ConfigError("act_order/static_groups only apply to gptq rows")
        for entry in layers:
            w = npy_read(entry["weight_npy"])
            x = npy_read(entry["calib_npy"])
            t0 = time.perf_counter()
            chosen = ""
            if mode == "ada":
                if method == "gptq":
                    layer, report, _ = gptq_ada(
                        w, x, bits=bits, group_size=group_size,
                        damp_percent=damp_percent, layer_id=entry["id"],
                    )
                    err = report.err_gptq
                else:
                    layer, report = rtn_ada(
                        w, x, bits=bits, group_size=group_size, layer_id=entry["id"]
                    )
                    err = min(report.err_oc, report.err_ic)
                chosen = report.chosen.value
            else:
                config = QuantConfig(bits=bits, group_size=group_size, dim=GroupDim(mode))
                if method == "gptq":
                    opts = GptqOptions(
                        act_order=act_order, static_groups=static_groups,
                        damp_percent=damp_percent, dim=GroupDim(mode),
                    )
                    state = accumulate_hessian(None, x)
                    layer, _ = gptq_quantize(w, state, config, opts)
                else:
                    layer = rtn_quantize(w, config)
                err = mse(forward(w, x), forward(dequantize_layer(layer), x))
            rows.append(
                {
                    "layer_id": entry["id"],
                    "method": method,
                    "mode": mode,
                    "act_order": act_order,
                    "static_groups": static_groups,
                    "recon_error": err,
                    "wall_time_ms": (time.perf_counter() - t0) * 1e3,
                    "chosen_dim": chosen,
                }
            )
    rows.sort(
        key=lambda r: (
            r["method"], r["mode"], r["act_order"], r["static_groups"], r["layer_id"]
        )
    )
    return rows


def cmd_ablate(args) -> int:
    layers = load_manifest(args.manifest)
    if args.method or args.dim:
        if not (args.method and args.dim):
            raise ConfigError("custom ablation rows need both --method and --dim")
        if args.static_groups and args.dim == "ic":
            raise ConfigError("static groups are only defined for per-OC grouping")
        grid = ((args.method, args.dim, args.act_order, args.static_groups),)
    else:
        if args.act_order or args.static_groups:
            raise ConfigError("--act-order/--static-groups need --method and --dim")
        grid = DEFAULT_GRID
    rows = run_ablation(
        layers, grid=grid, bits=args.wbits,
        group_size=args.groupsize, damp_percent=args.damp,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    plot_ablation(rows, out_dir / "ablation.png")
    print(f"wrote {csv_path} ({len(rows)} rows)")
    return 0


def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    info = []
    for i in range(args.layers):
        spec = SyntheticSpec(
            oc=args.oc, ic=args.ic, tokens=args.tokens,
            outlier_channels=args.outliers, outlier_factor=args.alpha,
            seed=args.seed + i, weight_scale=args.weight_scale,
        )
        w, x, idx = gen_synthetic(spec)
        wname = f"layer{i:03d}_w.npy"
        xname = f"layer{i:03d}_x.npy"
        npy_write(out_dir / wname, w)
        npy_write(out_dir / xname, x)
        entries.append({"id": f"layer{i:03d}", "weight_npy": wname, "calib_npy": xname})
        info.append({"id": f"layer{i:03d}", "seed": spec.seed,
                     "outlier_idx": [int(v) for v in idx]})
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w") as f:
        json.dump({"layers": entries}, f, indent=2)
    with open(out_dir / "synth_info.json", "w") as f:
        json.dump({"layers": info}, f, indent=2)
    print(f"wrote {manifest_path} with {len(entries)} layers")
    return 0


def cmd_bench(args) -> int:
    art = read_artifact(args.artifact)
    report = bench_dequant(art, repetitions=args.reps)
    doc = report.as_dict()
    if args.out:
        with open(args.out, "w") as f:
            json.dump(doc, f, indent=2)
    print(json.dumps(doc, indent=2))
    return 0


def cmd_inspect(args) -> int:
    art = read_artifact(args.artifact)
    doc = {
        "magic": "ADIM",
        "version": 1,
        "bits": art.bits,
        "dim": art.dim.value,
        "oc": art.oc,
        "ic": art.ic,
        "group_size": 0 if art.group_size is None else art.group_size,
        "param_shape": list(art.scales.shape),
        "payload_bytes": len(art.payload),
    }
    print(json.dumps(doc, indent=2))
    return 0


def _add_quant_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--wbits", type=int, choices=(2, 3, 4, 8), default=3)
    p.add_argument("--groupsize", type=_parse_groupsize, default=128,
                   metavar="N|full", help="group length, or 'full' for one group per channel")
    p.add_argument("--damp", type=float, default=0.01,
                   help="Hessian damping as a fraction of the mean diagonal")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dimquant",
                     description="Weight-only group quantization workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", help="quantize manifest layers to packed artifacts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=METHODS, default="rtn")
    p.add_argument("--dim", choices=MODES, default="ada")
    p.add_argument("--act-order", action="store_true", dest="act_order")
    p.add_argument("--static-groups", action="store_true", dest="static_groups")
    _add_quant_flags(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="recompute artifact reconstruction error")
    p.add_argument("--manifest", required=True)
    p.add_argument("--artifacts", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the option grid and emit a CSV table")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--dim", choices=MODES)
    p.add_argument("--act-order", action="store_true", dest="act_order")
    p.add_argument("--static-groups", action="store_true", dest="static_groups")
    _add_quant_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="generate a synthetic outlier workload")
    p.add_argument("--out", required=True)
    p.add_argument("--oc", type=int, default=256)
    p.add_argument("--ic", type=int, default=256)
    p.add_argument("--tokens", type=int, default=RunConfig().calib_seq_len)
    p.add_argument("--outliers", type=int, default=8)
    p.add_argument("--alpha", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weight-scale", type=float, default=1.0, dest="weight_scale")
    p.add_argument("--layers", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="time the streaming dequantizer layouts")
    p.add_argument("--artifact", required=True)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="print an artifact header")
    p.add_argument("--artifact", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 2
    except (FileFormatError, OSError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
