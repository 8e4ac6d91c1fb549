"""Per-layer grouping-dimension search by calibration reconstruction error.

Both candidate groupings are built with plain round-to-nearest, scored
against one shared reference forward pass, and the argmin wins. The search
never uses the heavier compensated solver for scoring: two quantized
forward passes per layer is the whole cost, and the chosen dimension is
handed to that solver afterwards when requested.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DimQuantError, FileFormatError, NumericError
from .gptq import (
    GptqOptions,
    UpdateTrace,
    accumulate_hessian,
    default_gptq_options,
    gptq_quantize,
)
from .quant import (
    GroupDim,
    QuantConfig,
    QuantizedLayer,
    dequantize_layer,
    rtn_quantize,
)
from .tensor import Tensor2D, forward, forward_call_count, mse, npy_read


@dataclass
class DimReport:
    """Outcome of one layer's dimension search.

    err_oc/err_ic are the round-to-nearest candidate errors against the
    shared reference output; chosen is per-IC only on a strict win
    (ties keep per-OC). err_gptq is filled when the compensated solver ran
    afterwards on the chosen dimension.
    """

    layer_id: str
    err_oc: float
    err_ic: float
    chosen: GroupDim
    quantized_forward_passes: int
    wall_time_ms: dict[str, float] = field(default_factory=dict)
    err_gptq: float | None = None

    def as_dict(self) -> dict:
        d = {
            "layer_id": self.layer_id,
            "err_oc": self.err_oc,
            "err_ic": self.err_ic,
            "chosen": self.chosen.value,
            "quantized_forward_passes": self.quantized_forward_passes,
            "wall_time_ms": dict(self.wall_time_ms),
        }
        if self.err_gptq is not None:
            d["err_gptq"] = self.err_gptq
        return d


def _score_candidate(
    w: Tensor2D, x: Tensor2D, ref: Tensor2D, config: QuantConfig
) -> tuple[QuantizedLayer, float, float]:
    t0 = time.perf_counter()
    layer = rtn_quantize(w, config)
    err = mse(ref, forward(dequantize_layer(layer), x))
    dt_ms = (time.perf_counter() - t0) * 1e3
    return layer, err, dt_ms


def rtn_ada(
    w: Tensor2D,
    x: Tensor2D,
    bits: int = 3,
    group_size: int | None = 128,
    layer_id: str = "",
) -> tuple[QuantizedLayer, DimReport]:
    """Quantize W with the better of per-OC/per-IC round-to-nearest.

    One reference forward pass, then exactly one quantized forward pass
    per candidate; the input W is never mutated.
    """
    calls0 = forward_call_count()
    ref = forward(w, x)
    layer_oc, err_oc, ms_oc = _score_candidate(
        w, x, ref, QuantConfig(bits=bits, group_size=group_size, dim=GroupDim.PER_OC)
    )
    layer_ic, err_ic, ms_ic = _score_candidate(
        w, x, ref, QuantConfig(bits=bits, group_size=group_size, dim=GroupDim.PER_IC)
    )
    if err_ic < err_oc:
        chosen, layer = GroupDim.PER_IC, layer_ic
    else:
        chosen, layer = GroupDim.PER_OC, layer_oc
    passes = forward_call_count() - calls0 - 1  # all but the reference
    report = DimReport(
        layer_id=layer_id,
        err_oc=err_oc,
        err_ic=err_ic,
        chosen=chosen,
        quantized_forward_passes=passes,
        wall_time_ms={"oc": ms_oc, "ic": ms_ic},
    )
    return layer, report


def gptq_ada(
    w: Tensor2D,
    x: Tensor2D,
    bits: int = 3,
    group_size: int | None = 128,
    damp_percent: float = 0.01,
    layer_id: str = "",
) -> tuple[QuantizedLayer, DimReport, UpdateTrace]:
    """Search the dimension with round-to-nearest, then run the
    compensated solver once on the winner with its per-dimension defaults
    (per-IC: reorder; per-OC: reorder plus static groups)."""
    rtn_layer, report = rtn_ada(w, x, bits=bits, group_size=group_size, layer_id=layer_id)
    dim = report.chosen
    state = accumulate_hessian(None, x)
    config = QuantConfig(bits=bits, group_size=group_size, dim=dim)
    layer, trace = gptq_quantize(
        w, state, config, default_gptq_options(dim, damp_percent=damp_percent)
    )
    report.err_gptq = mse(forward(w, x), forward(dequantize_layer(layer), x))
    return layer, report, trace


_PER_IC_MODULES = re.compile(r"(^|[._/-])(q|k|v|qkv|down)(_?proj)?([._/-]|$)")


def heuristic_dim_for(layer_id: str) -> GroupDim:
    """Fixed per-module preset: query/key/value and down projections go
    per-IC, everything else per-OC. Provided for ablations only; the
    searched choice beats any fixed assignment on mixed workloads."""
    if _PER_IC_MODULES.search(layer_id.lower()):
        return GroupDim.PER_IC
    return GroupDim.PER_OC


@dataclass
class LayerResult:
    layer_id: str
    layer: QuantizedLayer | None
    report: DimReport | None
    error: float | None
    wall_time_ms: float
    failure: str | None = None
    failure_kind: str | None = None
    trace: UpdateTrace | None = None


def _quantize_one(
    layer_id: str,
    w: Tensor2D,
    x: Tensor2D,
    method: str,
    mode: str,
    bits: int,
    group_size: int | None,
    opts: GptqOptions | None,
) -> LayerResult:
    t0 = time.perf_counter()
    report = None
    trace = None
    if mode == "ada":
        if method == "gptq":
            damp = opts.damp_percent if opts is not None else 0.01
            layer, report, trace = gptq_ada(
                w, x, bits=bits, group_size=group_size,
                damp_percent=damp, layer_id=layer_id,
            )
            err = report.err_gptq
        else:
            layer, report = rtn_ada(
                w, x, bits=bits, group_size=group_size, layer_id=layer_id
            )
            err = min(report.err_oc, report.err_ic)
    else:
        if mode == "heuristic-qkvdown":
            dim = heuristic_dim_for(layer_id)
        else:
            dim = GroupDim(mode)
        config = QuantConfig(bits=bits, group_size=group_size, dim=dim)
        if method == "gptq":
            state = accumulate_hessian(None, x)
            use = opts if opts is not None else GptqOptions()
            layer, trace = gptq_quantize(w, state, config, use)
        else:
            layer = rtn_quantize(w, config)
        err = mse(forward(w, x), forward(dequantize_layer(layer), x))
    dt_ms = (time.perf_counter() - t0) * 1e3
    return LayerResult(
        layer_id=layer_id, layer=layer, report=report,
        error=err, wall_time_ms=dt_ms, trace=trace,
    )


def quantize_model(
    layers: list[dict],
    method: str = "rtn",
    mode: str = "ada",
    bits: int = 3,
    group_size: int | None = 128,
    opts: GptqOptions | None = None,
) -> list[LayerResult]:
    """Quantize every manifest layer, tolerating per-layer failures.

    layers is the parsed manifest list: dicts with id, weight_npy, and
    calib_npy paths. A failing layer is recorded with its diagnostic and
    the rest still run; the caller decides the exit status.
    """
    results: list[LayerResult] = []
    for entry in layers:
        layer_id = str(entry.get("id", f"layer{len(results)}"))
        t0 = time.perf_counter()
        try:
            w = npy_read(entry["weight_npy"])
            x = npy_read(entry["calib_npy"])
            results.append(
                _quantize_one(layer_id, w, x, method, mode, bits, group_size, opts)
            )
        except (DimQuantError, OSError, KeyError) as e:
            dt_ms = (time.perf_counter() - t0) * 1e3
            if isinstance(e, NumericError):
                kind = "numeric"
            elif isinstance(e, (FileFormatError, OSError)):
                kind = "io"
            else:
                kind = "config"
            results.append(
                LayerResult(
                    layer_id=layer_id, layer=None, report=None, error=None,
                    wall_time_ms=dt_ms, failure=f"{type(e).__name__}: {e}",
                    failure_kind=kind,
                )
            )
    return results
