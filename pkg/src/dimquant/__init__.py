"""Weight-only group quantization with a selectable grouping dimension.

Quantizes 2-D weight matrices to 2/3/4/8-bit affine codes grouped either
along input channels (per-OC) or output channels (per-IC), picks the
better dimension per layer from calibration reconstruction error, runs
GPTQ-style error compensation in both geometries, and ships packed
artifacts with a streaming dequantizer and a layout microbenchmark.
"""

from .errors import (
    ArtifactError,
    ConfigError,
    DimQuantError,
    FileFormatError,
    NpyError,
    NpyFortranOrderError,
    NpyTruncatedError,
    NpyUnsupportedDtypeError,
    NpyWrongNdimError,
    NumericError,
    ShapeError,
)
from .tensor import Tensor2D, forward, forward_call_count, mse, npy_read, npy_write
from .quant import (
    ALLOWED_BITS,
    FULL,
    GroupDim,
    QuantConfig,
    QuantParams,
    QuantizedLayer,
    dequantize_layer,
    dequantize_values,
    fit_group_params,
    quantize_values,
    reconstruction_error,
    rtn_quantize,
)
from .gptq import (
    GptqOptions,
    HessianState,
    UpdateTrace,
    accumulate_hessian,
    act_order_perm,
    default_gptq_options,
    gptq_quantize,
    prepare_hessian,
    static_group_params,
)
from .search import (
    DimReport,
    LayerResult,
    gptq_ada,
    heuristic_dim_for,
    quantize_model,
    rtn_ada,
)
from .deploy import (
    BenchReport,
    PackedArtifact,
    bench_dequant,
    pack_codes,
    read_artifact,
    stream_dequant,
    unpack_codes,
    write_artifact,
)
from .synth import SyntheticSpec, gen_synthetic

__version__ = "0.1.0"

__all__ = [
    "ALLOWED_BITS",
    "ArtifactError",
    "BenchReport",
    "ConfigError",
    "DimQuantError",
    "DimReport",
    "FULL",
    "FileFormatError",
    "GptqOptions",
    "GroupDim",
    "HessianState",
    "LayerResult",
    "NpyError",
    "NpyFortranOrderError",
    "NpyTruncatedError",
    "NpyUnsupportedDtypeError",
    "NpyWrongNdimError",
    "NumericError",
    "PackedArtifact",
    "QuantConfig",
    "QuantParams",
    "QuantizedLayer",
    "ShapeError",
    "SyntheticSpec",
    "Tensor2D",
    "UpdateTrace",
    "accumulate_hessian",
    "act_order_perm",
    "bench_dequant",
    "default_gptq_options",
    "dequantize_layer",
    "dequantize_values",
    "fit_group_params",
    "forward",
    "forward_call_count",
    "gen_synthetic",
    "gptq_ada",
    "gptq_quantize",
    "heuristic_dim_for",
    "mse",
    "npy_read",
    "npy_write",
    "pack_codes",
    "prepare_hessian",
    "quantize_model",
    "quantize_values",
    "read_artifact",
    "reconstruction_error",
    "rtn_ada",
    "rtn_quantize",
    "static_group_params",
    "stream_dequant",
    "unpack_codes",
    "write_artifact",
]
