"""Affine min-max group quantizer with selectable grouping dimension.

A weight matrix W (OC x IC) is cut into groups either along the input
channels of each row (PerOC: group (r, floor(c/g))) or along the output
channels of each column (PerIC: group (floor(r/g), c)). Each group gets an
asymmetric affine code map v ~ (code - zero) * scale fitted from its own
min/max. PerIC isolates a misbehaving input channel inside its own groups;
PerOC smears it over every row group that touches the channel.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor2D, forward, mse

ALLOWED_BITS = (2, 3, 4, 8)

# group_size value meaning "one group spans the whole channel"
FULL = None


class GroupDim(enum.Enum):
    """Grouping dimension: groups run along IC per row, or along OC per column."""

    PER_OC = "oc"
    PER_IC = "ic"


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 3
    group_size: int | None = 128
    dim: GroupDim = GroupDim.PER_OC

    def __post_init__(self) -> None:
        if self.bits not in ALLOWED_BITS:
            raise ConfigError(f"bits must be one of {ALLOWED_BITS}, got {self.bits}")
        if self.group_size is not None and self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1 or FULL, got {self.group_size}")
        if not isinstance(self.dim, GroupDim):
            raise ConfigError(f"dim must be a GroupDim, got {self.dim!r}")

    @property
    def maxq(self) -> int:
        return (1 << self.bits) - 1

    def effective_group(self, oc: int, ic: int) -> int:
        """Concrete group length for a matrix: FULL spans the whole channel."""
        if self.group_size is not None:
            return self.group_size
        return ic if self.dim is GroupDim.PER_OC else oc


@dataclass
class QuantParams:
    """Per-group scales/zeros in the storage order of their dimension.

    PerOC: shape [OC, ceil(IC/g)], row r group k at (r, k).
    PerIC: shape [ceil(OC/g), IC], group row k column c at (k, c); a
    row-major walk over the weight rows meets each param row exactly when
    its g-row block starts, which is what the streaming dequantizer relies
    on.
    """

    dim: GroupDim
    scales: np.ndarray
    zeros: np.ndarray

    def __post_init__(self) -> None:
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float32)
        self.zeros = np.ascontiguousarray(self.zeros, dtype=np.uint8)
        if self.scales.shape != self.zeros.shape or self.scales.ndim != 2:
            raise ShapeError(
                f"params arrays must share a 2-D shape, got {self.scales.shape} "
                f"and {self.zeros.shape}"
            )
        if not (self.scales > 0).all() or not np.isfinite(self.scales).all():
            raise ConfigError("scales must be finite and strictly positive")


@dataclass
class QuantizedLayer:
    """Codes plus params plus config: everything needed to rebuild W-hat.

    perm is only set for per-OC dynamic groups quantized in a permuted
    column order: params then follow the permuted group boundaries, and
    perm[j] names the original column at permuted position j.
    """

    codes: np.ndarray
    params: QuantParams
    config: QuantConfig
    oc: int
    ic: int
    perm: np.ndarray | None = field(default=None)

    def __post_init__(self) -> None:
        self.codes = np.ascontiguousarray(self.codes, dtype=np.uint8)
        if self.codes.shape != (self.oc, self.ic):
            raise ShapeError(
                f"codes shape {self.codes.shape} does not match ({self.oc}, {self.ic})"
            )
        if self.codes.size and int(self.codes.max()) > self.config.maxq:
            raise ConfigError(
                f"codes exceed {self.config.maxq} for bits={self.config.bits}"
            )


def _group_starts(extent: int, g: int) -> np.ndarray:
    return np.arange(0, extent, g)


def _fit_arrays(vmin: np.ndarray, vmax: np.ndarray, bits: int):
    """Vectorized param fit from per-group min/max, float32 in and out.

    The fitted range always includes zero so the integer zero-point lands
    in [0, maxq] and a code exists for 0.0 itself; all-equal groups take
    scale |v| (or 1 for all-zero) so the shared value is reproduced
    bit-exactly by code 0 or 1. The range is widened in float64 before the
    division so spreads near the float32 limit cannot overflow, and a
    subnormal spread is floored at the smallest normal so scale stays
    positive.
    """
    maxq = (1 << bits) - 1
    vmin = np.asarray(vmin, dtype=np.float32)
    vmax = np.asarray(vmax, dtype=np.float32)
    lo = np.minimum(vmin, np.float32(0))
    hi = np.maximum(vmax, np.float32(0))
    alleq = vmin == vmax
    spread = (hi.astype(np.float64) - lo.astype(np.float64)) / maxq
    spread = np.maximum(spread.astype(np.float32), np.finfo(np.float32).tiny)
    scale = np.where(
        alleq,
        np.where(vmin == 0, np.float32(1), np.abs(vmin)),
        spread,
    ).astype(np.float32)
    zero = np.clip(np.floor(-lo / scale + np.float32(0.5)), 0, maxq).astype(np.uint8)
    return scale, zero


def fit_group_params(values, bits: int) -> tuple[np.float32, int]:
    """Fit (scale, zero) for one group of finite float values."""
    v = np.asarray(values, dtype=np.float32).ravel()
    if v.size == 0:
        raise ConfigError("cannot fit quantization params on an empty group")
    scale, zero = _fit_arrays(v.min(), v.max(), bits)
    return np.float32(scale), int(zero)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.floor(np.abs(x) + np.float32(0.5)) * np.sign(x)


def quantize_values(values, scale, zero, bits: int) -> np.ndarray:
    """codes = clamp(round_half_away_from_zero(v/scale) + zero, 0, maxq)."""
    maxq = (1 << bits) - 1
    v = np.asarray(values, dtype=np.float32)
    s = np.asarray(scale, dtype=np.float32)
    z = np.asarray(zero, dtype=np.float32)
    c = _round_half_away(v / s) + z
    return np.clip(c, 0, maxq).astype(np.uint8)


def dequantize_values(codes, scale, zero) -> np.ndarray:
    """v-hat = (code - zero) * scale, exact affine map in float32."""
    c = np.asarray(codes, dtype=np.float32)
    z = np.asarray(zero, dtype=np.float32)
    s = np.asarray(scale, dtype=np.float32)
    return (c - z) * s


def rtn_quantize(w: Tensor2D, config: QuantConfig) -> QuantizedLayer:
    """Round-to-nearest group quantization of W along config.dim.

    Every group's params are fitted on exactly that group's weights;
    ragged tail groups are fitted on their actual shorter extent.
    """
    oc, ic = w.shape
    g = config.effective_group(oc, ic)
    data = w.data
    if config.dim is GroupDim.PER_OC:
        starts = _group_starts(ic, g)
        vmin = np.minimum.reduceat(data, starts, axis=1)
        vmax = np.maximum.reduceat(data, starts, axis=1)
        scales, zeros = _fit_arrays(vmin, vmax, config.bits)
        codes = np.empty((oc, ic), dtype=np.uint8)
        for k, c0 in enumerate(starts):
            c1 = min(c0 + g, ic)
            codes[:, c0:c1] = quantize_values(
                data[:, c0:c1], scales[:, k : k + 1], zeros[:, k : k + 1], config.bits
            )
    else:
        starts = _group_starts(oc, g)
        vmin = np.minimum.reduceat(data, starts, axis=0)
        vmax = np.maximum.reduceat(data, starts, axis=0)
        scales, zeros = _fit_arrays(vmin, vmax, config.bits)
        codes = np.empty((oc, ic), dtype=np.uint8)
        for k, r0 in enumerate(starts):
            r1 = min(r0 + g, oc)
            codes[r0:r1, :] = quantize_values(
                data[r0:r1, :], scales[k : k + 1, :], zeros[k : k + 1, :], config.bits
            )
    params = QuantParams(dim=config.dim, scales=scales, zeros=zeros)
    return QuantizedLayer(codes=codes, params=params, config=config, oc=oc, ic=ic)


def _expand_params(layer: QuantizedLayer) -> tuple[np.ndarray, np.ndarray]:
    """Broadcast per-group scales/zeros up to full OC x IC float32 arrays."""
    oc, ic = layer.oc, layer.ic
    g = layer.config.effective_group(oc, ic)
    scales = layer.params.scales
    zeros = layer.params.zeros.astype(np.float32)
    if layer.params.dim is GroupDim.PER_OC:
        if layer.perm is not None:
            # params follow permuted group boundaries: column c sits in the
            # group of its position within the permutation
            pos = np.argsort(layer.perm)
            col_group = pos // g
            return scales[:, col_group], zeros[:, col_group]
        col_group = np.arange(ic) // g
        return scales[:, col_group], zeros[:, col_group]
    row_group = np.arange(oc) // g
    return scales[row_group, :], zeros[row_group, :]


def dequantize_layer(layer: QuantizedLayer) -> Tensor2D:
    """W-hat[r][c] = (code - zero(group)) * scale(group), float32."""
    s, z = _expand_params(layer)
    return Tensor2D((layer.codes.astype(np.float32) - z) * s)


def reconstruction_error(w: Tensor2D, layer: QuantizedLayer, x: Tensor2D) -> float:
    """Calibration-set output MSE between full-precision and quantized W."""
    if x.cols != w.cols:
        raise ShapeError(
            f"reconstruction_error: W is {w.shape} but X is {x.shape}"
        )
    return mse(forward(w, x), forward(dequantize_layer(layer), x))
