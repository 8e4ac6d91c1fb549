"""Dense 2-D float32 tensor with the forward/error primitives and NPY I/O.

Everything downstream (quantizers, search, deploy) works in terms of
Tensor2D: weights are OC x IC, calibration activations are T x IC, layer
outputs are T x OC. Arithmetic that feeds decisions (forward outputs,
mean-squared errors) accumulates in float64 and only the stored tensors
are float32.
"""

from __future__ import annotations

import ast
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    NpyError,
    NpyFortranOrderError,
    NpyTruncatedError,
    NpyUnsupportedDtypeError,
    NpyWrongNdimError,
    NumericError,
    ShapeError,
)

_NPY_MAGIC = b"\x93NUMPY"
_NPY_VERSION = b"\x01\x00"

# Monotone count of forward() invocations, used by the dimension search to
# account for how many quantized evaluation passes a decision cost.
_forward_calls = 0


def forward_call_count() -> int:
    """Total forward() calls made in this process so far."""
    return _forward_calls


@dataclass(frozen=True)
class Tensor2D:
    """Immutable row-major 2-D float32 matrix.

    Construction coerces to C-contiguous float32 and rejects non-finite
    elements, so any Tensor2D in circulation is safe to feed to the
    numeric kernels.
    """

    data: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor2D requires 2 dimensions, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.isfinite(arr).all():
            raise NumericError("Tensor2D rejects NaN/Inf elements")
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def forward(w: Tensor2D, x: Tensor2D) -> Tensor2D:
    """Layer output Y = X @ W^T, Y[t][o] = sum_i X[t][i] * W[o][i].

    Accumulates in float64 with a fixed contraction path (no einsum
    optimizer), so repeated runs give bit-identical float32 results.
    """
    global _forward_calls
    if w.cols != x.cols:
        raise ShapeError(
            f"forward: W is {w.shape} but X is {x.shape}; inner dims must match"
        )
    _forward_calls += 1
    y = np.einsum(
        "ti,oi->to",
        x.data.astype(np.float64),
        w.data.astype(np.float64),
        optimize=False,
    )
    return Tensor2D(y.astype(np.float32))


def mse(a: Tensor2D, b: Tensor2D) -> float:
    """Mean squared difference over all elements, accumulated in float64."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    return float(np.mean(d * d))


def npy_write(path, t: Tensor2D) -> None:
    """Write a Tensor2D as NPY v1.0, little-endian float32, C order."""
    header = (
        "{'descr': '<f4', 'fortran_order': False, "
        f"'shape': ({t.rows}, {t.cols}), }}"
    )
    # Total of magic+version+length+header must be a multiple of 64 and the
    # header must end in newline per the format description.
    base = len(_NPY_MAGIC) + len(_NPY_VERSION) + 2
    pad = 64 - (base + len(header) + 1) % 64
    if pad == 64:
        pad = 0
    header = header + " " * pad + "\n"
    with open(path, "wb") as f:
        f.write(_NPY_MAGIC)
        f.write(_NPY_VERSION)
        f.write(struct.pack("<H", len(header)))
        f.write(header.encode("latin-1"))
        f.write(t.data.tobytes("C"))


def npy_read(path) -> Tensor2D:
    """Read a strict subset of NPY: v1.0, '<f4', C order, exactly 2-D."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 10 or raw[:6] != _NPY_MAGIC:
        raise NpyError(f"{path}: not an NPY file (bad magic)")
    if raw[6:8] != _NPY_VERSION:
        raise NpyError(
            f"{path}: unsupported NPY version {raw[6]}.{raw[7]}, only 1.0 is accepted"
        )
    (hlen,) = struct.unpack("<H", raw[8:10])
    if len(raw) < 10 + hlen:
        raise NpyTruncatedError(f"{path}: header declares {hlen} bytes, file ends early")
    try:
        header = ast.literal_eval(raw[10 : 10 + hlen].decode("latin-1"))
    except (ValueError, SyntaxError) as e:
        raise NpyError(f"{path}: unparseable NPY header: {e}") from e
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise NpyError(f"{path}: malformed NPY header dict")
    if header["descr"] != "<f4":
        raise NpyUnsupportedDtypeError(
            f"{path}: dtype {header['descr']!r} unsupported, need '<f4'"
        )
    if header["fortran_order"]:
        raise NpyFortranOrderError(f"{path}: Fortran-ordered data unsupported")
    shape = header["shape"]
    if (
        not isinstance(shape, tuple)
        or len(shape) != 2
        or not all(isinstance(d, int) and d >= 0 for d in shape)
    ):
        raise NpyWrongNdimError(f"{path}: need exactly 2 dimensions, header says {shape}")
    rows, cols = shape
    payload = raw[10 + hlen :]
    expect = rows * cols * 4
    if len(payload) < expect:
        raise NpyTruncatedError(
            f"{path}: payload holds {len(payload)} bytes, {expect} expected"
        )
    if len(payload) > expect:
        raise NpyError(f"{path}: {len(payload) - expect} trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    return Tensor2D(data)
