"""Packed low-bit artifacts: bitstream codecs, file format, streaming
dequantizer, and a CPU access-pattern microbenchmark.

Codes are packed LSB-first into one contiguous little-endian bitstream in
row-major weight order, padded to a byte boundary once per matrix, so
3-bit codes straddle byte boundaries by design. The per-IC dequant path
walks weight rows, scale rows, and zero rows each in a single monotone
pass; the benchmark contrasts that with a deliberately transposed
(strided) parameter walk.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass

import numpy as np

from .errors import ArtifactError, ConfigError
from .quant import (
    ALLOWED_BITS,
    GroupDim,
    QuantConfig,
    QuantParams,
    QuantizedLayer,
    dequantize_values,
)
from .tensor import Tensor2D

_MAGIC = b"ADIM"
_VERSION = 1
_HEADER = struct.Struct("<4sHBBIII")


def pack_codes(codes, bits: int) -> bytes:
    """Pack integer codes LSB-first: code i occupies bits [i*b, (i+1)*b)."""
    if bits not in ALLOWED_BITS:
        raise ConfigError(f"bits must be one of {ALLOWED_BITS}, got {bits}")
    flat = np.ascontiguousarray(codes, dtype=np.uint8).ravel()
    if flat.size and int(flat.max()) >= (1 << bits):
        raise ConfigError(f"codes out of range for bits={bits}")
    if bits == 8:
        return flat.tobytes()
    bitmat = np.unpackbits(flat[:, None], axis=1, bitorder="little")[:, :bits]
    return np.packbits(bitmat.ravel(), bitorder="little").tobytes()


def unpack_codes(data: bytes, bits: int, n: int) -> np.ndarray:
    """Exact inverse of pack_codes for the first n codes."""
    if bits not in ALLOWED_BITS:
        raise ConfigError(f"bits must be one of {ALLOWED_BITS}, got {bits}")
    need = (n * bits + 7) // 8
    if len(data) < need:
        raise ArtifactError(f"payload holds {len(data)} bytes, {need} needed for {n} codes")
    if bits == 8:
        return np.frombuffer(data[:n], dtype=np.uint8).copy()
    if n == 0:
        return np.empty(0, dtype=np.uint8)
    bitvec = np.unpackbits(np.frombuffer(data[:need], dtype=np.uint8), bitorder="little")
    bitmat = bitvec[: n * bits].reshape(n, bits)
    padded = np.zeros((n, 8), dtype=np.uint8)
    padded[:, :bits] = bitmat
    return np.packbits(padded, axis=1, bitorder="little").ravel()


@dataclass
class PackedArtifact:
    """In-memory form of the packed file; see write_artifact for the layout."""

    bits: int
    dim: GroupDim
    oc: int
    ic: int
    group_size: int | None
    scales: np.ndarray
    zeros: np.ndarray
    payload: bytes

    @property
    def config(self) -> QuantConfig:
        return QuantConfig(bits=self.bits, group_size=self.group_size, dim=self.dim)

    @classmethod
    def from_layer(cls, layer: QuantizedLayer) -> "PackedArtifact":
        if layer.perm is not None:
            raise ConfigError(
                "layers with permuted group boundaries cannot be packed; "
                "this format stores no permutation"
            )
        return cls(
            bits=layer.config.bits,
            dim=layer.config.dim,
            oc=layer.oc,
            ic=layer.ic,
            group_size=layer.config.group_size,
            scales=layer.params.scales,
            zeros=layer.params.zeros,
            payload=pack_codes(layer.codes, layer.config.bits),
        )

    def to_layer(self) -> QuantizedLayer:
        codes = unpack_codes(self.payload, self.bits, self.oc * self.ic)
        return QuantizedLayer(
            codes=codes.reshape(self.oc, self.ic),
            params=QuantParams(dim=self.dim, scales=self.scales, zeros=self.zeros),
            config=self.config,
            oc=self.oc,
            ic=self.ic,
        )


def _param_shape(dim: GroupDim, oc: int, ic: int, g: int) -> tuple[int, int]:
    if dim is GroupDim.PER_OC:
        return oc, (ic + g - 1) // g
    return (oc + g - 1) // g, ic


def write_artifact(path, layer: QuantizedLayer) -> None:
    """Serialize a layer: 20-byte header, float32 scales, uint8 zeros,
    packed code payload, all little-endian."""
    art = PackedArtifact.from_layer(layer)
    gsz = 0 if art.group_size is None else art.group_size
    dimcode = 0 if art.dim is GroupDim.PER_OC else 1
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, art.bits, dimcode, art.oc, art.ic, gsz))
        f.write(np.ascontiguousarray(art.scales, dtype="<f4").tobytes())
        f.write(art.zeros.tobytes())
        f.write(art.payload)


def read_artifact(path) -> PackedArtifact:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ArtifactError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, bits, dimcode, oc, ic, gsz = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ArtifactError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise ArtifactError(f"{path}: unsupported version {version}")
    if bits not in ALLOWED_BITS:
        raise ArtifactError(f"{path}: illegal bits value {bits}")
    if dimcode not in (0, 1):
        raise ArtifactError(f"{path}: illegal dim code {dimcode}")
    dim = GroupDim.PER_OC if dimcode == 0 else GroupDim.PER_IC
    group_size = None if gsz == 0 else gsz
    g = group_size if group_size is not None else (ic if dim is GroupDim.PER_OC else oc)
    if g < 1:
        raise ArtifactError(f"{path}: illegal group size {gsz}")
    prows, pcols = _param_shape(dim, oc, ic, g)
    n_params = prows * pcols
    n_payload = (oc * ic * bits + 7) // 8
    expect = _HEADER.size + n_params * 5 + n_payload
    if len(raw) != expect:
        raise ArtifactError(
            f"{path}: expected {expect} bytes from header, file has {len(raw)}"
        )
    off = _HEADER.size
    scales = np.frombuffer(raw, dtype="<f4", count=n_params, offset=off)
    scales = scales.reshape(prows, pcols)
    off += n_params * 4
    zeros = np.frombuffer(raw, dtype=np.uint8, count=n_params, offset=off)
    zeros = zeros.reshape(prows, pcols)
    off += n_params
    payload = raw[off:]
    if not np.isfinite(scales).all() or not (scales > 0).all():
        raise ArtifactError(f"{path}: scales must be finite and positive")
    if int(zeros.max(initial=0)) > (1 << bits) - 1:
        raise ArtifactError(f"{path}: zero-points exceed the {bits}-bit range")
    return PackedArtifact(
        bits=bits, dim=dim, oc=oc, ic=ic, group_size=group_size,
        scales=scales.copy(), zeros=zeros.copy(), payload=payload,
    )


def stream_dequant(art: PackedArtifact, trace_hook=None) -> Tensor2D:
    """Dequantize straight from the artifact, bit-exact with the in-memory
    dequantizer.

    Per-IC walks the weight rows in g-row blocks; each block reads one
    scale row and one zero row, so the scale, zero, and weight streams all
    advance with non-decreasing addresses. Per-OC walks rows with natural
    row-major scale indexing. trace_hook(stream, start, end) receives the
    touched extent per access: byte offsets for scales/zeros, bit offsets
    for weights.
    """
    oc, ic, bits = art.oc, art.ic, art.bits
    g = art.group_size if art.group_size is not None else (
        ic if art.dim is GroupDim.PER_OC else oc
    )
    codes = unpack_codes(art.payload, bits, oc * ic).reshape(oc, ic)
    out = np.empty((oc, ic), dtype=np.float32)
    if art.dim is GroupDim.PER_IC:
        for k, r0 in enumerate(range(0, oc, g)):
            r1 = min(r0 + g, oc)
            if trace_hook is not None:
                trace_hook("scales", k * ic * 4, (k + 1) * ic * 4)
                trace_hook("zeros", k * ic, (k + 1) * ic)
                trace_hook("weights", r0 * ic * bits, r1 * ic * bits)
            out[r0:r1] = dequantize_values(
                codes[r0:r1], art.scales[k : k + 1, :], art.zeros[k : k + 1, :]
            )
    else:
        ngroups = art.scales.shape[1]
        col_group = np.arange(ic) // g
        for r in range(oc):
            if trace_hook is not None:
                trace_hook("scales", r * ngroups * 4, (r + 1) * ngroups * 4)
                trace_hook("zeros", r * ngroups, (r + 1) * ngroups)
                trace_hook("weights", r * ic * bits, (r + 1) * ic * bits)
            out[r] = dequantize_values(
                codes[r], art.scales[r, col_group], art.zeros[r, col_group]
            )
    return Tensor2D(out)


def _dequant_transposed(art: PackedArtifact) -> Tensor2D:
    """Same result via column-major traversal with strided parameter reads,
    the access pattern a transpose-style kernel would produce."""
    oc, ic, bits = art.oc, art.ic, art.bits
    g = art.group_size if art.group_size is not None else (
        ic if art.dim is GroupDim.PER_OC else oc
    )
    codes = unpack_codes(art.payload, bits, oc * ic).reshape(oc, ic)
    out = np.empty((oc, ic), dtype=np.float32)
    if art.dim is GroupDim.PER_IC:
        row_starts = np.arange(0, oc, g)
        counts = np.diff(np.append(row_starts, oc))
        for c in range(ic):
            s = np.repeat(art.scales[:, c], counts)
            z = np.repeat(art.zeros[:, c], counts)
            out[:, c] = dequantize_values(codes[:, c], s, z)
    else:
        for c in range(ic):
            k = c // g
            out[:, c] = dequantize_values(codes[:, c], art.scales[:, k], art.zeros[:, k])
    return Tensor2D(out)


@dataclass
class BenchReport:
    oc: int
    ic: int
    bits: int
    group_size: int
    dim: str
    repetitions: int
    checksum: float
    ns_per_element: dict[str, dict[str, float]]

    def as_dict(self) -> dict:
        return {
            "shape": [self.oc, self.ic],
            "bits": self.bits,
            "group_size": self.group_size,
            "dim": self.dim,
            "repetitions": self.repetitions,
            "checksum": self.checksum,
            "ns_per_element": self.ns_per_element,
        }


def _time_variant(fn, art: PackedArtifact, repetitions: int, checksum: float):
    n = art.oc * art.ic
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter_ns()
        out = fn(art)
        dt = time.perf_counter_ns() - t0
        if float(np.sum(out.data, dtype=np.float64)) != checksum:
            raise ConfigError("benchmark variant produced a different checksum")
        samples.append(dt / max(n, 1))
    return {
        "min": float(np.min(samples)),
        "median": float(np.median(samples)),
        "max": float(np.max(samples)),
    }


def bench_dequant(art: PackedArtifact, repetitions: int = 5) -> BenchReport:
    """Time the streaming dequantizer against the transposed-access variant.

    This measures, it does not assert a winner: one warmup pass, then
    min/median/max ns per element over the repetitions. The checksum of
    every timed output must match the reference pass, which also keeps the
    work observable.
    """
    if repetitions < 1:
        raise ConfigError(f"repetitions must be >= 1, got {repetitions}")
    ref = stream_dequant(art)  # warmup + reference
    checksum = float(np.sum(ref.data, dtype=np.float64))
    ns = {
        "stream": _time_variant(stream_dequant, art, repetitions, checksum),
        "transposed": _time_variant(_dequant_transposed, art, repetitions, checksum),
    }
    return BenchReport(
        oc=art.oc,
        ic=art.ic,
        bits=art.bits,
        group_size=0 if art.group_size is None else art.group_size,
        dim=art.dim.value,
        repetitions=repetitions,
        checksum=checksum,
        ns_per_element=ns,
    )
