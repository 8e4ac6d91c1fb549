"""Column-iterative quantization with Hessian error compensation.

The solver walks the weight columns (optionally in descending activation
order), quantizes each with the group quantizer, and pushes the scaled
rounding error into the not-yet-quantized columns through the upper
Cholesky factor of the inverse calibration Hessian. Per-OC groups can be
fitted dynamically at group boundaries or precomputed from the original
weights (static groups); per-IC groups are refitted from the current
column every step, which is what lets a column's own updates stay inside
that column's groups.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ConfigError, NumericError, ShapeError
from .quant import (
    GroupDim,
    QuantConfig,
    QuantParams,
    QuantizedLayer,
    _fit_arrays,
    dequantize_values,
    quantize_values,
    rtn_quantize,
)
from .tensor import Tensor2D


@dataclass(frozen=True)
class GptqOptions:
    act_order: bool = False
    static_groups: bool = False
    damp_percent: float = 0.01
    dim: GroupDim | None = None

    def __post_init__(self) -> None:
        if self.damp_percent < 0:
            raise ConfigError(f"damp_percent must be >= 0, got {self.damp_percent}")
        if self.static_groups and self.dim is GroupDim.PER_IC:
            raise ConfigError("static_groups is only defined for per-OC grouping")


def default_gptq_options(dim: GroupDim, damp_percent: float = 0.01) -> GptqOptions:
    """Best-known mode per dimension: reorder for per-IC, reorder+static for per-OC."""
    if dim is GroupDim.PER_IC:
        return GptqOptions(act_order=True, static_groups=False,
                           damp_percent=damp_percent, dim=dim)
    return GptqOptions(act_order=True, static_groups=True,
                       damp_percent=damp_percent, dim=dim)


@dataclass
class HessianState:
    """Running H = 2 * sum(X^T X) over calibration batches, float64."""

    h: np.ndarray
    nsamples: int = 0

    def __post_init__(self) -> None:
        self.h = np.asarray(self.h, dtype=np.float64)
        if self.h.ndim != 2 or self.h.shape[0] != self.h.shape[1]:
            raise ShapeError(f"Hessian must be square, got {self.h.shape}")


@dataclass
class UpdateTrace:
    """Per-column quantization error magnitude, indexed by original column.

    err_mag[c] = ||(w_c - w_hat_c) / d_c||_2 recorded when column c was
    quantized; d_c is the corresponding diagonal entry of the Cholesky
    factor, so err_mag is exactly the magnitude of the compensation update
    broadcast into the remaining columns.
    """

    err_mag: np.ndarray
    perm: np.ndarray
    total_mass: float = field(init=False)

    def __post_init__(self) -> None:
        self.err_mag = np.asarray(self.err_mag, dtype=np.float64)
        if (self.err_mag < 0).any():
            raise ConfigError("update magnitudes cannot be negative")
        self.total_mass = float(self.err_mag.sum())


def accumulate_hessian(state: HessianState | None, x: Tensor2D) -> HessianState:
    """Add a calibration batch: H += 2 * X^T X, explicitly symmetrized."""
    xd = x.data.astype(np.float64)
    ic = x.cols
    if state is None:
        state = HessianState(h=np.zeros((ic, ic)), nsamples=0)
    if state.h.shape[0] != ic:
        raise ShapeError(
            f"batch has {ic} columns but Hessian is {state.h.shape[0]}x{state.h.shape[0]}"
        )
    m = xd.T @ xd
    h = state.h + (m + m.T)  # 2*X^T X, symmetric to the last bit
    return HessianState(h=h, nsamples=state.nsamples + x.rows)


def _prepare(h: np.ndarray, damp_percent: float):
    """Dead-fix, damp, and factor: returns (U with U^T U = H^-1, dead mask)."""
    h = h.copy()
    diag = np.einsum("ii->i", h)
    dead = diag == 0
    diag[dead] = 1.0
    damp = damp_percent * float(np.mean(diag))
    diag += damp
    try:
        factor = scipy.linalg.cho_factor(h, lower=False)
        hinv = scipy.linalg.cho_solve(factor, np.eye(h.shape[0]))
        u = scipy.linalg.cholesky(hinv, lower=False)
    except np.linalg.LinAlgError as e:
        raise NumericError(
            f"damped Hessian is not positive-definite ({e}); raise damp_percent"
        ) from e
    return u, dead


def prepare_hessian(state: HessianState, damp_percent: float = 0.01):
    """Upper Cholesky factor U of the damped inverse Hessian, plus dead columns.

    Columns whose H diagonal is exactly zero never saw activation mass;
    they get a unit diagonal so the factorization stays defined, and their
    indices are returned so the solver can zero the matching weights.
    """
    u, dead = _prepare(state.h, damp_percent)
    return u, np.flatnonzero(dead)


def act_order_perm(state: HessianState) -> np.ndarray:
    """Column order of descending diag(H); ties keep ascending index order."""
    return np.argsort(-np.diag(state.h), kind="stable")


def static_group_params(w: Tensor2D, config: QuantConfig) -> QuantParams:
    """Per-OC group params fitted on the original weights, before any
    reordering or compensation updates touch them."""
    if config.dim is not GroupDim.PER_OC:
        raise ConfigError("static group params are only defined for per-OC grouping")
    return rtn_quantize(w, config).params


def gptq_quantize(
    w: Tensor2D,
    state: HessianState,
    config: QuantConfig,
    opts: GptqOptions | None = None,
) -> tuple[QuantizedLayer, UpdateTrace]:
    """Quantize W column by column, compensating rounding error via H^-1.

    Per column j (in permuted order when act_order is set): fit or look up
    the group params, quantize, record err = (w_j - w_hat_j) / U[j][j],
    and subtract outer(err, U[j, j+1:]) from the remaining columns. Codes
    and params are returned in original column order; the one exception is
    per-OC dynamic groups under act_order, whose params keep the permuted
    group boundaries and carry the permutation on the layer.
    """
    if opts is None:
        opts = GptqOptions()
    if opts.dim is not None and opts.dim is not config.dim:
        raise ConfigError(
            f"options request dim={opts.dim.value} but config has {config.dim.value}"
        )
    dim = config.dim
    if opts.static_groups and dim is not GroupDim.PER_OC:
        raise ConfigError("static_groups is only defined for per-OC grouping")
    oc, ic = w.shape
    if state.h.shape != (ic, ic):
        raise ShapeError(
            f"Hessian is {state.h.shape} but W has {ic} input channels"
        )
    g = config.effective_group(oc, ic)
    bits = config.bits

    wk = w.data.astype(np.float64)
    diag = np.diag(state.h)
    dead = np.flatnonzero(diag == 0)
    wk[:, dead] = 0.0

    perm = act_order_perm(state) if opts.act_order else np.arange(ic)
    wk = wk[:, perm]
    u, _ = _prepare(state.h[np.ix_(perm, perm)], opts.damp_percent)

    n_cgroups = (ic + g - 1) // g if dim is GroupDim.PER_OC else 0
    if dim is GroupDim.PER_OC:
        if opts.static_groups:
            static_params = static_group_params(w, config)
        else:
            dyn_scales = np.empty((oc, n_cgroups), dtype=np.float32)
            dyn_zeros = np.empty((oc, n_cgroups), dtype=np.uint8)
    else:
        row_starts = np.arange(0, oc, g)
        row_counts = np.diff(np.append(row_starts, oc))
        ic_scales = np.empty((len(row_starts), ic), dtype=np.float32)
        ic_zeros = np.empty((len(row_starts), ic), dtype=np.uint8)

    codes_p = np.empty((oc, ic), dtype=np.uint8)
    err_mag = np.zeros(ic)
    s_cur = z_cur = None
    for j in range(ic):
        wcol = wk[:, j]
        wcol32 = wcol.astype(np.float32)
        if dim is GroupDim.PER_OC:
            if opts.static_groups:
                k = perm[j] // g
                s = static_params.scales[:, k]
                z = static_params.zeros[:, k]
            else:
                if j % g == 0:
                    blk = wk[:, j : j + g].astype(np.float32)
                    s_cur, z_cur = _fit_arrays(blk.min(axis=1), blk.max(axis=1), bits)
                    dyn_scales[:, j // g] = s_cur
                    dyn_zeros[:, j // g] = z_cur
                s, z = s_cur, z_cur
        else:
            vmin = np.minimum.reduceat(wcol32, row_starts)
            vmax = np.maximum.reduceat(wcol32, row_starts)
            s_g, z_g = _fit_arrays(vmin, vmax, bits)
            ic_scales[:, perm[j]] = s_g
            ic_zeros[:, perm[j]] = z_g
            s = np.repeat(s_g, row_counts)
            z = np.repeat(z_g, row_counts)
        cj = quantize_values(wcol32, s, z, bits)
        qj = dequantize_values(cj, s, z)
        codes_p[:, j] = cj
        err = (wcol - qj.astype(np.float64)) / u[j, j]
        err_mag[perm[j]] = np.linalg.norm(err)
        if j + 1 < ic:
            wk[:, j + 1 :] -= np.outer(err, u[j, j + 1 :])

    inv = np.argsort(perm)
    codes = np.ascontiguousarray(codes_p[:, inv])
    layer_perm = None
    if dim is GroupDim.PER_OC:
        if opts.static_groups:
            params = static_params
        else:
            params = QuantParams(dim=dim, scales=dyn_scales, zeros=dyn_zeros)
            if opts.act_order:
                layer_perm = perm
    else:
        params = QuantParams(dim=dim, scales=ic_scales, zeros=ic_zeros)
    layer = QuantizedLayer(
        codes=codes, params=params, config=config, oc=oc, ic=ic, perm=layer_perm
    )
    return layer, UpdateTrace(err_mag=err_mag, perm=perm)
