"""Synthetic layer workloads with planted activation-outlier channels.

The generator plants k hidden channels whose activations are alpha times
larger than the rest, and gives the matching weight columns a mean offset
of the same relative magnitude with alternating signs. Without that
offset the weight statistics are identical in every direction and the
grouping dimension would not matter; with it, per-OC groups that mix an
offset column inflate their fitted range for all members, while per-IC
groups keep each offset column on its own grid. At alpha=1 the offset
vanishes and the workload degenerates to plain i.i.d. tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor2D


@dataclass(frozen=True)
class SyntheticSpec:
    oc: int = 256
    ic: int = 256
    tokens: int = 512
    outlier_channels: int = 8
    outlier_factor: float = 20.0
    seed: int = 0
    weight_scale: float = 1.0

    def __post_init__(self) -> None:
        if min(self.oc, self.ic, self.tokens) < 1:
            raise ConfigError("oc, ic, and tokens must all be >= 1")
        if not 0 <= self.outlier_channels <= self.ic:
            raise ConfigError(
                f"outlier_channels must lie in [0, ic], got {self.outlier_channels}"
            )
        if self.outlier_factor < 1:
            raise ConfigError(f"outlier_factor must be >= 1, got {self.outlier_factor}")
        if self.weight_scale <= 0:
            raise ConfigError(f"weight_scale must be positive, got {self.weight_scale}")


def gen_synthetic(spec: SyntheticSpec) -> tuple[Tensor2D, Tensor2D, np.ndarray]:
    """Deterministic (W, X, outlier_idx) for a spec.

    Draw order is fixed (indices, then X, then W) so a seed pins the
    streams forever. X is i.i.d. standard normal with the outlier columns
    scaled by alpha; W is i.i.d. normal with std weight_scale/sqrt(ic),
    plus the matched mean offset of (alpha-1)*std on the outlier columns,
    signs alternating across them.
    """
    rng = np.random.default_rng(spec.seed)
    k = spec.outlier_channels
    idx = np.sort(rng.choice(spec.ic, size=k, replace=False)) if k else np.empty(0, np.int64)
    x = rng.standard_normal((spec.tokens, spec.ic))
    x[:, idx] *= spec.outlier_factor
    std = spec.weight_scale / np.sqrt(spec.ic)
    w = rng.standard_normal((spec.oc, spec.ic)) * std
    signs = np.where(np.arange(k) % 2 == 0, 1.0, -1.0)
    w[:, idx] += signs * ((spec.outlier_factor - 1.0) * std)
    return Tensor2D(w), Tensor2D(x), idx.astype(np.int64)
