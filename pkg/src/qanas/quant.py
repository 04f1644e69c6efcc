"""Fake-quantization kernels and model-size accounting.

Weights: symmetric, per output channel, integer range
``[-(2**(b-1) - 1), 2**(b-1) - 1]``. Activations: asymmetric 8-bit per
tensor, range ``[0, 255]``. Biases stay in float and are accounted at 32 bits.
Rounding is half-away-from-zero everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SYMMETRIC = "symmetric_per_channel"
ASYMMETRIC = "asymmetric_per_tensor"
BIAS_BITS = 32
ACTIVATION_BITS = 8


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass(frozen=True)
class QuantParams:
    bitwidth: int
    scheme: str
    scales: np.ndarray
    zero_points: np.ndarray
    channel_axis: int | None = None

    @property
    def qmin(self) -> int:
        if self.scheme == SYMMETRIC:
            return -(2 ** (self.bitwidth - 1) - 1)
        return 0

    @property
    def qmax(self) -> int:
        if self.scheme == SYMMETRIC:
            return 2 ** (self.bitwidth - 1) - 1
        return 2**self.bitwidth - 1

    def _broadcast(self, arr: np.ndarray, ndim: int) -> np.ndarray:
        if self.channel_axis is None:
            return arr.reshape(())
        shape = [1] * ndim
        shape[self.channel_axis] = -1
        return arr.reshape(shape)

    def to_dict(self) -> dict:
        return {
            "bitwidth": self.bitwidth,
            "scheme": self.scheme,
            "scales": [float(s) for s in self.scales],
            "zero_points": [int(z) for z in self.zero_points],
        }


def calibrate_weights(w: np.ndarray, bitwidth: int, channel_axis: int = -1) -> QuantParams:
    """Symmetric per-channel params: ``scale_c = max|w_c| / (2**(b-1) - 1)``.

    All-zero channels get scale 1.
    """
    w = np.asarray(w, dtype=float)
    if w.size == 0:
        raise ValueError("cannot calibrate an empty tensor")
    axis = channel_axis % w.ndim
    reduce_axes = tuple(i for i in range(w.ndim) if i != axis)
    maxabs = np.max(np.abs(w), axis=reduce_axes) if reduce_axes else np.abs(w)
    qmax = 2 ** (bitwidth - 1) - 1
    scales = np.where(maxabs > 0, maxabs / qmax, 1.0)
    return QuantParams(bitwidth, SYMMETRIC, scales, np.zeros(scales.shape, dtype=np.int64), axis)


def calibrate_activations(
    batch_min: float, batch_max: float, bitwidth: int = ACTIVATION_BITS
) -> QuantParams:
    """Asymmetric per-tensor params from an observed ``[min, max]`` range.

    The range is widened to include 0 so that zero is exactly representable.
    """
    if batch_min > batch_max:
        raise ValueError(f"min {batch_min} > max {batch_max}")
    batch_min, batch_max = min(batch_min, 0.0), max(batch_max, 0.0)
    levels = 2**bitwidth - 1
    scale = (batch_max - batch_min) / levels if batch_max > batch_min else 1.0
    zp = int(np.clip(round_half_away(np.float64(-batch_min / scale)), 0, levels))
    return QuantParams(bitwidth, ASYMMETRIC, np.array([scale]), np.array([zp]), None)


def fake_quantize(x: np.ndarray, params: QuantParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    scale = params._broadcast(np.asarray(params.scales, dtype=float), x.ndim)
    zp = params._broadcast(np.asarray(params.zero_points, dtype=float), x.ndim)
    q = np.clip(round_half_away(x / scale) + zp, params.qmin, params.qmax)
    return (q - zp) * scale


def ste_mask(x: np.ndarray, params: QuantParams) -> np.ndarray:
    """Where the clipped straight-through estimator lets gradient pass."""
    x = np.asarray(x, dtype=float)
    scale = params._broadcast(np.asarray(params.scales, dtype=float), x.ndim)
    zp = params._broadcast(np.asarray(params.zero_points, dtype=float), x.ndim)
    v = x / scale + zp
    return (v >= params.qmin) & (v <= params.qmax)


def ste_backward(upstream: np.ndarray, x: np.ndarray, params: QuantParams) -> np.ndarray:
    return np.where(ste_mask(x, params), upstream, 0.0)


class RangeTracker:
    """EMA of per-batch min/max, the activation calibration statistic."""

    def __init__(self, decay: float = 0.99):
        self.decay = decay
        self.min: float | None = None
        self.max: float | None = None

    def observe(self, x: np.ndarray) -> None:
        lo, hi = float(np.min(x)), float(np.max(x))
        if self.min is None:
            self.min, self.max = lo, hi
        else:
            d = self.decay
            self.min = d * self.min + (1 - d) * lo
            self.max = d * self.max + (1 - d) * hi

    def params(self, bitwidth: int = ACTIVATION_BITS) -> QuantParams:
        if self.min is None:
            return calibrate_activations(0.0, 0.0, bitwidth)
        return calibrate_activations(self.min, self.max, bitwidth)


@dataclass
class SizeReport:
    total_bits: int
    per_layer: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def kilobytes(self) -> float:
        return self.total_bits / 8192


def size_bits(
    weight_counts: Sequence[int],
    bias_counts: Sequence[int],
    bitwidths: Sequence[int],
    bias_bits: int = BIAS_BITS,
) -> SizeReport:
    if not len(weight_counts) == len(bias_counts) == len(bitwidths):
        raise ValueError("weight, bias and bitwidth lists differ in length")
    per_layer = []
    for i, (nw, nb, b) in enumerate(zip(weight_counts, bias_counts, bitwidths)):
        per_layer.append((i, int(nw) * int(b), int(nb) * bias_bits))
    total = sum(w + b for _, w, b in per_layer)
    return SizeReport(total, per_layer)


def model_size_bits(layers, policy) -> SizeReport:
    """Size of a materialized layer chain under a policy (``None`` = float32)."""
    weighted = [l for l in layers if l.quantizable]
    if policy is None:
        bits = [32] * len(weighted)
        bias_bits = BIAS_BITS
    else:
        bits = list(policy.weight_bitwidths)
        bias_bits = policy.bias_bitwidth
        if len(bits) != len(weighted):
            raise ValueError(
                f"policy has {len(bits)} entries, model has {len(weighted)} weighted layers"
            )
    return size_bits(
        [l.n_weights for l in weighted], [l.n_biases for l in weighted], bits, bias_bits
    )
