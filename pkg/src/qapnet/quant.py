"""Scaled-integer fake quantization for weights and activations.

Weights use a symmetric signed grid whose scale is recomputed from the
largest unmasked magnitude on every call. Activations use an unsigned grid
whose scale is a learned parameter kept in log space. Rounding is treated
as the identity in the backward pass (straight-through estimator); the
clamp still blocks gradient outside the representable range.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FLOAT = "float32"

# initial value of the learned activation range, in line with ReLU6
ACT_SCALE_INIT = 6.0


def _check_bits(n):
    if n == FLOAT:
        return
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)):
        raise ValueError(f"bit width must be an integer or {FLOAT!r}, got {n!r}")
    if n < 2:
        raise ValueError(f"bit width must be >= 2, got {n}")


@dataclass
class QuantSpec:
    """Word lengths for weights and activations.

    ``"float32"`` disables the corresponding quantizer. First-layer inputs
    are never quantized and are counted as ``input_bits`` wide.
    """

    weight_bits: int | str = FLOAT
    act_bits: int | str = FLOAT
    input_bits: int = 32
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_bits(self.weight_bits)
        _check_bits(self.act_bits)

    @classmethod
    def uniform(cls, bits):
        """Same width for weights and activations; ``bits`` may be ``"float32"``."""
        if isinstance(bits, str) and bits != FLOAT:
            bits = int(bits)
        return cls(weight_bits=bits, act_bits=bits)

    def layer_bits(self, index):
        """(weight_bits, act_bits) for dense layer ``index``, honoring overrides."""
        w, a = self.overrides.get(index, (self.weight_bits, self.act_bits))
        return w, a

    @property
    def label(self):
        if self.weight_bits == FLOAT and self.act_bits == FLOAT:
            return FLOAT
        if self.weight_bits == self.act_bits:
            return f"{self.weight_bits}bit"
        return f"w{self.weight_bits}a{self.act_bits}"

    def to_dict(self):
        return {
            "weight_bits": self.weight_bits,
            "act_bits": self.act_bits,
            "input_bits": self.input_bits,
            "overrides": {str(k): list(v) for k, v in self.overrides.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            weight_bits=d["weight_bits"],
            act_bits=d["act_bits"],
            input_bits=d.get("input_bits", 32),
            overrides={int(k): tuple(v) for k, v in d.get("overrides", {}).items()},
        )


def bit_width(n):
    """Numeric width used for complexity accounting (float32 counts as 32)."""
    return 32 if n == FLOAT else int(n)


def int_bounds(n, signed):
    """Integer clamp thresholds for an ``n``-bit word.

    Signed grids are symmetric, so the most negative code is unused.
    """
    if n < 2:
        raise ValueError(f"bit width must be >= 2, got {n}")
    if signed:
        hi = 2 ** (n - 1) - 1
        return -hi, hi
    return 0, 2**n - 1


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize(x, s, y_min, y_max):
    """``s * clamp(round(x / s), y_min, y_max)``, elementwise."""
    if not s > 0:
        raise ValueError(f"scale must be positive, got {s}")
    return s * np.clip(round_half_away(np.asarray(x, dtype=np.float64) / s), y_min, y_max)


def clamp_only(x, s, y_min, y_max):
    """The quantizer with rounding removed; its derivative is the STE gradient."""
    if not s > 0:
        raise ValueError(f"scale must be positive, got {s}")
    return s * np.clip(np.asarray(x, dtype=np.float64) / s, y_min, y_max)


def weight_scale(w, n, mask=None):
    """Per-tensor weight scale chosen so the largest unmasked magnitude is exact.

    Returns ``(scale, max_abs)``. An all-zero tensor gets a tiny positive
    scale so that every quantized entry is 0.
    """
    w = np.asarray(w, dtype=np.float64)
    if mask is not None:
        w = np.where(mask, w, 0.0)
    max_abs = float(np.max(np.abs(w))) if w.size else 0.0
    _, hi = int_bounds(n, signed=True)
    if max_abs == 0.0:
        return float(np.finfo(np.float64).eps), 0.0
    return max_abs / hi, max_abs


def act_scale(log_s_learned, n):
    """Activation scale from the log-space learned range."""
    return float(np.exp(log_s_learned)) / 2 ** (n - 1)


def fake_quant_weight(w, mask, n, rounding=True):
    """Effective weights and the STE pass-through mask.

    With ``n == "float32"`` the effective weights are the masked master
    weights and every unmasked entry passes gradient. Otherwise entries pass
    gradient iff they lie inside the clamp range. Because the scale tracks
    the maximum, the comparison is done against that maximum directly, which
    keeps the largest weight from being blocked by a rounding ulp.
    """
    wm = np.where(mask, w, 0.0)
    if n == FLOAT:
        return wm, mask
    s, max_abs = weight_scale(wm, n)
    lo, hi = int_bounds(n, signed=True)
    q = quantize(wm, s, lo, hi) if rounding else clamp_only(wm, s, lo, hi)
    passes = mask & (np.abs(wm) <= max_abs)
    return q, passes


@dataclass
class ActQuantizer:
    """Unsigned activation quantizer with a learned, log-parameterized range."""

    bits: int
    log_scale: np.ndarray = None

    def __post_init__(self):
        int_bounds(self.bits, signed=False)
        if self.log_scale is None:
            self.log_scale = np.array(np.log(ACT_SCALE_INIT))
        else:
            self.log_scale = np.array(self.log_scale, dtype=np.float64)

    @property
    def scale(self):
        return act_scale(self.log_scale, self.bits)

    def forward(self, x, rounding=True):
        """Return ``(y, cache)`` for non-negative input ``x``."""
        s = self.scale
        lo, hi = int_bounds(self.bits, signed=False)
        r = x / s
        y = quantize(x, s, lo, hi) if rounding else clamp_only(x, s, lo, hi)
        return y, (r, s, hi)

    @staticmethod
    def backward(dy, cache):
        """Gradients w.r.t. the input and the log-scale parameter.

        Only saturated elements contribute to the scale gradient: in range the
        STE output is ``x`` itself, independent of the scale.
        """
        r, s, hi = cache
        inside = (r >= 0) & (r <= hi)
        above = r > hi
        dx = np.where(inside, dy, 0.0)
        dlog = float(np.sum(dy[above])) * hi * s
        return dx, dlog
