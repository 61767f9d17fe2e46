"""Fake quantizers with trainable soft bitwidth, range scale and offset.

Three schemes are supported. Weights use signed symmetric codes, ReLU and
exponential outputs use unsigned codes, and everything else (hash codebook,
encodings, sigmoid output) uses asymmetric codes with a trainable upper
bound ``v_max``.

All array functions are pure and work elementwise on numpy arrays of any
shape; the dtype of ``v`` is preserved.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

B_MIN, B_MAX = 2, 32
MIN_RANGE = 1e-6
LN2 = math.log(2.0)


class QuantScheme(str, Enum):
    SIGNED_SYMMETRIC = "signed_symmetric"
    UNSIGNED_SYMMETRIC = "unsigned_symmetric"
    ASYMMETRIC = "asymmetric"


@dataclass
class QuantizerState:
    scheme: QuantScheme
    b: float = 8.0
    r_v: float = 1.0
    v_max: float | None = None
    frozen_exempt: bool = False

    def __post_init__(self):
        self.scheme = QuantScheme(self.scheme)
        if self.scheme is QuantScheme.ASYMMETRIC and self.v_max is None:
            self.v_max = self.r_v

    @property
    def bits(self) -> int:
        return round_bitwidth(self.b)


@dataclass(frozen=True)
class QuantParams:
    """Integer/derived quantities for one forward pass."""

    B: int
    r_q: int
    s: float
    Z: int
    q_min: int
    q_max: int
    v_min: float
    v_max: float


def round_half_away(x):
    """Round to nearest, ties away from zero."""
    x = np.asarray(x)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def _round_scalar(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def clamp_soft_bitwidth(b: float) -> float:
    return min(max(float(b), float(B_MIN)), float(B_MAX))


def round_bitwidth(b: float) -> int:
    return int(min(max(_round_scalar(b), B_MIN), B_MAX))


def derive_params(state: QuantizerState) -> QuantParams:
    if not state.r_v > 0:
        raise ValueError(f"range scale r_v must be positive, got {state.r_v}")
    B = round_bitwidth(state.b)
    r_q = 2 ** B - 1
    r_v = float(state.r_v)
    s = r_v / r_q
    if state.scheme is QuantScheme.SIGNED_SYMMETRIC:
        q_min, q_max = -(2 ** (B - 1)), 2 ** (B - 1) - 1
        return QuantParams(B, r_q, s, 0, q_min, q_max, -r_v / 2, r_v / 2)
    if state.scheme is QuantScheme.UNSIGNED_SYMMETRIC:
        return QuantParams(B, r_q, s, 0, 0, r_q, 0.0, r_v)
    v_max = float(state.v_max)
    Z = _round_scalar(r_q - v_max * r_q / r_v)
    return QuantParams(B, r_q, s, Z, 0, r_q, v_max - r_v, v_max)


def _params(state_or_params) -> QuantParams:
    if isinstance(state_or_params, QuantParams):
        return state_or_params
    return derive_params(state_or_params)


def integer_quantize(v, state) -> np.ndarray:
    """Integer codes clamp(round(v/s) + Z) as int64."""
    p = _params(state)
    v = np.asarray(v)
    dt = v.dtype if v.dtype.kind == "f" else np.dtype(np.float64)
    v = v.astype(dt, copy=False)
    codes = np.clip(round_half_away(v / np.asarray(p.s, dtype=dt)) + p.Z, p.q_min, p.q_max)
    return np.clip(codes.astype(np.int64), p.q_min, p.q_max)


def dequantize(codes, state, dtype=np.float64) -> np.ndarray:
    p = _params(state)
    codes = np.asarray(codes)
    if codes.size and (codes.min() < p.q_min or codes.max() > p.q_max):
        raise ValueError(f"codes outside [{p.q_min}, {p.q_max}]")
    return (np.asarray(p.s, dtype=dtype) * (codes - p.Z).astype(dtype)).astype(dtype)


def fake_quantize(v, state) -> np.ndarray:
    p = _params(state)
    v = np.asarray(v)
    dt = v.dtype if v.dtype.kind == "f" else np.dtype(np.float64)
    v = v.astype(dt, copy=False)
    s = np.asarray(p.s, dtype=dt)
    codes = np.clip(round_half_away(v / s) + p.Z, p.q_min, p.q_max)
    return (s * (codes - p.Z)).astype(dt)


def in_range(v, state) -> np.ndarray:
    """Closed interval test v_min <= v <= v_max used by all gradient branches."""
    p = _params(state)
    v = np.asarray(v)
    return (v >= p.v_min) & (v <= p.v_max)


def grad_input(v, state) -> np.ndarray:
    v = _float(v)
    return in_range(v, state).astype(v.dtype)


def _rounding_residual(v, p: QuantParams):
    """v - s*round(v/s), the in-range quantization error with sign flipped."""
    s = np.asarray(p.s, dtype=v.dtype)
    return v - s * round_half_away(v / s)


def _float(v) -> np.ndarray:
    v = np.asarray(v)
    return v if v.dtype.kind == "f" else v.astype(np.float64)


def grad_rv(v, state: QuantizerState) -> np.ndarray:
    return _grad_rv(_float(v), derive_params(state), state.scheme)


def _grad_rv(v, p: QuantParams, scheme: QuantScheme) -> np.ndarray:
    r_v = p.s * p.r_q
    inside = -_rounding_residual(v, p) / r_v
    if scheme is QuantScheme.SIGNED_SYMMETRIC:
        over, under = p.q_max / p.r_q, p.q_min / p.r_q
    elif scheme is QuantScheme.UNSIGNED_SYMMETRIC:
        over, under = 1.0, 0.0
    else:
        under = -p.v_max / r_v - p.Z / p.r_q
        over = 1.0 + under
    out = np.where(v > p.v_max, over, np.where(v < p.v_min, under, inside))
    return out.astype(v.dtype)


def grad_b(v, state: QuantizerState) -> np.ndarray:
    return _grad_b(_float(v), derive_params(state), state.scheme)


def _grad_b(v, p: QuantParams, scheme: QuantScheme) -> np.ndarray:
    k = 2.0 ** p.B * LN2 / p.r_q
    inside = _rounding_residual(v, p) * k
    if scheme is QuantScheme.SIGNED_SYMMETRIC:
        over = (p.v_max - p.q_max * p.s) * k
        under = (p.v_min - p.q_min * p.s) * k
    elif scheme is QuantScheme.UNSIGNED_SYMMETRIC:
        over = under = 0.0
    else:
        # factor (v_min + s*Z) taken as written for both overflow and underflow
        over = under = (p.v_min + p.s * p.Z) * k
    out = np.where(v > p.v_max, over, np.where(v < p.v_min, under, inside))
    return out.astype(v.dtype)


def grad_vmax(v, state) -> np.ndarray:
    if state.scheme is not QuantScheme.ASYMMETRIC:
        raise ValueError(f"v_max is not trainable under {state.scheme.value}")
    v = _float(v)
    return (~in_range(v, state)).astype(v.dtype)


def ptq_calibrate(samples, scheme: QuantScheme | str, b_init: float = 8.0) -> QuantizerState:
    """Min/max calibration of the range scale (and v_max for asymmetric)."""
    scheme = QuantScheme(scheme)
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("calibration needs at least one sample")
    lo, hi = float(x.min()), float(x.max())
    v_max = None
    if scheme is QuantScheme.SIGNED_SYMMETRIC:
        r_v = 2.0 * max(abs(lo), abs(hi))
    elif scheme is QuantScheme.UNSIGNED_SYMMETRIC:
        r_v = max(hi, 0.0)
    else:
        r_v = hi - lo
        v_max = hi
    r_v = max(r_v, MIN_RANGE)
    if v_max is not None and hi - lo < MIN_RANGE:
        v_max = lo + r_v
    return QuantizerState(scheme, b=clamp_soft_bitwidth(b_init), r_v=r_v, v_max=v_max)


def fake_quant_with_grads(v: np.ndarray, state: QuantizerState):
    """Forward value plus the per-element partials needed by the tape op.

    Returns ``(v_hat, d_input, d_rv, d_b, d_vmax)``; ``d_vmax`` is None for
    symmetric schemes.
    """
    p = derive_params(state)
    v_hat = fake_quantize(v, p)
    d_in = ((v >= p.v_min) & (v <= p.v_max))
    d_rv = _grad_rv(v, p, state.scheme)
    d_b = _grad_b(v, p, state.scheme)
    d_vmax = None
    if state.scheme is QuantScheme.ASYMMETRIC:
        d_vmax = ~d_in
    return v_hat, d_in, d_rv, d_b, d_vmax
