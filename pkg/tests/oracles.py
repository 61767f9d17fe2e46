"""Independent scalar references used by the tests.

Everything here is written from the defining formulas with Python floats and
integers, without calling into the package's numerical code.
"""
from __future__ import annotations

import math


def round_half_away(x: float) -> float:
    return math.copysign(math.floor(abs(x) + 0.5), x)


def bitwidth(b: float) -> int:
    return min(max(int(round_half_away(b)), 2), 32)


def quant_params(scheme: str, b: float, r_v: float, v_max: float | None = None):
    """(s, Z, q_min, q_max, v_min, v_max) for one quantizer."""
    B = bitwidth(b)
    r_q = 2 ** B - 1
    s = r_v / r_q
    if scheme == "signed_symmetric":
        return s, 0, -(2 ** (B - 1)), 2 ** (B - 1) - 1, -r_v / 2, r_v / 2
    if scheme == "unsigned_symmetric":
        return s, 0, 0, r_q, 0.0, r_v
    Z = int(round_half_away(r_q - v_max * r_q / r_v))
    return s, Z, 0, r_q, v_max - r_v, v_max


def fake_quant(v: float, scheme: str, b: float, r_v: float, v_max: float | None = None) -> float:
    s, Z, q_min, q_max, _, _ = quant_params(scheme, b, r_v, v_max)
    q = min(max(round_half_away(v / s) + Z, q_min), q_max)
    return s * (q - Z)


def relaxed(v: float, scheme: str, b: float, r_v: float, v_max: float | None,
            frozen_round: float) -> float:
    """Fake quantizer with round(v/s) frozen (straight-through) and soft 2^b.

    Differentiating this in r_v or b reproduces the in-range gradients.
    """
    s = r_v / (2.0 ** b - 1)
    return s * frozen_round


def mse(a, b) -> float:
    return sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)
