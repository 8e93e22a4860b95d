"""Analytic minimum-time feedback for the double integrator.

Ground truth for tests: the time-optimal control of x'' = u, |u| <= 1,
driving (x, y) to the origin, is bang-bang with a single switch on the
curve x = -y|y|/2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

_CURVE_TOL = 1e-12


@dataclass(frozen=True)
class PlantState:
    x: float
    y: float


def switching_function(x: float, y: float) -> float:
    """Signed distance proxy to the switching curve: x + y|y|/2."""
    return x + y * abs(y) / 2.0


def bang_bang_control(x: float, y: float) -> float:
    """Time-optimal feedback: +1 below the curve, -1 above, coast at origin."""
    delta = switching_function(x, y)
    if abs(delta) <= _CURVE_TOL:
        if abs(x) <= _CURVE_TOL and abs(y) <= _CURVE_TOL:
            return 0.0
        return -math.copysign(1.0, y)
    return 1.0 if delta < 0 else -1.0


def min_time(x: float, y: float) -> float:
    """Exact time to reach the origin under the bang-bang feedback."""
    delta = switching_function(x, y)
    if abs(delta) <= _CURVE_TOL:
        return abs(y)
    if delta < 0:
        return 2.0 * math.sqrt(y * y / 2.0 - x) - y
    return 2.0 * math.sqrt(y * y / 2.0 + x) + y
