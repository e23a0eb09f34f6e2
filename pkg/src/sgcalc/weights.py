"""Muckenhoupt and reverse-Hoelder characteristics of vertex weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveWeight
from .space import Space, radius_grid


@dataclass(frozen=True)
class Weight:
    values: np.ndarray
    name: str = "weight"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(v)) or (v <= 0).any():
            raise NonPositiveWeight("weights must be finite and > 0")
        object.__setattr__(self, "values", v)


def _w(w) -> np.ndarray:
    return w.values if isinstance(w, Weight) else Weight(np.asarray(w, dtype=float)).values


def _ball_averages(space: Space, radii, *fields):
    """Yield the tuple of ball averages of ``fields`` for every radius."""
    mu = space.measure
    radii = radius_grid(space) if radii is None else np.asarray(radii, dtype=float)
    for r in radii:
        mask = space.ball_mask(r).astype(float)
        mass = mask @ mu
        yield tuple((mask @ (f * mu)) / mass for f in fields)


def ap_characteristic(space: Space, w, p: float, radii=None) -> float:
    """``max_Q (avg_Q w) (avg_Q w^{-1/(p-1)})^{p-1}``."""
    if not 1 < p < math.inf:
        raise ValueError("p must lie in (1, inf)")
    w = _w(w)
    best = 1.0
    for a, b in _ball_averages(space, radii, w, w ** (-1.0 / (p - 1.0))):
        best = max(best, float((a * b ** (p - 1.0)).max()))
    return best


def rh_characteristic(space: Space, w, q: float, radii=None) -> float:
    """``max_Q (avg_Q w^q)^{1/q} / avg_Q w``; exactly 1 for ``q = 1``."""
    if not 1 <= q < math.inf:
        raise ValueError("q must lie in [1, inf)")
    if q == 1:
        return 1.0
    w = _w(w)
    best = 1.0
    for a, b in _ball_averages(space, radii, w**q, w):
        best = max(best, float((a ** (1.0 / q) / b).max()))
    return best


def duality_transform(w, p: float) -> Weight:
    """``w^{1 - p'}`` with ``p' = p / (p - 1)``."""
    if not p > 1:
        raise ValueError("p must be > 1")
    pc = p / (p - 1.0)
    name = w.name if isinstance(w, Weight) else "weight"
    return Weight(_w(w) ** (1.0 - pc), f"dual({name}, {p})")


def weighted_norm(space: Space, f, p: float, w=None) -> float:
    """``(sum |f|^p w mu)^{1/p}``; ``max |f|`` for ``p = inf``."""
    if not p > 0:
        raise ValueError("p must be > 0")
    f = np.asarray(f, dtype=float)
    if math.isinf(p):
        return float(np.abs(f).max())
    w = np.ones(space.n) if w is None else _w(w)
    return float(np.sum(np.abs(f) ** p * w * space.measure) ** (1.0 / p))


def power_weight(space: Space, alpha: float, x0: int | None = None) -> Weight:
    """``(1 + d(x0, x))^alpha``; ``x0`` defaults to the central vertex."""
    x0 = space.center_vertex() if x0 is None else x0
    return Weight((1.0 + space.metric[x0]) ** alpha, f"power({alpha})")


def checkerboard_weight(space: Space, a: float, b: float) -> Weight:
    """``a`` on even and ``b`` on odd vertices (parity of coordinate sum when available)."""
    if space.coords is not None:
        parity = np.round(space.coords.sum(axis=1)).astype(int) % 2
    else:
        parity = np.arange(space.n) % 2
    return Weight(np.where(parity == 0, a, b), f"checkerboard({a},{b})")


def constant_weight(space: Space, c: float = 1.0) -> Weight:
    return Weight(np.full(space.n, float(c)), f"constant({c})")


def make_weight(space: Space, spec: dict | None) -> Weight:
    """Weight from a config block ``{family: constant|power|checkerboard, ...}``."""
    if not spec:
        return constant_weight(space)
    kind = spec.get("family", "constant")
    if kind == "constant":
        return constant_weight(space, spec.get("c", 1.0))
    if kind == "power":
        return power_weight(space, spec["alpha"], spec.get("x0"))
    if kind == "checkerboard":
        return checkerboard_weight(space, spec["a"], spec["b"])
    raise ValueError(f"unknown weight family {kind!r}")
