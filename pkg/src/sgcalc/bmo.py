"""Semigroup BMO, classical BMO, Carleson measures and sharp maximal functions.

Every sup over (scale, ball) runs over the scale grid with the coupling
``r_Q = t^{1/m}``; balls are closed and centered at vertices.  Scales whose
radius reaches the diameter are kept and flagged as saturated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .space import Space, radius_grid
from .spectral import (
    Generator,
    ScaleGrid,
    SpectralFunction,
    _as_columns,
    _mode_values,
    cancellation,
    heat,
    make_grid,
    psi,
)


@dataclass
class BmoReport:
    norm: float
    witness: dict  # center, radius, t
    per_scale: list = field(default_factory=list)  # dicts: t, radius, sup, center, saturated

    def to_dict(self) -> dict:
        return {"norm": self.norm, "witness": self.witness, "per_scale": self.per_scale}


@dataclass
class CarlesonReport:
    k: int
    norm: float
    witness: dict

    def to_dict(self) -> dict:
        return {"k": self.k, "norm": self.norm, "witness": self.witness}


def _scale_fields(gen: Generator, g: SpectralFunction, ts, F):
    """Yield ``(j, g(t_j L) F)`` for every scale, one inverse transform per scale."""
    basis = gen.basis
    C = basis.forward(F)
    vals = _mode_values(basis, g, ts)
    for j in range(len(ts)):
        yield j, basis.inverse(vals[j][:, None] * C)


class _MaskCache:
    """Ball masks keyed by the set of distances they include."""

    def __init__(self, space: Space):
        self.space = space
        self.levels = np.unique(space.metric)
        self._key = None
        self._mask = None
        self._mass = None

    def get(self, radius: float):
        key = int(np.searchsorted(self.levels, radius * (1 + 1e-12) + 1e-12, side="right"))
        if key != self._key:
            self._key = key
            self._mask = self.space.ball_mask(radius).astype(float)
            self._mass = self._mask @ self.space.measure
        return self._mask, self._mass


def _averages(cache: _MaskCache, radius: float, V: np.ndarray) -> np.ndarray:
    """``mu(B(c, r))^{-1} sum_{B(c, r)} V mu`` for every center ``c``; ``V`` is (n, k)."""
    mask, mass = cache.get(radius)
    return (mask @ (V * cache.space.measure[:, None])) / mass[:, None]


def _best(avg: np.ndarray):
    """Per-column max and its lowest-index argmax."""
    idx = np.argmax(avg, axis=0)
    return avg[idx, np.arange(avg.shape[1])], idx


def bmo_l_norms(gen: Generator, F, grid: ScaleGrid | None = None, variant: str = "l1",
                kappa: int | None = None) -> list[BmoReport]:
    """``bmo_l_norm`` for every column of ``F`` (shared ball masks).

    ``variant="l2"`` uses root-mean-square ball averages; ``kappa`` replaces
    ``f - e^{-tL} f`` by ``(1 - e^{-tL})^kappa f``.
    """
    grid = grid or make_grid(gen)
    F, _ = _as_columns(F)
    k = F.shape[1]
    ts = grid.t_values
    diam = gen.space.diameter
    cache = _MaskCache(gen.space)
    g = cancellation(kappa) if kappa else heat()
    best = np.full(k, -1.0)
    wit = [None] * k
    per_scale = [[] for _ in range(k)]
    for j, G in _scale_fields(gen, g, ts, F):
        D = G if kappa else F - G
        D = D * D if variant == "l2" else np.abs(D)
        r = ts[j] ** (1.0 / gen.m)
        avg = _averages(cache, r, D)
        if variant == "l2":
            avg = np.sqrt(np.maximum(avg, 0.0))
        sup, idx = _best(avg)
        for c in range(k):
            per_scale[c].append({"t": float(ts[j]), "radius": float(r), "sup": float(sup[c]),
                                 "center": int(idx[c]), "saturated": bool(r >= diam)})
            if sup[c] > best[c]:
                best[c] = sup[c]
                wit[c] = {"center": int(idx[c]), "radius": float(r), "t": float(ts[j])}
    return [BmoReport(float(best[c]), wit[c], per_scale[c]) for c in range(k)]


def bmo_l_norm(gen: Generator, f, grid: ScaleGrid | None = None, variant: str = "l1") -> BmoReport:
    """``sup_{t, Q: r_Q = t^{1/m}} mu(Q)^{-1} int_Q |f - e^{-tL} f| dmu``."""
    return bmo_l_norms(gen, np.asarray(f, dtype=float)[:, None], grid, variant)[0]


def bmo_classical_norm(space: Space, f, radii=None) -> float:
    """``max_Q mu(Q)^{-1} int_Q |f - avg_Q f| dmu`` over closed balls with radii in ``radii``."""
    f = np.asarray(f, dtype=float)
    radii = radius_grid(space) if radii is None else np.asarray(radii, dtype=float)
    mu = space.measure
    best = 0.0
    for r in radii:
        mask = space.ball_mask(r)
        mass = mask @ mu
        mean = (mask @ (f * mu)) / mass
        dev = np.where(mask, np.abs(f[None, :] - mean[:, None]), 0.0) @ mu / mass
        best = max(best, float(dev.max()))
    return best


def bmo_decomposition_bound(gen: Generator, f, grid: ScaleGrid | None = None) -> float:
    """``2 sup_{t, Q} [avg_Q |f - avg_Q f| + avg_Q |avg_Q f - e^{-tL} f|]``.

    Always dominates :func:`bmo_l_norm` on the same grid (triangle inequality).
    """
    grid = grid or make_grid(gen)
    f = np.asarray(f, dtype=float)
    mu = gen.space.measure
    best = 0.0
    for j, G in _scale_fields(gen, heat(), grid.t_values, f[:, None]):
        r = grid.t_values[j] ** (1.0 / gen.m)
        mask = gen.space.ball_mask(r)
        mass = mask @ mu
        mean = (mask @ (f * mu)) / mass
        a = np.where(mask, np.abs(f[None, :] - mean[:, None]), 0.0) @ mu / mass
        b = np.where(mask, np.abs(mean[:, None] - G[:, 0][None, :]), 0.0) @ mu / mass
        best = max(best, float((a + b).max()))
    return 2.0 * best


def carleson_norms(gen: Generator, F, k: int, grid: ScaleGrid | None = None) -> list[CarlesonReport]:
    """Carleson norm of ``nu_k`` for every column of ``F``.

    Box over ``Q`` of radius ``r_i = t_i^{1/m}`` collects the scales
    ``t_j <= t_i``; the sup runs over every center and every grid radius.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    grid = grid or make_grid(gen)
    F, _ = _as_columns(F)
    ts, w = grid.t_values, grid.quad_weights
    cache = _MaskCache(gen.space)
    acc = np.zeros_like(F)
    best = np.full(F.shape[1], 0.0)
    wit = [None] * F.shape[1]
    for j, G in _scale_fields(gen, psi(k), ts, F):
        acc += w[j] * G * G
        r = ts[j] ** (1.0 / gen.m)
        sup, idx = _best(_averages(cache, r, acc))
        for c in range(F.shape[1]):
            if sup[c] > best[c]:
                best[c] = sup[c]
                wit[c] = {"center": int(idx[c]), "radius": float(r), "t": float(ts[j])}
    return [CarlesonReport(k, float(best[c]), wit[c]) for c in range(F.shape[1])]


def carleson_norm(gen: Generator, f, k: int, grid: ScaleGrid | None = None) -> CarlesonReport:
    return carleson_norms(gen, np.asarray(f, dtype=float)[:, None], k, grid)[0]


def m_membership_norm(space: Space, f, x0: int, beta: float, N: float) -> float:
    """``sum_x |f(x)| mu(x) / [(1 + d)^{2N + beta} mu(B(x0, 1 + d))]`` with ``d = d(x0, x)``."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    f = np.asarray(f, dtype=float)
    d = space.metric[x0]
    # mu(B(x0, 1 + d(x0, x))) for every x, by sorting distances from x0
    order = np.argsort(d, kind="stable")
    cum = np.cumsum(space.measure[order])
    pos = np.searchsorted(d[order], (1.0 + d) * (1 + 1e-12) + 1e-12, side="right") - 1
    vol = cum[pos]
    return float(np.sum(np.abs(f) * space.measure / ((1.0 + d) ** (2 * N + beta) * vol)))


def sharp_maximal(gen: Generator, h, s: float = 2.0, grid: ScaleGrid | None = None,
                  N: int = 1) -> np.ndarray:
    """``M_s^# h(x) = sup_j (avg_{B(x, t_j^{1/m})} |psi_N(t_j L) h|^s)^{1/s}``."""
    if s < 1:
        raise ValueError("s must be >= 1")
    grid = grid or make_grid(gen)
    H, vec = _as_columns(h)
    cache = _MaskCache(gen.space)
    out = np.zeros_like(H)
    for j, G in _scale_fields(gen, psi(N), grid.t_values, H):
        r = grid.t_values[j] ** (1.0 / gen.m)
        np.maximum(out, _averages(cache, r, np.abs(G) ** s), out=out)
    out = out ** (1.0 / s)
    return out[:, 0] if vec else out


def classical_ratio(gen: Generator, f, grid: ScaleGrid | None = None, radii=None) -> float:
    """``||f||_{BMO_L} / ||f||_{BMO}``; ``nan`` for constant ``f``."""
    num = bmo_l_norm(gen, f, grid).norm
    den = bmo_classical_norm(gen.space, f, radii)
    return num / den if den > 0 else math.nan
