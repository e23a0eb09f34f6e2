"""Trilinear forms, one-psi paraproducts and mixed-norm operator estimates.

All integrals ``int_0^inf (.) dt/t`` are quadratures over a :class:`ScaleGrid`
(trapezoid in ``log t``).  Per-scale fields come from :func:`scale_stack` and
outer operators are applied with :func:`scale_reduce`, so a paraproduct costs
three batched transforms regardless of the number of scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ZeroInput
from .spectral import (
    Generator,
    ScaleGrid,
    SpectralFunction,
    alt_phi,
    heat,
    l2norm,
    make_grid,
    project_constants,
    psi,
    scale_reduce,
    scale_stack,
    semigroup,
)

REPRODUCING_C = 2.0


def default_N(d_hom: float, m: float = 2.0) -> int:
    """Smallest integer strictly larger than ``d_hom / m``."""
    return int(math.floor(d_hom / m)) + 1


@dataclass(frozen=True)
class CalculusPair:
    psi: SpectralFunction
    phi: SpectralFunction
    alt_phi: SpectralFunction
    N: int

    @classmethod
    def default(cls, N: int = 1) -> "CalculusPair":
        return cls(psi(N), heat(), alt_phi(), N)


@dataclass
class TrilinearResult:
    value: float
    per_scale: np.ndarray = field(repr=False)
    quadrature_error_estimate: float = 0.0

    def to_dict(self) -> dict:
        return {"value": self.value, "quadrature_error_estimate": self.quadrature_error_estimate,
                "scales": len(self.per_scale)}


def _trilinear(per_scale_fn: Callable[[ScaleGrid], np.ndarray], grid: ScaleGrid) -> TrilinearResult:
    terms = per_scale_fn(grid) * grid.quad_weights
    value = float(terms.sum())
    coarse = grid.coarsened()
    coarse_value = float((per_scale_fn(coarse) * coarse.quad_weights).sum())
    return TrilinearResult(value, terms, abs(value - coarse_value))


def _pairing(gen: Generator, A: np.ndarray) -> np.ndarray:
    return A @ gen.space.measure


def lambda1(gen: Generator, b, f, g, grid: ScaleGrid | None = None, pair: CalculusPair | None = None):
    """``int <psi_t g, phi_t b . psi_t f> dt/t``."""
    grid = grid or make_grid(gen)
    pair = pair or CalculusPair.default()

    def terms(gr):
        ts = gr.t_values
        return _pairing(gen, scale_stack(gen, pair.psi, ts, g) * scale_stack(gen, pair.phi, ts, b)
                        * scale_stack(gen, pair.psi, ts, f))

    return _trilinear(terms, grid)


def lambda2(gen: Generator, b, f, g, grid: ScaleGrid | None = None, pair: CalculusPair | None = None):
    """``int <psi_t g, phi_t f . psi_t b> dt/t``."""
    return lambda1(gen, f, b, g, grid, pair)


def lambda_sym(gen: Generator, h, f, g, grid: ScaleGrid | None = None, pair: CalculusPair | None = None):
    """``int <psi_t g . phi_t f . psi_t h, 1> dt/t``."""
    return lambda1(gen, f, h, g, grid, pair)


def lambda_pi1(gen: Generator, h, f, g, grid: ScaleGrid | None = None, pair: CalculusPair | None = None):
    """Trilinear form dual to ``Pi_1``: ``int <psi_t g, phi_t f . phi_t h> dt/t``."""
    grid = grid or make_grid(gen)
    pair = pair or CalculusPair.default()

    def terms(gr):
        ts = gr.t_values
        return _pairing(gen, scale_stack(gen, pair.psi, ts, g) * scale_stack(gen, pair.phi, ts, f)
                        * scale_stack(gen, pair.phi, ts, h))

    return _trilinear(terms, grid)


def lambda_pi2(gen: Generator, h, f, g, grid: ScaleGrid | None = None, pair: CalculusPair | None = None):
    """Trilinear form dual to ``Pi_2``: ``int <phi_t g, psi_t f . phi_t h> dt/t``."""
    grid = grid or make_grid(gen)
    pair = pair or CalculusPair.default()

    def terms(gr):
        ts = gr.t_values
        return _pairing(gen, scale_stack(gen, pair.phi, ts, g) * scale_stack(gen, pair.psi, ts, f)
                        * scale_stack(gen, pair.phi, ts, h))

    return _trilinear(terms, grid)


def paraproduct_u(gen: Generator, b, f, grid: ScaleGrid | None = None, pair: CalculusPair | None = None):
    """``U_b(f) = int psi_t [phi_t b . psi_t f] dt/t``, so ``<U_b f, g> = lambda1(b, f, g)``."""
    grid = grid or make_grid(gen)
    pair = pair or CalculusPair.default()
    ts = grid.t_values
    P = scale_stack(gen, pair.phi, ts, b) * scale_stack(gen, pair.psi, ts, f)
    return scale_reduce(gen, pair.psi, ts, grid.quad_weights, P)


def paraproduct_pi1(gen: Generator, h, f, grid: ScaleGrid | None = None, pair: CalculusPair | None = None):
    """``Pi_1(h, f) = int psi_t [phi_t f . phi_t h] dt/t``."""
    grid = grid or make_grid(gen)
    pair = pair or CalculusPair.default()
    ts = grid.t_values
    P = scale_stack(gen, pair.phi, ts, f) * scale_stack(gen, pair.phi, ts, h)
    return scale_reduce(gen, pair.psi, ts, grid.quad_weights, P)


def paraproduct_pi2(gen: Generator, h, f, grid: ScaleGrid | None = None, pair: CalculusPair | None = None):
    """``Pi_2(h, f) = int phi_t [psi_t f . phi_t h] dt/t``."""
    grid = grid or make_grid(gen)
    pair = pair or CalculusPair.default()
    ts = grid.t_values
    P = scale_stack(gen, pair.psi, ts, f) * scale_stack(gen, pair.phi, ts, h)
    return scale_reduce(gen, pair.phi, ts, grid.quad_weights, P)


class Paraproduct:
    """Bilinear action ``(h, f) -> Pi(h, f)`` with both partial adjoints.

    ``adjoint_first(f, z)`` is the mu-adjoint of ``h -> Pi(h, f)`` applied to
    ``z``; ``adjoint_second(h, z)`` that of ``f -> Pi(h, f)``.
    """

    def __init__(self, gen: Generator, which: int = 1, grid: ScaleGrid | None = None,
                 pair: CalculusPair | None = None):
        if which not in (1, 2):
            raise ValueError("which must be 1 or 2")
        self.gen = gen
        self.which = which
        self.grid = grid or make_grid(gen)
        self.pair = pair or CalculusPair.default()

    def _s(self, g, x):
        return scale_stack(self.gen, g, self.grid.t_values, x)

    def _r(self, g, P):
        return scale_reduce(self.gen, g, self.grid.t_values, self.grid.quad_weights, P)

    def __call__(self, h, f):
        ps, ph = self.pair.psi, self.pair.phi
        if self.which == 1:
            return self._r(ps, self._s(ph, f) * self._s(ph, h))
        return self._r(ph, self._s(ps, f) * self._s(ph, h))

    def adjoint_second(self, h, z):
        ps, ph = self.pair.psi, self.pair.phi
        if self.which == 1:
            return self._r(ph, self._s(ph, h) * self._s(ps, z))
        return self._r(ps, self._s(ph, h) * self._s(ph, z))

    def adjoint_first(self, f, z):
        ps, ph = self.pair.psi, self.pair.phi
        if self.which == 1:
            return self._r(ph, self._s(ph, f) * self._s(ps, z))
        return self._r(ph, self._s(ps, f) * self._s(ph, z))


def reproducing_residual(gen: Generator, f, grid: ScaleGrid | None = None, c: float = REPRODUCING_C) -> float:
    """``||c sum_j psi_1(t_j L) f w_j - (f - P0 f)|| / ||f - P0 f||``."""
    grid = grid or make_grid(gen)
    f = np.asarray(f, dtype=float)
    f0 = f - project_constants(gen.space, f)
    den = l2norm(gen.space, f0)
    if den <= 1e-14 * max(l2norm(gen.space, f), 1e-300):
        raise ZeroInput("f is constant")
    approx = c * scale_reduce(gen, psi(1), grid.t_values, grid.quad_weights,
                              np.broadcast_to(f, (len(grid), f.size)))
    return l2norm(gen.space, approx - f0) / den


@dataclass
class ProductDecomposition:
    part1: np.ndarray
    part2: np.ndarray
    part3: np.ndarray
    correction: np.ndarray
    residual_norm: float


def product_decomposition(gen: Generator, f, g, grid: ScaleGrid | None = None,
                          c: float = REPRODUCING_C) -> ProductDecomposition:
    """Minimum-scale splitting of ``f g`` into three one-psi paraproducts.

    With ``f0 = f - P0 f`` and ``tphi`` the low-pass primitive of ``psi_1``,
    ``c^3 (part1 + part2 + part3) = fg - R`` where
    ``R = P0 f . g + f0 . P0 g + P0(f0 g0)`` removes the kernel-mode terms.
    """
    grid = grid or make_grid(gen)
    space = gen.space
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    f0 = f - project_constants(space, f)
    g0 = g - project_constants(space, g)
    ts, w = grid.t_values, grid.quad_weights
    ps, tp = psi(1), alt_phi()
    tp0 = tp.without_kernel()
    Pf, Pg = scale_stack(gen, tp, ts, f0), scale_stack(gen, tp, ts, g0)
    Sf, Sg = scale_stack(gen, ps, ts, f0), scale_stack(gen, ps, ts, g0)
    part1 = scale_reduce(gen, ps, ts, w, Pf * Pg)
    part2 = scale_reduce(gen, tp0, ts, w, Sf * Pg)
    part3 = scale_reduce(gen, tp0, ts, w, Pf * Sg)
    R = project_constants(space, f) * g + f0 * project_constants(space, g) + project_constants(space, f0 * g0)
    fg = f * g
    resid = c**3 * (part1 + part2 + part3) - (fg - R)
    den = l2norm(space, fg)
    return ProductDecomposition(part1, part2, part3, R, l2norm(space, resid) / den if den > 0 else 0.0)


# ------------------------------------------------------------ mixed norms


def lp_norm(f, p: float, measure) -> float:
    """``(sum |f|^p mu)^{1/p}``; ``max |f|`` for ``p = inf``."""
    f = np.asarray(f, dtype=float)
    if math.isinf(p):
        return float(np.abs(f).max())
    return float(np.sum(np.abs(f) ** p * measure) ** (1.0 / p))


def _conj(p: float) -> float:
    if math.isinf(p):
        return 1.0
    if p == 1:
        return math.inf
    return p / (p - 1.0)


def _to_sphere(u, q: float, measure, rng) -> np.ndarray:
    """Norming function in L^q(measure) for the L^{q'} vector ``u``."""
    if math.isinf(q):
        s = np.sign(u)
        return np.where(s == 0, 1.0, s)
    if q == 1:
        out = np.zeros_like(u)
        i = int(np.argmax(np.abs(u)))
        out[i] = np.sign(u[i]) or 1.0
        return out / measure[i]
    qc = _conj(q)
    v = np.abs(u) ** (qc - 1.0) * np.sign(u)
    nv = lp_norm(v, q, measure)
    return v / nv if nv > 0 else _normalize(rng.standard_normal(u.shape), q, measure)


def _normalize(f, p, measure):
    n = lp_norm(f, p, measure)
    return f / n if n > 0 else f


def _dual(y, r: float, measure) -> np.ndarray:
    """Gradient of ``||y||_r`` (a subgradient for ``r <= 1``)."""
    if math.isinf(r):
        out = np.zeros_like(y)
        i = int(np.argmax(np.abs(y)))
        out[i] = np.sign(y[i]) / measure[i]
        return out
    ny = lp_norm(y, r, measure)
    if ny == 0:
        return np.zeros_like(y)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (np.abs(y) / ny) ** (r - 1.0) * np.sign(y)
    return np.where(np.isfinite(z), z, 0.0)


@dataclass
class NormEstimate:
    value: float
    inputs: tuple = field(repr=False)
    restarts: int = 0
    converged: bool = True
    history: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"value": self.value, "restarts": self.restarts, "converged": self.converged}


def heat_bump_starts(gen: Generator, scales=(0.5, 2.0, 8.0, 32.0), vertex: int | None = None) -> list:
    """Starting pairs ``(e^{-sL} delta_x, e^{-sL} delta_x)`` for :func:`mixed_norm_estimate`.

    Ratios into ``L^{r'}`` with ``r'`` near 1 peak on localized inputs, which
    white-noise restarts reach only slowly; ``x`` defaults to the central vertex.
    """
    sp = gen.space
    delta = np.zeros(sp.n)
    delta[sp.center_vertex() if vertex is None else vertex] = 1.0
    return [(b, b.copy()) for b in (semigroup(gen, s, delta) for s in scales)]


def mixed_norm_estimate(op, p: float, q: float | None = None, r_prime: float = 2.0, measure=None,
                        weight=None, restarts: int = 16, max_iter: int = 60, tol: float = 1e-6,
                        seed: int = 0, starts=None) -> NormEstimate:
    """Lower bound on ``sup ||B(h, f)||_{r'} / (||h||_p ||f||_q)`` by alternating power iteration.

    ``op`` is either linear (``apply`` and ``adjoint``, ``q`` ignored, bound
    for ``L^p -> L^{r'}``) or bilinear (``__call__``, ``adjoint_first`` and
    ``adjoint_second``).  Norms are over ``weight * measure``.  Each restart
    alternates Boyd-type updates of the two inputs and keeps the best ratio
    seen; ``converged`` is False when some restart hit ``max_iter``.
    """
    if measure is None:
        measure = op.gen.space.measure
    measure = np.asarray(measure, dtype=float)
    n = measure.size
    w = np.ones(n) if weight is None else np.asarray(weight, dtype=float)
    wm = w * measure
    linear = hasattr(op, "adjoint") and not hasattr(op, "adjoint_first")
    rng = np.random.default_rng(seed)
    best, best_in, converged, hist = -1.0, None, True, []

    def ratio(h, f):
        if linear:
            y = op.apply(f)
            return lp_norm(y, r_prime, wm) / lp_norm(f, p, wm), y
        y = op(h, f)
        return lp_norm(y, r_prime, wm) / (lp_norm(h, p, wm) * lp_norm(f, q, wm)), y

    def step(x, y, norm_p, adjoint):
        z = _dual(y, r_prime, wm) * w
        u = adjoint(z) / w
        nxt = _to_sphere(u, norm_p, wm, rng)
        return nxt if np.abs(nxt).max() > 0 else x

    init = list(starts or [])
    while len(init) < restarts:
        init.append((rng.standard_normal(n), rng.standard_normal(n)))
    for h, f in init[:restarts]:
        h = _normalize(np.asarray(h, float), p, wm)
        f = _normalize(np.asarray(f, float), p if linear else q, wm)
        val, y = ratio(h, f)
        if val > best:
            best, best_in = val, (h.copy(), f.copy())
        ok = False
        for _ in range(max_iter):
            if linear:
                f = step(f, y, p, op.adjoint)
            else:
                f = step(f, y, q, lambda z: op.adjoint_second(h, z))
                _, y = ratio(h, f)
                h = step(h, y, p, lambda z: op.adjoint_first(f, z))
            new, y = ratio(h, f)
            if new > best:
                best, best_in = new, (h.copy(), f.copy())
            if abs(new - val) <= tol * max(abs(new), 1e-300):
                ok = True
                break
            val = new
        if val > best:
            best, best_in = val, (h.copy(), f.copy())
        converged &= ok
        hist.append(float(val))
    return NormEstimate(float(best), best_in, restarts, converged, hist)


class LinearMap:
    """Adapter exposing ``apply`` / ``adjoint`` for a matrix or callables.

    For a matrix ``A`` the adjoint is taken in the ``measure``-weighted pairing,
    ``M^{-1} A^T M``.
    """

    def __init__(self, apply, adjoint=None, gen=None, measure=None):
        self.gen = gen
        if isinstance(apply, np.ndarray):
            A = apply
            mu = np.ones(A.shape[1]) if measure is None else np.asarray(measure, dtype=float)
            self.apply = lambda f: A @ f
            self.adjoint = adjoint if adjoint is not None else (lambda z: (A.T @ (mu * z)) / mu)
        else:
            self.apply, self.adjoint = apply, adjoint


class Multiplication:
    """Pointwise product ``(h, f) -> h f``; self-adjoint in each slot."""

    def __init__(self, gen=None):
        self.gen = gen

    def __call__(self, h, f):
        return h * f

    def adjoint_first(self, f, z):
        return f * z

    def adjoint_second(self, h, z):
        return h * z
