"""Generators, spectral calculus and semigroup measurements on a Space.

The generator is ``L = M^{-1} B^T diag(A) B`` where ``B`` is the
length-normalized incidence map and ``M`` the diagonal vertex measure, so ``L``
is self-adjoint and nonnegative in ``<f, g> = sum f g mu`` and annihilates
constants.  Functions ``g(tL)`` are applied through an eigenbasis (dense
``eigh`` or, for uniform path/grid graphs, the exact DCT-II basis) or through a
matrix-free Chebyshev expansion; the two routes cross-check each other.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp
from scipy import special

from .errors import (
    DenseCapExceeded,
    EllipticityViolation,
    EmptyBall,
    FunctionDomainError,
)
from .space import Ball, Space, maximal, radius_grid

DENSE_CAP = 4096
KERNEL_TOL = 1e-10


# ---------------------------------------------------------------- functions


@dataclass(frozen=True)
class SpectralFunction:
    """Scalar map ``u -> g(u)`` on ``[0, inf)`` with its value at 0 recorded."""

    name: str
    evaluator: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    at_zero: float
    decay_order: float | None = None

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        with np.errstate(all="ignore"):
            out = np.asarray(self.evaluator(u), dtype=float)
        return np.where(u == 0, self.at_zero, out)

    def without_kernel(self) -> "SpectralFunction":
        """Same function with the kernel mode removed (value 0 at u = 0)."""
        return SpectralFunction(self.name + "_perp", self.evaluator, 0.0, self.decay_order)


def heat() -> SpectralFunction:
    return SpectralFunction("heat", lambda u: np.exp(-u), 1.0)


def heat_derivative(k: int) -> SpectralFunction:
    """``(tL)^k e^{-tL}``."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return heat()
    return SpectralFunction(f"heat_derivative({k})", lambda u: u**k * np.exp(-u), 0.0, k)


def psi(N: int) -> SpectralFunction:
    """Band-pass ``u^N e^{-u} (1 - e^{-u})``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    return SpectralFunction(f"psi({N})", lambda u: u**N * np.exp(-u) * -np.expm1(-u), 0.0, N)


def resolvent(M: int) -> SpectralFunction:
    """``(1 + u)^{-M}``."""
    return SpectralFunction(f"resolvent({M})", lambda u: (1.0 + u) ** (-M), 1.0)


def resolvent_power(M: int) -> SpectralFunction:
    """``(1 + u)^{M}``."""
    return SpectralFunction(f"resolvent_power({M})", lambda u: (1.0 + u) ** M, 1.0)


def cancellation(kappa: int) -> SpectralFunction:
    """``(1 - e^{-u})^kappa``."""
    return SpectralFunction(f"cancellation({kappa})", lambda u: (-np.expm1(-u)) ** kappa, 0.0)


def alt_phi() -> SpectralFunction:
    """Low-pass primitive ``-int_u^inf e^{-y}(1 - e^{-y}) dy = -(e^{-u} - e^{-2u}/2)``.

    Its scale derivative ``u d/du`` is the band-pass ``u e^{-u}(1 - e^{-u})``,
    which is what the minimum-scale splitting of a product needs.
    """
    return SpectralFunction("alt_phi", lambda u: -(np.exp(-u) - 0.5 * np.exp(-2 * u)), -0.5)


def calderon_phi(kappa: int) -> SpectralFunction:
    """``phi(x) = -int_x^inf y^kappa e^{-2y} (1 - e^{-y})^2 dy`` (closed form)."""

    def ev(u):
        out = 0.0
        for a, coef in ((2.0, 1.0), (3.0, -2.0), (4.0, 1.0)):
            out = out + coef * special.gammaincc(kappa + 1, a * u) * math.gamma(kappa + 1) / a ** (kappa + 1)
        return -out

    return SpectralFunction(f"calderon_phi({kappa})", ev, float(ev(np.array(0.0))))


def calderon_phi_scale_derivative(kappa: int) -> SpectralFunction:
    """``u phi'(u) = u^{kappa+1} e^{-2u} (1 - e^{-u})^2``."""
    return SpectralFunction(
        f"calderon_dphi({kappa})", lambda u: u ** (kappa + 1) * np.exp(-2 * u) * np.expm1(-u) ** 2, 0.0
    )


# ------------------------------------------------------------------- bases


class DenseBasis:
    """Eigenbasis from ``eigh``; columns orthonormal in the mu-inner product."""

    kind = "dense"

    def __init__(self, eigenvalues: np.ndarray, vectors: np.ndarray, measure: np.ndarray):
        self.eigenvalues = eigenvalues
        self.vectors = vectors
        self.measure = measure
        self.kernel = eigenvalues == 0.0

    def forward(self, F: np.ndarray) -> np.ndarray:
        return self.vectors.T @ (self.measure[:, None] * F)

    def inverse(self, C: np.ndarray) -> np.ndarray:
        return self.vectors @ C


class DctBasis:
    """Exact eigenbasis of uniform path/grid generators (products of DCT-II modes)."""

    kind = "dct"

    def __init__(self, shape: tuple[int, ...], scale: float, mass: float):
        lam = 0.0
        for axis, m in enumerate(shape):
            lk = 2.0 - 2.0 * np.cos(np.pi * np.arange(m) / m)
            lk[0] = 0.0
            idx = [None] * len(shape)
            idx[axis] = slice(None)
            lam = lam + lk[tuple(idx)]
        self.shape = tuple(shape)
        self.eigenvalues = (scale * np.asarray(lam)).ravel()
        self.kernel = self.eigenvalues == 0.0
        self.mass = mass

    def _axes(self):
        return tuple(range(len(self.shape)))

    def forward(self, F: np.ndarray) -> np.ndarray:
        k = F.shape[1]
        X = F.reshape(*self.shape, k)
        C = sfft.dctn(X, type=2, norm="ortho", axes=self._axes())
        return math.sqrt(self.mass) * C.reshape(-1, k)

    def inverse(self, C: np.ndarray) -> np.ndarray:
        k = C.shape[1]
        X = C.reshape(*self.shape, k)
        F = sfft.idctn(X, type=2, norm="ortho", axes=self._axes())
        return F.reshape(-1, k) / math.sqrt(self.mass)


# --------------------------------------------------------------- generator


@dataclass(frozen=True, eq=False)
class Generator:
    space: Space
    stiffness: sp.csr_matrix  # K = B^T diag(A) B, symmetric
    coefficients: np.ndarray  # per-edge A_e
    kind: str = "combinatorial"
    m: float = 2.0
    dense_cap: int = DENSE_CAP

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        """The operator ``L = M^{-1} K``."""
        return sp.diags(1.0 / self.space.measure) @ self.stiffness

    @cached_property
    def lambda_upper(self) -> float:
        """Gershgorin bound on the spectrum of ``L``."""
        return float((2.0 * self.stiffness.diagonal() / self.space.measure).max())

    @cached_property
    def basis(self):
        """Eigenbasis used by the spectral path, or ``None`` above the dense cap."""
        b = _dct_basis(self)
        if b is not None:
            return b
        if self.space.n > self.dense_cap:
            return None
        return spectral_decompose(self)

    def apply(self, f: np.ndarray) -> np.ndarray:
        return self.matrix @ f

    @cached_property
    def spectral_range(self) -> tuple[float, float]:
        """(smallest nonzero eigenvalue, largest eigenvalue)."""
        b = self.basis
        if b is not None:
            lam = b.eigenvalues[~b.kernel]
            return float(lam.min()), float(lam.max())
        from scipy.sparse.linalg import eigsh

        K = self.stiffness.tocsc()
        Mm = sp.diags(self.space.measure).tocsc()
        hi = eigsh(K, k=1, M=Mm, which="LA", return_eigenvectors=False)[0]
        lo = eigsh(K, k=2, M=Mm, sigma=-1e-3 * hi / self.space.n, which="LM", return_eigenvectors=False)
        return float(np.sort(lo)[-1]), float(hi)


def _dct_basis(gen: Generator):
    sp_ = gen.space
    if sp_.shape is None or int(np.prod(sp_.shape)) != sp_.n:
        return None
    if not (np.ptp(sp_.lengths) == 0 and np.ptp(sp_.measure) == 0 and np.ptp(gen.coefficients) == 0):
        return None
    # the edge set must be exactly the lattice one
    expected = _lattice_edges(sp_.shape)
    if len(expected) != len(sp_.edges) or not np.array_equal(
        np.unique(expected, axis=0), np.unique(sp_.edges, axis=0)
    ):
        return None
    h, c, a = sp_.lengths[0], sp_.measure[0], gen.coefficients[0]
    return DctBasis(sp_.shape, a / (c * h * h), c)


def _lattice_edges(shape):
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    out = []
    for axis in range(len(shape)):
        a = np.moveaxis(idx, axis, 0)
        out.append(np.c_[a[:-1].ravel(), a[1:].ravel()])
    e = np.vstack(out)
    return np.sort(e, axis=1)


def assemble_generator(space: Space, kind: str = "combinatorial", A=None, m: float = 2.0,
                       dense_cap: int = DENSE_CAP) -> Generator:
    """Assemble ``L`` on ``space``.

    ``kind="combinatorial"`` uses unit coefficients; ``"divergence"`` takes a
    per-edge coefficient array ``A`` (all entries must be > 0).
    """
    E = len(space.edges)
    if kind == "combinatorial":
        coef = np.ones(E)
    elif kind in ("divergence", "divergence-form"):
        if A is None:
            raise ValueError("divergence-form generator needs coefficients A")
        coef = np.broadcast_to(np.asarray(A, dtype=float), (E,)).copy()
        if not np.all(np.isfinite(coef)) or (coef <= 0).any():
            raise EllipticityViolation("all edge coefficients must be > 0")
        kind = "divergence"
    else:
        raise ValueError(f"unknown generator kind {kind!r}")
    u, v = space.edges[:, 0], space.edges[:, 1]
    w = coef / space.lengths**2
    n = space.n
    W = sp.coo_matrix((np.r_[w, w], (np.r_[u, v], np.r_[v, u])), shape=(n, n)).tocsr()
    K = (sp.diags(np.asarray(W.sum(axis=1)).ravel()) - W).tocsr()
    coef.setflags(write=False)
    return Generator(space, K, coef, kind, float(m), dense_cap)


def spectral_decompose(gen: Generator) -> DenseBasis:
    """Dense mu-orthonormal eigensystem with an exact constant kernel vector."""
    n = gen.space.n
    if n > gen.dense_cap:
        raise DenseCapExceeded(f"{n} vertices exceeds dense cap {gen.dense_cap}")
    mu = gen.space.measure
    s = 1.0 / np.sqrt(mu)
    S = s[:, None] * gen.stiffness.toarray() * s[None, :]
    S = 0.5 * (S + S.T)
    lam, U = np.linalg.eigh(S)
    V = s[:, None] * U
    # connected graph: exactly one kernel mode, the constants
    scale = max(abs(lam[-1]), 1.0)
    if abs(lam[0]) > KERNEL_TOL * scale * 10 or (n > 1 and lam[1] <= KERNEL_TOL * scale):
        raise ValueError("generator kernel is not one-dimensional")
    lam = lam.copy()
    lam[0] = 0.0
    lam[1:] = np.maximum(lam[1:], 0.0)
    V[:, 0] = 1.0 / math.sqrt(mu.sum())
    return DenseBasis(lam, V, mu)


# --------------------------------------------------------------- scale grid


@dataclass(frozen=True)
class ScaleGrid:
    """Geometric scales ``t_j = t_min rho^j`` with weights for ``int f(t) dt/t``."""

    t_values: np.ndarray
    ratio: float
    quad_weights: np.ndarray

    @property
    def log_step(self) -> float:
        return math.log(self.ratio)

    def __len__(self):
        return len(self.t_values)

    def refined(self) -> "ScaleGrid":
        """Same range with ``rho -> sqrt(rho)``."""
        return grid_from_range(self.t_values[0], self.t_values[-1], math.sqrt(self.ratio))

    def coarsened(self) -> "ScaleGrid":
        """Every other node, ``rho -> rho^2``."""
        t = self.t_values[::2]
        r = self.ratio**2
        return ScaleGrid(t, r, np.full(len(t), math.log(r)))

    def to_dict(self) -> dict:
        return {"t_min": float(self.t_values[0]), "t_max": float(self.t_values[-1]),
                "ratio": self.ratio, "nodes": len(self)}


def grid_from_range(t_min: float, t_max: float, rho: float) -> ScaleGrid:
    if not (t_min > 0 and rho > 1 and t_max >= t_min):
        raise ValueError("need t_min > 0, rho > 1, t_max >= t_min")
    J = int(math.ceil(math.log(t_max / t_min) / math.log(rho) - 1e-9))
    t = t_min * rho ** np.arange(J + 1)
    return ScaleGrid(t, float(rho), np.full(J + 1, math.log(rho)))


def make_grid(gen: Generator, rho: float = 2 ** 0.25, alpha: float = 1e-4, beta: float = 1e4) -> ScaleGrid:
    """Grid covering ``[alpha / lambda_max, beta / lambda_2]``."""
    lam2, lam_max = gen.spectral_range
    return grid_from_range(alpha / lam_max, beta / lam2, rho)


# ------------------------------------------------------------ applications


def _as_columns(f):
    f = np.asarray(f, dtype=float)
    return f.reshape(f.shape[0], -1), f.ndim == 1


def _mode_values(basis, g: SpectralFunction, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    u = np.multiply.outer(t, basis.eigenvalues)
    vals = g(u)
    vals[..., basis.kernel] = g.at_zero
    if not np.all(np.isfinite(vals)):
        raise FunctionDomainError(f"{g.name} is not finite on the scaled spectrum")
    return vals


def apply_function(gen: Generator, g: SpectralFunction, t: float, f, method: str = "auto"):
    """``g(tL) f`` via the eigenbasis (``"spectral"``) or Chebyshev (``"chebyshev"``)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if method == "auto":
        method = "spectral" if gen.basis is not None else "chebyshev"
    if method == "chebyshev":
        return chebyshev_apply(gen, g, t, f)
    if method != "spectral":
        raise ValueError(f"unknown method {method!r}")
    basis = gen.basis
    if basis is None:
        raise DenseCapExceeded("no eigenbasis available for this generator")
    F, vec = _as_columns(f)
    out = basis.inverse(_mode_values(basis, g, t)[:, None] * basis.forward(F))
    return out[:, 0] if vec else out


def scale_stack(gen: Generator, g: SpectralFunction, ts, f) -> np.ndarray:
    """Rows ``g(t_j L) f`` for every scale; shape ``(J, n)``."""
    basis = gen.basis
    c = basis.forward(np.asarray(f, dtype=float)[:, None])[:, 0]
    vals = _mode_values(basis, g, ts)
    return basis.inverse((vals * c[None, :]).T).T


def scale_reduce(gen: Generator, g: SpectralFunction, ts, weights, F) -> np.ndarray:
    """``sum_j w_j g(t_j L) F_j`` for rows ``F_j`` of ``F``."""
    basis = gen.basis
    C = basis.forward(np.asarray(F, dtype=float).T)  # (n, J)
    vals = _mode_values(basis, g, ts) * np.asarray(weights)[:, None]
    return basis.inverse((vals.T * C).sum(axis=1)[:, None])[:, 0]


def chebyshev_coefficients(fun: Callable[[np.ndarray], np.ndarray], b: float, tol: float = 1e-11,
                           max_degree: int = 1 << 16) -> np.ndarray:
    """Chebyshev coefficients of ``fun`` on ``[0, b]`` with tail below ``tol`` (relative)."""
    deg = 16
    while True:
        j = np.arange(deg)
        x = np.cos(np.pi * (j + 0.5) / deg)
        vals = fun(0.5 * b * (x + 1.0))
        c = sfft.dct(vals, type=2) / deg
        c[0] *= 0.5
        scale = max(np.abs(c).max(), 1e-300)
        tail = np.abs(c[-max(8, deg // 8):]).max()
        if tail <= tol * scale:
            cut = np.flatnonzero(np.abs(c) > 0.1 * tol * scale)
            return c[: cut[-1] + 1] if len(cut) else c[:1]
        if deg >= max_degree:
            raise FunctionDomainError(f"Chebyshev expansion did not converge by degree {deg}")
        deg *= 2


def chebyshev_apply(gen: Generator, g: SpectralFunction, t: float, f, tol: float = 1e-11):
    """Matrix-free ``g(tL) f`` with a Chebyshev expansion on ``[0, t * lambda_upper]``."""
    F, vec = _as_columns(f)
    b = t * gen.lambda_upper
    if b == 0:
        out = g.at_zero * F
        return out[:, 0] if vec else out
    c = chebyshev_coefficients(g, b, tol)
    if not np.all(np.isfinite(c)):
        raise FunctionDomainError(f"{g.name} is not finite on [0, {b}]")
    L = gen.matrix

    def X(v):  # spectrum of L mapped to [-1, 1]
        return (2.0 / gen.lambda_upper) * (L @ v) - v

    T0, T1 = F, X(F)
    out = c[0] * T0
    if len(c) > 1:
        out = out + c[1] * T1
    for k in range(2, len(c)):
        T0, T1 = T1, 2.0 * X(T1) - T0
        out = out + c[k] * T1
    return out[:, 0] if vec else out


def semigroup(gen: Generator, t: float, f, method: str = "auto"):
    return apply_function(gen, heat(), t, f, method)


def semigroup_derivative(gen: Generator, k: int, t: float, f, method: str = "auto"):
    """``(tL)^k e^{-tL} f``."""
    return apply_function(gen, heat_derivative(k), t, f, method)


def project_constants(space: Space, f) -> np.ndarray:
    """Measure-weighted projection onto constants (same shape as ``f``)."""
    f = np.asarray(f, dtype=float)
    mean = np.tensordot(space.measure, f, axes=(0, 0)) / space.total_mass
    return np.broadcast_to(mean, f.shape).copy()


def inner(space: Space, f, g) -> float:
    return float(np.sum(np.asarray(f) * np.asarray(g) * space.measure))


def l2norm(space: Space, f, axis=0):
    f = np.asarray(f, dtype=float)
    if f.ndim == 1:
        return float(np.sqrt(np.sum(f * f * space.measure)))
    mu = space.measure.reshape([-1 if i == axis else 1 for i in range(f.ndim)])
    return np.sqrt(np.sum(f * f * mu, axis=axis))


# ---------------------------------------------------------------- gradient


def vertex_gradient(space: Space, f, conductance=None) -> np.ndarray:
    """Degree-normalized gradient magnitude ``|grad f|`` at every vertex."""
    F, vec = _as_columns(f)
    u, v = space.edges[:, 0], space.edges[:, 1]
    w = np.ones(len(u)) if conductance is None else np.asarray(conductance, dtype=float)
    sq = w[:, None] * ((F[v] - F[u]) / space.lengths[:, None]) ** 2
    acc = np.zeros_like(F)
    np.add.at(acc, u, sq)
    np.add.at(acc, v, sq)
    W = np.bincount(u, w, space.n) + np.bincount(v, w, space.n)
    out = np.sqrt(acc / np.where(W > 0, W, 1.0)[:, None])
    return out[:, 0] if vec else out


def gradient(gen: Generator, f) -> np.ndarray:
    return vertex_gradient(gen.space, f, gen.coefficients)


def gradient_components(gen: Generator, members) -> sp.csr_matrix:
    """Linear map whose Euclidean norm equals ``|| |grad f| ||_{L^2(members)}``.

    One row per (vertex x in members, incident edge e), scaled by
    ``sqrt(mu_x w_e / W_x) / len_e``.
    """
    space = gen.space
    inside = np.zeros(space.n, dtype=bool)
    inside[np.asarray(members)] = True
    u, v = space.edges[:, 0], space.edges[:, 1]
    w = gen.coefficients
    W = np.bincount(u, w, space.n) + np.bincount(v, w, space.n)
    rows, cols, vals = [], [], []
    r = 0
    for x_side in (u, v):
        sel = np.flatnonzero(inside[x_side])
        for e in sel:
            x = x_side[e]
            s = math.sqrt(space.measure[x] * w[e] / W[x]) / space.lengths[e]
            rows += [r, r]
            cols += [v[e], u[e]]
            vals += [s, -s]
            r += 1
    return sp.csr_matrix((vals, (rows, cols)), shape=(r, space.n))


# ----------------------------------------------------------- square function


@dataclass
class SquareFunctionResult:
    values: np.ndarray
    l2_norm: float  # estimated L2 -> L2 norm of the square function


def square_function(gen: Generator, f, variant: str = "holomorphic", grid: ScaleGrid | None = None,
                    g: SpectralFunction | None = None, k: int = 0, n_probe: int = 8,
                    seed: int = 0) -> SquareFunctionResult:
    """Pointwise ``(sum_j |G_{t_j} f(x)|^2 w_j)^{1/2}``.

    ``variant="holomorphic"`` uses ``G_t = g(tL)``; ``variant="gradient"`` uses
    ``t^{1/m} |grad (tL)^k e^{-tL}|``.  The reported operator norm is exact for
    the holomorphic variant and a probe lower bound for the gradient one.
    """
    grid = grid or make_grid(gen)
    ts, w = grid.t_values, grid.quad_weights
    f = np.asarray(f, dtype=float)
    basis = gen.basis
    if variant == "holomorphic":
        if g is None:
            raise ValueError("holomorphic variant needs g")
        S = scale_stack(gen, g, ts, f)
        values = np.sqrt((S**2 * w[:, None]).sum(axis=0))
        vals = _mode_values(basis, g, ts)
        norm = float(np.sqrt((vals**2 * w[:, None]).sum(axis=0).max()))
        return SquareFunctionResult(values, norm)
    if variant != "gradient":
        raise ValueError(f"unknown variant {variant!r}")

    def square(h):
        S = scale_stack(gen, heat_derivative(k), ts, h)
        G = vertex_gradient(gen.space, S.T, gen.coefficients).T * ts[:, None] ** (1.0 / gen.m)
        return np.sqrt((G**2 * w[:, None]).sum(axis=0))

    values = square(f)
    rng = np.random.default_rng(seed)
    probes = [rng.standard_normal(gen.space.n) for _ in range(n_probe)]
    if isinstance(basis, DenseBasis):
        lam = basis.eigenvalues
        for i in np.linspace(1, len(lam) - 1, min(n_probe, len(lam) - 1)).astype(int):
            probes.append(basis.vectors[:, i])
    norm = 0.0
    for p in probes:
        p = p - project_constants(gen.space, p)
        pn = l2norm(gen.space, p)
        if pn > 0:
            norm = max(norm, l2norm(gen.space, square(p)) / pn)
    return SquareFunctionResult(values, norm)


# --------------------------------------------------------- off-diagonal decay


@dataclass
class DecayTable:
    family: str
    scale: float
    radius: float
    rows: list  # dicts: center1, center2, distance, ratio
    gamma: float | None  # fitted exponent against (1 + d/r)^{-gamma}
    local_gamma: list

    def to_dict(self) -> dict:
        return {"family": self.family, "scale": self.scale, "radius": self.radius,
                "rows": self.rows, "gamma": self.gamma, "local_gamma": self.local_gamma}


def fit_decay(distances, radius: float, ratios, floor: float = 1e-13, method: str = "envelope"):
    """Exponent ``gamma`` in ``ratio <= C (1 + d/r)^{-gamma}``.

    ``method="envelope"`` fits a line through the corners of the tail
    supremum ``E(x) = max{ratio : d/r >= x}``, so directional variation
    between pairs at similar distances does not bias the exponent;
    ``"lsq"`` fits all points.  Points below ``floor`` are dropped.  Returns
    ``(gamma, local_gammas)`` with local slopes between consecutive envelope
    corners.
    """
    d = np.asarray(distances, dtype=float)
    q = np.asarray(ratios, dtype=float)
    keep = q > floor
    d, q = d[keep], q[keep]
    if len(np.unique(d)) < 2:
        return None, []
    x = np.log1p(d / radius)
    y = np.log(q)
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    ux = np.unique(xs)
    ymax = np.array([ys[xs == v].max() for v in ux])
    tail = np.maximum.accumulate(ymax[::-1])[::-1]
    corner = ymax >= tail
    if method == "envelope":
        fx, fy = ux[corner], ymax[corner]
    elif method == "lsq":
        fx, fy = x, y
    else:
        raise ValueError(f"unknown method {method!r}")
    if len(np.unique(fx)) < 2:
        return None, []
    gamma = float(-np.polyfit(fx, fy, 1)[0])
    cx, cy = ux[corner], ymax[corner]
    local = [float(-(cy[i + 1] - cy[i]) / (cx[i + 1] - cx[i])) for i in range(len(cx) - 1)]
    return gamma, local


def set_distance(space: Space, a, b) -> float:
    return float(space.metric[np.ix_(np.asarray(a), np.asarray(b))].min())


def interior_vertices(space: Space, margin: float) -> np.ndarray:
    """Vertices whose ball of radius ``margin`` has the largest mass among all centers.

    On lattices these are the vertices at distance >= ``margin`` from the boundary.
    """
    masses = space.ball_masses(margin)
    return np.flatnonzero(masses >= masses.max() * (1 - 1e-9))


def ball_pairs(space: Space, radius: float, mode: str = "separated", anchor: int | None = None,
               max_pairs: int = 24, margin: float | None = None):
    """Pairs ``(Q1, Q2)`` of radius-``radius`` balls around a fixed anchor ball.

    ``mode="separated"`` keeps ``d(Q1, Q2) >= 2r``, ``"near"`` keeps
    ``d(Q1, Q2) <= 2r``.  Candidate centers are spread evenly over the
    attainable set distances.  With ``margin`` both centers are restricted to
    :func:`interior_vertices` and the default anchor is the interior vertex of
    largest interior eccentricity (widest range of separations).
    """
    allowed = np.arange(space.n) if margin is None else interior_vertices(space, margin)
    if anchor is None:
        if margin is None:
            anchor = space.center_vertex()
        else:
            ecc = space.metric[np.ix_(allowed, allowed)].max(axis=1)
            anchor = int(allowed[np.argmax(ecc)])
    Q1 = space.ball(anchor, radius)
    dQ1 = space.metric[Q1.members].min(axis=0)
    mask = space.ball_mask(radius)[allowed]
    sdist = np.where(mask, dQ1[None, :], np.inf).min(axis=1)
    if mode == "separated":
        ok = sdist >= 2 * radius * (1 - 1e-12)
    elif mode == "near":
        ok = sdist <= 2 * radius * (1 + 1e-12)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    cand = np.flatnonzero(ok)
    if len(cand) == 0:
        return []
    order = cand[np.lexsort((allowed[cand], sdist[cand]))]
    if len(order) > max_pairs:
        order = order[np.linspace(0, len(order) - 1, max_pairs).round().astype(int)]
    return [(Q1, space.ball(int(allowed[c]), radius)) for c in order]


def block_norm(space: Space, columns: np.ndarray, Q1: Ball, rows_Q2) -> float:
    """Operator norm from L2(Q1) to the target, given ``columns`` = Op applied to
    ``delta_y / sqrt(mu_y)`` for y in Q1 and ``rows_Q2`` a callable restricting
    an (n, k) block to weighted coordinates on Q2."""
    B = rows_Q2(columns)
    if B.size == 0:
        return 0.0
    return float(np.linalg.norm(B, 2))


def _orthonormal_columns(space: Space, members) -> np.ndarray:
    E = np.zeros((space.n, len(members)))
    E[members, np.arange(len(members))] = 1.0 / np.sqrt(space.measure[members])
    return E


def restrict_l2(space: Space, members) -> Callable[[np.ndarray], np.ndarray]:
    sq = np.sqrt(space.measure[members])[:, None]
    return lambda C: sq * C[members]


def family_operator(gen: Generator, family: str, s: float, k: int = 1):
    """``(apply, target)`` for an off-diagonal family at scale ``s``.

    ``apply`` maps (n, k) blocks; ``target(members)`` builds the restriction
    whose Euclidean norm is the L2(Q2) norm of the family's output.
    """
    if family == "heat":
        return (lambda F: apply_function(gen, heat(), s, F)), (lambda Q: restrict_l2(gen.space, Q))
    if family == "derivative":
        return (lambda F: apply_function(gen, heat_derivative(k), s, F)), (lambda Q: restrict_l2(gen.space, Q))
    if family == "gradient":
        scale = s ** (1.0 / gen.m)

        def target(Q):
            G = gradient_components(gen, Q)
            return lambda C: scale * (G @ C)

        return (lambda F: apply_function(gen, heat_derivative(k), s, F)), target
    raise ValueError(f"unknown family {family!r}")


def off_diagonal_profile(gen: Generator, family: str, s: float, pairs=None, k: int = 1,
                         max_pairs: int = 24) -> DecayTable:
    """Measured ``||Op f||_{L2(Q2)} / ||f||_{L2(Q1)}`` over ball pairs at scale ``s``.

    The ratio is maximized exactly (largest singular value of the Q2 x Q1
    block in mu-orthonormal coordinates).
    """
    r = s ** (1.0 / gen.m)
    if pairs is None:
        pairs = ball_pairs(gen.space, r, "separated", max_pairs=max_pairs)
    apply, target = family_operator(gen, family, s, k)
    rows = []
    cache = {}
    for Q1, Q2 in pairs:
        if len(Q1) == 0 or len(Q2) == 0:
            raise EmptyBall("ball pair contains an empty ball")
        key = (Q1.center, Q1.radius)
        if key not in cache:
            cache[key] = apply(_orthonormal_columns(gen.space, Q1.members))
        ratio = block_norm(gen.space, cache[key], Q1, target(Q2.members))
        rows.append({"center1": Q1.center, "center2": Q2.center,
                     "distance": set_distance(gen.space, Q1.members, Q2.members), "ratio": ratio})
    gamma, local = fit_decay([r_["distance"] for r_ in rows], r, [r_["ratio"] for r_ in rows])
    return DecayTable(family, float(s), float(r), rows, gamma, local)


# ------------------------------------------------------ Sobolev and limits


def resolvent_sobolev_check(gen: Generator, t: float, M_pow: int, ball: Ball, f, radii=None):
    """``(lhs, rhs, ratio)`` with ``lhs = ||f||_{L^inf(Q)}`` and
    ``rhs = inf_Q M_2[(1 + tL)^M f]``."""
    if M_pow < 1:
        raise ValueError("M_pow must be >= 1")
    f = np.asarray(f, dtype=float)
    g = apply_function(gen, resolvent_power(M_pow), t, f)
    M2 = maximal(gen.space, g, 2.0, radii)
    lhs = float(np.abs(f[ball.members]).max())
    rhs = float(M2[ball.members].min())
    return lhs, rhs, (lhs / rhs if rhs > 0 else math.inf)


def sobolev_ratios(gen: Generator, t: float, M_pow: int, F, radii=None) -> np.ndarray:
    """Ratios of :func:`resolvent_sobolev_check` for every center (balls of
    radius ``t^{1/m}``) and every column of ``F``; shape ``(n, k)``."""
    F, _ = _as_columns(F)
    G = apply_function(gen, resolvent_power(M_pow), t, F)
    M2 = maximal(gen.space, G, 2.0, radii)
    mask = gen.space.ball_mask(t ** (1.0 / gen.m))
    out = np.empty((gen.space.n, F.shape[1]))
    for j in range(F.shape[1]):
        lhs = np.where(mask, np.abs(F[:, j])[None, :], 0.0).max(axis=1)
        rhs = np.where(mask, M2[:, j][None, :], np.inf).min(axis=1)
        out[:, j] = lhs / rhs
    return out


@dataclass
class LimitsReport:
    t: np.ndarray
    heat_deviation: np.ndarray  # ||e^{-tL} f - f||
    derivative_small_t: np.ndarray  # ||(tL)^k e^{-tL} f||
    derivative_large_t: np.ndarray  # ||(tL)^k e^{-tL} (f - P0 f)||
    k: int

    def to_dict(self) -> dict:
        return {"t": self.t.tolist(), "heat_deviation": self.heat_deviation.tolist(),
                "derivative_small_t": self.derivative_small_t.tolist(),
                "derivative_large_t": self.derivative_large_t.tolist(), "k": self.k}

    @property
    def converges(self) -> dict:
        return {
            "heat_to_identity": bool(self.heat_deviation[0] <= self.heat_deviation.max() * 1e-3 + 1e-14),
            "derivative_at_zero": bool(self.derivative_small_t[0] <= self.derivative_small_t.max() * 1e-3 + 1e-14),
            "derivative_at_infinity": bool(self.derivative_large_t[-1] <= self.derivative_large_t.max() * 1e-3 + 1e-14),
        }


def limits_check(gen: Generator, f, grid: ScaleGrid | None = None, k: int = 1) -> LimitsReport:
    grid = grid or make_grid(gen)
    ts = grid.t_values
    f = np.asarray(f, dtype=float)
    space = gen.space
    H = scale_stack(gen, heat(), ts, f)
    D = scale_stack(gen, heat_derivative(k), ts, f)
    D0 = scale_stack(gen, heat_derivative(k), ts, f - project_constants(space, f))
    return LimitsReport(ts, l2norm(space, (H - f[None, :]).T), l2norm(space, D.T), l2norm(space, D0.T), k)


# ------------------------------------------------------ eigensystem sidecar

MAGIC = b"SGCALC01"


def save_eigensystem(path, basis: DenseBasis) -> None:
    """Write ``n, eigenvalues, vectors (row-major), measure`` as little-endian f64."""
    n = len(basis.eigenvalues)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<d", float(n)))
        for arr in (basis.eigenvalues, basis.vectors, basis.measure):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_eigensystem(path, gen: Generator | None = None) -> DenseBasis:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError("not an eigensystem sidecar (bad magic)")
    n = int(struct.unpack("<d", raw[8:16])[0])
    data = np.frombuffer(raw[16:], dtype="<f8")
    if data.size != n + n * n + n:
        raise ValueError("sidecar size does not match its header")
    lam = data[:n].copy()
    V = data[n:n + n * n].reshape(n, n).copy()
    mu = data[n + n * n:].copy()
    if gen is not None:
        if gen.space.n != n or not np.array_equal(gen.space.measure, mu):
            raise ValueError("sidecar does not belong to this generator")
    return DenseBasis(lam, V, mu)


def radius_scales(gen: Generator, grid: ScaleGrid, max_radius: float | None = None):
    """Grid scales whose radii ``t^{1/m}`` are closest to 1, 2, 4, ... (deduplicated)."""
    r = grid.t_values ** (1.0 / gen.m)
    max_radius = gen.space.diameter if max_radius is None else max_radius
    out = []
    target = 1.0
    while target <= max_radius:
        j = int(np.argmin(np.abs(np.log(r / target))))
        if not out or out[-1] != j:
            out.append(j)
        target *= 2
    return [float(grid.t_values[j]) for j in out]


__all__ = [name for name in dir() if not name.startswith("_")] + ["radius_grid"]
