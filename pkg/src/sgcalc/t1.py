"""Measurement harness for the T(1) criterion on a Space.

Given an operator ``T`` with its mu-adjoint, the harness tabulates
off-diagonal decay of ``(sL)^kappa e^{-sL} T`` between separated balls, the
weak boundedness ratios between nearby balls, the semigroup BMO norms of
``T(1)`` and ``T*(1)``, and an estimate of ``||T||_{2 -> 2}``.  It measures;
it never proves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse.linalg as sla

from .bmo import BmoReport, bmo_l_norm, bmo_l_norms
from .errors import NoSeparatedPairs, SingularSpec
from .space import Ball, Space
from .spectral import (
    Generator,
    ScaleGrid,
    apply_function,
    ball_pairs,
    fit_decay,
    heat,
    heat_derivative,
    inner,
    make_grid,
    radius_scales,
    set_distance,
)


@dataclass
class OperatorUnderTest:
    """``T`` and its adjoint in ``<f, g> = sum f g mu``; both act on (n,) or (n, k)."""

    forward: Callable[[np.ndarray], np.ndarray]
    adjoint: Callable[[np.ndarray], np.ndarray]
    kappa: int = 1
    label: str = "T"
    matrix: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_matrix(cls, T: np.ndarray, measure, kappa: int = 1, label: str = "T") -> "OperatorUnderTest":
        T = np.asarray(T, dtype=float)
        mu = np.asarray(measure, dtype=float)
        Tstar = (T.T * mu[None, :]) / mu[:, None]
        return cls(lambda f: T @ f, lambda g: Tstar @ g, kappa, label, T)

    @classmethod
    def from_function(cls, gen: Generator, g, t: float, kappa: int = 1, label: str | None = None):
        """``g(tL)``, self-adjoint."""
        act = lambda f: apply_function(gen, g, t, f)  # noqa: E731
        return cls(act, act, kappa, label or f"{g.name}(t={t:g})")

    @classmethod
    def multiplication(cls, b, kappa: int = 1, label: str = "multiplication"):
        b = np.asarray(b, dtype=float)

        def act(f):
            f = np.asarray(f, dtype=float)
            return b * f if f.ndim == 1 else b[:, None] * f

        return cls(act, act, kappa, label)

    def scaled(self, c: float) -> "OperatorUnderTest":
        M = None if self.matrix is None else c * self.matrix
        return OperatorUnderTest(lambda f: c * self.forward(f), lambda g: c * self.adjoint(g),
                                 self.kappa, f"{c:g}*{self.label}", M)

    def adjoint_defect(self, space: Space, n_pairs: int = 4, seed: int = 0) -> float:
        """Largest relative ``|<Tf, g> - <f, T*g>|`` over random pairs."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_pairs):
            f, g = rng.standard_normal(space.n), rng.standard_normal(space.n)
            a, b = inner(space, self.forward(f), g), inner(space, f, self.adjoint(g))
            worst = max(worst, abs(a - b) / max(abs(a), abs(b), 1e-300))
        return worst


# --------------------------------------------------------------- builders


def riesz_kernel(space: Space, gamma: float = 2.0, axis: int = 0):
    """``K(x, y) = (x_a - y_a) / |x - y|^{gamma + 1}`` with Euclidean ``|.|`` of vertex coordinates.

    The Euclidean norm keeps the kernel smooth off the diagonal; on grid
    graphs it is comparable to the graph metric, so ``|K| <= C / d^gamma``.
    """
    if space.coords is None:
        raise SingularSpec("Riesz-like kernel needs vertex coordinates")
    X = space.coords
    c = X[:, axis]
    R = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        K = (c[:, None] - c[None, :]) / R ** (gamma + 1.0)
    np.fill_diagonal(K, 0.0)
    return K


def sign_kernel(space: Space, gamma: float = 1.0):
    """``K(x, y) = sign(y - x) / d(x, y)^gamma`` using vertex order (paths)."""
    idx = np.arange(space.n)
    with np.errstate(divide="ignore", invalid="ignore"):
        K = np.sign(idx[None, :] - idx[:, None]) / space.metric**gamma
    np.fill_diagonal(K, 0.0)
    return K


def make_cz_operator(space: Space, kernel_spec: dict | None = None) -> OperatorUnderTest:
    """Discrete standard-kernel operator ``T[x, y] = K(x, y) mu(y)`` off the diagonal.

    ``kernel_spec`` keys: ``profile`` (``"riesz"``, ``"sign"``, ``"zero"`` or an
    (n, n) array / callable ``(space) -> K``), ``gamma``, ``axis``,
    ``diagonal`` (``"cancel"`` gives ``T(1) = 0``, ``"zero"``, or a field
    prescribing ``T(1)``), ``truncation`` (drop pairs farther than this), ``kappa``.
    """
    spec = dict(kernel_spec or {})
    profile = spec.get("profile", "riesz")
    gamma = float(spec.get("gamma", 2.0 if isinstance(profile, str) and profile == "riesz" else 1.0))
    if isinstance(profile, str):
        if profile == "riesz":
            K = riesz_kernel(space, gamma, int(spec.get("axis", 0)))
        elif profile == "sign":
            K = sign_kernel(space, gamma)
        elif profile == "zero":
            K = np.zeros((space.n, space.n))
        else:
            raise ValueError(f"unknown kernel profile {profile!r}")
    elif callable(profile):
        K = np.array(profile(space), dtype=float)
    else:
        K = np.array(profile, dtype=float)
    off = ~np.eye(space.n, dtype=bool)
    if not np.all(np.isfinite(K[off])):
        raise SingularSpec("kernel is not finite off the diagonal")
    K[~off] = 0.0
    trunc = spec.get("truncation")
    if trunc is not None:
        K[space.metric > trunc] = 0.0
    T = K * space.measure[None, :]
    diag = spec.get("diagonal", "cancel")
    if isinstance(diag, str):
        if diag == "cancel":
            np.fill_diagonal(T, -T.sum(axis=1))
        elif diag != "zero":
            raise ValueError(f"unknown diagonal rule {diag!r}")
    else:
        target = np.asarray(diag, dtype=float)
        np.fill_diagonal(T, target - T.sum(axis=1))
    label = spec.get("label", f"cz({profile if isinstance(profile, str) else 'custom'})")
    return OperatorUnderTest.from_matrix(T, space.measure, int(spec.get("kappa", 1)), label)


# ------------------------------------------------------------------- norms


@dataclass
class NormResult:
    value: float
    converged: bool
    restarts: list

    def to_dict(self) -> dict:
        return {"value": self.value, "converged": self.converged, "restarts": self.restarts}


def estimate_l2_norm(T: OperatorUnderTest, space: Space, tol: float = 1e-8, restarts: int = 4,
                     seed: int = 0, max_iter: int = 500) -> NormResult:
    """``sqrt(lambda_max(T* T))`` in the mu-inner product.

    Krylov-accelerated power iteration (Lanczos on the mu-symmetrized
    ``T* T``) from a deterministic start and ``restarts`` random starts; the
    largest Rayleigh value is kept.
    """
    n = space.n
    s = np.sqrt(space.measure)

    def mv(x):
        return s * T.adjoint(T.forward(x / s))

    op = sla.LinearOperator((n, n), matvec=mv, dtype=float)
    rng = np.random.default_rng(seed)
    starts = [np.ones(n) + np.linspace(0.0, 1.0, n)] + [rng.standard_normal(n) for _ in range(restarts)]
    vals, ok = [], True
    for v0 in starts:
        if n <= 2:
            M = np.column_stack([mv(e) for e in np.eye(n)])
            vals.append(float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1]))
            continue
        try:
            lam = sla.eigsh(op, k=1, which="LA", v0=v0, tol=tol, maxiter=max_iter,
                            return_eigenvectors=False, ncv=min(n, 24))
            vals.append(float(lam[0]))
        except sla.ArpackNoConvergence as exc:
            ok = False
            vals.append(float(np.max(exc.eigenvalues)) if len(exc.eigenvalues) else 0.0)
    vals = [math.sqrt(max(v, 0.0)) for v in vals]
    return NormResult(max(vals), ok, vals)


# ------------------------------------------------------------ block ratios


class _Block:
    """Map ``a -> sqrt(mu_Q2) (Op f)|_Q2`` with ``f = sum_y a_y delta_y / sqrt(mu_y)`` on Q1.

    The columns ``Op(delta_y / sqrt(mu_y))`` are computed once per Q1 when
    ``|Q1| <= max_exact`` and shared by every Q2; larger Q1 use randomized
    subspace iteration with the adjoint.
    """

    def __init__(self, space: Space, fwd, adj, Q1, max_exact: int = 64, probes: int = 32,
                 iters: int = 4, seed: int = 0):
        self.space, self.fwd, self.adj, self.Q1 = space, fwd, adj, np.asarray(Q1)
        self.s1 = np.sqrt(space.measure[self.Q1])
        self.probes, self.iters, self.seed = probes, iters, seed
        self.columns = None
        if len(self.Q1) <= max_exact:
            E = np.zeros((space.n, len(self.Q1)))
            E[self.Q1, np.arange(len(self.Q1))] = 1.0 / self.s1
            self.columns = np.asarray(fwd(E))

    def sigma(self, Q2) -> float:
        Q2 = np.asarray(Q2)
        s2 = np.sqrt(self.space.measure[Q2])
        if self.columns is not None:
            return float(np.linalg.norm(s2[:, None] * self.columns[Q2], 2))
        n = self.space.n

        def A(a):
            f = np.zeros((n, a.shape[1]))
            f[self.Q1] = a / self.s1[:, None]
            return s2[:, None] * self.fwd(f)[Q2]

        def At(b):
            g = np.zeros((n, b.shape[1]))
            g[Q2] = b / s2[:, None]
            return self.s1[:, None] * self.adj(g)[self.Q1]

        X = np.random.default_rng(self.seed).standard_normal((len(self.Q1), self.probes))
        for _ in range(self.iters):
            X, _ = np.linalg.qr(At(A(X)))
        return float(np.linalg.norm(A(X), 2))


@dataclass
class HypothesisReport:
    label: str
    off_diag_table: list
    weak_bound_table: list
    t1_bmo: BmoReport
    t1star_bmo: BmoReport
    t1_cancellation: float
    l2_norm_estimate: NormResult
    fitted: dict
    verdict: dict
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "off_diag_table": self.off_diag_table,
            "weak_bound_table": self.weak_bound_table,
            "t1_bmo": self.t1_bmo.to_dict(),
            "t1star_bmo": self.t1star_bmo.to_dict(),
            "t1_cancellation": self.t1_cancellation,
            "l2_norm_estimate": self.l2_norm_estimate.to_dict(),
            "fitted": self.fitted,
            "verdict": self.verdict,
            "notes": self.notes,
        }


def default_scales(gen: Generator, min_separation: float = 16.0, radii=None):
    """Scales ``s = r^m`` for ``r = 1, 2, 4, ...`` with ``diameter / r >= min_separation``."""
    if radii is None:
        radii, r = [], 1.0
        while gen.space.diameter / r >= min_separation:
            radii.append(r)
            r *= 2
        if not radii:
            radii = [1.0]
    return [float(r) ** gen.m for r in radii]


def _pairs(gen, s, mode, max_pairs, margin):
    r = s ** (1.0 / gen.m)
    return r, ball_pairs(gen.space, r, mode, max_pairs=max_pairs, margin=margin)


def check_off_diagonal(T: OperatorUnderTest, gen: Generator, scales, kappa: int | None = None,
                       max_pairs: int = 32, max_exact: int = 64, margin: float | None = None) -> list:
    """Rows per (direction, s, Q1, Q2) for separated pairs, ``d(Q1, Q2) >= 2 s^{1/m}``.

    Direction ``"T"`` measures ``(sL)^kappa e^{-sL} T``; ``"T*"`` the same with
    the adjoint.  Scales without separated pairs are reported with
    ``skipped = True``.  ``margin`` keeps both balls among the interior
    vertices (see :func:`ball_pairs`).
    """
    kappa = T.kappa if kappa is None else kappa
    D = heat_derivative(kappa)
    rows = []
    for s in scales:
        r, pairs = _pairs(gen, s, "separated", max_pairs, margin)
        if not pairs:
            rows.append({"direction": "T", "s": float(s), "skipped": True})
            continue
        for direction, op, opa in (("T", T.forward, T.adjoint), ("T*", T.adjoint, T.forward)):
            fwd = lambda f, op=op: apply_function(gen, D, s, op(f))  # noqa: E731
            adj = lambda g, opa=opa: opa(apply_function(gen, D, s, g))  # noqa: E731
            block = _Block(gen.space, fwd, adj, pairs[0][0].members, max_exact)
            for Q1, Q2 in pairs:
                rows.append({"direction": direction, "s": float(s), "radius": float(r),
                             "center1": Q1.center, "center2": Q2.center,
                             "distance": set_distance(gen.space, Q1.members, Q2.members),
                             "ratio": block.sigma(Q2.members), "skipped": False})
    return rows


def fit_off_diagonal(rows) -> dict:
    """Fitted exponents per (direction, s) and their minimum."""
    out = {}
    groups = {}
    for row in rows:
        if row.get("skipped"):
            continue
        groups.setdefault((row["direction"], row["s"]), []).append(row)
    for (direction, s), rs in sorted(groups.items()):
        if all(r["ratio"] <= 1e-13 for r in rs):
            out[f"{direction}@{s:.6g}"] = math.inf
            continue
        g, _ = fit_decay([r["distance"] for r in rs], rs[0]["radius"], [r["ratio"] for r in rs])
        out[f"{direction}@{s:.6g}"] = g
    finite = [g for g in out.values() if g is not None]
    out["min"] = min(finite) if finite else None
    return out


def check_weak_boundedness(T: OperatorUnderTest, gen: Generator, scales, kappa: int | None = None,
                           inner_k=(0, 1, 2), max_pairs: int = 8, max_exact: int = 64,
                           margin: float | None = None) -> list:
    """Near-pair ratios of ``(sL)^kappa e^{-sL} T (sL)^k e^{-sL}`` and the adjoint variant.

    ``k = 0`` is the weak boundedness quantity itself; ``k = 1, 2`` are the
    self-improved variants.  The adjoint variant uses ``T*`` in place of ``T``.
    """
    kappa = T.kappa if kappa is None else kappa
    D = heat_derivative(kappa)
    rows = []
    for s in scales:
        r, pairs = _pairs(gen, s, "near", max_pairs, margin)
        if not pairs:
            rows.append({"s": float(s), "skipped": True})
            continue
        for k in inner_k:
            Ik = heat_derivative(k)
            for direction, op, opa in (("T", T.forward, T.adjoint), ("T*", T.adjoint, T.forward)):
                def fwd(f, op=op, Ik=Ik):
                    return apply_function(gen, D, s, op(apply_function(gen, Ik, s, f)))

                def adj(g, opa=opa, Ik=Ik):
                    return apply_function(gen, Ik, s, opa(apply_function(gen, D, s, g)))

                block = _Block(gen.space, fwd, adj, pairs[0][0].members, max_exact)
                for Q1, Q2 in pairs:
                    rows.append({"direction": direction, "inner_k": int(k), "s": float(s),
                                 "radius": float(r), "center1": Q1.center, "center2": Q2.center,
                                 "distance": set_distance(gen.space, Q1.members, Q2.members),
                                 "ratio": block.sigma(Q2.members), "skipped": False})
    return rows


@dataclass
class T1Result:
    t1: np.ndarray
    t1star: np.ndarray
    t1_bmo: BmoReport
    t1star_bmo: BmoReport
    cancellation: float


def compute_t1(T: OperatorUnderTest, gen: Generator, grid: ScaleGrid | None = None) -> T1Result:
    """``T(1)``, ``T*(1)``, their BMO_L reports and the kappa-cancellation oscillation."""
    grid = grid or make_grid(gen)
    one = np.ones(gen.space.n)
    t1, t1s = np.asarray(T.forward(one), float), np.asarray(T.adjoint(one), float)
    reps = bmo_l_norms(gen, np.c_[t1, t1s], grid)
    canc = bmo_l_norms(gen, t1[:, None], grid, kappa=T.kappa)[0].norm
    return T1Result(t1, t1s, reps[0], reps[1], canc)


def cancellation_oscillation(T: OperatorUnderTest, gen: Generator, grid: ScaleGrid | None = None,
                             kappa: int = 1) -> float:
    """``sup_{t, Q} mu(Q)^{-1} int_Q |(1 - e^{-tL})^kappa T(1)| dmu``."""
    t1 = np.asarray(T.forward(np.ones(gen.space.n)), float)
    return bmo_l_norms(gen, t1[:, None], grid or make_grid(gen), kappa=kappa)[0].norm


DEFAULT_THRESHOLDS = {"decay_margin": 1.0, "near_ratio_factor": 10.0, "bmo_max": None,
                      "interior_margin": 0.125, "min_separation": 16.0}


def t1_report(T: OperatorUnderTest, gen: Generator, grid: ScaleGrid | None = None, thresholds=None,
              d_hom: float | None = None, scales=None, max_pairs: int = 32) -> HypothesisReport:
    """Aggregate every hypothesis measurement into a report with a verdict.

    The decay hypothesis passes when the smallest fitted exponent is at
    least ``d_hom + decay_margin``; weak boundedness passes when no near-pair
    ratio exceeds ``near_ratio_factor`` times the median.  Ball pairs are
    kept ``interior_margin * diameter`` away from the boundary (vertices
    whose balls of that radius are not full).
    """
    th = dict(DEFAULT_THRESHOLDS)
    th.update(thresholds or {})
    grid = grid or make_grid(gen)
    if d_hom is None:
        from .space import measure_doubling

        d_hom = measure_doubling(gen.space).d_hom
    scales = default_scales(gen, th["min_separation"]) if scales is None else scales
    margin = th["interior_margin"] * gen.space.diameter if th["interior_margin"] else None
    notes = ["finite space: T(1) and T*(1) are defined directly, no truncation scheme is needed"]
    off = check_off_diagonal(T, gen, scales, max_pairs=max_pairs, margin=margin)
    fitted = fit_off_diagonal(off)
    weak = check_weak_boundedness(T, gen, scales, max_pairs=max(4, max_pairs // 4), margin=margin)
    t1 = compute_t1(T, gen, grid)
    norm = estimate_l2_norm(T, gen.space)

    target = d_hom + th["decay_margin"]
    gmin = fitted["min"]
    decay_ok = gmin is not None and gmin >= target
    if gmin is None:
        notes.append("no separated pairs at the tested scales; decay not measured")
    near = np.array([r["ratio"] for r in weak if not r.get("skipped")])
    weak_ok = bool(near.size == 0 or near.max() <= th["near_ratio_factor"] * max(np.median(near), 1e-300)
                   or near.max() <= 1e-12)
    bmo_ok = True
    if th.get("bmo_max") is not None:
        bmo_ok = max(t1.t1_bmo.norm, t1.t1star_bmo.norm) <= th["bmo_max"]
    verdict = {
        "decay_target": target,
        "decay_min_exponent": gmin,
        "decay_pass": bool(decay_ok),
        "weak_boundedness_pass": weak_ok,
        "bmo_pass": bool(bmo_ok),
        "hypotheses_pass": bool(decay_ok and weak_ok and bmo_ok),
        "l2_norm": norm.value,
        "l2_converged": norm.converged,
    }
    return HypothesisReport(T.label, off, weak, t1.t1_bmo, t1.t1star_bmo, t1.cancellation, norm,
                            fitted, verdict, notes)


def random_operator(space: Space, rng: np.random.Generator, family: str) -> OperatorUnderTest:
    """Random dense operator from a few structured families (unnormalized)."""
    n = space.n
    if family == "gaussian":
        T = rng.standard_normal((n, n))
    elif family == "riesz_multiplier":
        K = riesz_kernel(space, 2.0, int(rng.integers(0, space.coords.shape[1])))
        a, b = rng.choice([-1.0, 1.0], n), rng.uniform(0.5, 1.5, n)
        T = a[:, None] * K * b[None, :]
    elif family == "decaying":
        T = rng.standard_normal((n, n)) / (1.0 + space.metric) ** 3
    else:
        raise ValueError(f"unknown random family {family!r}")
    return OperatorUnderTest.from_matrix(T * space.measure[None, :], space.measure, 1, family)


def normalized(T: OperatorUnderTest, space: Space) -> OperatorUnderTest:
    nrm = estimate_l2_norm(T, space).value
    return T.scaled(1.0 / nrm) if nrm > 0 else T
