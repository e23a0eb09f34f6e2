"""Finite metric-measure spaces built from weighted graphs.

A :class:`Space` carries the shortest-path metric and a vertex measure.  All
sups over balls range over closed balls ``{y : d(x, y) <= r}`` with radii taken
from a finite radius grid (by default the sorted distinct inter-vertex
distances), so every supremum below is a finite maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from .errors import DegenerateBall, DisconnectedGraph, EmptyGrid, NonPositiveWeight

# relative slack used when testing d(x, y) <= r on floating distances
_RADIUS_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class Space:
    edges: np.ndarray  # (E, 2) int
    lengths: np.ndarray  # (E,)
    measure: np.ndarray  # (n,)
    metric: np.ndarray  # (n, n) shortest-path distances
    coords: np.ndarray | None = None
    name: str = "graph"
    shape: tuple[int, ...] | None = None

    @property
    def n(self) -> int:
        return self.measure.shape[0]

    @property
    def diameter(self) -> float:
        return float(self.metric.max())

    @property
    def total_mass(self) -> float:
        return float(self.measure.sum())

    def ball(self, center: int, radius: float) -> "Ball":
        members = np.flatnonzero(self.metric[center] <= _slack(radius))
        return Ball(int(center), float(radius), members, float(self.measure[members].sum()))

    def ball_mask(self, radius: float) -> np.ndarray:
        """Boolean matrix ``mask[c, y] = d(c, y) <= radius`` (row = center)."""
        return self.metric <= _slack(radius)

    def ball_masses(self, radius: float) -> np.ndarray:
        return self.ball_mask(radius) @ self.measure

    def center_vertex(self) -> int:
        """Vertex of minimal eccentricity (lowest index on ties)."""
        return int(np.argmin(self.metric.max(axis=1)))


@dataclass(frozen=True)
class Ball:
    center: int
    radius: float
    members: np.ndarray = field(repr=False)
    mass: float = 0.0

    def __len__(self) -> int:
        return len(self.members)


@dataclass
class GeometryReport:
    C0: float
    d_hom: float
    c_comp: float
    N_comp: float
    attained_at: dict
    radius_grid: np.ndarray
    saturated: np.ndarray  # radii exceeding the diameter

    def to_dict(self) -> dict:
        return {
            "C0": self.C0,
            "d_hom": self.d_hom,
            "c_comp": self.c_comp,
            "N_comp": self.N_comp,
            "attained_at": self.attained_at,
            "radius_grid": [float(r) for r in self.radius_grid],
            "saturated": [float(r) for r in self.saturated],
        }


def _slack(radius: float) -> float:
    return radius * (1.0 + _RADIUS_SLACK) + _RADIUS_SLACK


def build_space(edge_list, vertex_measures=None, *, coords=None, name="graph", shape=None) -> Space:
    """Build a :class:`Space` from ``(u, v, length)`` triples.

    ``vertex_measures`` defaults to unit mass on every vertex.  Raises
    :class:`DisconnectedGraph` or :class:`NonPositiveWeight` on invalid input.
    """
    arr = np.asarray(edge_list, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError("edge_list must be a sequence of (u, v, length) triples")
    edges = arr[:, :2].astype(np.int64)
    if not np.array_equal(edges, arr[:, :2]) or (edges < 0).any():
        raise ValueError("vertex labels must be nonnegative integers")
    lengths = arr[:, 2].copy()
    if not np.all(np.isfinite(lengths)) or (lengths <= 0).any():
        raise NonPositiveWeight("edge lengths must be finite and > 0")
    if (edges[:, 0] == edges[:, 1]).any():
        raise ValueError("self-loops are not allowed")
    key = np.sort(edges, axis=1)
    if len(np.unique(key, axis=0)) != len(key):
        raise ValueError("duplicate edges are not allowed")

    n_from_edges = int(edges.max()) + 1 if len(edges) else 1
    if vertex_measures is None:
        measure = np.ones(n_from_edges)
    else:
        measure = np.asarray(vertex_measures, dtype=float).copy()
        if measure.shape[0] < n_from_edges:
            raise ValueError("vertex_measures shorter than the vertex set")
    if not np.all(np.isfinite(measure)) or (measure <= 0).any():
        raise NonPositiveWeight("vertex measures must be finite and > 0")
    n = measure.shape[0]

    adj = sp.coo_matrix((lengths, (key[:, 0], key[:, 1])), shape=(n, n)).tocsr()
    ncomp, _ = csgraph.connected_components(adj, directed=False)
    if ncomp != 1:
        raise DisconnectedGraph(f"graph has {ncomp} connected components")
    metric = csgraph.shortest_path(adj, method="D", directed=False)
    metric = np.minimum(metric, metric.T)  # summation order can differ in the last bit

    for a in (edges, lengths, measure, metric):
        a.setflags(write=False)
    if coords is not None:
        coords = np.asarray(coords, dtype=float)
        coords.setflags(write=False)
    return Space(key, lengths, measure, metric, coords, name, shape)


def path(n: int, length: float = 1.0, mass: float = 1.0) -> Space:
    edges = [(i, i + 1, length) for i in range(n - 1)]
    coords = (np.arange(n, dtype=float) * length)[:, None]
    return build_space(edges, np.full(n, mass), coords=coords, name=f"path({n})", shape=(n,))


def cycle(n: int) -> Space:
    if n < 3:
        raise ValueError("cycle needs at least 3 vertices")
    edges = [(i, (i + 1) % n, 1.0) for i in range(n)]
    ang = 2 * np.pi * np.arange(n) / n
    return build_space(edges, np.ones(n), coords=np.c_[np.cos(ang), np.sin(ang)], name=f"cycle({n})")


def grid2d(nx: int, ny: int) -> Space:
    """Unit grid graph; vertex ``(i, j)`` has index ``i * ny + j``."""
    idx = np.arange(nx * ny).reshape(nx, ny)
    right = np.c_[idx[:, :-1].ravel(), idx[:, 1:].ravel()]
    down = np.c_[idx[:-1, :].ravel(), idx[1:, :].ravel()]
    e = np.vstack([right, down])
    edges = np.c_[e, np.ones(len(e))]
    ii, jj = np.divmod(np.arange(nx * ny), ny)
    return build_space(
        edges, np.ones(nx * ny), coords=np.c_[ii, jj].astype(float),
        name=f"grid2d({nx},{ny})", shape=(nx, ny),
    )


def read_graph(source) -> Space:
    """Parse the text graph format.

    One edge per line ``u v length``; ``# measure u m`` lines set vertex
    masses (default 1); other ``#`` lines are comments.
    """
    text = Path(source).read_text(encoding="utf-8") if not hasattr(source, "read") else source.read()
    edges, masses = [], {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == "measure":
                if len(parts) != 3:
                    raise ValueError(f"line {lineno}: expected '# measure u m'")
                masses[int(parts[1])] = float(parts[2])
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 'u v length'")
        edges.append((int(parts[0]), int(parts[1]), float(parts[2])))
    if not edges:
        raise ValueError("graph file has no edges")
    n = max(max(u, v) for u, v, _ in edges) + 1
    if masses:
        n = max(n, max(masses) + 1)
    measure = np.ones(n)
    for v, m in masses.items():
        measure[v] = m
    return build_space(edges, measure, name=str(getattr(source, "name", source)))


def write_graph(space: Space, dest) -> None:
    lines = [f"{u} {v} {l!r}" for (u, v), l in zip(space.edges.tolist(), space.lengths.tolist())]
    lines += [f"# measure {i} {m!r}" for i, m in enumerate(space.measure.tolist()) if m != 1.0]
    Path(dest).write_text("\n".join(lines) + "\n", encoding="utf-8")


def check_metric(space: Space, max_exhaustive: int = 500, samples: int = 200_000, seed: int = 0) -> float:
    """Return the worst triangle-inequality violation (<= 0 means none).

    Exhaustive for small spaces; random triples otherwise.
    """
    D = space.metric
    if not np.allclose(D, D.T, rtol=0, atol=0) or np.any(np.diag(D) != 0):
        return math.inf
    n = space.n
    if n <= max_exhaustive:
        worst = -np.inf
        for k in range(n):
            worst = max(worst, float((D - (D[:, [k]] + D[[k], :])).max()))
        return worst
    rng = np.random.default_rng(seed)
    i, j, k = rng.integers(0, n, size=(3, samples))
    return float((D[i, j] - D[i, k] - D[k, j]).max())


def radius_grid(space: Space, thin: float | None = None, include_zero: bool = True) -> np.ndarray:
    """Sorted distinct inter-vertex distances, optionally thinned geometrically.

    With ``thin = q > 1`` a radius is kept only if it is at least ``q`` times
    the previously kept positive radius (the largest distance is always kept).
    """
    radii = np.unique(np.round(space.metric, 12))
    if not include_zero:
        radii = radii[radii > 0]
    if thin is not None and thin > 1 and len(radii) > 2:
        kept = [r for r in radii if r == 0]
        last = None
        for r in radii[radii > 0]:
            if last is None or r >= thin * last:
                kept.append(r)
                last = r
        if kept[-1] != radii[-1]:
            kept.append(radii[-1])
        radii = np.array(kept)
    return radii


def measure_doubling(space: Space, radius_grid_=None, *, max_rows: int = 512) -> GeometryReport:
    """Measure the doubling constant and the comparison exponent.

    ``C0`` is the largest ratio ``mu(B(x, 2r)) / mu(B(x, r))`` over all centers
    and grid radii.  ``N_comp`` and ``c_comp`` fit
    ``mu(B(y, r)) <= c (1 + d(x, y) / r)^N mu(B(x, r))``: a least-squares line
    through the upper envelope in log-log coordinates gives ``N``; ``c`` is
    then inflated to the smallest value making the bound a true majorant on
    every evaluated triple.  Rows ``x`` are subsampled above ``max_rows``.
    """
    radii = radius_grid(space) if radius_grid_ is None else np.asarray(radius_grid_, dtype=float)
    if radii.size == 0:
        raise EmptyGrid("radius grid is empty")
    if (radii < 0).any() or np.any(np.diff(radii) < 0):
        raise ValueError("radius grid must be nonnegative and sorted")

    D, mu = space.metric, space.measure
    C0, arg = 1.0, None
    masses = {}
    for r in radii:
        m1 = space.ball_masses(r)
        m2 = space.ball_masses(2 * r)
        masses[float(r)] = m1
        ratio = m2 / m1
        i = int(np.argmax(ratio))
        if ratio[i] > C0 * (1 + 1e-15):
            C0, arg = float(ratio[i]), {"center": i, "radius": float(r)}
    d_hom = math.log2(C0)

    rows = np.arange(space.n)
    if space.n > max_rows:
        rows = np.linspace(0, space.n - 1, max_rows).round().astype(int)
    # envelope of log ratio against log(1 + d/r)
    pos = [r for r in radii if r > 0]
    bins = np.linspace(0.0, math.log1p(space.diameter / min(pos)) if pos else 1.0, 41)
    env = np.full(len(bins) - 1, -np.inf)
    triples = []
    for r in pos:
        m = masses[float(r)]
        u = np.log1p(D[rows] / r)  # (rows, n): x = row, y = column
        lr = np.log(m[None, :] / m[rows][:, None])
        triples.append((u, lr))
        which = np.clip(np.digitize(u, bins) - 1, 0, len(env) - 1)
        np.maximum.at(env, which.ravel(), lr.ravel())
    ok = np.isfinite(env)
    centers = 0.5 * (bins[1:] + bins[:-1])
    if ok.sum() >= 2:
        N = float(np.polyfit(centers[ok], env[ok], 1)[0])
    else:
        N = 0.0
    N = max(N, 0.0)
    log_c, where = 0.0, None
    for r, (u, lr) in zip(pos, triples):
        excess = lr - N * u
        k = int(np.argmax(excess))
        if excess.flat[k] > log_c:
            log_c = float(excess.flat[k])
            xi, yi = np.unravel_index(k, excess.shape)
            where = {"x": int(rows[xi]), "y": int(yi), "radius": float(r)}
    attained = {"doubling": arg, "comparison": where}
    saturated = radii[radii > space.diameter]
    return GeometryReport(C0, d_hom, math.exp(log_c), N, attained, radii, saturated)


def maximal(space: Space, f, s: float = 1.0, radii=None) -> np.ndarray:
    """Uncentered maximal function ``M_s f``.

    Sup over all closed balls containing ``x`` (every center, every radius in
    ``radii``; defaults to the full canonical grid) of the ``L^s`` average of
    ``|f|``.  ``f`` may be ``(n,)`` or ``(n, k)``.
    """
    if not s > 0:
        raise ValueError("s must be positive")
    f = np.asarray(f, dtype=float)
    vec = f.ndim == 1
    F = np.abs(f.reshape(space.n, -1)) ** s
    radii = radius_grid(space) if radii is None else np.asarray(radii, dtype=float)
    out = F.copy()  # singleton balls
    mu = space.measure
    for r in radii:
        mask = space.ball_mask(r)
        avg = (mask @ (F * mu[:, None])) / (mask @ mu)[:, None]
        for j in range(F.shape[1]):
            # x in B(c, r) iff c in B(x, r): max over centers in the ball
            best = np.where(mask, avg[:, j][:, None], 0.0).max(axis=0)
            np.maximum(out[:, j], best, out=out[:, j])
    out = out ** (1.0 / s)
    return out[:, 0] if vec else out


def gradient_form(space: Space, members, conductance=None) -> np.ndarray:
    """Quadratic form of ``||grad f||^2_{L^2(ball)}`` on the induced subgraph.

    Uses the degree-normalized vertex gradient restricted to edges inside the
    ball.  ``conductance`` are per-edge coefficients (default 1).
    """
    members = np.asarray(members)
    pos = -np.ones(space.n, dtype=int)
    pos[members] = np.arange(len(members))
    w = np.ones(len(space.lengths)) if conductance is None else np.asarray(conductance, float)
    u, v = space.edges[:, 0], space.edges[:, 1]
    inside = (pos[u] >= 0) & (pos[v] >= 0)
    pu, pv = pos[u[inside]], pos[v[inside]]
    we, le = w[inside], space.lengths[inside]
    k = len(members)
    W = np.zeros(k)
    np.add.at(W, pu, we)
    np.add.at(W, pv, we)
    mu = space.measure[members]
    G = np.zeros((k, k))
    for a, b, wab, l in zip(pu, pv, we, le):
        # contribution of edge (a,b) to |grad f|^2 at a and at b
        c = wab / l**2 * (mu[a] / W[a] + mu[b] / W[b])
        G[a, a] += c
        G[b, b] += c
        G[a, b] -= c
        G[b, a] -= c
    return G


def poincare_constant(space: Space, q: float, ball: Ball, gradient=None, *, n_random: int = 32, seed: int = 0) -> float:
    """Smallest C with ``(avg|f - avg f|^q)^(1/q) <= C r (avg|grad f|^q)^(1/q)`` over probes.

    Probes are the eigenvectors of the ball-restricted gradient form (exact
    for q = 2) plus ``n_random`` random fields.  ``gradient`` maps a field on
    the ball's members to its gradient magnitudes; defaults to the induced
    subgraph gradient with unit coefficients.
    """
    if not q >= 1:
        raise ValueError("q must be >= 1")
    members = ball.members
    if len(members) < 2:
        raise DegenerateBall("ball has a single member")
    if ball.radius <= 0:
        raise DegenerateBall("ball radius must be positive")
    mu = space.measure[members]
    mass = mu.sum()
    if gradient is None:
        sub = _induced(space, members)
        from .spectral import vertex_gradient  # local import: spectral builds on space

        def gradient(F):
            return vertex_gradient(sub, F)

    G = gradient_form(space, members)
    # generalized eigenproblem G v = lam M v on the mean-zero subspace
    Mh = 1.0 / np.sqrt(mu)
    lam, vecs = np.linalg.eigh(Mh[:, None] * G * Mh[None, :])
    probes = [Mh[:, None] * vecs]
    rng = np.random.default_rng(seed)
    probes.append(rng.standard_normal((len(members), n_random)))
    P = np.hstack(probes)
    P = P - (mu @ P / mass)[None, :]
    keep = np.abs(P).max(axis=0) > 1e-12
    P = P[:, keep]
    lhs = ((np.abs(P) ** q * mu[:, None]).sum(axis=0) / mass) ** (1 / q)
    g = gradient(P)
    rhs = ball.radius * ((np.abs(g) ** q * mu[:, None]).sum(axis=0) / mass) ** (1 / q)
    ok = rhs > 1e-14 * np.maximum(lhs, 1e-300)
    if not ok.any():
        return 0.0
    return float((lhs[ok] / rhs[ok]).max())


def _induced(space: Space, members) -> Space:
    members = np.asarray(members)
    pos = -np.ones(space.n, dtype=int)
    pos[members] = np.arange(len(members))
    u, v = space.edges[:, 0], space.edges[:, 1]
    inside = (pos[u] >= 0) & (pos[v] >= 0)
    edges = np.c_[pos[u[inside]], pos[v[inside]], space.lengths[inside]]
    return build_space(edges, space.measure[members], name=f"{space.name}[ball]")
