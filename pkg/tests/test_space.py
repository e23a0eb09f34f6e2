import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_graph
from sgcalc.errors import DisconnectedGraph, EmptyGrid, NonPositiveWeight
from sgcalc.space import (
    build_space,
    check_metric,
    cycle,
    grid2d,
    maximal,
    measure_doubling,
    path,
    poincare_constant,
    radius_grid,
    read_graph,
    write_graph,
)


def test_two_point_space(p2):
    assert np.array_equal(p2.metric, [[0, 1], [1, 0]])
    assert p2.total_mass == 2


def test_triangle_metric():
    s = build_space([(0, 1, 1), (1, 2, 1), (0, 2, 1)])
    off = s.metric[~np.eye(3, dtype=bool)]
    assert np.all(off == 1)


def test_four_cycle_opposite_corners():
    assert cycle(4).metric[0, 2] == 2


def test_invalid_inputs():
    with pytest.raises(DisconnectedGraph):
        build_space([(0, 1, 1), (2, 3, 1)])
    with pytest.raises(NonPositiveWeight):
        build_space([(0, 1, 0.0)])
    with pytest.raises(NonPositiveWeight):
        build_space([(0, 1, 1.0)], [1.0, -1.0])


def test_ball_invariants():
    s = grid2d(6, 5)
    prev = None
    for r in (0, 1, 2.5, 4):
        b = s.ball(7, r)
        assert 7 in b.members and b.mass > 0
        if prev is not None:
            assert set(prev.members) <= set(b.members)
        prev = b


def test_path_doubling_interval_counting():
    s = path(101)
    m1 = s.ball_masses(10)[50]
    m2 = s.ball_masses(20)[50]
    assert (m1, m2) == (21, 41)


def test_single_vertex_radius_gives_ratio_one():
    rep = measure_doubling(path(10), [0.25])
    assert rep.C0 == 1.0 and rep.d_hom == 0.0


def test_doubling_empty_grid():
    with pytest.raises(EmptyGrid):
        measure_doubling(path(4), [])


def test_doubling_report_fields():
    rep = measure_doubling(grid2d(8, 8))
    assert rep.C0 >= 1 and rep.d_hom >= 0 and rep.N_comp >= 0
    assert rep.to_dict() == measure_doubling(grid2d(8, 8)).to_dict()


def test_doubling_invariant_under_mass_scaling():
    a = path(30)
    b = path(30, mass=2.0)
    ra, rb = measure_doubling(a), measure_doubling(b)
    assert ra.C0 == pytest.approx(rb.C0, rel=1e-14)
    assert ra.N_comp == pytest.approx(rb.N_comp, rel=1e-12)


def test_volume_growth_bound():
    s = grid2d(10, 10)
    rep = measure_doubling(s)
    radii = radius_grid(s, include_zero=False)
    for R in radii:
        mR = s.ball_masses(R)
        for theta in (2, 4, 8):
            # mu(B(x, theta R)) <= C0^{log2 theta} mu(B(x, R))
            assert np.all(s.ball_masses(theta * R) <= rep.C0 ** math.log2(theta) * mR * (1 + 1e-12))


def test_maximal_examples():
    s = path(3)
    assert np.allclose(maximal(s, np.full(3, -2.0)), 2.0)
    Mf = maximal(s, [1.0, 0.0, 0.0])
    assert Mf[0] == 1.0
    assert Mf[2] == pytest.approx(1 / 3)


def _brute_maximal(space, f, s):
    out = np.abs(f).astype(float).copy()
    for x in range(space.n):
        for c in range(space.n):
            for r in np.unique(space.metric):
                members = np.flatnonzero(space.metric[c] <= r + 1e-12)
                if x in members:
                    mu = space.measure[members]
                    avg = (np.sum(np.abs(f[members]) ** s * mu) / mu.sum()) ** (1 / s)
                    out[x] = max(out[x], avg)
    return out


@pytest.mark.parametrize("s", [1.0, 2.0])
def test_maximal_matches_brute_force(rng, s):
    sp = random_graph(rng, 12)
    f = rng.standard_normal(12)
    assert np.allclose(maximal(sp, f, s), _brute_maximal(sp, f, s), rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.5, 3.0))
def test_maximal_properties(seed, s):
    r = np.random.default_rng(seed)
    sp = grid2d(4, 5)
    f = r.standard_normal(sp.n)
    g = np.abs(f) + r.uniform(0, 1, sp.n)
    Mf, Mg = maximal(sp, f, s), maximal(sp, g, s)
    assert np.all(Mf >= np.abs(f) - 1e-12)
    assert np.all(Mf <= Mg + 1e-12)
    assert np.allclose(maximal(sp, -3.0 * f, s), 3.0 * Mf, rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 40))
def test_metric_is_a_metric(seed, n):
    sp = random_graph(np.random.default_rng(seed), n)
    D = sp.metric
    assert np.allclose(D, D.T) and np.all(np.diag(D) == 0)
    assert check_metric(sp) <= 1e-12


def test_poincare_two_point(p2):
    ball = p2.ball(0, 1.0)
    assert poincare_constant(p2, 2.0, ball) >= 0.5 - 1e-12


def test_poincare_stable_under_refinement():
    vals = []
    for n in (17, 33, 65):
        sp = path(n, length=1.0 / (n - 1))
        vals.append(poincare_constant(sp, 2.0, sp.ball(sp.center_vertex(), 0.5)))
    assert max(vals[1:]) / min(vals[1:]) < 1.2


def test_graph_file_round_trip(tmp_path):
    sp = path(5, length=0.5, mass=2.0)
    f = tmp_path / "g.txt"
    write_graph(sp, f)
    back = read_graph(f)
    assert np.allclose(back.metric, sp.metric) and np.allclose(back.measure, sp.measure)
