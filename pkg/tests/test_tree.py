import itertools

import numpy as np
import pytest

from mapflow import model as M
from mapflow import tree as TR
from mapflow.errors import BudgetExceeded, TruncatedAncestor


@pytest.fixture(scope="module")
def dsys():
    nu = M.build_asymptotic_nu(1.8, 0.05)
    return TR.branch_discrete(nu, 512, 50, 5, np.random.Generator(np.random.Philox(3)))


@pytest.fixture(scope="module")
def csys():
    return TR.branch_continuous(1.75, 50, 0.02, np.random.Generator(np.random.Philox(4)))


def test_prefix_helpers():
    assert TR.is_prefix((), (1, 2))
    assert TR.is_prefix((1,), (1, 2))
    assert not TR.is_prefix((2,), (1, 2))
    assert TR.common_prefix((1, 2, 3), (1, 2, 5)) == (1, 2)


def test_ranks_ties_go_to_earlier():
    keys = np.array([3, 5, 3, -1, 5])
    assert TR._ranks(keys, keys > 0) == {1: 1, 2: 4, 3: 0, 4: 2}


def test_discrete_children_perimeters(dsys):
    for lab, c in dsys.cells.items():
        if lab == TR.ROOT:
            continue
        parent = dsys.cells[lab[:-1]]
        k = parent.neg[lab[-1]]
        assert c.start == parent.values[k] - parent.values[k + 1] - 1
        assert c.B == parent.B + k + 1
        assert c.D == pytest.approx(parent.D + parent.T[k + 1])


def test_discrete_cells_absorb(dsys):
    for c in dsys.cells.values():
        assert c.values[-1] == 0


def test_face_distance_and_root(dsys):
    assert dsys.face_distance(TR.ROOT) == 0.0
    f = dsys.faces()[0][1]
    assert dsys.face_distance(f) > 0
    with pytest.raises(TruncatedAncestor):
        dsys.face_distance((999, 1))
    assert TR.fpp_to_root(dsys, TR.ROOT, 0) == (0.0, 0.0)


def test_discrete_metric_axioms(dsys):
    faces = [f for _, f in dsys.faces()[:12]] + [TR.ROOT]
    d = {}
    for v, w in itertools.product(faces, repeat=2):
        d[v, w] = TR.tree_distance_discrete(dsys, v, w)[0]
    for v in faces:
        assert d[v, v] == 0
    for v, w in itertools.combinations(faces, 2):
        assert d[v, w] == d[w, v] and d[v, w] >= 0
    for u, v, w in itertools.permutations(faces, 3):
        assert d[u, w] <= d[u, v] + d[v, w] + 1e-9


def test_nca_is_ancestor_height(dsys):
    faces = [f for _, f in dsys.faces()[:10]]
    for v, w in itertools.combinations(faces, 2):
        c = TR.nca_discrete(dsys, v, w)
        hc = dsys.face_distance(c)
        assert hc <= min(dsys.face_distance(v), dsys.face_distance(w)) + 1e-12


def test_budget(rng):
    nu = M.build_asymptotic_nu(1.8, 0.05)
    with pytest.raises(BudgetExceeded):
        TR.branch_discrete(nu, 2048, 50, 1, rng, max_cells=3)


def test_continuous_heights_increase(csys):
    for c in csys.cells.values():
        assert np.all(np.diff(c.tt) >= 0)
        assert c.tt[0] >= c.bt


def test_continuous_coalescence_at_positive_jump(csys):
    faces = [f for _, f in csys.faces()[:15]]
    for v, w in itertools.combinations(faces, 2):
        rec = TR.nca_continuous(csys, v, w)
        assert rec.kind in ("label", "root")
        if rec.kind == "label":
            assert rec.event_z > 1


def test_continuous_metric_axioms(csys):
    faces = [f for _, f in csys.faces()[:10]] + [TR.ROOT]
    d = {}
    for v, w in itertools.product(faces, repeat=2):
        d[v, w] = TR.tree_distance(csys, v, w)[0]
    for v, w in itertools.combinations(faces, 2):
        assert d[v, w] == d[w, v] and d[v, w] >= 0
    for u, v, w in itertools.permutations(faces, 3):
        assert d[u, w] <= d[u, v] + d[v, w] + 1e-9


def test_trajectory_segments_end_at_root(csys):
    f = csys.faces()[3][1]
    segs = TR.trajectory_Y(csys, f)
    assert segs[-1][0] == TR.ROOT
    assert [len(s[0]) for s in segs] == sorted((len(s[0]) for s in segs), reverse=True)


def test_shortcut_metric(csys):
    a = TR.ShortcutMetric(csys, 0.05)
    b = TR.ShortcutMetric(csys, 0.025)
    mem = a.members()[:8]
    for v, w in itertools.combinations(mem, 2):
        d1, d2 = a.distance(v, w), b.distance(v, w)
        assert d2 <= d1 + 1e-12
        assert d1 >= abs(csys.height(v) - csys.height(w)) - 1e-12
        assert d1 <= a.td(v, w) + 1e-12
