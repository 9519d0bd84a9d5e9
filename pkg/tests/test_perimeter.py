import math

import mpmath as mp
import numpy as np
import pytest

from mapflow import model as M
from mapflow import perimeter as P
from mapflow.errors import StepCapExceeded


@pytest.fixture(scope="module")
def nu2():
    return M.build_asymptotic_nu(2.0, 0.05)


def _h_up_mp(m):
    return 2 * m * mp.binomial(2 * m, m) / mp.mpf(4) ** m if m > 0 else mp.mpf(0)


def test_point_mass_row():
    nu = M.point_mass_nu(0)
    for p in (1, 5, 40):
        row = P.kernel_row_infinite(nu, p)
        assert row.get(0) == 1.0
        assert row.total() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("p", [1, 10, 10**4])
def test_rows_are_probability_vectors(nu2, p):
    for row in (P.kernel_row_infinite(nu2, p), P.kernel_row_finite(nu2, p), P.kernel_row_target(nu2, p, 3)):
        assert np.all(row.prob >= 0) and row.tail_prob >= 0
        assert abs(row.total() - 1) < 1e-9


def test_infinite_row_ratios_high_precision(nu2):
    mp.mp.dps = 40
    p = 7
    row = P.kernel_row_infinite(nu2, p)
    pairs = [(-6, 0), (-3, 5), (1, 40), (-1, 2)]
    for k, kk in pairs:
        want = (mp.mpf(nu2.mass(np.array([k]))[0]) * _h_up_mp(p + k)) / \
               (mp.mpf(nu2.mass(np.array([kk]))[0]) * _h_up_mp(p + kk))
        assert row.get(k) / row.get(kk) == pytest.approx(float(want), rel=1e-12)


def test_infinite_row_never_hits_zero(nu2):
    row = P.kernel_row_infinite(nu2, 4)
    assert row.k.min() == -3


def test_finite_row_half_weight_at_boundary():
    nu = M.build_asymptotic_nu(2.0, 0.05, K_head=64)
    p = 9  # p + k = 4 = (p-1)/2 gets half weight
    row = P.kernel_row_finite(nu, p)
    ratio = row.get(-5) / row.get(-4)
    full = (nu.mass(np.array([-5]))[0] * nu.mass(np.array([-5]))[0]) / \
           (nu.mass(np.array([-4]))[0] * nu.mass(np.array([-6]))[0])
    assert ratio == pytest.approx(0.5 * full, rel=1e-12)
    assert row.get(-6) == 0.0


def test_target_death_probability(nu2):
    p, pt = 4, 3
    row = P.kernel_row_target(nu2, p, pt)
    # h_down_p(-pt) = 1 weights the killing jump
    want = nu2.mass(np.array([-p - pt]))[0] * 1.0 / row.norm
    assert row.get(-p - pt) == pytest.approx(want, rel=1e-14)


def test_finite_path_absorbs(nu2, rng):
    path = P.sample_path(P.Law.FINITE, nu2, 20, 10**7, rng)
    assert path.values[-1] == 0
    assert path.absorbed_at == path.values.size - 1
    assert np.all(path.values[:-1] > 0)


def test_target_path_dies_at_minus_ptarget(nu2, rng):
    path = P.sample_path(P.Law.TARGET, nu2, 5, 10**7, rng, ptarget=2)
    assert path.values[-1] == -2
    assert np.all(path.values[:-1] >= 1)


def test_infinite_path_positive(nu2, rng):
    path = P.sample_path(P.Law.INFINITE, nu2, 1, 10**4, rng)
    assert path.values.size == 10**4 + 1
    assert path.values.min() >= 1


def test_step_cap(nu2, rng):
    with pytest.raises(StepCapExceeded):
        P.sample_path(P.Law.INFINITE, nu2, 1, 100, rng, step_cap=10)


def test_compiled_infinite_step_matches_row(nu2, rng):
    p = 3
    row = P.kernel_row_infinite(nu2, p)
    n = 200000
    x = np.array([P.infinite_step(nu2.tables, p, rng) for _ in range(n)])
    for k in (-2, -1, 0, 1, 2):
        q = row.get(k)
        assert abs((x == k).mean() - q) < 5 * math.sqrt(q * (1 - q) / n)


def test_compiled_finite_step_matches_row(nu2, rng):
    p = 6
    row = P.kernel_row_finite(nu2, p)
    n = 200000
    x = np.array([P.finite_step(nu2.tables, p, 2.0, rng) for _ in range(n)])
    for k in (-6, -3, -1, 0, 1, 3):
        q = row.get(k)
        assert abs((x == k).mean() - q) < 5 * math.sqrt(q * (1 - q) / n) + 1e-12


def test_row_sampler_matches_row(nu2, rng):
    s = P._RowSampler(nu2, P.Law.TARGET, ptarget=2)
    row = P.kernel_row_target(nu2, 3, 2)
    n = 40000
    x = np.array([s.step(3, rng) for _ in range(n)])
    q = row.get(-5)
    assert abs((x == -5).mean() - q) < 5 * math.sqrt(q * (1 - q) / n)
