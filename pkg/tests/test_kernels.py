import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sheball import kernels as K
from sheball.errors import DomainError

import oracles as O

times = st.floats(0.0, 5.0, allow_nan=False)
pos_times = st.floats(1e-4, 5.0, allow_nan=False)
torus = st.floats(-1.0, 0.999999, allow_nan=False)


# -- heat kernel ------------------------------------------------------------

def test_heat_kernel_value_at_r01():
    # frozen from the wide image-sum oracle
    assert K.heat_kernel_torus(0.1, 0.0, 0.0) == pytest.approx(0.8921430571859464, abs=1e-12)
    assert K.heat_kernel_torus(0.1, 0.0, 0.0) == pytest.approx(O.wrapped_heat(0.1, 0.0, 0.0), abs=1e-12)


@pytest.mark.parametrize("r", [1e-3, 0.05, 0.7, 1.5, 4.0])
@pytest.mark.parametrize("x,y", [(0.0, 0.0), (0.3, -0.8), (-1.0, 0.99)])
def test_heat_kernel_matches_image_oracle(r, x, y):
    assert K.heat_kernel_torus(r, x, y) == pytest.approx(O.wrapped_heat(r, x, y), rel=1e-10, abs=1e-13)


def test_heat_kernel_large_time_is_uniform():
    assert K.heat_kernel_torus(50.0, 0.2, -0.7) == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("r", [0.01, 0.1, 1.0])
def test_heat_kernel_mass_one(r):
    from scipy import integrate
    v, _ = integrate.quad(lambda y: K.heat_kernel_torus(r, 0.3, y), -1, 1, points=[0.3],
                          epsabs=1e-12, limit=200)
    assert v == pytest.approx(1.0, abs=1e-8)


def test_heat_kernel_errors():
    with pytest.raises(DomainError):
        K.heat_kernel_torus(0.0, 0, 0)
    with pytest.raises(DomainError):
        K.heat_kernel_torus(0.1, 0, 0, tol=1e-3)


@given(pos_times, torus, torus)
@settings(max_examples=40, deadline=None)
def test_heat_kernel_dominates_nearest_image(r, x, y):
    d = float(K.torus_distance(x, y))
    assert K.heat_kernel_torus(r, x, y) >= O.gauss(r, d) * (1 - 1e-12)


@given(torus, torus)
def test_torus_distance(x, y):
    d = K.torus_distance(x, y)
    assert d == K.torus_distance(y, x)
    assert 0 <= d <= 1


# -- closed forms vs quadrature ---------------------------------------------

@pytest.mark.parametrize("s,t", [(1, 1), (0.3, 0.7), (2.0, 0.01), (1e-4, 3e-4)])
def test_cov_H_quadrature(s, t):
    assert K.cov_H(s, t) == pytest.approx(O.cov_H_quad(s, t), rel=1e-10)


def test_cov_H_values():
    assert K.cov_H(1, 1) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-15)
    assert K.cov_H(1, 1) == pytest.approx(0.398942, abs=1e-6)
    assert K.cov_H(0.7, 0) == 0
    assert K.cov_H(4, 4) == pytest.approx(2 / math.sqrt(2 * math.pi), abs=1e-15)


@given(pos_times, pos_times, st.floats(1e-3, 1e3))
def test_cov_H_scaling(s, t, rho):
    assert K.cov_H(rho * s, rho * t) == pytest.approx(math.sqrt(rho) * K.cov_H(s, t), rel=1e-9, abs=1e-14)


@pytest.mark.parametrize("kappa", [K.KAPPA_PAPER, K.KAPPA_CONSISTENT, 0.77])
@pytest.mark.parametrize("s,t", [(1, 1), (0.2, 0.9), (1e-3, 2.0)])
def test_cov_T_quadrature(kappa, s, t):
    assert K.cov_T(s, t, kappa) == pytest.approx(O.cov_T_quad(s, t, kappa), rel=1e-10)


def test_cov_T_values():
    assert K.cov_T(1, 1, K.KAPPA_PAPER) == pytest.approx((2 - math.sqrt(2)) / math.sqrt(2 * math.pi), abs=1e-15)
    assert K.cov_T(1, 1, K.KAPPA_PAPER) == pytest.approx(0.2336950, abs=1e-6)
    assert K.cov_T(1, 1, K.KAPPA_CONSISTENT) == pytest.approx((2 - math.sqrt(2)) / (2 * math.sqrt(math.pi)), abs=1e-15)
    assert K.cov_T(1, 1, K.KAPPA_CONSISTENT) == pytest.approx(0.1652467, abs=1e-6)
    assert K.cov_T(0.5, 0) == 0


def test_cov_F_values():
    assert K.cov_F(1, 1) == 1
    assert K.cov_F(4, 1) == pytest.approx((3 - math.sqrt(3)) / 2, abs=1e-15)
    assert K.cov_F(4, 1) == pytest.approx(0.63397, abs=1e-5)


@given(times, times)
def test_cov_F_increment_variance(s, t):
    v = K.cov_F(t, t) - 2 * K.cov_F(s, t) + K.cov_F(s, s)
    assert v == pytest.approx(abs(t - s) ** 0.5, abs=1e-12)


@pytest.mark.parametrize("s,t,x,y", [(0.1, 0.1, 0, 0), (0.05, 0.2, 0.3, -0.5), (0.5, 0.8, 0.9, -0.9),
                                     (1.0, 0.4, 0.0, 0.5)])
def test_cov_Z_against_semigroup_integral(s, t, x, y):
    v = K.cov_Z(s, t, x, y, modes=4096)
    if s == t and x == y:
        v = v + K.z_diag_tail(t, 4096)
        assert v == pytest.approx(O.cov_Z_quad(s, t, x, y), rel=1e-10)
    else:
        assert v == pytest.approx(O.cov_Z_quad(s, t, x, y), abs=K.z_tail_bound(4096))


def test_cov_Z_trivial():
    assert K.cov_Z(0.3, 0.0) == 0
    a = K.cov_Z(0.01, 0.02, 0.3, 0.3)
    b = K.cov_Z(0.01, 0.02, -0.6, -0.6)
    assert a == pytest.approx(b, abs=1e-15)
    with pytest.raises(DomainError):
        K.cov_Z(1, 1, modes=0)


@pytest.mark.parametrize("t", [0.01, 0.1])
def test_cov_Z_close_to_cov_H(t):
    d = abs(K.cov_Z(t, t) + K.z_diag_tail(t, 4096) - K.cov_H(t, t))
    assert d <= 5 * t


def test_cov_Z_minus_cov_H_vanishes_faster_than_sqrt_t():
    r = [abs(K.cov_Z(t, t) + K.z_diag_tail(t, 4096) - K.cov_H(t, t)) / math.sqrt(t)
         for t in (0.1, 0.03, 0.01)]
    assert r[0] > r[1] > r[2]


def test_cov_Z_matrix_blocks_match_scalar():
    t = np.linspace(0, 0.01, 40)
    M = K.kernel("Z_torus", 0.01, x=0.0, modes=512).matrix(t)
    for i, j in [(3, 17), (39, 39), (20, 5)]:
        assert M[i, j] == pytest.approx(float(K.cov_Z(t[i], t[j], 0.0, 0.0, 512)), rel=1e-13, abs=1e-18)


# -- H-Z gap ------------------------------------------------------------------

@pytest.mark.parametrize("t,expected", [(0.1, 2.945792e-5), (1.0, 0.0911361)])
def test_hz_gap_frozen(t, expected):
    # values frozen from the independent image/quadrature evaluation
    assert K.hz_gap_variance(t) == pytest.approx(expected, rel=1e-3)


def test_hz_gap_zero_at_zero_and_bounded():
    assert K.hz_gap_variance(0.0) == 0.0
    for t in (0.01, 0.1, 0.5, 1.0):
        assert 0 <= K.hz_gap_variance(t) <= 5 * t


def test_cross_cov_HZ_bounded_by_cauchy_schwarz():
    for t in (0.05, 0.5, 1.0):
        c = K.cross_cov_HZ(t)
        vz = K.cov_Z(t, t) + K.z_diag_tail(t, 4096)
        assert 0 < c <= math.sqrt(K.cov_H(t, t) * vz) + 1e-15


# -- canonical distance, metric, decomposition --------------------------------

def test_canonical_distance_values():
    assert K.canonical_distance_T(0, 1, K.KAPPA_PAPER) == pytest.approx(
        math.sqrt((2 - math.sqrt(2)) / math.sqrt(2 * math.pi)), abs=1e-14)
    assert K.canonical_distance_T(0, 1, K.KAPPA_PAPER) == pytest.approx(0.48342, abs=1e-5)
    assert K.canonical_distance_T(0.3, 0.3) == 0


@given(times, times)
def test_canonical_distance_symmetric(s, t):
    assert K.canonical_distance_T(s, t) == pytest.approx(K.canonical_distance_T(t, s), abs=1e-15)


@given(st.tuples(times, torus), st.tuples(times, torus), st.tuples(times, torus))
@settings(max_examples=200)
def test_parabolic_metric_quasi_triangle(a, b, c):
    d = lambda p, q: float(K.parabolic_metric(p[0], p[1], q[0], q[1]))
    assert d(a, b) == pytest.approx(d(b, a), abs=1e-15)
    assert d(a, c) <= 2**0.75 * (d(a, b) + d(b, c)) + 1e-12


def test_decomposition_fit():
    fit = K.fit_decomposition(64)
    assert fit.residual < 1e-9
    assert fit.kappa == pytest.approx(K.KAPPA_CONSISTENT, rel=1e-9)
    assert fit.cov_factor == pytest.approx(math.sqrt(math.pi), rel=1e-9)
    assert fit.path_factor == pytest.approx(math.pi**0.25, rel=1e-9)
    rep = fit.report()
    assert rep["kappa_ratio"] == pytest.approx(K.KAPPA_CONSISTENT / K.KAPPA_PAPER, rel=1e-9)


# -- kernel objects -------------------------------------------------------------

@pytest.mark.parametrize("proc", K.PROCESSES)
def test_kernels_symmetric_psd_and_pinned(proc):
    rng = np.random.default_rng(5)
    t = np.sort(rng.uniform(0, 1, 60))
    t[0] = 0.0
    kern = K.kernel(proc, 1.0, **({"modes": 256} if proc == "Z_torus" else {}))
    M = kern.matrix(t)
    assert np.allclose(M, M.T, atol=1e-15)
    ok, lam_min = K.psd_check(M)
    assert ok, lam_min
    assert np.all(M[0] == 0)


@given(st.lists(st.floats(1e-3, 1.0), min_size=2, max_size=40, unique=True),
       st.sampled_from(["H_free", "T_aux", "F_fbm14", "BM"]))
@settings(max_examples=40, deadline=None)
def test_psd_on_random_grids(ts, proc):
    M = K.kernel(proc).matrix(np.array(sorted(ts)))
    assert K.psd_check(M)[0]


def test_psd_check_flags_indefinite():
    ok, _ = K.psd_check(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert not ok


def test_negative_time_rejected():
    for f in (K.cov_H, K.cov_F, K.cov_BM):
        with pytest.raises(DomainError):
            f(-0.1, 1.0)
    with pytest.raises(DomainError):
        K.cov_T(1.0, -1.0)
    with pytest.raises(DomainError):
        K.canonical_distance_T(-1.0, 1.0)


def test_unknown_process():
    with pytest.raises(DomainError):
        K.kernel("nope")
