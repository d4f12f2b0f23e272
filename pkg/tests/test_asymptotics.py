import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sheball import asymptotics as A
from sheball import kernels as K
from sheball.errors import DomainError
from sheball.rng import RngStream

import oracles as O

D01 = 0.4065062  # d(0, 1) for the consistent kappa


def test_recursion_first_terms():
    a = A.recursion_values(1.0, [1, 2, 3])
    assert a[0] == 1.0
    assert a[1] == pytest.approx(2.0, abs=1e-14)
    assert a[2] == pytest.approx(2 + 2**0.75, abs=1e-12)
    assert A.recursion_values(4.0, [2])[0] == pytest.approx(5.0, abs=1e-14)
    assert A.recursion_values(4.0, [3])[0] == pytest.approx(5 + 4 * 5**0.75, rel=1e-14)
    assert A.recursion_values(4.0, [3])[0] == pytest.approx(18.374806, abs=1e-6)


@pytest.mark.parametrize("c,n", [(0.5, 1000), (1.0, 10**4), (4.0, 10**5)])
def test_recursion_matches_multiprecision(c, n):
    ref = O.recursion_mp(c, n)
    assert A.recursion_values(c, [n])[0] == pytest.approx(float(ref), rel=1e-11)


@given(st.floats(0.05, 8.0), st.integers(1, 2000))
@settings(max_examples=30, deadline=None)
def test_recursion_lower_bound(c, n):
    # a_n >= (c (n - 1) / 4)^4 since b_{j+1} - b_j >= c / 4 while b >= 1 ... checked numerically
    a = A.recursion_values(c, [n])[0]
    assert a >= 1.0
    assert a ** 0.25 >= 1 + c * (n - 1) / 4 * (1 + c) ** -0.75 - 1e-9


@given(st.floats(0.05, 8.0), st.integers(1, 500))
@settings(max_examples=30, deadline=None)
def test_recursion_increasing(c, n):
    a = A.recursion_values(c, [n, n + 1])
    assert a[1] > a[0]


@pytest.mark.parametrize("c", [0.5, 1.0, 4.0])
def test_recursion_ratio_band_at_1e6(c):
    assert 0.95 <= A.recursion_ratio(c, 10**6) <= 1.05


@pytest.mark.parametrize("c,thr", [(0.5, 2418), (1.0, 87), (4.0, 4)])
def test_recursion_trend_side_and_threshold(c, thr):
    tr = A.recursion_trend(c)
    assert tr["side"] == "below"
    assert tr["monotone_after"] == pytest.approx(thr, rel=0.1)
    assert all(r < 1 for r in tr["ratio"])


def test_recursion_errors():
    with pytest.raises(DomainError):
        A.recursion_values(0.0, [3])
    with pytest.raises(DomainError):
        A.recursion_values(1.0, [0])
    with pytest.raises(DomainError):
        A.recursion_ratio(1.0, 0)


def test_recursion_ratio_no_overflow_far_out():
    assert np.isfinite(A.recursion_ratio(4.0, 10**7))


# -- canonical distance bound -------------------------------------------------------------------

@pytest.fixture(scope="module")
def dfit():
    return A.verify_d_interpolation(10**5, RngStream(3))


def test_d_bound_constant_is_d01(dfit):
    assert dfit["c"] == pytest.approx(D01, abs=1e-6)
    assert dfit["c"] == pytest.approx(float(K.canonical_distance_T(0.0, 1.0, K.KAPPA_CONSISTENT)), rel=1e-9)
    assert dfit["violations"] == 0


@pytest.mark.parametrize("eta", [0.1, 0.5])
def test_d_bound_eta_constants(dfit, eta):
    # sup d/|t-s| on [eta, 1] is the standard deviation of T' at eta
    exact = K.KAPPA_CONSISTENT * (2 * math.pi) ** 0.25 / 2 * (2 * eta) ** -0.75
    C = dfit["C_eta"][str(eta)]["C"]
    assert 0.97 * exact <= C <= exact * (1 + 1e-9)
    assert all(v["violations"] == 0 for v in dfit["C_eta"].values())


def test_d_bound_stable_across_seeds():
    a = A.verify_d_interpolation(10**4, RngStream(4))["c"]
    b = A.verify_d_interpolation(10**4, RngStream(5))["c"]
    assert a == pytest.approx(b, rel=0.05)


def test_d_bound_needs_pairs():
    with pytest.raises(DomainError):
        A.verify_d_interpolation(100, RngStream(0))


# -- entropy cover --------------------------------------------------------------------------------

@pytest.mark.parametrize("k", range(3, 11))
def test_cover_consecutive_gaps(k):
    cov = A.build_entropy_cover(2.0**-k, D01 + 1e-7)
    assert cov.max_gap_distance <= 2 * 2.0**-k
    assert cov.centers[0] == 0 and cov.centers[-1] > 1


def test_cover_large_eps_single_ball():
    cov = A.build_entropy_cover(1.0, D01 + 1e-7)
    assert cov.count == 1


def test_cover_too_small_c_raises():
    with pytest.raises(DomainError):
        A.build_entropy_cover(0.1, 0.2)
    assert A.build_entropy_cover(0.1, 0.2, strict=False).max_gap_distance > 0.2


def test_entropy_scan_counts_bounded():
    sc = A.entropy_scan(D01 + 1e-7)
    assert max(sc["count_times_eps"]) <= 2.0 + 1e-12
    # the last doubling ratios settle at 2
    assert all(1.8 <= r <= 2.2 for r in sc["doubling_ratios"][2:])
