import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sheball import kernels as K
from sheball import samplers as smp
from sheball.errors import DomainError, NotPSDError
from sheball.experiments import covariance_zscore, cross_zscore
from sheball.rng import RngStream


@pytest.fixture(scope="module")
def fbm_paths():
    return smp.sample_fbm14(smp.TimeGrid(33), 100_000, RngStream(1))


def _cov(proc, t, **kw):
    return K.kernel(proc, **kw).matrix(t)


# -- fBm(1/4) -------------------------------------------------------------------

def test_fbm_variance_at_one(fbm_paths):
    assert np.var(fbm_paths.paths[:, -1]) == pytest.approx(1.0, abs=0.02)
    assert np.all(fbm_paths.paths[:, 0] == 0)


def test_fbm_increment_variance(fbm_paths):
    t = fbm_paths.grid.times
    g = np.random.default_rng(0)
    for i, j in g.integers(0, 33, size=(20, 2)):
        if i == j:
            continue
        d = fbm_paths.paths[:, i] - fbm_paths.paths[:, j]
        assert np.mean(d * d) / abs(t[i] - t[j]) ** 0.5 == pytest.approx(1.0, abs=0.03)


def test_fbm_covariance_zscore(fbm_paths):
    C = _cov("F_fbm14", fbm_paths.grid.times)
    assert covariance_zscore(fbm_paths.paths, C) < 5


def test_fbm_matches_dense_sampler_in_law():
    grid = smp.TimeGrid(17)
    a = smp.sample_fbm14(grid, 40_000, RngStream(2)).paths
    b = smp.sample_gaussian_path(K.kernel("F_fbm14"), grid, 40_000, RngStream(3)).paths
    se = np.sqrt(2.0 / 40_000) * np.sqrt(2)  # two-sample, unit-scale covariances
    ca, cb = a.T @ a / len(a), b.T @ b / len(b)
    scale = np.sqrt(np.outer(np.diag(ca), np.diag(ca))) + 1e-300
    assert np.max(np.abs(ca - cb)[1:, 1:] / scale[1:, 1:]) < 5 * se


def test_embedding_psd_for_fbm14():
    for m in (1, 2, 15, 256, 4096):
        assert smp.circulant_eigenvalues(m).min() >= 0


def test_embedding_failure_is_loud():
    # a rough Hurst index near 1 is fine; a fake indefinite sequence must raise
    with pytest.raises(NotPSDError):
        smp.circulant_eigenvalues(8, hurst=1.6)


def test_count_zero_gives_empty_ensemble():
    for ens in (smp.sample_fbm14(smp.TimeGrid(9), 0, RngStream(4)),
                smp.sample_gaussian_path(K.kernel("T_aux"), smp.TimeGrid(9), 0, RngStream(4))):
        assert ens.count == 0 and ens.paths.shape == (0, 9)
        assert ens.provenance["seed"] == 4


def test_time_grid_errors():
    with pytest.raises(DomainError):
        smp.TimeGrid(1)
    with pytest.raises(DomainError):
        smp.TimeGrid(4, horizon=0)


# -- dense sampler -----------------------------------------------------------------

def test_T_variance_at_one():
    N = 100_000
    T = smp.sample_gaussian_path(K.kernel("T_aux"), smp.TimeGrid(128), N, RngStream(5)).paths
    v = K.cov_T(1.0, 1.0, K.KAPPA_CONSISTENT)
    se = v * math.sqrt(2.0 / N)
    assert abs(np.var(T[:, -1]) - v) < 3 * se


def test_dense_sampler_rejects_large_grid():
    with pytest.raises(DomainError):
        smp.sample_gaussian_path(K.kernel("BM"), smp.TimeGrid(5000), 1, RngStream(0))


def test_factor_rejects_indefinite():
    with pytest.raises(NotPSDError):
        smp.gaussian_factor(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_factor_reports_jitter_within_bound():
    t = np.linspace(0, 1, 400)
    f = smp.gaussian_factor(_cov("H_free", t))
    C = _cov("H_free", t)[1:, 1:]
    assert f.jitter <= 1e-12 * np.trace(C) / C.shape[0]


# -- coupled H from F -----------------------------------------------------------------

@pytest.fixture(scope="module")
def coupled():
    F = smp.sample_fbm14(smp.TimeGrid(17), 100_000, RngStream(6))
    return smp.coupled_H_from_F(F, RngStream(6, 1))


def test_coupled_H_variance_and_covariance(coupled):
    H, _ = coupled
    N = H.count
    t = H.grid.times
    assert np.all(H.paths[:, 0] == 0)
    v = K.cov_H(1, 1)
    assert v == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-15)
    assert abs(np.var(H.paths[:, -1]) - v) < 3 * v * math.sqrt(2 / N)
    i = int(np.argmin(np.abs(t - 0.25)))
    c = K.cov_H(1.0, 0.25)
    assert c == pytest.approx(0.07109, abs=1e-5)
    emp = np.mean(H.paths[:, -1] * H.paths[:, i])
    se = math.sqrt((K.cov_H(1, 1) * K.cov_H(0.25, 0.25) + c * c) / N)
    assert abs(emp - c) < 3 * se


def test_coupled_joint_law(coupled):
    H, T = coupled
    t = H.grid.times
    assert covariance_zscore(H.paths, _cov("H_free", t)) < 4.5
    assert covariance_zscore(T.paths, _cov("T_aux", t)) < 4.5
    assert cross_zscore(H.paths[:, 1:], T.paths[:, 1:]) < 4.5


def test_coupled_reconstructs_F(coupled):
    H, T = coupled
    c_F = H.provenance["c_F"]
    assert c_F == pytest.approx(math.pi**0.25, rel=1e-12)
    F = smp.sample_fbm14(smp.TimeGrid(17), 100_000, RngStream(6))
    assert np.max(np.abs(c_F * (H.paths + T.paths) - F.paths)) < 1e-12


def test_coupled_needs_distinct_stream():
    F = smp.sample_fbm14(smp.TimeGrid(9), 10, RngStream(7))
    with pytest.raises(DomainError):
        smp.coupled_H_from_F(F, RngStream(7))


# -- Z on the torus -------------------------------------------------------------------

@pytest.mark.parametrize("t", [0.05, 0.2])
def test_Z_variance_matches_cov_Z(t):
    N = 40_000
    ens = smp.sample_Z_torus(smp.TimeGrid(5, t), 8, 64, N, RngStream(8))
    assert np.all(ens.values[:, 0] == 0)
    # the sampler keeps exactly 64 modes, so the oracle is the 64-mode kernel
    v = K.cov_Z(t, t, modes=64)
    assert K.z_diag_tail(t, 64) <= ens.meta["tail_bound"]
    emp = ens.values[:, -1, :].var(axis=0)
    se = v * math.sqrt(2 / N)
    assert np.all(np.abs(emp - v) < 3.5 * se)


def test_Z_covariance_over_time_and_space():
    N = 40_000
    tg = smp.TimeGrid(4, 0.1)
    ens = smp.sample_Z_torus(tg, 4, 64, N, RngStream(9))
    X = ens.values.reshape(N, -1)
    tt = np.repeat(tg.times, 4)
    xx = np.tile(ens.x, 4)
    C = K.cov_Z(tt[:, None], tt[None, :], xx[:, None], xx[None, :], modes=64)
    assert covariance_zscore(X, C) < 4.5


def test_Z_modes_check():
    with pytest.raises(DomainError):
        smp.sample_Z_torus(smp.TimeGrid(3, 0.1), 64, 8, 1, RngStream(0))


# -- localized fields -------------------------------------------------------------------

def test_t_seq_and_underflow():
    assert smp.t_seq(1, 0.5) == pytest.approx(math.exp(-1))
    with pytest.raises(DomainError):
        smp.t_seq(100, 0.5)


def test_localized_variance_ordering():
    n, alpha = 2, 0.5
    tn = smp.t_seq(n, alpha)
    ts = np.array([0.5 * tn, tn])
    x = np.array([0.0])
    vI = np.diag(smp.localized_cov("I_n", n, alpha, ts, x))
    vH = np.diag(smp.localized_cov("H_n", n, alpha, ts, x))
    vfull = K.cov_H(ts, ts)
    assert np.all(vI <= vH * (1 + 1e-12))
    assert np.all(vH <= vfull * (1 + 1e-12))
    gap = smp.localization_gap_variance(n, alpha, ts)
    assert np.allclose(vfull - vH, gap, rtol=1e-8, atol=1e-15)


def test_localization_gap_decays():
    alpha = 0.5
    rows = []
    for n in (1, 2, 3, 4):
        tn = smp.t_seq(n, alpha)
        ts = np.linspace(smp.t_seq(n + 1, alpha), tn, 50)
        rows.append(smp.localization_gap_variance(n, alpha, ts).max()
                    / (math.sqrt(tn) * math.exp(-(1 + alpha) * n**alpha / 2)))
    assert max(rows) < 10 * min(rows) or rows[-1] < rows[0]


def test_localized_I_independent_across_separated_points():
    n, alpha = 2, 0.5
    tn = smp.t_seq(n, alpha)
    w = smp.localized_window(n, alpha)
    xs = [0.0, 2.5 * w]
    s = smp.sample_localized("I_n", n, alpha, [tn], xs, 20_000, RngStream(10))
    assert len(s["groups"]) == 2
    a, b = s["values"][:, 0, 0], s["values"][:, 0, 1]
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r) < 3 / math.sqrt(len(a))


def test_localized_errors():
    with pytest.raises(DomainError):
        smp.localized_cov("X", 1, 0.5, [0.3], [0.0])
    with pytest.raises(DomainError):
        smp.localized_cov("H_n", 1, 0.5, [0.9], [0.0])


# -- invariants -----------------------------------------------------------------------

@given(st.integers(0, 2**63), st.integers(0, 1000))
@settings(max_examples=10, deadline=None)
def test_determinism(seed, sid):
    g = smp.TimeGrid(9)
    a = smp.sample_fbm14(g, 7, RngStream(seed, sid)).paths
    b = smp.sample_fbm14(g, 7, RngStream(seed, sid)).paths
    assert np.array_equal(a, b)


def test_threads_do_not_change_results():
    g = smp.TimeGrid(17)
    try:
        smp.set_threads(1)
        a = smp.sample_fbm14(g, 3 * smp.CHUNK + 5, RngStream(11)).paths
        smp.set_threads(4)
        b = smp.sample_fbm14(g, 3 * smp.CHUNK + 5, RngStream(11)).paths
    finally:
        smp.set_threads(1)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("r", [0.5, 1.0])
def test_anderson_monotonicity(fbm_paths, r):
    X = fbm_paths.paths
    N = len(X)
    p0 = np.mean(np.abs(X).max(1) <= r)
    pf = np.mean(np.abs(X + 0.5).max(1) <= r)
    assert pf <= p0 + 3 * math.sqrt(p0 * (1 - p0) / N)
