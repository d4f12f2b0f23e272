"""Exact Gaussian path samplers on finite grids.

Randomness is drawn in fixed-size chunks, chunk ``j`` from
``rng.child(j)``. The chunk layout does not depend on the number of
worker threads, so serial and parallel runs give identical ensembles.
"""
from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc, ndtr

from . import kernels as K
from .errors import DomainError, NotPSDError
from .rng import RngStream

CHUNK = 4096
_THREADS = 1


def set_threads(k: int) -> None:
    """Worker threads used by the chunked samplers (results do not depend on it)."""
    global _THREADS
    _THREADS = max(1, int(k))


def get_threads() -> int:
    return _THREADS


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = i * horizon / (n - 1)``, ``i = 0..n-1``."""

    n: int
    horizon: float = 1.0

    def __post_init__(self):
        if int(self.n) < 2:
            raise DomainError("TimeGrid needs n >= 2")
        if not self.horizon > 0:
            raise DomainError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / (self.n - 1)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n) * self.dt


@dataclass
class PathEnsemble:
    """A batch of paths, shape ``(count, grid.n)``."""

    grid: TimeGrid
    paths: np.ndarray
    process: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.paths = np.asarray(self.paths, float).reshape(-1, self.grid.n)

    @property
    def count(self) -> int:
        return self.paths.shape[0]


@dataclass
class SpaceTimeEnsemble:
    """Samples of a space-time field, ``values[path, t_index, x_index]``."""

    tgrid: TimeGrid
    x: np.ndarray
    values: np.ndarray
    process: str
    provenance: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _provenance(rng: RngStream, nchunks: int) -> dict:
    return {"seed": int(rng.seed), "stream_id": int(rng.stream_id), "chunks": int(nchunks)}


def _chunked(count: int, rng: RngStream, draw) -> tuple[np.ndarray, int]:
    """Run ``draw(k, generator)`` over fixed chunks and concatenate in order."""
    sizes = [CHUNK] * (count // CHUNK) + ([count % CHUNK] if count % CHUNK else [])
    if not sizes:
        return None, 0
    jobs = [(k, rng.child(j)) for j, k in enumerate(sizes)]
    if _THREADS > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(_THREADS) as ex:
            parts = list(ex.map(lambda a: draw(a[0], a[1].generator()), jobs))
    else:
        parts = [draw(k, r.generator()) for k, r in jobs]
    return np.concatenate(parts, axis=0), len(sizes)


# ---------------------------------------------------------------------------
# fBm(1/4) by circulant embedding


def fgn_autocov(m: int, hurst: float = 0.25) -> np.ndarray:
    k = np.arange(m + 1, dtype=float)
    h2 = 2 * hurst
    return 0.5 * (np.abs(k + 1) ** h2 - 2 * k**h2 + np.abs(k - 1) ** h2)


def circulant_eigenvalues(m: int, hurst: float = 0.25) -> np.ndarray:
    """Eigenvalues of the size-``2m`` circulant embedding of unit fGn.

    Raises
    ------
    NotPSDError
        If the smallest eigenvalue is below ``-1e-9 * max``.
    """
    g = fgn_autocov(m, hurst)
    row = np.concatenate([g, g[-2:0:-1]])
    lam = np.fft.fft(row).real
    if lam.min() < -1e-9 * lam.max():
        raise NotPSDError(f"embedding not PSD (min eigenvalue {lam.min():.3e})")
    return np.maximum(lam, 0.0)


def sample_fbm14(grid: TimeGrid, count: int, rng: RngStream) -> PathEnsemble:
    """Exact fBm(1/4) paths via circulant embedding of the increments.

    One complex FFT gives two independent paths (real and imaginary parts).
    """
    m = grid.n - 1
    lam = circulant_eigenvalues(m)
    M = 2 * m
    scale = np.sqrt(lam / M) * grid.dt**0.25

    def draw(k, g):
        npair = (k + 1) // 2
        z = g.standard_normal((npair, M)) + 1j * g.standard_normal((npair, M))
        w = np.fft.fft(z * scale, axis=1)[:, :m]
        inc = np.concatenate([w.real, w.imag], axis=0)[:k]
        out = np.zeros((k, grid.n))
        np.cumsum(inc, axis=1, out=out[:, 1:])
        return out

    paths, nch = _chunked(count, rng, draw)
    if paths is None:
        paths = np.zeros((0, grid.n))
    return PathEnsemble(grid, paths, "F_fbm14", _provenance(rng, nch))


# ---------------------------------------------------------------------------
# generic dense factorization


@dataclass(frozen=True)
class GaussianFactor:
    """``C = L L^T`` restricted to the nonzero-variance indices ``idx``."""

    L: np.ndarray
    idx: np.ndarray
    n: int
    jitter: float
    method: str


def gaussian_factor(C: np.ndarray, tol: float = 1e-10) -> GaussianFactor:
    """Symmetric factor of a covariance matrix.

    Tries Cholesky with diagonal jitter up to ``1e-12 * trace / n``, then
    falls back to an eigen factor with negative eigenvalues (bounded by
    ``tol * ||C||``) set to zero.

    Raises
    ------
    NotPSDError
        "kernel not PSD on grid" when an eigenvalue is below ``-tol * ||C||``.
    """
    C = 0.5 * (C + C.T)
    n = C.shape[0]
    idx = np.flatnonzero(np.diag(C) > 0)
    S = C[np.ix_(idx, idx)]
    if S.size == 0:
        return GaussianFactor(np.zeros((0, 0)), idx, n, 0.0, "empty")
    base = np.trace(S) / len(idx)
    for jit in (0.0, 1e-15 * base, 1e-13 * base, 1e-12 * base):
        try:
            L = np.linalg.cholesky(S + jit * np.eye(len(idx)))
            return GaussianFactor(L, idx, n, jit, "cholesky")
        except np.linalg.LinAlgError:
            continue
    ev, U = np.linalg.eigh(S)
    if ev[0] < -tol * max(abs(ev[-1]), 1e-300):
        raise NotPSDError(f"kernel not PSD on grid (min eigenvalue {ev[0]:.3e})")
    L = U * np.sqrt(np.maximum(ev, 0.0))
    return GaussianFactor(L, idx, n, 0.0, "eigh")


def draw_gaussian(f: GaussianFactor, k: int, g: np.random.Generator) -> np.ndarray:
    out = np.zeros((k, f.n))
    if len(f.idx):
        out[:, f.idx] = g.standard_normal((k, f.L.shape[1])) @ f.L.T
    return out


_factor_cache: dict = {}
_cache_lock = threading.Lock()


def kernel_factor(kern: K.CovKernel, times: np.ndarray) -> GaussianFactor:
    key = (kern.process, tuple(sorted(kern.params.items())), times.tobytes())
    with _cache_lock:
        hit = _factor_cache.get(key)
    if hit is not None:
        return hit
    f = gaussian_factor(kern.matrix(times))
    with _cache_lock:
        if len(_factor_cache) > 32:
            _factor_cache.clear()
        _factor_cache[key] = f
    return f


def sample_gaussian_path(kern: K.CovKernel, grid: TimeGrid, count: int,
                         rng: RngStream) -> PathEnsemble:
    """Sample paths of any :class:`CovKernel` by dense factorization."""
    if grid.n > 4096:
        raise DomainError("dense sampler limited to n <= 4096")
    f = kernel_factor(kern, grid.times)
    paths, nch = _chunked(count, rng, lambda k, g: draw_gaussian(f, k, g))
    if paths is None:
        paths = np.zeros((0, grid.n))
    prov = _provenance(rng, nch)
    prov.update(jitter=f.jitter, factor=f.method)
    return PathEnsemble(grid, paths, kern.process, prov)


def coupled_H_from_F(F_paths: PathEnsemble, rng: RngStream,
                     kappa: float = K.KAPPA_CONSISTENT) -> tuple[PathEnsemble, PathEnsemble]:
    """Split fBm paths into ``F = c_F (H + T)`` with ``H`` independent of ``T``.

    ``T`` is drawn from its conditional law given ``F`` (Gaussian, with mean
    ``c_F S_T S_F^{-1} F`` and covariance ``S_T (S_H + S_T)^{-1} S_H``), then
    ``H = F / c_F - T``. The pair ``(H, T)`` then has the joint law of
    independent processes with kernels ``cov_H`` and ``cov_T(kappa)``.
    The path factor ``c_F`` is ``(cov_F(1,1) / (cov_H(1,1) + cov_T(1,1)))^{1/2}``,
    which is consistent only for the ``kappa`` that makes the covariance
    identity exact (see :func:`kernels.fit_decomposition`).

    Returns
    -------
    (H, T) : tuple of PathEnsemble
    """
    if F_paths.provenance.get("stream_id") == rng.stream_id and \
            F_paths.provenance.get("seed") == rng.seed:
        raise DomainError("the conditional draw needs a stream distinct from the F stream")
    t = F_paths.grid.times[1:]
    SH = K.cov_H(t[:, None], t[None, :])
    ST = K.cov_T(t[:, None], t[None, :], kappa)
    c_F = float(np.sqrt(K.cov_F(1.0, 1.0) / (K.cov_H(1.0, 1.0) + K.cov_T(1.0, 1.0, kappa))))
    S = SH + ST
    cs = np.linalg.cholesky(S)
    # mean of T given F:  S_T S^{-1} (F / c_F)
    W = np.linalg.solve(cs.T, np.linalg.solve(cs, ST)).T
    cond = ST - W @ ST
    cond = 0.5 * (cond + cond.T)
    f = gaussian_factor(cond)
    Fs = F_paths.paths[:, 1:] / c_F
    noise, nch = _chunked(F_paths.count, rng, lambda k, g: draw_gaussian(f, k, g))
    T = np.zeros_like(F_paths.paths)
    if F_paths.count:
        T[:, 1:] = Fs @ W.T + noise
    H = F_paths.paths / c_F - T
    prov = {"F": F_paths.provenance, "conditional": _provenance(rng, nch), "c_F": c_F, "kappa": kappa}
    return (PathEnsemble(F_paths.grid, H, "H_free", prov),
            PathEnsemble(F_paths.grid, T, "T_aux", prov))


# ---------------------------------------------------------------------------
# torus field Z by exact OU modes

RHO_CUT = 2.0**-60


def sample_Z_torus(tgrid: TimeGrid, xgrid: int, modes: int, count: int,
                   rng: RngStream) -> SpaceTimeEnsemble:
    """Exact-in-law samples of ``Z(t_i, x_j)``, ``x_j = -1 + 2j / xgrid``.

    Fourier modes evolve as OU processes with exact one-step transitions.
    Modes whose one-step correlation ``e^{-pi^2 k^2 dt}`` is below ``2^-60``
    are fresh at every step to double precision; they are summed into one
    stationary spatial field drawn from its own factorized covariance.
    """
    if modes < max(1, xgrid / 2):
        raise DomainError("modes must be >= xgrid / 2")
    dt = tgrid.dt
    x = -1.0 + 2.0 * np.arange(xgrid) / xgrid
    k = np.arange(1, modes + 1, dtype=float)
    lam = np.pi**2 * k * k
    rho = np.exp(-lam * dt)
    low = int(np.sum(rho >= RHO_CUT))
    kl, laml, rhol = k[:low], lam[:low], rho[:low]
    innov = np.sqrt(-np.expm1(-2 * laml * dt) / (2 * laml))
    cos_t = np.cos(np.pi * np.outer(kl, x))
    sin_t = np.sin(np.pi * np.outer(kl, x))
    kh, lamh = k[low:], lam[low:]
    if len(kh):
        d = x[:, None] - x[None, :]
        Ch = (np.cos(np.pi * kh[None, None, :] * d[..., None]) / (2 * lamh)).sum(-1)
        fh = gaussian_factor(Ch)
    nt = tgrid.n

    def draw(c, g):
        out = np.zeros((c, nt, xgrid))
        a = np.zeros((c, low))
        b = np.zeros((c, low))
        w0 = np.zeros(c)
        for i in range(1, nt):
            w0 += np.sqrt(dt / 2) * g.standard_normal(c)
            a = rhol * a + innov * g.standard_normal((c, low))
            b = rhol * b + innov * g.standard_normal((c, low))
            v = w0[:, None] + a @ cos_t + b @ sin_t
            if len(kh):
                v += draw_gaussian(fh, c, g)
            out[:, i, :] = v
        return out

    vals, nch = _chunked(count, rng, draw)
    if vals is None:
        vals = np.zeros((0, nt, xgrid))
    meta = {"modes": modes, "explicit_modes": low, "tail_bound": K.z_tail_bound(modes)}
    return SpaceTimeEnsemble(tgrid, x, vals, "Z_torus", _provenance(rng, nch), meta)


# ---------------------------------------------------------------------------
# localized fields


def t_seq(n: float, alpha: float) -> float:
    """``t_n = exp(-n^{1+alpha})``; raises if it is not representable."""
    e = float(n) ** (1 + alpha)
    if e > 700:
        raise DomainError(f"t_n = exp(-{e:.1f}) underflows; use a smaller n")
    return float(np.exp(-e))


def psi(t):
    """``(t / log|log_+(1/t)|)^{1/4}`` with ``log_+(a) = log(a v e^e)``."""
    t = np.asarray(t, float)
    lp = np.log(np.maximum(1.0 / t, np.exp(np.e)))
    return (t / np.log(np.abs(lp))) ** 0.25


def _A(u, d):
    # antiderivative in u of G_u(d): sqrt(u/pi) e^{-d^2/4u} - |d|/2 erfc(|d| / 2 sqrt(u))
    u = np.maximum(np.asarray(u, float), 0.0)
    d = np.abs(d)
    su = np.sqrt(u)
    with np.errstate(divide="ignore", invalid="ignore"):
        e = np.where(u > 0, np.exp(-d * d / (4 * np.where(u > 0, u, 1.0))), 0.0)
        tail = np.where(u > 0, erfc(d / (2 * np.where(u > 0, su, 1.0))), 0.0)
    return su / np.sqrt(np.pi) * e - d / 2 * tail


def _cov_Hn(t, tp, dx, t0):
    """Closed form of ``int_{t0}^{t ^ t'} G_{t+t'-2s}(dx) ds``."""
    lo = np.abs(t - tp)
    hi = t + tp - 2 * t0
    return 0.5 * (_A(hi, dx) - _A(lo, dx))


_GL = np.polynomial.legendre.leggauss(96)


def _cov_In(t, tp, x, xp, t0, w):
    """``int_{t0}^{t^t'} ds int_{R(x) n R(x')} G_{t-s}(y-x) G_{t'-s}(y-x') dy``.

    ``s = tau - L v^2`` removes the endpoint singularity at ``s = t ^ t'``.
    """
    lo_y = np.maximum(x, xp) - w
    hi_y = np.minimum(x, xp) + w
    tau = np.minimum(t, tp)
    L = tau - t0
    out = np.zeros(np.broadcast(t, tp, x, xp).shape)
    ok = (hi_y > lo_y) & (L > 0)
    if not np.any(ok):
        return out
    nodes, wts = _GL
    v = 0.5 * (nodes + 1)
    wv = 0.5 * wts
    t, tp, x, xp, lo_y, hi_y, L, tau = (np.broadcast_to(a, out.shape)[ok][..., None]
                                        for a in (t, tp, x, xp, lo_y, hi_y, L, tau))
    s = tau - L * v * v
    a = t - s
    b = tp - s
    ab = a + b
    g = np.exp(-(x - xp) ** 2 / (4 * ab)) / np.sqrt(4 * np.pi * ab)
    with np.errstate(divide="ignore", invalid="ignore"):
        m = np.where(ab > 0, (b * x + a * xp) / ab, x)
        sd = np.sqrt(2 * a * b / ab)
        frac = np.where(sd > 0, ndtr((hi_y - m) / np.where(sd > 0, sd, 1))
                        - ndtr((lo_y - m) / np.where(sd > 0, sd, 1)),
                        ((m >= lo_y) & (m <= hi_y)).astype(float))
    out[ok] = np.sum(g * frac * 2 * L * v * wv, axis=-1)
    return out


def localized_window(n: int, alpha: float) -> float:
    """Half-width ``sqrt(t_n |log t_n|)`` of the spatial window of ``I_n``."""
    tn = t_seq(n, alpha)
    return float(np.sqrt(tn * abs(np.log(tn))))


def localized_cov(fld: str, n: int, alpha: float, times, x_points) -> np.ndarray:
    """Covariance of ``H_n`` or ``I_n`` over ``times x x_points`` (time-major).

    Computed in units where ``t_n = 1``: time by ``t_n``, space by
    ``sqrt(t_n)``; the result is scaled back by ``sqrt(t_n)``.
    """
    if fld not in ("H_n", "I_n"):
        raise DomainError("field must be 'H_n' or 'I_n'")
    if n < 1:
        raise DomainError("n must be >= 1")
    tn = t_seq(n, alpha)
    t1 = float(np.exp(-float(n + 1) ** (1 + alpha)))
    times = np.asarray(times, float)
    if np.any(times < t1 * (1 - 1e-12)) or np.any(times > tn * (1 + 1e-12)):
        raise DomainError("times must lie in [t_{n+1}, t_n]")
    xs = np.asarray(x_points, float)
    tt = (times / tn)[:, None].repeat(len(xs), 1).ravel()
    xx = (xs / np.sqrt(tn))[None, :].repeat(len(times), 0).ravel()
    t0 = t1 / tn
    T1, T2 = tt[:, None], tt[None, :]
    X1, X2 = xx[:, None], xx[None, :]
    if fld == "H_n":
        C = _cov_Hn(T1, T2, X1 - X2, t0)
    else:
        w = np.sqrt(abs(np.log(tn)))
        C = _cov_In(T1, T2, X1, X2, t0, w)
    return np.sqrt(tn) * C


def localization_gap_variance(n: int, alpha: float, t) -> np.ndarray:
    """``Var(H - H_n)(t, x) = (sqrt(2t) - sqrt(2(t - t_{n+1}))) / sqrt(4 pi)``."""
    t1 = float(np.exp(-float(n + 1) ** (1 + alpha)))
    t = np.asarray(t, float)
    return (np.sqrt(2 * t) - np.sqrt(2 * np.maximum(t - t1, 0))) / np.sqrt(4 * np.pi)


def _overlap_groups(xs: np.ndarray, w: float, fld: str) -> list[np.ndarray]:
    """Index groups with pairwise-connected noise windows (I_n only)."""
    if fld == "H_n":
        return [np.arange(len(xs))]
    order = np.argsort(xs)
    groups, cur = [], [order[0]]
    for a, b in zip(order[:-1], order[1:]):
        if xs[b] - xs[a] < 2 * w:
            cur.append(b)
        else:
            groups.append(np.array(cur))
            cur = [b]
    groups.append(np.array(cur))
    return groups


def sample_localized(fld: str, n: int, alpha: float, times, x_points, count: int,
                     rng: RngStream) -> dict:
    """Samples of ``H_n`` or ``I_n`` at ``times x x_points``.

    For ``I_n``, points whose windows are disjoint are drawn from separate
    streams ``rng.child(g)`` (``g`` the group index), so they are independent
    by construction.

    Returns
    -------
    dict
        ``values`` of shape ``(count, len(times), len(x_points))`` plus
        ``groups`` and ``window``.
    """
    xs = np.asarray(x_points, float)
    times = np.asarray(times, float)
    w = localized_window(n, alpha)
    groups = _overlap_groups(xs, w, fld)
    out = np.zeros((count, len(times), len(xs)))
    for gi, idx in enumerate(groups):
        C = localized_cov(fld, n, alpha, times, xs[idx])
        f = gaussian_factor(C)
        g = rng.child(gi).generator()
        v = draw_gaussian(f, count, g).reshape(count, len(times), len(idx))
        out[:, :, idx] = v
    return {"values": out, "groups": [g.tolist() for g in groups], "window": w,
            "t_n": t_seq(n, alpha)}
