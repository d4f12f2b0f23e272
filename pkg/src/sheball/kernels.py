"""Covariance kernels, heat kernels and canonical distances.

Conventions
-----------
The torus is ``[-1, 1)`` with addition mod 2, the heat operator is
``d/dt - d^2/dx^2`` and ``G_r(a) = exp(-a^2 / 4r) / sqrt(4 pi r)``.

Processes (all centered Gaussian):

``F``   fractional Brownian motion of index 1/4, ``E|F(t)-F(s)|^2 = |t-s|^{1/2}``.
``H``   free-space linear heat field at a fixed site, started at 0.
``T``   the smooth-away-from-zero auxiliary process
        ``T(t) = kappa * int_R (1 - exp(-t z^2 / 2)) / z  V(dz)``.
``Z``   linear heat field on the torus, started at 0.
``BM``  standard Brownian motion.

All functions broadcast over numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate

from .errors import DomainError, NotPSDError

SQRT_PI = np.sqrt(np.pi)
KAPPA_PAPER = 1.0 / np.sqrt(2.0 * np.pi)
KAPPA_CONSISTENT = 1.0 / np.sqrt(2.0 * np.sqrt(2.0) * np.pi)
Z_MODES_DEFAULT = 4096

PROCESSES = ("H_free", "Z_torus", "T_aux", "F_fbm14", "BM")


def _times(*ts):
    out = [np.asarray(t, dtype=float) for t in ts]
    for t in out:
        if np.any(t < 0) or np.any(~np.isfinite(t)):
            raise DomainError("times must be finite and nonnegative")
    return out


def torus_distance(x, y):
    """Distance on the circle of circumference 2; always in ``[0, 1]``."""
    d = np.mod(np.abs(np.asarray(x, float) - np.asarray(y, float)), 2.0)
    return np.minimum(d, 2.0 - d)


def gauss_kernel(r, a):
    """Free-space heat kernel ``G_r(a)``."""
    r = np.asarray(r, float)
    if np.any(r <= 0):
        raise DomainError("heat kernel needs r > 0")
    a = np.asarray(a, float)
    return np.exp(-a * a / (4 * r)) / np.sqrt(4 * np.pi * r)


def heat_kernel_torus(r: float, x: float, y: float, tol: float = 1e-12) -> float:
    """Heat kernel on the torus by the wrapped image sum.

    Images ``x - y + 2n`` are kept while ``|x - y + 2n|`` stays below
    ``sqrt(4 r ln(G_r(0)/tol)) + 2``, which bounds the omitted tail by
    ``tol``. For ``r > 1`` the equivalent cosine series is summed instead;
    it converges after a handful of terms there.

    Parameters
    ----------
    r : float
        Time lag, ``r > 0``.
    x, y : float
        Points of the torus.
    tol : float
        Tail tolerance in ``(0, 1e-6]``.
    """
    if not r > 0:
        raise DomainError("heat_kernel_torus needs r > 0")
    if not 0 < tol <= 1e-6:
        raise DomainError("tol must lie in (0, 1e-6]")
    d = float(torus_distance(x, y))
    if r > 1.0:
        # e^{-pi^2 k^2 r} < tol / 4 long before k = 10 at r > 1
        k = np.arange(1, 16)
        return float(0.5 + np.sum(np.cos(np.pi * k * d) * np.exp(-np.pi**2 * k**2 * r)))
    g0 = 1.0 / np.sqrt(4 * np.pi * r)
    reach = np.sqrt(4 * r * max(np.log(g0 / tol), 0.0)) + 2.0
    nmax = int(np.ceil(reach / 2.0)) + 1
    n = np.arange(-nmax, nmax + 1)
    a = d + 2.0 * n
    a = a[np.abs(a) <= reach]
    return float(np.sum(np.exp(-a * a / (4 * r))) * g0)


def cov_H(s, t):
    """``E[H(s,0) H(t,0)] = (sqrt(s+t) - sqrt|t-s|) / sqrt(4 pi)``."""
    s, t = _times(s, t)
    return (np.sqrt(s + t) - np.sqrt(np.abs(t - s))) / np.sqrt(4 * np.pi)


def cov_T(s, t, prefactor: float = KAPPA_PAPER):
    """Covariance of ``T`` with kernel constant ``prefactor`` (kappa)."""
    if not prefactor > 0:
        raise DomainError("prefactor must be positive")
    s, t = _times(s, t)
    return prefactor**2 * np.sqrt(2 * np.pi) * (np.sqrt(s) + np.sqrt(t) - np.sqrt(s + t))


def cov_F(s, t):
    """Covariance of fractional Brownian motion of index 1/4."""
    s, t = _times(s, t)
    return 0.5 * (np.sqrt(s) + np.sqrt(t) - np.sqrt(np.abs(t - s)))


def cov_BM(s, t):
    s, t = _times(s, t)
    return np.minimum(s, t)


def z_tail_bound(modes: int) -> float:
    """Upper bound for the omitted part ``sum_{k > K} 1/(2 pi^2 k^2)``."""
    return 1.0 / (2 * np.pi**2 * modes)


def cov_Z(s, t, x=0.0, y=0.0, modes: int = Z_MODES_DEFAULT):
    """Torus field covariance by its Fourier series.

    Mode 0 gives ``(s ^ t) / 2``; mode ``k`` gives
    ``cos(pi k (x-y)) e^{-pi^2 k^2 |t-s|} (1 - e^{-2 pi^2 k^2 (s ^ t)}) / (2 pi^2 k^2)``.
    The truncation error is at most :func:`z_tail_bound`.
    """
    if modes < 1:
        raise DomainError("modes must be >= 1")
    s, t = _times(s, t)
    s, t, x, y = np.broadcast_arrays(s, t, np.asarray(x, float), np.asarray(y, float))
    lo = np.minimum(s, t)[..., None]
    gap = np.abs(t - s)[..., None]
    dx = (x - y)[..., None]
    shape = lo.shape[:-1]
    lo, gap, dx = (np.broadcast_to(v[..., 0], shape).ravel() for v in (lo, gap, dx))
    out = lo / 2
    same = not np.any(dx)
    # elements whose factor e^{-lam gap} is below e^{-60} for a whole block are
    # dropped; blocks keep the temporary near 2^22 entries
    block = max(16, (1 << 22) // max(1, out.size))
    idx = np.arange(out.size)
    for k0 in range(1, modes + 1, block):
        lam0 = np.pi**2 * k0 * k0
        idx = idx[lam0 * gap[idx] < 60.0]
        if idx.size == 0:
            break
        k = np.arange(k0, min(modes, k0 + block - 1) + 1, dtype=float)
        lam = np.pi**2 * k * k
        g, l = gap[idx, None], lo[idx, None]
        terms = np.exp(-lam * g) * (-np.expm1(-2 * lam * l)) / (2 * lam)
        if not same:
            terms = terms * np.cos(np.pi * k * dx[idx, None])
        out[idx] += terms.sum(axis=-1)
    return out.reshape(shape)


def cross_cov_HZ(t: float) -> float:
    """``E[H(t,0) Z(t,0)]`` when both are driven by one noise on ``[-1,1)``.

    ``H`` lives on the line, ``Z`` on the torus; the torus noise is the
    restriction of the line noise to ``[-1, 1)``. Image ``n`` contributes
    ``int_{-1}^{1} G_s(y) G_s(y+2n) dy = G_{2s}(2n) P{|N(-n, s)| <= 1}``.
    """
    (t,) = _times(t)
    t = float(t)
    if t == 0:
        return 0.0
    from scipy.special import ndtr

    def f(u):
        # s = u^2 removes the s^{-1/2} endpoint singularity
        s = u * u
        if s == 0:
            return 0.0
        nmax = int(np.ceil(np.sqrt(s) * 12 / 2)) + 2
        n = np.arange(-nmax, nmax + 1)
        w = ndtr((1 + n) / np.sqrt(s)) - ndtr((n - 1) / np.sqrt(s))
        return 2 * u * float(np.sum(gauss_kernel(2 * s, 2.0 * n) * w))

    val, _ = integrate.quad(f, 0, np.sqrt(t), epsabs=1e-14, epsrel=1e-12, limit=200)
    return val


def z_diag_tail(t: float, modes: int) -> float:
    """The omitted part of ``cov_Z(t, t, x, x)`` beyond ``modes``.

    Equals ``sum_{k>K} (1 - e^{-2 pi^2 k^2 t}) / (2 pi^2 k^2)``; the ``1/k^2``
    sum is a trigamma value, the exponential part is summed until negligible.
    """
    from scipy.special import polygamma

    full = float(polygamma(1, modes + 1)) / (2 * np.pi**2)
    if t <= 0:
        return 0.0
    k = np.arange(modes + 1, modes + 1 + 200000, dtype=float)
    lam = 2 * np.pi**2 * k * k
    e = np.exp(-lam * t)
    return full - float(np.sum(e / lam))


def hz_gap_variance(t: float, modes: int = Z_MODES_DEFAULT) -> float:
    """Exact ``Var(H(t,0) - Z(t,0))``; the Z mode tail is added analytically.

    The three terms nearly cancel for small ``t``; results within rounding
    (``1e-12`` of ``Var H``) below zero are returned as 0, anything more
    negative raises.
    """
    (t,) = _times(t)
    t = float(t)
    if t == 0:
        return 0.0
    vh = float(cov_H(t, t))
    vz = float(cov_Z(t, t, 0.0, 0.0, modes)) + z_diag_tail(t, modes)
    v = vh + vz - 2 * cross_cov_HZ(t)
    if v < 0:
        if v < -1e-12 * vh:
            raise NotPSDError(f"negative gap variance {v:.3g} at t={t:g}")
        v = 0.0
    return float(v)


def canonical_distance_T(s, t, prefactor: float = KAPPA_PAPER):
    """``d(s,t) = ||T(t) - T(s)||_2``."""
    s, t = _times(s, t)
    v = cov_T(s, s, prefactor) - 2 * cov_T(s, t, prefactor) + cov_T(t, t, prefactor)
    return np.sqrt(np.maximum(v, 0.0))


def parabolic_metric(t, x, s, y):
    """``|t-s|^{1/4} + dist(x,y)^{1/2}`` on space-time."""
    return np.abs(np.asarray(t, float) - s) ** 0.25 + torus_distance(x, y) ** 0.5


# ---------------------------------------------------------------------------
# kernel objects


@dataclass(frozen=True)
class CovKernel:
    """A named covariance ``(s, t) -> Cov`` with metadata.

    Attributes
    ----------
    process : str
        One of :data:`PROCESSES`.
    eval : callable
        Vectorized ``eval(s, t)``.
    horizon : float
        Time horizon the kernel is meant for.
    scaling : float
        Self-similarity exponent ``H`` (``Cov(cs, ct) = c^{2H} Cov(s, t)``),
        or ``nan`` when none.
    params : dict
        Extra constants (kappa, Z modes and site, ...).
    """

    process: str
    eval: Callable
    horizon: float = 1.0
    scaling: float = float("nan")
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.process not in PROCESSES:
            raise DomainError(f"unknown process {self.process!r}")
        if not self.horizon > 0:
            raise DomainError("horizon must be positive")

    def __call__(self, s, t):
        return self.eval(s, t)

    def matrix(self, times) -> np.ndarray:
        t = np.asarray(times, float)
        return self.eval(t[:, None], t[None, :])


def kernel(process: str, horizon: float = 1.0, **params) -> CovKernel:
    """Build the :class:`CovKernel` of a named process.

    ``T_aux`` accepts ``kappa``; ``Z_torus`` accepts ``x`` and ``modes``.
    """
    if process == "F_fbm14":
        return CovKernel(process, cov_F, horizon, 0.25)
    if process == "H_free":
        return CovKernel(process, cov_H, horizon, 0.25)
    if process == "BM":
        return CovKernel(process, cov_BM, horizon, 0.5)
    if process == "T_aux":
        kappa = float(params.get("kappa", KAPPA_CONSISTENT))
        return CovKernel(process, lambda s, t: cov_T(s, t, kappa), horizon, 0.25,
                         {"kappa": kappa})
    if process == "Z_torus":
        x = float(params.get("x", 0.0))
        modes = int(params.get("modes", Z_MODES_DEFAULT))
        return CovKernel(process, lambda s, t: cov_Z(s, t, x, x, modes), horizon,
                         float("nan"), {"x": x, "modes": modes,
                                        "tail_bound": z_tail_bound(modes)})
    raise DomainError(f"unknown process {process!r}")


def psd_check(M: np.ndarray, tol: float = 1e-10) -> tuple[bool, float]:
    """Return ``(ok, min_eig)`` with ``ok = min_eig >= -tol * ||M||_2``."""
    M = np.asarray(M, float)
    ev = np.linalg.eigvalsh(0.5 * (M + M.T))
    scale = max(abs(ev[0]), abs(ev[-1]), 1e-300)
    return bool(ev[0] >= -tol * scale), float(ev[0])


# ---------------------------------------------------------------------------
# decomposition F = a (H + T)


@dataclass(frozen=True)
class DecompositionFit:
    """Constants making ``c_F (cov_H + cov_T(kappa)) = cov_F``.

    ``cov_factor`` multiplies covariances; the path amplitude is its
    square root, so ``F = path_factor * (H + T)``.
    """

    kappa: float
    cov_factor: float
    residual: float

    @property
    def path_factor(self) -> float:
        return float(np.sqrt(self.cov_factor))

    def report(self) -> dict:
        a_ref = (2 / np.pi) ** -0.25
        return {
            "kappa": self.kappa,
            "kappa_reference": KAPPA_PAPER,
            "kappa_ratio": self.kappa / KAPPA_PAPER,
            "cov_factor": self.cov_factor,
            "path_factor": self.path_factor,
            "path_factor_reference": a_ref,
            "path_factor_ratio": self.path_factor / a_ref,
            "max_residual": self.residual,
        }


def fit_decomposition(n: int = 64, horizon: float = 1.0) -> DecompositionFit:
    """Fit ``(kappa, c_F)`` by linear least squares on an ``n``-point grid.

    ``cov_F = c_F cov_H + c_F kappa^2 B`` with ``B = cov_T(.,.;1)`` is linear
    in ``(c_F, c_F kappa^2)``.
    """
    t = np.linspace(0, horizon, n + 1)[1:]
    S, T = t[:, None], t[None, :]
    A = np.column_stack([cov_H(S, T).ravel(), cov_T(S, T, 1.0).ravel()])
    b = cov_F(S, T).ravel()
    (c1, c2), *_ = np.linalg.lstsq(A, b, rcond=None)
    kappa = float(np.sqrt(c2 / c1))
    res = float(np.max(np.abs(c1 * (cov_H(S, T) + cov_T(S, T, kappa)) - cov_F(S, T))))
    return DecompositionFit(kappa, float(c1), res)
