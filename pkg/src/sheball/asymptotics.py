"""Deterministic checks: the ``a^{3/4}`` recursion, entropy covers of ``T``
and the canonical-distance interpolation bound."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from . import kernels as K
from .errors import DomainError
from .rng import RngStream


@numba.njit(cache=True)
def _fourth_roots(c, n, checkpoints):
    # b = a^{1/4}: b_{j+1} = b_j (1 + c / b_j)^{1/4}
    b = 1.0
    out = np.empty(len(checkpoints))
    k = 0
    for j in range(1, n + 1):
        while k < len(checkpoints) and checkpoints[k] == j:
            out[k] = b
            k += 1
        b = b * math.exp(0.25 * math.log1p(c / b))
    return out


def recursion_values(c: float, checkpoints) -> np.ndarray:
    """``a_j`` at the requested indices (``a_1 = 1``, ``a_{j+1} = a_j + c a_j^{3/4}``).

    The iteration runs on ``a^{1/4}``, which grows linearly, so nothing
    overflows; values are returned as ``a_j = b_j^4``.
    """
    if not c > 0:
        raise DomainError("c must be positive")
    cp = np.asarray(sorted(int(j) for j in checkpoints), dtype=np.int64)
    if cp.size and cp[0] < 1:
        raise DomainError("indices start at 1")
    b = _fourth_roots(float(c), int(cp[-1]) if cp.size else 0, cp)
    with np.errstate(over="raise"):
        try:
            return b**4
        except FloatingPointError as exc:
            raise DomainError("a_n overflows; use recursion_ratio (log-domain form)") from exc


def recursion_ratio(c: float, n: int) -> float:
    """``a_n / (c n / 4)^4`` computed as ``(a_n^{1/4} / (c n / 4))^4``."""
    if not c > 0 or n < 1:
        raise DomainError("need c > 0 and n >= 1")
    b = _fourth_roots(float(c), int(n), np.array([int(n)], dtype=np.int64))[0]
    return float((b / (c * n / 4.0)) ** 4)


def recursion_trend(c: float, ns=(10**3, 10**4, 10**5, 10**6)) -> dict:
    """Ratios at several ``n`` from one pass, plus where ``|ratio - 1|`` starts
    to shrink monotonically (and from which side)."""
    ns = sorted(int(v) for v in ns)
    b = _fourth_roots(float(c), ns[-1], np.asarray(ns, dtype=np.int64))
    ratios = [float((bb / (c * n / 4.0)) ** 4) for bb, n in zip(b, ns)]
    dense = np.unique(np.geomspace(1, ns[-1], 400).astype(np.int64))
    bd = _fourth_roots(float(c), int(dense[-1]), dense)
    rd = (bd / (c * dense / 4.0)) ** 4
    err = np.abs(rd - 1)
    shrink = np.diff(err) < 0
    thr, side = None, None
    for i in range(len(shrink)):
        if shrink[i:].all():
            tail = np.sign(rd[i + 1:] - 1)
            if np.all(tail == tail[0]):
                thr, side = int(dense[i]), "above" if tail[0] > 0 else "below"
                break
    return {"c": c, "n": ns, "ratio": ratios, "monotone_after": thr, "side": side}


@dataclass
class EntropyCover:
    """Centers ``t_0 = 0``, ``t_j = a_j (2 eps / c)^4`` for ``T`` on ``[0, 1]``."""

    epsilon: float
    c: float
    centers: np.ndarray
    count: int
    max_gap_distance: float


def build_entropy_cover(epsilon: float, c: float, kappa: float = K.KAPPA_CONSISTENT,
                        strict: bool = True) -> EntropyCover:
    """Build the cover and check ``d(t_j, t_{j+1}) <= 2 eps`` for consecutive centers.

    ``count = 1 + max{j : t_j <= 1}``.

    Raises
    ------
    DomainError
        When a consecutive pair is farther than ``2 eps`` (the constant
        ``c`` is too large for this ``kappa``).
    """
    if not epsilon > 0 or not c > 0:
        raise DomainError("epsilon and c must be positive")
    scale = (2 * epsilon / c) ** 4
    ts = [0.0]
    a = 1.0
    while True:
        ts.append(a * scale)
        if ts[-1] > 1:
            break
        a = a + c * a**0.75
    t = np.array(ts)
    gaps = K.canonical_distance_T(t[:-1], t[1:], kappa)
    worst = float(gaps.max())
    if strict and worst > 2 * epsilon * (1 + 1e-12):
        raise DomainError(f"d(t_j, t_j+1) = {worst:.4g} > 2 eps = {2 * epsilon:.4g}; "
                          "the fitted constant c does not bound d")
    count = int(np.sum(t <= 1))
    return EntropyCover(epsilon, c, t, count, worst)


def _bound_shape(s, t):
    lo = np.minimum(s, t)
    gap = np.abs(t - s)
    with np.errstate(divide="ignore", invalid="ignore"):
        m = np.where(lo > 0, np.minimum(1.0, (gap / np.where(lo > 0, lo, 1.0)) ** 0.75), 1.0)
    return gap**0.25 * m


def verify_d_interpolation(pairs: int, rng: RngStream, kappa: float = K.KAPPA_CONSISTENT,
                           etas=(0.1, 0.5)) -> dict:
    """Fit the smallest ``c`` with ``d <= c |t-s|^{1/4} (1 ^ (|t-s|/(s^t))^{3/4})``.

    Pairs are log-uniform in ``(1e-8, 1]^2``. For each ``eta`` the Lipschitz
    constant ``C_eta = max d / |t-s|`` over pairs uniform in ``[eta, 1]^2`` is
    also returned. Violation counts are evaluated at the returned constants.
    """
    if pairs < 10**4:
        raise DomainError("pairs must be >= 1e4")
    g = rng.generator()
    s, t = 10.0 ** g.uniform(-8, 0, size=(2, pairs))
    # the ratio depends on t/s only and is largest as s -> 0; keep the
    # boundary pairs (0, t) so the fitted c is the supremum, not just below it
    s = np.concatenate([s, np.zeros(pairs // 100)])
    t = np.concatenate([t, 10.0 ** g.uniform(-8, 0, size=pairs // 100)])
    d = K.canonical_distance_T(s, t, kappa)
    shape = _bound_shape(s, t)
    ok = shape > 0
    c = float(np.max(d[ok] / shape[ok]))
    viol = int(np.sum(d > c * shape * (1 + 1e-12)))
    out = {"c": c, "violations": viol, "pairs": int(pairs), "kappa": kappa, "C_eta": {}}
    for eta in etas:
        a, b = g.uniform(eta, 1.0, size=(2, pairs))
        gap = np.abs(a - b)
        dd = K.canonical_distance_T(a, b, kappa)
        C = float(np.max(dd[gap > 0] / gap[gap > 0]))
        out["C_eta"][str(eta)] = {"C": C, "violations": int(np.sum(dd > C * gap * (1 + 1e-12)))}
    return out


def entropy_scan(c: float, exps=range(3, 11), kappa: float = K.KAPPA_CONSISTENT) -> dict:
    """Cover counts over ``eps = 2^-k``; reports ``count * eps`` and doubling ratios."""
    eps = [2.0**-k for k in exps]
    counts = [build_entropy_cover(e, c, kappa).count for e in eps]
    ratios = [counts[i + 1] / counts[i] for i in range(len(counts) - 1)]
    return {"epsilons": eps, "counts": counts, "count_times_eps": [n * e for n, e in zip(counts, eps)],
            "doubling_ratios": ratios, "C": max(n * e for n, e in zip(counts, eps))}
