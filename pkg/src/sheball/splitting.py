"""Adaptive multilevel splitting for ``P{max |X| <= eps}``.

The score of a path is its largest absolute value over a window of grid
points. At each stage the worst fraction of particles is killed, the
survivors are cloned into the empty slots and every particle is moved by
a kernel that is reversible for the prior law restricted to
``{score < level}``.

Two move families are used for Gaussian path models.

* banded pCN: ``w_b' = sqrt(1 - beta_b^2) w_b + beta_b xi_b`` on blocks of
  Karhunen-Loeve coordinates, one adaptive ``beta_b`` per dyadic block
  of eigen-indices. The coordinates are independent standard normals
  under the prior, so every block move is an exact autoregressive move.
* site moves: for each grid index ``i`` an autoregressive proposal around
  the conditional law of ``X_i`` given the other coordinates, using the
  precision matrix. Used when the covariance is well conditioned.

A single global pCN step (all coordinates, one ``beta``) stalls on fine
grids: the acceptance rate of a joint move decays with the number of
constrained coordinates, so ``beta`` collapses and clones never separate.

One run records the sorted scores at every stage, so a whole curve
``eps -> p(eps)`` comes out of a single run.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import sparse
from scipy.special import logsumexp
from scipy.stats import t as student_t

from .errors import DegeneracyError, DomainError
from .rng import RngStream


@dataclass
class SplittingConfig:
    """Tuning of the splitting estimator.

    Parameters
    ----------
    particles : int
        Population size, at least 100.
    kill_fraction : float
        Fraction of the population killed per stage.
    pcn_beta : float
        Initial autoregressive step for every move family.
    rejuvenation_sweeps : int
        Move sweeps after each resampling.
    repetitions : int
        Independent runs combined into one estimate (at least 10 for a CI).
    target_acceptance : float
        Acceptance rate the pCN step sizes are adapted toward.
    site_moves : {"auto", "on", "off"}
        Use precision-based site moves ("auto": when well conditioned).
    band_cap : int
        With site moves on, pCN blocks only cover this many leading KL
        coordinates; site moves take care of the rest.
    max_stages : int
        Hard cap on stages.
    """

    particles: int = 200
    kill_fraction: float = 0.5
    pcn_beta: float = 0.3
    rejuvenation_sweeps: int = 3
    repetitions: int = 10
    target_acceptance: float = 0.3
    site_moves: str = "auto"
    band_cap: int = 128
    max_stages: int = 20000

    def __post_init__(self):
        if self.particles < 100:
            raise DomainError("particles must be >= 100")
        if not 0 < self.kill_fraction < 1:
            raise DomainError("kill_fraction must lie in (0, 1)")
        if int(self.kill_fraction * self.particles) < 1:
            raise DomainError("kill_fraction * particles must be >= 1")
        if not 0 < self.pcn_beta <= 1:
            raise DomainError("pcn_beta must lie in (0, 1]")
        if self.rejuvenation_sweeps < 1 or self.repetitions < 1:
            raise DomainError("rejuvenation_sweeps and repetitions must be >= 1")
        if self.site_moves not in ("auto", "on", "off"):
            raise DomainError("site_moves must be auto, on or off")


# ---------------------------------------------------------------------------
# move kernels


@numba.njit(cache=True, nogil=True)
def _site_sweep(X, QX, Q, bw, inwin, L, beta, Z):
    N, m = X.shape
    c = math.sqrt(1.0 - beta * beta)
    acc = 0
    for p in range(N):
        for i in range(m):
            qii = Q[i, i]
            xi = X[p, i]
            mu = xi - QX[p, i] / qii
            prop = mu + c * (xi - mu) + beta * Z[p, i] / math.sqrt(qii)
            if inwin[i] and abs(prop) >= L:
                continue
            d = prop - xi
            X[p, i] = prop
            lo = max(0, i - bw)
            hi = min(m, i + bw + 1)
            for j in range(lo, hi):
                QX[p, j] += Q[i, j] * d
            acc += 1
    return acc / (N * m)


def dyadic_bands(r: int) -> list[tuple[int, int]]:
    bands, lo, w = [], 0, 1
    while lo < r:
        bands.append((lo, min(r, lo + w)))
        lo += w
        w *= 2
    return bands


class GaussianPathModel:
    """Centered Gaussian vector on a grid, scored by ``max |X|`` on a window.

    Parameters
    ----------
    cov : ndarray
        Covariance on the grid. Zero-variance coordinates (a pinned start)
        are held at 0.
    window : ndarray of bool, optional
        Grid points entering the score; defaults to all.
    site_moves : {"auto", "on", "off"}
    band_cap : int
    """

    def __init__(self, cov, window=None, site_moves="auto", band_cap=128,
                 name="gaussian"):
        C = 0.5 * (np.asarray(cov, float) + np.asarray(cov, float).T)
        self.name = name
        self.n = C.shape[0]
        self.active = np.flatnonzero(np.diag(C) > 0)
        Ca = C[np.ix_(self.active, self.active)]
        m = len(self.active)
        win = np.ones(self.n, bool) if window is None else np.asarray(window, bool)
        self.inwin = win[self.active].copy()
        ev, U = np.linalg.eigh(Ca)
        ev, U = ev[::-1], U[:, ::-1]
        keep = ev > 1e-13 * ev[0]
        self.rank = int(keep.sum())
        ev, U = ev[keep], U[:, keep]
        self.B = np.ascontiguousarray(U * np.sqrt(ev))
        self.P = np.ascontiguousarray(U / np.sqrt(ev))
        cond = ev[0] / ev[-1]
        use_site = site_moves == "on" or (site_moves == "auto" and self.rank == m
                                          and cond < 1e10)
        self.Q = None
        self.bw = m
        if use_site:
            Q = (U / ev) @ U.T
            Q = 0.5 * (Q + Q.T)
            big = np.abs(Q) > 1e-9 * np.max(np.abs(np.diag(Q)))
            ii, jj = np.nonzero(big)
            bw = int(np.max(np.abs(ii - jj))) if len(ii) else 0
            self.Qs = None
            if bw < m // 8:
                Q[~big] = 0.0
                self.bw = bw
                self.Qs = sparse.csr_matrix(Q)
            self.Q = np.ascontiguousarray(Q)
        rb = self.rank if self.Q is None else min(self.rank, band_cap)
        self.bands = dyadic_bands(rb)
        self.cond = float(cond)

    # state is the (N, m) array of active coordinates
    def sample(self, N, g):
        return g.standard_normal((N, self.rank)) @ self.B.T

    def score(self, X):
        if not self.inwin.any():
            return np.zeros(X.shape[0])
        return np.max(np.abs(X[:, self.inwin]), axis=1)

    def full_paths(self, X):
        out = np.zeros((X.shape[0], self.n))
        out[:, self.active] = X
        return out

    def init_tuning(self, beta):
        return {"band": np.full(len(self.bands), beta), "site": beta}

    def sweep(self, X, S, L, g, tune, target):
        """One sweep of all move families; returns ``(X, S, proposals)``."""
        N = X.shape[0]
        cost = 0
        if self.Q is not None:
            QX = np.ascontiguousarray((self.Qs @ X.T).T) if self.Qs is not None else X @ self.Q
            Z = g.standard_normal(X.shape)
            acc = _site_sweep(X, QX, self.Q, self.bw, self.inwin, L, tune["site"], Z)
            tune["site"] = float(np.clip(tune["site"] * np.exp(acc - 0.4), 1e-4, 1.0))
            S = self.score(X)
            cost += N
        for b, (lo, hi) in enumerate(self.bands):
            beta = tune["band"][b]
            Pb, Bb = self.P[:, lo:hi], self.B[:, lo:hi]
            w = X @ Pb
            w2 = np.sqrt(1 - beta * beta) * w + beta * g.standard_normal(w.shape)
            Xp = X + (w2 - w) @ Bb.T
            Sp = self.score(Xp)
            ok = Sp < L
            X[ok] = Xp[ok]
            S[ok] = Sp[ok]
            acc = ok.mean()
            tune["band"][b] = float(np.clip(beta * np.exp(acc - target), 1e-4, 1.0))
            cost += N
        return X, S, cost


class NoiseDrivenModel:
    """A path that is a deterministic map of standard normal noise.

    Parameters
    ----------
    shape : tuple
        Shape of one noise array (e.g. ``(steps, cells)``).
    score_fn : callable
        Maps a batch of noise arrays ``(N, *shape)`` to scores ``(N,)``.
    blocks : int
        Noise is split along its first axis into this many contiguous
        blocks, each moved by its own pCN step.
    """

    def __init__(self, shape, score_fn, blocks=4, name="noise"):
        self.shape = tuple(shape)
        self.score_fn = score_fn
        edges = np.linspace(0, self.shape[0], min(blocks, self.shape[0]) + 1).astype(int)
        self.bands = [(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]
        self.name = name

    def sample(self, N, g):
        return g.standard_normal((N, *self.shape))

    def score(self, X):
        return np.asarray(self.score_fn(X), float)

    def init_tuning(self, beta):
        return {"band": np.full(len(self.bands), beta)}

    def sweep(self, X, S, L, g, tune, target):
        N = X.shape[0]
        cost = 0
        for b, (lo, hi) in enumerate(self.bands):
            beta = tune["band"][b]
            Xp = X.copy()
            blk = Xp[:, lo:hi]
            Xp[:, lo:hi] = np.sqrt(1 - beta * beta) * blk + beta * g.standard_normal(blk.shape)
            Sp = self.score(Xp)
            ok = Sp < L
            X[ok] = Xp[ok]
            S[ok] = Sp[ok]
            tune["band"][b] = float(np.clip(beta * np.exp(ok.mean() - target), 1e-4, 1.0))
            cost += N
        return X, S, cost


# ---------------------------------------------------------------------------
# engine


@dataclass
class SplittingRun:
    """Trace of one splitting run.

    ``levels[j]`` is the level after stage ``j`` (``levels[0] = inf``),
    ``logp[j]`` the log of the product of survival fractions up to it and
    ``scores[j]`` the sorted population scores conditioned on
    ``score < levels[j]``.
    """

    levels: list = field(default_factory=list)
    logp: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    cost: int = 0
    stream: tuple = ()

    def log_prob(self, eps: float) -> float:
        """Estimate of ``log P{score <= eps}`` from the stage with the most
        information: the last one whose level still exceeds ``eps``."""
        j = 0
        for k, lev in enumerate(self.levels):
            if lev > eps:
                j = k
        frac = np.searchsorted(self.scores[j], eps, side="right") / len(self.scores[j])
        return self.logp[j] + (math.log(frac) if frac > 0 else -math.inf)

    @property
    def stages(self) -> int:
        return len(self.levels) - 1


def run_splitting(model, target: float, cfg: SplittingConfig, rng: RngStream) -> SplittingRun:
    """One adaptive multilevel splitting run down to ``target``.

    Raises
    ------
    DegeneracyError
        When every particle ties at the level or levels stop decreasing;
        increase ``particles`` or ``pcn_beta``.
    """
    g = rng.generator()
    N = cfg.particles
    k = int(cfg.kill_fraction * N)
    X = model.sample(N, g)
    S = model.score(X)
    run = SplittingRun(stream=(rng.seed, rng.stream_id))
    run.levels.append(math.inf)
    run.logp.append(0.0)
    run.scores.append(np.sort(S))
    run.cost = N
    tune = model.init_tuning(cfg.pcn_beta)
    logp = 0.0
    stall = 0
    prev = math.inf
    for _ in range(cfg.max_stages):
        srt = np.sort(S)
        L = srt[N - k - 1]
        if L <= target:
            break
        alive = np.flatnonzero(S < L)
        if len(alive) == 0:
            raise DegeneracyError("all particle scores tied at the level; "
                                  "increase pcn_beta or particles")
        dead = np.flatnonzero(S >= L)
        logp += math.log(len(alive) / N)
        src = g.choice(alive, size=len(dead), replace=True)
        X[dead] = X[src]
        S[dead] = S[src]
        for _ in range(cfg.rejuvenation_sweeps):
            X, S, c = model.sweep(X, S, L, g, tune, cfg.target_acceptance)
            run.cost += c
        if L >= prev * (1 - 1e-12):
            stall += 1
            if stall > 20:
                raise DegeneracyError("splitting levels stopped decreasing; "
                                      "increase pcn_beta or particles")
        else:
            stall = 0
        prev = L
        run.levels.append(float(L))
        run.logp.append(logp)
        run.scores.append(np.sort(S))
    else:
        raise DegeneracyError(f"max_stages={cfg.max_stages} reached above target")
    return run


def run_repetitions(model, target, cfg: SplittingConfig, rng: RngStream,
                    threads: int = 1) -> list[SplittingRun]:
    """Independent runs on streams ``rng.child(r)``; order is by ``r``."""
    streams = [rng.child(r) for r in range(cfg.repetitions)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(lambda s: run_splitting(model, target, cfg, s), streams))
    return [run_splitting(model, target, cfg, s) for s in streams]


def combine(logps, level: float = 0.95) -> dict:
    """Average independent unbiased estimates given on the log scale.

    The mean is taken on the probability scale (the log of a mean, not a
    mean of logs, which would be biased low). The interval is
    ``p_hat * exp(+-t * rel_se)`` with ``rel_se`` the relative standard
    error of the mean.
    """
    lp = np.asarray(logps, float)
    R = len(lp)
    if np.all(~np.isfinite(lp)):
        return {"log_p": -math.inf, "log_lo": -math.inf, "log_hi": -math.inf, "rel_se": math.inf}
    lmean = float(logsumexp(lp) - math.log(R))
    if R < 2:
        return {"log_p": lmean, "log_lo": -math.inf, "log_hi": 0.0, "rel_se": math.inf}
    rel = np.exp(lp - lmean)
    rel_se = float(np.std(rel, ddof=1) / math.sqrt(R))
    q = float(student_t.ppf(0.5 + level / 2, R - 1))
    return {"log_p": lmean, "log_lo": lmean - q * rel_se,
            "log_hi": min(0.0, lmean + q * rel_se), "rel_se": rel_se}
