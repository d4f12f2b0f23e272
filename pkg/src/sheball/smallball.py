"""Small-ball estimates ``P{max_window |X| <= eps}`` and what is built on them.

Estimators
----------
``estimate_plain``      Monte Carlo proportion, Clopper-Pearson interval.
``estimate_splitting``  adaptive multilevel splitting (see :mod:`.splitting`),
                        averaged over independent repetitions.

Grid maxima only bound the path supremum from below, so every grid
probability is an upper bound for the continuous one. ``grid_refinement``
quantifies that bias and extrapolates it away for processes whose
grid-max error scales like ``dt^H``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.stats import binomtest

from . import kernels as K
from . import samplers as smp
from .errors import DomainError
from .rng import RngStream
from .splitting import (GaussianPathModel, NoiseDrivenModel, SplittingConfig, combine,
                        run_repetitions)

HOLDER = {"BM": 0.5, "F_fbm14": 0.25, "H_free": 0.25, "Z_torus": 0.25, "T_aux": 0.25}


@dataclass(frozen=True)
class SmallBallQuery:
    """The event ``max_{t_i in window} |X(t_i) - centering| <= epsilon``.

    Parameters
    ----------
    process : str
        A kernel name from :data:`kernels.PROCESSES`.
    epsilon : float
    window : tuple
        ``(t_lo, t_hi)`` inside ``[0, horizon]``.
    n : int
        Grid points on ``[0, horizon]``.
    params : dict
        Kernel parameters (``kappa`` for T, ``x``/``modes`` for Z).
    """

    process: str
    epsilon: float
    window: tuple = (0.0, 1.0)
    horizon: float = 1.0
    n: int = 256
    params: dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise DomainError("epsilon must be positive")
        lo, hi = self.window
        if not lo < hi:
            raise DomainError("window needs t_lo < t_hi")
        if lo < 0 or hi > self.horizon * (1 + 1e-12):
            raise DomainError("window must lie inside [0, horizon]")

    @property
    def grid(self) -> smp.TimeGrid:
        return smp.TimeGrid(self.n, self.horizon)

    def mask(self) -> np.ndarray:
        t = self.grid.times
        lo, hi = self.window
        return (t >= lo - 1e-12) & (t <= hi + 1e-12)

    def kernel(self) -> K.CovKernel:
        return K.kernel(self.process, self.horizon, **self.params)

    def with_eps(self, eps: float) -> "SmallBallQuery":
        return SmallBallQuery(self.process, eps, self.window, self.horizon, self.n, self.params)

    def with_n(self, n: int) -> "SmallBallQuery":
        return SmallBallQuery(self.process, self.epsilon, self.window, self.horizon, n, self.params)


@dataclass
class EstimateRecord:
    """One probability estimate with a 95% interval."""

    epsilon: float
    p_hat: float
    log_p: float
    ci_lo: float
    ci_hi: float
    method: str
    n_effective: int
    cost: int
    log_ci: tuple = (-math.inf, 0.0)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.ci_lo <= self.p_hat <= self.ci_hi:
            raise AssertionError("interval does not contain the estimate")

    def row(self) -> dict:
        return {"epsilon": self.epsilon, "p_hat": self.p_hat, "ci_lo": self.ci_lo,
                "ci_hi": self.ci_hi, "log_p": self.log_p, "method": self.method,
                "cost": self.cost}

    @property
    def log_halfwidth(self) -> float:
        lo, hi = self.log_ci
        return 0.5 * (hi - lo)


# ---------------------------------------------------------------------------
# models and estimators

_model_cache: dict = {}


def gaussian_model(query: SmallBallQuery, cfg: SplittingConfig | None = None) -> GaussianPathModel:
    """Splitting model of the query's process on its grid (cached)."""
    site = cfg.site_moves if cfg else "auto"
    cap = cfg.band_cap if cfg else 128
    key = (query.process, tuple(sorted(query.params.items())), query.n, query.horizon,
           query.window, site, cap)
    if key not in _model_cache:
        if len(_model_cache) > 8:
            _model_cache.clear()
        C = query.kernel().matrix(query.grid.times)
        _model_cache[key] = GaussianPathModel(C, query.mask(), site, cap, query.process)
    return _model_cache[key]


def sample_paths(query: SmallBallQuery, count: int, rng: RngStream) -> np.ndarray:
    if query.process == "F_fbm14":
        return smp.sample_fbm14(query.grid, count, rng).paths
    return smp.sample_gaussian_path(query.kernel(), query.grid, count, rng).paths


def estimate_plain(query: SmallBallQuery, n: int, rng: RngStream, paths=None) -> EstimateRecord:
    """Proportion of ``n`` paths in the ball, exact 95% interval.

    ``p_hat = 0`` is allowed: ``log_p`` is then ``-inf`` and the interval
    is one-sided.
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    X = sample_paths(query, n, rng) if paths is None else paths
    hits = int(np.sum(np.max(np.abs(X[:, query.mask()]), axis=1) <= query.epsilon))
    ci = binomtest(hits, n).proportion_ci(0.95, method="exact")
    p = hits / n
    lo, hi = float(ci.low), float(ci.high)
    return EstimateRecord(query.epsilon, p, math.log(p) if p > 0 else -math.inf, lo, hi,
                          "plain", n, n,
                          (math.log(lo) if lo > 0 else -math.inf, math.log(hi)))


def _record(eps, comb, cfg, cost, runs) -> EstimateRecord:
    lp = comb["log_p"]
    p = math.exp(lp) if np.isfinite(lp) else 0.0
    lo = math.exp(comb["log_lo"]) if np.isfinite(comb["log_lo"]) else 0.0
    hi = math.exp(comb["log_hi"])
    lo, hi = min(lo, p), max(hi, p)
    return EstimateRecord(eps, p, lp, lo, hi, "splitting", cfg.particles * cfg.repetitions,
                          cost, (comb["log_lo"], comb["log_hi"]),
                          {"rel_se": comb["rel_se"], "stages": [r.stages for r in runs]})


def estimate_splitting(query: SmallBallQuery, cfg: SplittingConfig, rng: RngStream,
                       eps_list=None, threads: int = 1, model=None):
    """Splitting estimate(s) for the query.

    With ``eps_list`` the runs go down to ``min(eps_list)`` and one record
    per radius is returned (all read off the same runs).
    """
    eps = [query.epsilon] if eps_list is None else sorted(eps_list, reverse=True)
    model = gaussian_model(query, cfg) if model is None else model
    runs = run_repetitions(model, min(eps), cfg, rng, threads)
    cost = int(sum(r.cost for r in runs))
    recs = [_record(e, combine([r.log_prob(e) for r in runs]), cfg, cost, runs) for e in eps]
    return recs[0] if eps_list is None else recs


def richardson_weights(ns, order: float, terms: int = 1) -> np.ndarray:
    """Weights ``w`` with ``log p(inf) ~ sum_i w_i log p(ns[i])``.

    The error is modelled as ``sum_{k=1..terms} a_k n^{-k order}``; only
    the ``terms + 1`` finest grids get nonzero weight.
    """
    ns = np.asarray(ns, float)
    if len(ns) < terms + 1:
        raise DomainError(f"richardson with {terms} terms needs {terms + 1} grids")
    idx = np.argsort(ns)[-(terms + 1):]
    n = ns[idx]
    A = np.column_stack([np.ones_like(n)] + [n ** (-k * order) for k in range(1, terms + 1)])
    w = np.zeros(len(ns))
    w[idx] = np.linalg.inv(A)[0]
    return w


def richardson(logps, ns, order: float, terms: int = 1) -> float:
    """Extrapolate ``log p(n)`` to ``n = inf`` (see :func:`richardson_weights`)."""
    return float(richardson_weights(ns, order, terms) @ np.asarray(logps, float))


def grid_refinement(query: SmallBallQuery, ns, cfg: SplittingConfig, rng: RngStream,
                    eps_list=None, threads: int = 1, terms: int = 1) -> dict:
    """Estimates on refining grids plus the extrapolated continuum value.

    Returns a dict with per-grid records, the relative move of ``log p``
    between the last two grids (the doubling criterion asks for < 2%) and
    the Richardson value with order ``HOLDER[process]`` and ``terms``
    correction terms (``terms + 1`` grids used).
    """
    eps = [query.epsilon] if eps_list is None else list(eps_list)
    per = {}
    for i, n in enumerate(ns):
        per[n] = estimate_splitting(query.with_n(n), cfg, rng.child(i), eps, threads)
    order = HOLDER.get(query.process, 0.25)
    rows = []
    for j, e in enumerate(sorted(eps, reverse=True)):
        lps = [per[n][j].log_p for n in ns]
        move = abs(lps[-1] - lps[-2]) / abs(lps[-1]) if len(ns) > 1 and lps[-1] != 0 else 0.0
        w = richardson_weights(ns, order, min(terms, len(ns) - 1)) if len(ns) > 1 else [1.0]
        ext = float(np.dot(w, lps))
        hw = math.sqrt(sum((wi * per[n][j].log_halfwidth) ** 2 for wi, n in zip(w, ns)))
        rows.append({"epsilon": e, "log_p_by_n": dict(zip(map(int, ns), lps)),
                     "relative_move": move, "converged": move < 0.02,
                     "log_p_extrapolated": ext, "log_halfwidth": hw})
    return {"grids": list(map(int, ns)), "order": order, "rows": rows, "records": per}


def bm_log_small_ball(eps: float, horizon: float = 1.0, terms: int = 200) -> float:
    """``log P{sup_{[0,horizon]} |B| <= eps}`` from the reflection series.

    ``(4/pi) sum_k (-1)^k/(2k+1) exp(-(2k+1)^2 pi^2 horizon / (8 eps^2))``,
    with the leading term factored out so small ``eps`` does not underflow.
    """
    if not eps > 0:
        raise DomainError("eps must be positive")
    a = math.pi**2 * horizon / (8 * eps**2)
    k = np.arange(terms)
    r = (-1.0) ** k / (2 * k + 1) * np.exp(-((2 * k + 1) ** 2 - 1) * a)
    return math.log(4 / math.pi) - a + math.log(float(r.sum()))


# ---------------------------------------------------------------------------
# constant fits


@dataclass
class ConstantFit:
    """``-log p ~ lambda * eps^{-exponent} + intercept``."""

    lambda_hat: float
    stderr: float
    exponent: float
    intercept: float
    epsilons: list
    free_exponent: float = float("nan")
    free_exponent_stderr: float = float("nan")
    free_lambda: float = float("nan")

    def to_json(self) -> dict:
        return {"lambda_hat": self.lambda_hat, "stderr": self.stderr, "exponent": self.exponent,
                "epsilons": list(self.epsilons), "intercept": self.intercept,
                "free_exponent": self.free_exponent,
                "free_exponent_stderr": self.free_exponent_stderr,
                "free_lambda": self.free_lambda}


def fit_constant(estimates, exponent: float = 4.0, weights=None) -> ConstantFit:
    """Weighted least squares of ``-log p`` on ``eps^{-exponent}``.

    Parameters
    ----------
    estimates : sequence
        ``(eps, log_p)`` pairs, ``(eps, log_p, halfwidth)`` triples or
        :class:`EstimateRecord` objects (weights from their log intervals).
    exponent : float
    weights : array, optional
        Overrides the weights.

    Raises
    ------
    DomainError
        With fewer than 3 finite points.
    """
    e, y, hw = [], [], []
    for item in estimates:
        if isinstance(item, EstimateRecord):
            a, b, c = item.epsilon, item.log_p, item.log_halfwidth
        else:
            a, b, c = (tuple(item) + (float("nan"),))[:3]
        if np.isfinite(b):
            e.append(float(a))
            y.append(-float(b))
            hw.append(float(c))
    if len(set(e)) < 3:
        raise DomainError("need at least 3 distinct eps with finite log_p")
    e, y, hw = map(np.asarray, (e, y, hw))
    if weights is None:
        ok = np.isfinite(hw) & (hw > 0)
        w = np.where(ok, 1.0 / np.where(ok, hw, 1.0) ** 2, 0.0)
        w = w if ok.all() else np.ones_like(y)
    else:
        w = np.asarray(weights, float)
    X = np.column_stack([e**-exponent, np.ones_like(e)])
    sw = np.sqrt(w)
    beta, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    resid = (y - X @ beta) * sw
    dof = max(len(y) - 2, 1)
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.pinv((X * w[:, None]).T @ X)
    fit = ConstantFit(float(beta[0]), float(np.sqrt(max(cov[0, 0], 0.0))), float(exponent),
                      float(beta[1]), sorted(e.tolist()))
    if len(y) >= 3:
        try:
            def f(eps, lam, a, c):
                return lam * eps**-a + c
            p0 = (max(fit.lambda_hat, 1e-6), exponent, fit.intercept)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", optimize.OptimizeWarning)
                popt, pcov = optimize.curve_fit(f, e, y, p0=p0, sigma=1 / sw, maxfev=20000,
                                                absolute_sigma=False)
            fit.free_lambda, fit.free_exponent = float(popt[0]), float(popt[1])
            if np.all(np.isfinite(pcov)):
                fit.free_exponent_stderr = float(np.sqrt(max(pcov[1, 1], 0.0)))
        except (RuntimeError, ValueError, optimize.OptimizeWarning):
            pass
    return fit


# ---------------------------------------------------------------------------
# moderate regime, scaling, Chung


def loglog(eps):
    return float(np.log(abs(np.log(eps))))


def moderate_regime_estimate(process: str, phi, eps_list, cfg: SplittingConfig,
                             rng: RngStream, n: int = 256, params=None,
                             threads: int = 1) -> list[dict]:
    """``[phi(eps)]^{-1} log P{max_{[0,eps]} |X| <= (eps / phi(eps))^{1/4}}``.

    For Gaussian kernels the window ``[0, eps]`` is gridded with ``n``
    points. A warning is recorded when ``phi(eps) > |log eps|``.
    """
    params = params or {}
    rows = []
    for i, eps in enumerate(eps_list):
        ph = float(phi(eps))
        warn = ph > abs(math.log(eps))
        if warn:
            warnings.warn(f"phi({eps:g}) exceeds |log eps|", stacklevel=2)
        r = (eps / ph) ** 0.25
        q = SmallBallQuery(process, r, (0.0, eps), eps, n, params)
        rec = estimate_splitting(q, cfg, rng.child(i), threads=threads)
        rows.append({"epsilon": eps, "phi": ph, "radius": r, "log_p": rec.log_p,
                     "normalized": rec.log_p / ph, "norm_lo": rec.log_ci[0] / ph,
                     "norm_hi": rec.log_ci[1] / ph, "phi_warning": warn, "record": rec})
    return rows


def fit_inverse_order(estimates) -> float:
    """Smallest ``L >= 1`` with ``log p(r) >= -L/r - log L`` for every ``(r, log_p)``.

    The bound is decreasing in ``L``, so each radius gives one root and
    the fitted ``L`` is the largest of them.
    """
    L = 1.0
    for r, lp in estimates:
        if not (r > 0 and np.isfinite(lp)):
            raise DomainError("need positive radii with finite log p")

        def g(x):
            return -x / r - math.log(x) - lp
        if g(L) > 0:
            hi = 2 * L
            while g(hi) > 0:
                hi *= 2
            L = optimize.brentq(g, L, hi, xtol=1e-12)
    return float(L)


def chung_statistic(paths: smp.PathEnsemble, eps_grid) -> dict:
    """``R(eps) = max_{[0,eps]} |path| / psi(eps)`` and its running infimum.

    ``eps_grid`` is visited from the largest to the smallest value; the
    running infimum is therefore non-increasing along that order.
    """
    eps = np.sort(np.asarray(eps_grid, float))[::-1]
    if len(eps) < 8:
        raise DomainError("eps_grid needs at least 8 points")
    if eps[0] > paths.grid.horizon * (1 + 1e-12) or eps[-1] < paths.grid.dt:
        raise DomainError("eps_grid must lie within the path horizon and above dt")
    t = paths.grid.times
    absx = np.abs(paths.paths)
    runmax = np.maximum.accumulate(absx, axis=1)
    idx = np.searchsorted(t, eps * (1 + 1e-12), side="right") - 1
    R = runmax[:, idx] / smp.psi(eps)
    inf = np.minimum.accumulate(R, axis=1)
    return {"eps": eps, "R": R, "running_inf": inf}


# ---------------------------------------------------------------------------
# min over the grids D_q


def grid_D(n: int, theta: float) -> np.ndarray:
    """``{j 2^-n : 0 <= j <= theta 2^n}``."""
    return np.arange(int(math.floor(theta * 2**n + 1e-9)) + 1) / 2.0**n


def grid_Dq(m: int, q: float, theta: float) -> np.ndarray:
    """``D(n)`` for the ``n`` with ``2^{n/q} <= m < 2^{(n+1)/q}``; ``q -> 0`` gives ``{0}``."""
    if q <= 0:
        return np.zeros(1)
    n = int(math.floor(q * math.log2(m) + 1e-12))
    while 2 ** (n / q) > m:
        n -= 1
    while 2 ** ((n + 1) / q) <= m:
        n += 1
    return grid_D(max(n, 0), theta)


def gamma_bound(lam: float, alpha: float, q: float) -> float:
    """Upper end of the admissible range for gamma: ``(2 lam (1+alpha) / (pi q))^{1/4}``."""
    return (2 * lam * (1 + alpha) / (math.pi * q)) ** 0.25


def min_grid_experiment(n: int, alpha: float, q: float, gamma: float, theta: float,
                        replicas: int, cfg: SplittingConfig, rng: RngStream, lam: float,
                        nt: int = 128, field_name: str = "I_n", threads: int = 1) -> dict:
    """``P{min_{x in D_q(n)} max_{[t_{n+1}, t_n]} |I_n(t,x)| <= gamma psi(t_n)}``.

    The sites of ``D_q(n)`` have disjoint windows, so the event has
    probability ``1 - (1 - p1)^{|D_q(n)|}`` with ``p1`` the single-site
    probability, estimated by splitting with ``replicas`` repetitions.

    Returns
    -------
    dict
        ``p_hat``, ``log_p``, ``p1`` record, ``sites`` and the predicted
        exponent ``-(2 lam (1+alpha) / (pi gamma^4) - q)``.
    """
    if q > 0:
        gmax = gamma_bound(lam, alpha, q)
        if not 0 < gamma < gmax:
            raise DomainError(f"gamma must satisfy 0 < gamma < (2 lambda (1+alpha)/(pi q))^(1/4)"
                              f" = {gmax:.4g}")
    tn = smp.t_seq(n, alpha)
    t1 = float(np.exp(-float(n + 1) ** (1 + alpha)))
    sites = grid_Dq(n, q, theta)
    w = smp.localized_window(n, alpha)
    if len(sites) > 1 and np.min(np.diff(sites)) < 2 * w:
        raise DomainError("grid sites closer than the window width; windows overlap")
    times = np.linspace(t1, tn, nt)
    # units with t_n = 1: cov scales by sqrt(t_n), radius by t_n^{1/4}
    C = smp.localized_cov(field_name, n, alpha, times, [0.0]) / math.sqrt(tn)
    radius = gamma * float(smp.psi(tn)) / tn**0.25
    model = GaussianPathModel(C, None, cfg.site_moves, cfg.band_cap, field_name)
    c2 = SplittingConfig(**{**cfg.__dict__, "repetitions": replicas})
    runs = run_repetitions(model, radius, c2, rng, threads)
    comb = combine([r.log_prob(radius) for r in runs])
    p1 = math.exp(comb["log_p"])
    D = len(sites)
    logp = math.log(-math.expm1(D * math.log1p(-p1))) if p1 < 1 else 0.0
    pred = -(2 * lam * (1 + alpha) / (math.pi * gamma**4) - q)
    return {"n": n, "t_n": tn, "sites": D, "radius_scaled": radius, "p1": p1,
            "log_p1": comb["log_p"], "log_p1_rel_se": comb["rel_se"], "p_hat": math.exp(logp),
            "log_p": logp, "predicted_exponent": pred}


def spde_small_ball(spde_cfg, x_index: int, radius_list, cfg: SplittingConfig,
                    rng: RngStream, centering: bool = True, blocks: int = 4,
                    threads: int = 1) -> list[EstimateRecord]:
    """``P{max_t |u(t, x) - u0(x)| <= r}`` by splitting on the driving noise.

    The particles are standard normal noise arrays; the solver maps them to
    paths, so the invariant law of the moves stays Gaussian.
    """
    from . import spde

    u0 = spde_cfg.u0_fn()(spde_cfg.x)[x_index] if centering else 0.0
    scale = math.sqrt(spde_cfg.dt / spde_cfg.h)

    def score(xi):
        u = spde.solve_u(spde_cfg, xi * scale).values[..., 1:, x_index]
        return np.max(np.abs(u - u0), axis=-1)

    model = NoiseDrivenModel((spde_cfg.steps, spde_cfg.m), score, blocks, "spde")
    eps = sorted(radius_list, reverse=True)
    runs = run_repetitions(model, min(eps), cfg, rng, threads)
    cost = int(sum(r.cost for r in runs))
    return [_record(e, combine([r.log_prob(e) for r in runs]), cfg, cost, runs) for e in eps]
