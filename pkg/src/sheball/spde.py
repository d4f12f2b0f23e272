"""Finite differences for ``du = u_xx dt + sigma(u) W(dt dx)`` on the torus.

Space is ``x_j = -1 + j h``, ``h = 2/m``; the discrete Laplacian is the
periodic three-point stencil, diagonalized by the FFT. The noise is
cell-averaged white noise: one ``N(0, dt/h)`` variable per cell and step.

Steps (``A`` the discrete heat step):

* explicit: ``u+ = u + dt L u + sigma(u) xi``, stable for ``dt <= h^2/2``;
* semi-implicit: ``u+ = (I - dt L)^{-1} (u + sigma(u) xi)``.

All solvers accept a batch of noise arrays with a leading replica axis.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .errors import DomainError, SolverError
from .rng import RngStream

# ---------------------------------------------------------------------------
# named coefficient functions (names keep configs serializable)


def make_function(spec: str):
    """Turn a name such as ``"cos"``, ``"sin_pi"`` or ``"const:2"`` into a ufunc."""
    spec = spec.strip()
    if spec.startswith("const:"):
        c = float(spec.split(":", 1)[1])
        return lambda v: np.full_like(np.asarray(v, float), c)
    table = {
        "zero": lambda v: np.zeros_like(np.asarray(v, float)),
        "one": lambda v: np.ones_like(np.asarray(v, float)),
        "cos": np.cos,
        "sin": np.sin,
        "sin_pi": lambda x: np.sin(np.pi * np.asarray(x, float)),
        "cos_pi": lambda x: np.cos(np.pi * np.asarray(x, float)),
        "identity": lambda v: np.asarray(v, float) * 1.0,
        "lipschitz_tanh": np.tanh,
    }
    if spec not in table:
        raise DomainError(f"unknown function name {spec!r}")
    return table[spec]


@dataclass(frozen=True)
class SpdeConfig:
    """Discretization and coefficients.

    Parameters
    ----------
    m : int
        Spatial cells (even).
    dt : float
        Time step; ``None`` means ``h^2 / 4``.
    horizon : float
        Final time.
    sigma, u0 : str
        Names understood by :func:`make_function`.
    scheme : {"semi_implicit", "explicit"}
    truncate : float, optional
        Replace ``sigma`` by ``sigma_N(v) = sigma(max(-N, min(N, v)))``.
    """

    m: int = 256
    dt: float | None = None
    horizon: float = 0.01
    sigma: str = "one"
    u0: str = "zero"
    scheme: str = "semi_implicit"
    truncate: float | None = None

    def __post_init__(self):
        if self.m < 2 or self.m % 2:
            raise DomainError("m must be even and >= 2")
        if self.dt is None:
            object.__setattr__(self, "dt", (2.0 / self.m) ** 2 / 4)
        if not self.dt > 0 or not self.horizon > 0:
            raise DomainError("dt and horizon must be positive")
        if self.scheme not in ("semi_implicit", "explicit"):
            raise DomainError("scheme must be semi_implicit or explicit")
        if self.scheme == "explicit" and self.dt > self.h**2 / 2 * (1 + 1e-12):
            raise DomainError(f"CFL violated: dt={self.dt:g} > h^2/2={self.h**2 / 2:g}")

    @property
    def h(self) -> float:
        return 2.0 / self.m

    @property
    def steps(self) -> int:
        return int(np.ceil(self.horizon / self.dt - 1e-9))

    @property
    def x(self) -> np.ndarray:
        return -1.0 + self.h * np.arange(self.m)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.steps + 1)

    def sigma_fn(self):
        f = make_function(self.sigma)
        if self.truncate is None:
            return f
        N = float(self.truncate)
        return lambda v: f(np.clip(v, -N, N))

    def u0_fn(self):
        return make_function(self.u0)

    def to_dict(self) -> dict:
        return {"m": self.m, "dt": self.dt, "horizon": self.horizon, "sigma": self.sigma,
                "u0": self.u0, "scheme": self.scheme, "truncate": self.truncate}


@dataclass
class Field:
    """Solution on the grid, ``values[..., step, cell]``."""

    values: np.ndarray
    config: SpdeConfig
    noise_id: str
    meta: dict = field(default_factory=dict)


def noise_digest(noise: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(noise).tobytes(), digest_size=16).hexdigest()


def draw_noise(cfg: SpdeConfig, replicas: int, rng: RngStream) -> np.ndarray:
    """``(replicas, steps, m)`` array of ``N(0, dt/h)`` cell noise."""
    g = rng.generator()
    return g.standard_normal((replicas, cfg.steps, cfg.m)) * np.sqrt(cfg.dt / cfg.h)


def _symbol(cfg: SpdeConfig) -> np.ndarray:
    k = np.arange(cfg.m // 2 + 1)
    return -4.0 / cfg.h**2 * np.sin(np.pi * k / cfg.m) ** 2


def _stepper(cfg: SpdeConfig):
    mu = _symbol(cfg)
    if cfg.scheme == "semi_implicit":
        a = 1.0 / (1.0 - cfg.dt * mu)

        def step(v):
            return np.fft.irfft(np.fft.rfft(v, axis=-1) * a, n=cfg.m, axis=-1)
    else:
        a = 1.0 + cfg.dt * mu

        def step(v):
            return np.fft.irfft(np.fft.rfft(v, axis=-1) * a, n=cfg.m, axis=-1)
    return step


def _integrate(cfg: SpdeConfig, noise: np.ndarray, sigma, u0: np.ndarray,
               keep: bool = True) -> np.ndarray:
    noise = np.asarray(noise, float)
    if noise.shape[-1] != cfg.m or noise.shape[-2] < cfg.steps:
        raise DomainError(f"noise must have shape (..., {cfg.steps}, {cfg.m})")
    step = _stepper(cfg)
    batch = noise.shape[:-2]
    u = np.broadcast_to(u0, batch + (cfg.m,)).astype(float).copy()
    out = np.empty(batch + (cfg.steps + 1, cfg.m)) if keep else None
    if keep:
        out[..., 0, :] = u
    explicit = cfg.scheme == "explicit"
    for n in range(cfg.steps):
        xi = noise[..., n, :]
        with np.errstate(over="ignore", invalid="ignore"):
            if explicit:
                u = step(u) + (sigma(u) * xi if sigma is not None else 0.0)
            else:
                u = step(u + sigma(u) * xi) if sigma is not None else step(u)
        if not np.all(np.isfinite(u)):
            raise SolverError("non-finite value during integration", step=n + 1)
        if keep:
            out[..., n + 1, :] = u
    return out if keep else u


def solve_u(cfg: SpdeConfig, noise: np.ndarray) -> Field:
    """Nonlinear solve driven by ``noise``."""
    vals = _integrate(cfg, noise, cfg.sigma_fn(), cfg.u0_fn()(cfg.x))
    return Field(vals, cfg, noise_digest(noise), {"scheme": cfg.scheme, "dt": cfg.dt,
                                                  "h": cfg.h, "cfl": cfg.dt / cfg.h**2})


def solve_Z_coupled(cfg: SpdeConfig, noise: np.ndarray) -> Field:
    """The ``sigma = 1, u0 = 0`` solve under the same noise and scheme."""
    zcfg = replace(cfg, sigma="one", u0="zero", truncate=None)
    vals = _integrate(zcfg, noise, lambda v: 1.0, np.zeros(cfg.m))
    return Field(vals, zcfg, noise_digest(noise), {"scheme": cfg.scheme})


def discrete_Z_variance(cfg: SpdeConfig, steps: int | None = None) -> float:
    """Exact ``Var Z`` at any cell after ``steps`` steps of the discrete scheme.

    ``Z_N = sum_k A^k xi`` and ``A`` is a Fourier multiplier, so the variance
    is ``(dt/h) m^{-1} sum_q sum_{k} a_q^{2k}`` (geometric sums per mode).
    """
    N = cfg.steps if steps is None else int(steps)
    q = np.arange(cfg.m)
    mu = -4.0 / cfg.h**2 * np.sin(np.pi * q / cfg.m) ** 2
    a = 1.0 / (1.0 - cfg.dt * mu) if cfg.scheme == "semi_implicit" else 1.0 + cfg.dt * mu
    r = a * a
    # explicit: A^k acts after the noise, i.e. k = 0..N-1; semi-implicit: k = 1..N
    lo = 1 if cfg.scheme == "semi_implicit" else 0
    with np.errstate(divide="ignore", invalid="ignore"):
        geo = np.where(np.isclose(r, 1.0, rtol=0, atol=1e-15), float(N),
                       r**lo * (1 - r**N) / (1 - r))
    return float(cfg.dt / cfg.h * geo.mean())


def discrete_semigroup(cfg: SpdeConfig, f0: np.ndarray) -> np.ndarray:
    """``S^n f0`` for all steps, with the solver's own heat step."""
    dummy = np.zeros((cfg.steps, cfg.m))
    return _integrate(cfg, dummy, None, f0)


@dataclass
class ErrorField:
    values: np.ndarray
    config: SpdeConfig


def linearization_error(u: Field, Z: Field, cfg: SpdeConfig) -> ErrorField:
    """``E = u - S^n u0 - sigma(u0(x)) Z`` on the solver grid.

    Raises
    ------
    DomainError
        If ``u`` and ``Z`` were not driven by the same noise.
    """
    if u.noise_id != Z.noise_id:
        raise DomainError("u and Z come from different noise arrays")
    if u.values.shape != Z.values.shape:
        raise DomainError("u and Z grids differ")
    u0 = cfg.u0_fn()(cfg.x)
    S = discrete_semigroup(cfg, u0)
    E = u.values - S - cfg.sigma_fn()(u0) * Z.values
    return ErrorField(E, cfg)


def log_plus(a):
    """``log(max(a, e^e))``."""
    return np.log(np.maximum(np.asarray(a, float), np.exp(np.e)))


def error_rate_study(cfg: SpdeConfig, t_list, replicas: int, rng: RngStream,
                     quantiles=(0.1, 0.25, 0.5, 0.75, 0.9), batch: int = 50) -> list[dict]:
    """Quantiles of ``sup |E| / (sqrt(t) log_+(1/t))`` and of ``|E(t,x)|/sqrt(t)``.

    Each ``t`` uses ``replicas`` fresh noise arrays on stream ``rng.child(i)``.
    The tail slope is a least-squares fit of ``log P{|E(t,x)|/sqrt(t) > a}``
    against ``a`` over the upper half of the sample.
    """
    if replicas < 100:
        raise DomainError("replicas must be >= 100")
    rows = []
    for i, t in enumerate(t_list):
        if not 0 < t <= 0.1:
            raise DomainError("t_list must lie in (0, 0.1]")
        c = replace(cfg, horizon=float(t))
        r = rng.child(i)
        sups, pts = [], []
        for b in range(0, replicas, batch):
            k = min(batch, replicas - b)
            noise = draw_noise(c, k, r.child(b))
            E = linearization_error(solve_u(c, noise), solve_Z_coupled(c, noise), c).values
            sups.append(np.abs(E).reshape(k, -1).max(axis=1))
            pts.append(np.abs(E[:, -1, :]).ravel())
        sup = np.concatenate(sups) / (np.sqrt(t) * float(log_plus(1 / t)))
        pt = np.concatenate(pts) / np.sqrt(t)
        a = np.sort(pt)
        surv = 1.0 - np.arange(len(a)) / len(a)
        hi = a[len(a) // 2: -max(1, len(a) // 1000)]
        sl = surv[len(a) // 2: -max(1, len(a) // 1000)]
        slope = float(np.polyfit(hi, np.log(sl), 1)[0]) if np.ptp(hi) > 0 else 0.0
        rows.append({"t": float(t),
                     "sup_ratio_q": dict(zip(map(str, quantiles), np.quantile(sup, quantiles).tolist())),
                     "point_ratio_q": dict(zip(map(str, quantiles), np.quantile(pt, quantiles).tolist())),
                     "tail_slope": slope, "replicas": replicas, "steps": c.steps})
    return rows


def modulus_ratio(cfg: SpdeConfig, pairs: int, replicas: int, rng: RngStream) -> dict:
    """Empirical ``||u(t,x) - u(s,y)||_2 / Delta((t,x),(s,y))`` over random pairs."""
    from .kernels import parabolic_metric

    noise = draw_noise(cfg, replicas, rng)
    u = solve_u(cfg, noise).values
    g = rng.child(1).generator()
    ti = g.integers(0, cfg.steps + 1, size=(pairs, 2))
    xi = g.integers(0, cfg.m, size=(pairs, 2))
    keep = (ti[:, 0] != ti[:, 1]) | (xi[:, 0] != xi[:, 1])
    ti, xi = ti[keep], xi[keep]
    d = u[:, ti[:, 0], xi[:, 0]] - u[:, ti[:, 1], xi[:, 1]]
    l2 = np.sqrt(np.mean(d * d, axis=0))
    D = parabolic_metric(cfg.times[ti[:, 0]], cfg.x[xi[:, 0]], cfg.times[ti[:, 1]], cfg.x[xi[:, 1]])
    r = l2 / D
    return {"max_ratio": float(r.max()), "median_ratio": float(np.median(r)), "pairs": int(len(r))}


def coarse_grain_noise(noise: np.ndarray) -> np.ndarray:
    """Noise for ``(m/2, 4 dt)`` built from fine ``(m, dt)`` noise.

    Sums over 4 steps and 2 cells keep the white-noise integrals; the
    ``N(0, dt/h)`` normalization is restored by the factor ``1/2``
    (variance ``8 dt/h`` becomes ``4dt/(2h)``).
    """
    N, s, m = noise.shape
    s4 = s // 4
    v = noise[:, : 4 * s4, :].reshape(N, s4, 4, m // 2, 2).sum(axis=(2, 4))
    return v / 2.0


def self_convergence(cfg: SpdeConfig, replicas: int, rng: RngStream, x_index: int = 0) -> dict:
    """Two-sample KS between ``sup_t |u(t, x)|`` on ``(m, dt)`` and ``(m/2, 4dt)``.

    Both solves share the same Brownian sheet, coarse-grained. The sup is
    taken over the common time points (every fourth fine step); a sup over
    all fine steps carries an extra grid-sup bias of order ``dt^{1/4}``.
    Also reports ``E u(T, x)^2`` on both grids.
    """
    # whole coarse steps only, so both grids end at the same time
    fine = replace(cfg, horizon=4 * cfg.dt * max(1, cfg.steps // 4))
    coarse = replace(fine, m=cfg.m // 2, dt=cfg.dt * 4)
    noise = draw_noise(fine, replicas, rng)
    uf = solve_u(fine, noise).values
    uc = solve_u(coarse, coarse_grain_noise(noise)).values
    a = np.abs(uf[:, ::4, 2 * x_index]).max(axis=1)
    b = np.abs(uc[:, :, x_index]).max(axis=1)
    ks = stats.ks_2samp(a, b)
    crit = 1.63 * np.sqrt(2.0 / replicas)
    m2f = float(np.mean(uf[:, -1, 2 * x_index] ** 2))
    m2c = float(np.mean(uc[:, -1, x_index] ** 2))
    return {"ks": float(ks.statistic), "crit_1pct": float(crit), "pvalue": float(ks.pvalue),
            "median_fine": float(np.median(a)), "median_coarse": float(np.median(b)),
            "second_moment_fine": m2f, "second_moment_coarse": m2c,
            "second_moment_rel_change": abs(m2f - m2c) / m2f}
