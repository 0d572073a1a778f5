"""Time integration of the forced Galerkin system.

The velocity obeys

    du/dt = -P_k B(u) + nu Lap u + Z,

with P_k the 2/3-band truncation.  Viscosity is treated exactly by the
integrating factor E = exp(-nu |k|^2 dt).  The nonlinearity uses Heun's
method under the factor, and the forcing integral
int_0^dt exp(-nu |k|^2 (dt - s)) Z(s) ds uses Simpson's rule with Z at
the start, midpoint and end of the step.  Z is advanced by two exact
OU half steps, so its law carries no discretization error.

The same scheme integrates the 1D Burgers analogue, where B(u) = u u_x.
"""

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import fft

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint  # noqa: F401
from .forcing import (
    OUState, build_noise_spectrum, energy_input, ou_exact_step,
    ou_invariant_sample, ou_zero_state,
)
from .spectral import (
    ConfigurationError, SpectralField, WaveGrid, get_workers, pressure_recover,
    random_solenoidal,
)

_PAIRS3 = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


class StepSizeError(RuntimeError):
    """The CFL number exceeded the configured limit."""

    def __init__(self, cfl, umax, limit):
        super().__init__(f"CFL number {cfl:.3f} exceeds {limit} (max |u| sum = {umax:.4g})")
        self.cfl = cfl
        self.umax = umax


class DivergenceError(RuntimeError):
    """The solution became non-finite."""


@dataclass(frozen=True)
class SimConfig:
    """Parameters of one simulation."""

    nu: float
    N: int = 32
    dimension: int = 3
    dt: float = 0.01
    shell: tuple = (1.0, 2.0)
    epsilon: float = 1.0
    c: float = 1.0
    t_burnin: float = 0.0
    t_sample: float = 0.0
    snapshot_stride: int = 10
    seed: int = 0
    cfl_max: float = 1.0
    nonlinear: bool = True
    init_energy: float = 0.0
    store_pressure: bool = True

    def __post_init__(self):
        if not self.nu > 0:
            raise ConfigurationError("nu must be positive")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.t_burnin < 0 or self.t_sample < 0:
            raise ConfigurationError("t_burnin and t_sample must be nonnegative")
        if self.snapshot_stride < 1:
            raise ConfigurationError("snapshot_stride must be at least 1")
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be nonnegative")
        if self.init_energy < 0:
            raise ConfigurationError("init_energy must be nonnegative")
        WaveGrid(self.dimension, self.N)

    @property
    def grid(self):
        return WaveGrid(self.dimension, self.N)

    @property
    def n_burnin(self):
        return int(round(self.t_burnin / self.dt))

    @property
    def n_sample(self):
        return int(round(self.t_sample / self.dt))

    def spectrum(self):
        return build_noise_spectrum(self.grid, tuple(self.shell), self.epsilon, self.c)

    def as_dict(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["shell"] = list(self.shell)
        return out


@dataclass
class SimState:
    """Velocity, noise, time, step counter and the random stream."""

    u: SpectralField
    ou: OUState
    t: float
    step_count: int
    rng: np.random.Generator = field(repr=False)
    nu: float = None

    @property
    def Z(self):
        return self.ou.Z


@dataclass(frozen=True)
class Snapshot:
    """Fields recorded at one sampling time."""

    u: SpectralField
    Z: SpectralField
    t: float
    step: int
    p: object = None

    @property
    def grid(self):
        return self.u.grid


@dataclass
class TimeSeries:
    """Per-step global quantities: ||u||^2, nu ||grad u||^2 and <u, Z>."""

    t: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    dissipation: list = field(default_factory=list)
    input: list = field(default_factory=list)

    def record(self, state, nu):
        u = state.u
        grid = u.grid
        amp2 = np.abs(u.data) ** 2
        self.t.append(state.t)
        self.energy.append(grid.volume * float(np.sum(amp2)))
        self.dissipation.append(nu * grid.volume * float(np.sum(grid.k2 * amp2)))
        self.input.append(energy_input(u, state.Z))

    def arrays(self):
        return {k: np.asarray(getattr(self, k)) for k in ("t", "energy", "dissipation", "input")}

    def tail(self, t0):
        """Arrays restricted to t > t0."""
        a = self.arrays()
        keep = a["t"] > t0 + 1e-12
        return {k: v[keep] for k, v in a.items()}


@lru_cache(maxsize=16)
def _factors(grid, nu, dt):
    e_full = np.exp(-nu * grid.k2 * dt)
    e_half = np.exp(-nu * grid.k2 * dt / 2)
    return e_full, e_half


@lru_cache(maxsize=8)
def _half_grid(grid):
    """Wavevectors on the rfft half space and the index map for -k."""
    h = grid.N // 2 + 1
    neg = (-np.arange(grid.N)) % grid.N
    return grid.k[..., :h], grid.k2_safe[..., :h], grid.dealias[..., :h], neg


def _rhs3(grid, uhat):
    """-P_k (u.grad)u with real transforms on the half spectrum."""
    N = grid.N
    h = N // 2 + 1
    kh, k2h, dh, neg = _half_grid(grid)
    u = fft.irfftn(uhat[..., :h], s=grid.shape, axes=(1, 2, 3), norm="forward",
                   workers=get_workers())
    prod = np.empty((6,) + grid.shape)
    for n, (i, j) in enumerate(_PAIRS3):
        np.multiply(u[i], u[j], out=prod[n])
    P = fft.rfftn(prod, axes=(1, 2, 3), norm="forward", workers=get_workers())
    f = np.empty((3,) + P.shape[1:], dtype=complex)
    f[0] = kh[0] * P[0] + kh[1] * P[1] + kh[2] * P[2]
    f[1] = kh[0] * P[1] + kh[1] * P[3] + kh[2] * P[4]
    f[2] = kh[0] * P[2] + kh[1] * P[4] + kh[2] * P[5]
    f *= -1j * dh
    f -= kh * ((kh[0] * f[0] + kh[1] * f[1] + kh[2] * f[2]) / k2h)
    out = np.empty((3,) + grid.shape, dtype=complex)
    out[..., :h] = f
    out[..., h:] = np.conj(f[:, neg][:, :, neg][..., N - h:0:-1])
    umax = float(np.max(np.abs(u[0]) + np.abs(u[1]) + np.abs(u[2])))
    return out, umax


def _rhs1(grid, uhat):
    """-P_k (u^2/2)_x on the real half spectrum."""
    N = grid.N
    h = N // 2 + 1
    kh, _, dh, _ = _half_grid(grid)
    u = fft.irfft(uhat[0, :h], n=N, norm="forward", workers=get_workers())
    f = -0.5j * kh[0] * dh * fft.rfft(u * u, norm="forward", workers=get_workers())
    out = np.empty((1, N), dtype=complex)
    out[0, :h] = f
    out[0, h:] = np.conj(f[N - h:0:-1])
    return out, float(np.max(np.abs(u)))


def _rhs(grid, uhat, nonlinear):
    """Dealiased -P_k B(u) and the grid maximum of sum_i |u_i|."""
    if not nonlinear:
        return np.zeros_like(uhat), float(np.max(np.sum(np.abs(grid.to_physical(uhat)), axis=0)))
    if grid.dimension == 1:
        return _rhs1(grid, uhat)
    return _rhs3(grid, uhat)


def initial_state(cfg, rng=None):
    """Random band-limited velocity and a stationary noise sample."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    grid = cfg.grid
    spec = cfg.spectrum()
    if cfg.init_energy > 0:
        kmax = max(1, int(np.ceil(cfg.shell[1])))
        u = random_solenoidal(grid, rng, kmax=kmax, energy=cfg.init_energy)
    else:
        u = SpectralField.zeros(grid, grid.dimension > 1)
    ou = ou_invariant_sample(spec, rng) if cfg.epsilon > 0 else ou_zero_state(spec)
    return SimState(u, ou, 0.0, 0, rng, cfg.nu)


def step(state, cfg):
    """Advance (u, Z) by one step of size cfg.dt."""
    grid = state.u.grid
    dt = cfg.dt
    e_full, e_half = _factors(grid, cfg.nu, dt)
    u0 = state.u.data

    z_mid = ou_exact_step(state.ou, dt / 2, state.rng)
    z_end = ou_exact_step(z_mid, dt / 2, state.rng)
    forcing = (dt / 6) * (e_full * state.ou.Z.data + 4 * e_half * z_mid.Z.data + z_end.Z.data)

    k1, umax = _rhs(grid, u0, cfg.nonlinear)
    cfl = dt * umax / grid.spacing
    if not np.isfinite(cfl):
        raise DivergenceError(f"non-finite velocity at t = {state.t:.6g}")
    if cfl > cfg.cfl_max:
        raise StepSizeError(cfl, umax, cfg.cfl_max)
    predictor = e_full * (u0 + dt * k1) + forcing
    k2, _ = _rhs(grid, predictor, cfg.nonlinear)
    u1 = (e_full * u0 + (dt / 2) * (e_full * k1 + k2) + forcing) * grid.dealias
    if not np.all(np.isfinite(u1)):
        raise DivergenceError(f"non-finite velocity at t = {state.t + dt:.6g}")

    u_new = SpectralField(grid, u1, state.u.divergence_free)
    return SimState(u_new, replace(z_end, t=state.t + dt), state.t + dt,
                    state.step_count + 1, state.rng, cfg.nu)


class RunStream:
    """Iterate to advance a run; snapshots are yielded during sampling.

    After (or during) iteration, `state` holds the latest state and
    `series` the per-step global quantities of the whole run.
    """

    def __init__(self, cfg, state=None):
        self.cfg = cfg
        self.state = initial_state(cfg) if state is None else state
        self.series = TimeSeries()
        self.series.record(self.state, cfg.nu)
        self.sample_start = None

    def _snapshot(self):
        s = self.state
        p = pressure_recover(s.u) if self.cfg.store_pressure and s.u.grid.dimension == 3 else None
        return Snapshot(s.u, s.Z, s.t, s.step_count, p)

    def __iter__(self):
        cfg = self.cfg
        for _ in range(cfg.n_burnin):
            self.state = step(self.state, cfg)
            self.series.record(self.state, cfg.nu)
        self.sample_start = self.state.t
        for n in range(1, cfg.n_sample + 1):
            self.state = step(self.state, cfg)
            self.series.record(self.state, cfg.nu)
            if n % cfg.snapshot_stride == 0:
                yield self._snapshot()

    def drain(self):
        """Run to completion and return the snapshots as a list."""
        return list(self)


def run(cfg, state=None):
    """Burn in, then sample; returns an iterable RunStream."""
    return RunStream(cfg, state)


def burgers_run(cfg, state=None):
    """Stochastic Burgers u_t + u u_x = nu u_xx + Z on the circle."""
    if cfg.dimension != 1:
        raise ConfigurationError("burgers_run needs a one-dimensional configuration")
    return RunStream(cfg, state)


def stationarity_check(series, t0):
    """Compare the energy means of the two halves of the window t > t0.

    Returns the drift and its standard error (IACT-deflated); the window
    is taken as stationary when |drift| <= 3 stderr.
    """
    from .ensemble import series_estimate

    e = series.tail(t0)["energy"]
    half = len(e) // 2
    if half < 4:
        return {"drift": float("nan"), "stderr": float("nan"), "stationary": False}
    a = series_estimate(e[:half])
    b = series_estimate(e[half:2 * half])
    drift = float(b.mean - a.mean)
    se = float(np.hypot(a.stderr, b.stderr))
    return {"drift": drift, "stderr": se, "stationary": abs(drift) <= 3 * se}


def balance_report(series, t0, nu):
    """Global stationary balance and the energy bound constants.

    dissipation = nu avg ||grad u||^2 against input = avg <u, Z>, with
    stderrs combined in quadrature, plus the constants c1 = dissipation
    / (nu avg ||u||^2) and c2 = dissipation / (avg ||u||^2)^{3/2} that
    saturate the stationary bound one term at a time.
    """
    from .ensemble import series_estimate

    a = series.tail(t0)
    d = series_estimate(a["dissipation"])
    i = series_estimate(a["input"])
    e = series_estimate(a["energy"])
    dmean, imean, emean = float(d.mean), float(i.mean), float(e.mean)
    combined = float(np.hypot(d.stderr, i.stderr))
    return {
        "dissipation": dmean, "dissipation_stderr": float(d.stderr),
        "input": imean, "input_stderr": float(i.stderr),
        "energy": emean, "energy_stderr": float(e.stderr),
        "difference": dmean - imean, "combined_stderr": combined,
        "c1": dmean / (nu * emean) if emean > 0 else float("nan"),
        "c2": dmean / emean**1.5 if emean > 0 else float("nan"),
    }


def degenerate_shear_run(nu, t_final, dt, rng, s=1.0):
    """Long-time average of 2 Z g for dZ = -Z dt + s dbeta, g' = -nu g + Z.

    The pair (Z, g) is a linear Gaussian system, so it is advanced with
    its exact transition (matrix exponential and covariance); only
    Monte-Carlo error remains.  Both start from their stationary law.
    """
    from scipy import linalg, signal

    if not nu > 0:
        raise ConfigurationError("nu must be positive")
    n = int(round(t_final / dt))
    A = np.array([[-1.0, 0.0], [1.0, -nu]])
    B = np.array([[s], [0.0]])
    # Van Loan: transition matrix and noise covariance over one step
    M = np.zeros((4, 4))
    M[:2, :2] = -A
    M[:2, 2:] = B @ B.T
    M[2:, 2:] = A.T
    F = linalg.expm(M * dt)
    Phi = F[2:, 2:].T
    Q = Phi @ F[:2, 2:]
    Q = 0.5 * (Q + Q.T)
    L = np.linalg.cholesky(Q)

    # stationary covariance of (Z, g)
    P = linalg.solve_continuous_lyapunov(A, -B @ B.T)
    x0 = np.linalg.cholesky(P) @ rng.standard_normal(2)
    w = rng.standard_normal((n, 2)) @ L.T

    a, c, b = Phi[0, 0], Phi[1, 0], Phi[1, 1]
    z_prev = np.empty(n + 1)
    z_prev[0] = x0[0]
    z_prev[1:], _ = signal.lfilter([1.0], [1.0, -a], w[:, 0], zi=[a * x0[0]])
    g = np.empty(n + 1)
    g[0] = x0[1]
    drive = c * z_prev[:-1] + w[:, 1]
    g[1:], _ = signal.lfilter([1.0], [1.0, -b], drive, zi=[b * x0[1]])
    return float(np.mean(2.0 * z_prev[1:] * g[1:]))
