"""Fourier-space fields on the periodic box [0, 2pi)^d.

Coefficients are normalized so that

    u(x) = sum_k u_k exp(i k.x),

which makes the L2 inner product (2pi)^d sum_k conj(a_k) b_k.  Every
array is stored over the full integer lattice in numpy FFT order, so
spectral and physical arrays have the same shape.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft as sfft

BOX_LENGTH = 2.0 * np.pi

_workers = 1


class ConfigurationError(ValueError):
    """Invalid grid, field or parameter combination."""


class ContractError(ValueError):
    """An input violates an operation's precondition."""


def set_workers(n):
    """Cap the number of threads used by FFTs (and the NUFFT)."""
    global _workers
    if int(n) < 1:
        raise ConfigurationError("thread count must be positive")
    _workers = int(n)


def get_workers():
    return _workers


@dataclass(frozen=True)
class WaveGrid:
    """Uniform grid with N points per axis on the 2pi-periodic box."""

    dimension: int
    N: int

    def __post_init__(self):
        if self.dimension not in (1, 3):
            raise ConfigurationError(f"dimension must be 1 or 3, got {self.dimension}")
        if self.N < 8 or self.N % 2:
            raise ConfigurationError(f"N must be an even integer >= 8, got {self.N}")

    @property
    def shape(self):
        return (self.N,) * self.dimension

    @property
    def axes(self):
        return tuple(range(-self.dimension, 0))

    @property
    def spacing(self):
        return BOX_LENGTH / self.N

    @property
    def volume(self):
        return BOX_LENGTH**self.dimension

    @property
    def cell_volume(self):
        return self.spacing**self.dimension

    @property
    def kcut(self):
        """Largest retained |k_i| under the 2/3 rule (|k_i| < N/3)."""
        return -(-self.N // 3) - 1

    @cached_property
    def wavenumbers(self):
        return np.fft.fftfreq(self.N, 1.0 / self.N)

    @cached_property
    def k(self):
        """Wavevector components, shape (d, N, ..., N)."""
        k1 = self.wavenumbers
        return np.stack(np.meshgrid(*([k1] * self.dimension), indexing="ij"))

    @cached_property
    def k2(self):
        return np.sum(self.k**2, axis=0)

    @cached_property
    def k2_safe(self):
        """|k|^2 with the mean mode set to 1 (for divisions)."""
        k2 = self.k2.copy()
        k2.flat[0] = 1.0
        return k2

    @cached_property
    def nyquist(self):
        return np.any(np.abs(self.k) == self.N // 2, axis=0)

    @cached_property
    def dealias(self):
        """Boolean mask of the modes kept by the 2/3 rule."""
        return np.all(np.abs(self.k) <= self.kcut, axis=0)

    def coordinates(self):
        x1 = np.arange(self.N) * self.spacing
        return np.stack(np.meshgrid(*([x1] * self.dimension), indexing="ij"))

    def to_physical(self, coeffs):
        """Values on the grid from coefficients (leading axes are batched)."""
        out = sfft.ifftn(coeffs, axes=self.axes, norm="forward", workers=_workers)
        return out.real

    def to_spectral(self, values):
        """Coefficients from grid values, with Nyquist modes zeroed."""
        c = sfft.fftn(values, axes=self.axes, norm="forward", workers=_workers)
        c[..., self.nyquist] = 0.0
        return c


@dataclass(frozen=True)
class SpectralField:
    """Real vector field stored as d arrays of Fourier coefficients."""

    grid: WaveGrid
    data: np.ndarray
    divergence_free: bool = False

    def __post_init__(self):
        expected = (self.grid.dimension,) + self.grid.shape
        if self.data.shape != expected:
            raise ConfigurationError(
                f"field shape {self.data.shape} does not match grid {expected}")

    @classmethod
    def zeros(cls, grid, divergence_free=True):
        shape = (grid.dimension,) + grid.shape
        return cls(grid, np.zeros(shape, dtype=complex), divergence_free)

    @classmethod
    def from_physical(cls, grid, values, divergence_free=False):
        return cls(grid, grid.to_spectral(np.asarray(values, dtype=float)),
                   divergence_free)

    def physical(self):
        return self.grid.to_physical(self.data)

    def norm2(self):
        """Squared L2 norm over the box."""
        return self.grid.volume * float(np.sum(np.abs(self.data) ** 2))

    def divergence_error(self):
        """max_k |k . u_k| relative to max_k |k| |u_k|."""
        div = np.abs(np.sum(self.grid.k * self.data, axis=0))
        scale = np.max(np.sqrt(self.grid.k2) * np.sqrt(np.sum(np.abs(self.data) ** 2, axis=0)))
        return float(div.max() / scale) if scale > 0 else 0.0

    def symmetry_error(self):
        """Largest violation of u_{-k} = conj(u_k)."""
        flipped = np.conj(np.roll(np.flip(self.data, axis=self.grid.axes), 1, axis=self.grid.axes))
        return float(np.max(np.abs(self.data - flipped), initial=0.0))


@dataclass(frozen=True)
class ScalarField:
    """Real scalar field stored as Fourier coefficients."""

    grid: WaveGrid
    data: np.ndarray

    def __post_init__(self):
        if self.data.shape != self.grid.shape:
            raise ConfigurationError(
                f"scalar shape {self.data.shape} does not match grid {self.grid.shape}")

    @classmethod
    def from_physical(cls, grid, values):
        return cls(grid, grid.to_spectral(np.asarray(values, dtype=float)))

    def physical(self):
        return self.grid.to_physical(self.data)

    def gradient(self):
        return SpectralField(self.grid, 1j * self.grid.k * self.data)

    def laplacian(self):
        return ScalarField(self.grid, -self.grid.k2 * self.data)


@dataclass(frozen=True)
class CutoffField:
    """Localization weight psi with its spectral gradient and Laplacian."""

    psi: ScalarField
    grad_psi: tuple
    lap_psi: ScalarField
    kind: str
    center: tuple = None
    radius: float = None
    ringing: float = 0.0

    @property
    def grid(self):
        return self.psi.grid

    @property
    def uniform(self):
        return self.kind == "uniform"

    @property
    def shift_margin(self):
        """Largest shift length |h| the diagnostics accept for this weight."""
        return np.inf if self.uniform else float(self.radius)


def inner(a, b):
    """L2 inner product of two fields on the same grid."""
    _same_grid(a, b)
    return a.grid.volume * float(np.real(np.vdot(a.data, b.data)))


def gradient(phi):
    return phi.gradient()


def divergence(v):
    return ScalarField(v.grid, np.sum(1j * v.grid.k * v.data, axis=0))


def leray_project(v):
    """Remove the gradient part: u_k -> (I - k k^T/|k|^2) u_k."""
    grid = v.grid
    if v.data.shape[0] != grid.dimension:
        raise ConfigurationError("component count does not match grid dimension")
    kdotv = np.sum(grid.k * v.data, axis=0) / grid.k2_safe
    out = v.data - grid.k * kdotv
    return SpectralField(grid, out, divergence_free=True)


def spectral_shift(v, h):
    """Exact translate f(x + h) of a band-limited field, any real h."""
    grid = v.grid
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if h.shape != (grid.dimension,):
        raise ConfigurationError(f"shift must have {grid.dimension} components")
    phase = np.exp(1j * np.tensordot(h, grid.k, axes=1))
    phase[grid.nyquist] = 0.0
    if isinstance(v, ScalarField):
        return ScalarField(grid, v.data * phase)
    return SpectralField(grid, v.data * phase, v.divergence_free)


def _pairs(d):
    return [(i, j) for i in range(d) for j in range(i, d)]


def advection_terms(grid, uhat):
    """Dealiased (u.grad)u coefficients and the grid maximum of sum_i |u_i|.

    uhat must already be confined to the 2/3 band; then the quadratic
    products are alias-free on every retained mode.
    """
    d = grid.dimension
    u = grid.to_physical(uhat)
    pairs = _pairs(d)
    prod = np.stack([u[i] * u[j] for i, j in pairs])
    prodhat = grid.to_spectral(prod)
    flux = np.zeros_like(uhat)
    for n, (i, j) in enumerate(pairs):
        flux[i] += 1j * grid.k[j] * prodhat[n]
        if i != j:
            flux[j] += 1j * grid.k[i] * prodhat[n]
    flux *= grid.dealias
    umax = float(np.max(np.sum(np.abs(u), axis=0)))
    return flux, umax, prodhat


def _check_solenoidal(u, tol=1e-8):
    err = u.divergence_error()
    if err > tol:
        raise ContractError(f"input field is not divergence-free (relative error {err:.2e})")


def nonlinear_term(u):
    """B(u) = P div(u (x) u), pseudo-spectral with 2/3 dealiasing."""
    _check_solenoidal(u)
    flux, _, _ = advection_terms(u.grid, u.data * u.grid.dealias)
    return leray_project(SpectralField(u.grid, flux))


def pressure_recover(u):
    """Pressure with zero mean solving -Lap p = d_i d_j (u_i u_j).

    The source is computed with the same dealiased products as the
    nonlinear term, so grad p is exactly the part leray_project removes.
    """
    _check_solenoidal(u)
    grid = u.grid
    _, _, prodhat = advection_terms(grid, u.data * grid.dealias)
    src = np.zeros(grid.shape, dtype=complex)
    for n, (i, j) in enumerate(_pairs(grid.dimension)):
        w = 1.0 if i == j else 2.0
        src += w * grid.k[i] * grid.k[j] * prodhat[n]
    p = -src / grid.k2_safe * grid.dealias
    p.flat[0] = 0.0
    return ScalarField(grid, p)


def _bump_profile(r):
    out = np.zeros_like(r)
    inside = r < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - r[inside] ** 2))
    return out


def make_cutoff(grid, kind="bump", center=None, radius=1.0, oversample=4):
    """Build the localization weight psi.

    kind="uniform" gives psi = 1.  kind="bump" samples
    exp(1 - 1/(1 - r^2)), r = |x - center|/radius (periodic distance), on
    an oversampled grid and keeps only the 2/3-band Fourier modes, so psi
    is a trigonometric polynomial with exact spectral derivatives.  The
    truncation leaves small ringing; its size is recorded in `ringing`
    as the largest retained coefficient on the cutoff shell.
    """
    d = grid.dimension
    if kind == "uniform":
        psi = np.zeros(grid.shape, dtype=complex)
        psi.flat[0] = 1.0
        zero = ScalarField(grid, np.zeros(grid.shape, dtype=complex))
        return CutoffField(ScalarField(grid, psi), (zero,) * d, zero, "uniform")
    if kind != "bump":
        raise ConfigurationError(f"unknown cutoff kind {kind!r}")
    if not 0.0 < radius < np.pi:
        raise ConfigurationError(f"bump radius must lie in (0, pi), got {radius}")
    center = np.full(d, np.pi) if center is None else np.asarray(center, dtype=float)
    if center.shape != (d,):
        raise ConfigurationError(f"center must have {d} components")

    fine = WaveGrid(d, oversample * grid.N)
    x = fine.coordinates()
    dist2 = np.zeros(fine.shape)
    for i in range(d):
        dx = (x[i] - center[i] + np.pi) % BOX_LENGTH - np.pi
        dist2 += dx**2
    values = _bump_profile(np.sqrt(dist2) / radius)
    fine_hat = sfft.fftn(values, norm="forward", workers=_workers)

    # copy the retained band from the fine lattice into the coarse one
    kc = grid.kcut
    idx_fine = np.r_[0:kc + 1, fine.N - kc:fine.N]
    idx_coarse = np.r_[0:kc + 1, grid.N - kc:grid.N]
    coeffs = np.zeros(grid.shape, dtype=complex)
    coeffs[np.ix_(*([idx_coarse] * d))] = fine_hat[np.ix_(*([idx_fine] * d))]
    shell = grid.dealias & (np.max(np.abs(grid.k), axis=0) == kc)
    ringing = float(np.max(np.abs(coeffs[shell])))

    psi = ScalarField(grid, coeffs)
    grad = tuple(ScalarField(grid, g) for g in psi.gradient().data)
    return CutoffField(psi, grad, psi.laplacian(), "bump",
                       tuple(float(c) for c in center), float(radius), ringing)


@dataclass(frozen=True)
class MonitorRecord:
    """Single-snapshot integrability monitors."""

    u_l3: float
    du_l3_max: float
    p_l32: float
    dp_l32_max: float


def assumption_monitors(u, p, h_probes):
    """L3 and L^{3/2} norms of u, p and of their increments over probes.

    Returns ||u||_3^3, max_h ||delta_h u||_3^3, ||p||_{3/2}^{3/2} and
    max_h ||delta_h p||_{3/2}^{3/2}, with integrals by grid sum.
    """
    _same_grid(u, p)
    grid = u.grid
    dv = grid.cell_volume

    def l3(vec):
        return float(np.sum(np.sqrt(np.sum(vec**2, axis=0)) ** 3) * dv)

    def l32(s):
        return float(np.sum(np.abs(s) ** 1.5) * dv)

    uphys = u.physical()
    pphys = p.physical()
    du_max = 0.0
    dp_max = 0.0
    for h in h_probes:
        du = spectral_shift(u, h).physical() - uphys
        dp = spectral_shift(p, h).physical() - pphys
        du_max = max(du_max, l3(du))
        dp_max = max(dp_max, l32(dp))
    return MonitorRecord(l3(uphys), du_max, l32(pphys), dp_max)


def random_solenoidal(grid, rng, kmax=None, energy=1.0):
    """Random real divergence-free field confined to |k_i| <= kmax.

    The result has squared L2 norm `energy`; used for initial data and
    tests.
    """
    kmax = grid.kcut if kmax is None else kmax
    noise = rng.standard_normal((grid.dimension,) + grid.shape)
    v = grid.to_spectral(noise)
    v *= np.all(np.abs(grid.k) <= kmax, axis=0)
    v[:, (0,) * grid.dimension] = 0.0
    if grid.dimension == 1:
        field = SpectralField(grid, v)
    else:
        field = leray_project(SpectralField(grid, v))
    norm2 = field.norm2()
    if norm2 > 0:
        field = SpectralField(grid, field.data * np.sqrt(energy / norm2), grid.dimension > 1)
    return field


def _same_grid(a, b):
    if a.grid != b.grid:
        raise ConfigurationError("fields live on different grids")
