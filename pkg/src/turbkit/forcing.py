"""Ornstein-Uhlenbeck forcing on a shell of low Fourier modes.

Forced modes come in +/- pairs; a half space of representatives m
carries polarizations a and complex slot amplitudes c[m, a].  The
physical force is

    Z(x) = sum_{m,a} c[m,a] e_a(k_m) exp(i k_m.x) / (2pi)^{d/2} + c.c.,

so every (wavevector, polarization) slot, counting k and -k separately,
is an L2-orthonormal direction.  Each amplitude follows

    dc = -lambda c dt + sigma dbeta,  E|dbeta|^2 = dt,

which gives E||dW||^2 = dt * sum over slots of sigma^2 = epsilon dt.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .spectral import ConfigurationError, SpectralField, WaveGrid


@dataclass(frozen=True, eq=False)
class NoiseSpectrum:
    """Forced modes, polarizations, amplitudes sigma and OU rates lambda."""

    grid: WaveGrid
    wavevectors: np.ndarray     # (M, d) integers, one per +/- pair
    polarizations: np.ndarray   # (M, P, d) real unit vectors, P = 2 in 3D, 1 in 1D
    sigma: np.ndarray           # (M, P) nonnegative amplitudes
    lam: np.ndarray             # (M,) OU drift rates c |k|^2
    c: float
    shell: tuple
    index: tuple = field(repr=False, default=None)

    @property
    def epsilon(self):
        """Noise trace: sum of sigma^2 over all slots (k and -k counted)."""
        return float(2.0 * np.sum(self.sigma**2))

    @property
    def n_slots(self):
        return 2 * self.sigma.size

    def describe(self):
        """JSON-ready summary for run metadata."""
        return {
            "shell": list(self.shell),
            "c": self.c,
            "epsilon": self.epsilon,
            "n_slots": self.n_slots,
            "sigma2_per_slot": float(self.sigma.flat[0] ** 2) if self.sigma.size else 0.0,
            "wavevectors": self.wavevectors.tolist(),
        }


@dataclass(frozen=True)
class OUState:
    """Noise field Z at time t.

    The field itself is the state, so checkpoints can store it exactly;
    the slot amplitudes are recovered on demand.
    """

    spectrum: NoiseSpectrum
    Z: SpectralField
    t: float = 0.0

    @property
    def amplitudes(self):
        """Complex slot amplitudes c[m, a] (projection onto polarizations)."""
        d = self.spectrum.grid.dimension
        plus, _ = self.spectrum.index
        vec = self.Z.data.reshape(d, -1)[:, plus]
        return np.einsum("im,mpi->mp", vec, self.spectrum.polarizations) * (2 * np.pi) ** (d / 2)


def _polarizations(k):
    """Two real orthonormal vectors perpendicular to k."""
    k = np.asarray(k, dtype=float)
    khat = k / np.linalg.norm(k)
    helper = np.zeros(3)
    helper[np.argmin(np.abs(khat))] = 1.0
    e1 = np.cross(khat, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(khat, e1)
    return np.stack([e1, e2])


def _half_space(k):
    """True for the representative of each +/- pair (first nonzero > 0)."""
    for ki in k:
        if ki != 0:
            return ki > 0
    return False


def build_noise_spectrum(grid, shell, epsilon, c=1.0):
    """Equal-amplitude forcing of every mode with k_lo <= |k| <= k_hi.

    sigma^2 is the same in every slot and the slots sum to epsilon;
    lambda_k = c |k|^2.
    """
    k_lo, k_hi = shell
    if not 1 <= k_lo <= k_hi:
        raise ConfigurationError(f"invalid forcing shell {shell}")
    if k_hi > grid.kcut:
        raise ConfigurationError(
            f"forcing shell {shell} extends past the dealiased band |k| <= {grid.kcut}")
    if epsilon < 0:
        raise ConfigurationError("epsilon must be nonnegative")
    if c <= 0:
        raise ConfigurationError("drift scale c must be positive")
    d = grid.dimension
    kmax = int(np.floor(k_hi))
    rng1 = range(-kmax, kmax + 1)
    modes = []
    for k in np.array(np.meshgrid(*([rng1] * d), indexing="ij")).reshape(d, -1).T:
        norm = np.sqrt(np.sum(k**2))
        if k_lo <= norm <= k_hi and _half_space(k):
            modes.append(k)
    if not modes:
        raise ConfigurationError(f"forcing shell {shell} contains no wavevectors")
    modes = np.array(modes, dtype=int)
    if d == 3:
        pols = np.stack([_polarizations(k) for k in modes])
    else:
        pols = np.ones((len(modes), 1, 1))
    n_slots = 2 * pols.shape[0] * pols.shape[1]
    sigma = np.full(pols.shape[:2], np.sqrt(epsilon / n_slots))
    lam = c * np.sum(modes.astype(float) ** 2, axis=1)

    # flat indices of k and -k in the FFT-ordered lattice
    plus = np.ravel_multi_index(tuple(np.mod(modes.T, grid.N)), grid.shape)
    minus = np.ravel_multi_index(tuple(np.mod(-modes.T, grid.N)), grid.shape)
    return NoiseSpectrum(grid, modes, pols, sigma, lam, float(c), tuple(shell), (plus, minus))


def noise_field(spectrum, amplitudes):
    """Scatter amplitudes into a real, divergence-free SpectralField."""
    grid = spectrum.grid
    d = grid.dimension
    norm = (2 * np.pi) ** (-d / 2)
    vec = np.einsum("mp,mpi->im", amplitudes, spectrum.polarizations) * norm
    data = np.zeros((d,) + grid.shape, dtype=complex)
    plus, minus = spectrum.index
    flat = data.reshape(d, -1)
    flat[:, plus] = vec
    flat[:, minus] = np.conj(vec)
    return SpectralField(grid, data, divergence_free=d > 1)


def _complex_normal(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def _forced_update(spectrum, Z, decay, kicks):
    """Return decay * Z + kicks on the forced modes, keeping Z real."""
    grid = spectrum.grid
    d = grid.dimension
    plus, minus = spectrum.index
    vec = np.einsum("mp,mpi->im", kicks, spectrum.polarizations) * (2 * np.pi) ** (-d / 2)
    new = decay * Z.data.reshape(d, -1)[:, plus] + vec
    data = np.zeros_like(Z.data)
    flat = data.reshape(d, -1)
    flat[:, plus] = new
    flat[:, minus] = np.conj(new)
    return SpectralField(grid, data, divergence_free=d > 1)


@lru_cache(maxsize=64)
def _transition(spectrum, dt):
    decay = np.exp(-spectrum.lam * dt)
    scale = spectrum.sigma * np.sqrt(-np.expm1(-2 * spectrum.lam * dt) / (2 * spectrum.lam))[:, None]
    return decay, scale


def ou_exact_step(state, dt, rng):
    """Exact OU transition over dt for every forced slot.

    c <- exp(-lambda dt) c + sigma sqrt((1 - exp(-2 lambda dt)) / (2 lambda)) xi
    with xi standard complex Gaussian.
    """
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    spec = state.spectrum
    decay, scale = _transition(spec, float(dt))
    kicks = scale * _complex_normal(rng, spec.sigma.shape)
    return OUState(spec, _forced_update(spec, state.Z, decay, kicks), state.t + dt)


def ou_invariant_sample(spectrum, rng):
    """Draw Z from the stationary law, slot variance sigma^2/(2 lambda)."""
    std = spectrum.sigma / np.sqrt(2 * spectrum.lam)[:, None]
    return ou_from_amplitudes(spectrum, std * _complex_normal(rng, spectrum.sigma.shape))


def ou_from_amplitudes(spectrum, amplitudes, t=0.0):
    return OUState(spectrum, noise_field(spectrum, amplitudes), t)


def ou_zero_state(spectrum):
    return OUState(spectrum, SpectralField.zeros(spectrum.grid, spectrum.grid.dimension > 1), 0.0)


def energy_input(u, Z, psi=None):
    """Localized input integral of psi u.Z over the box (grid sum).

    Z may be an OUState or a SpectralField.  The grid sum is exact while
    the product's band stays below N.
    """
    zf = Z.Z if isinstance(Z, OUState) else Z
    if zf.grid != u.grid:
        raise ConfigurationError("fields live on different grids")
    grid = u.grid
    if psi is None or psi.uniform:
        return grid.volume * float(np.real(np.vdot(u.data, zf.data)))
    dot = np.sum(u.physical() * zf.physical(), axis=0)
    return float(np.sum(psi.psi.physical() * dot) * grid.cell_volume)
