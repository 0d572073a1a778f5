"""Tests for the spectral field layer."""

import numpy as np
import pytest
from scipy import integrate

from turbkit.spectral import (
    ConfigurationError, ContractError, ScalarField, SpectralField, WaveGrid,
    assumption_monitors, divergence, inner, leray_project, make_cutoff,
    nonlinear_term, pressure_recover, random_solenoidal, spectral_shift,
)


@pytest.fixture
def grid16():
    return WaveGrid(3, 16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def shear_field(grid):
    x = grid.coordinates()
    return SpectralField.from_physical(
        grid, np.stack([np.sin(x[1]), 0 * x[1], 0 * x[1]]), divergence_free=True)


def fourier_series(coeffs, grid, points):
    """Direct evaluation of sum_k c_k exp(i k.x) at arbitrary points."""
    k = grid.k.reshape(grid.dimension, -1)
    c = coeffs.reshape(coeffs.shape[:coeffs.ndim - grid.dimension] + (-1,))
    phase = np.exp(1j * points @ k)
    return np.real(c @ phase.T)


class TestWaveGrid:
    def test_roundtrip(self, grid16, rng):
        """Forward then inverse transform reproduces the input."""
        f = rng.standard_normal(grid16.shape)
        g = grid16.to_physical(np.fft.fftn(f, norm="forward"))
        assert np.max(np.abs(g - f)) <= 1e-12 * np.max(np.abs(f))

    def test_nyquist_zeroed(self, grid16, rng):
        c = grid16.to_spectral(rng.standard_normal(grid16.shape))
        assert np.all(c[grid16.nyquist] == 0)

    def test_kcut(self):
        assert WaveGrid(3, 32).kcut == 10
        assert WaveGrid(3, 30).kcut == 9
        assert WaveGrid(1, 4096).kcut == 1365

    @pytest.mark.parametrize("dim,n", [(2, 16), (3, 7), (3, 6), (1, 9)])
    def test_invalid(self, dim, n):
        with pytest.raises(ConfigurationError):
            WaveGrid(dim, n)

    def test_random_field_real_and_solenoidal(self, grid16, rng):
        u = random_solenoidal(grid16, rng)
        assert u.symmetry_error() < 1e-15
        assert u.divergence_error() < 1e-14
        assert u.norm2() == pytest.approx(1.0, rel=1e-12)


class TestLeray:
    def test_hand_example(self, grid16):
        """u_k = (1,1,0) at k = (1,0,0) projects to (0,1,0)."""
        data = np.zeros((3,) + grid16.shape, dtype=complex)
        data[:, 1, 0, 0] = (1, 1, 0)
        data[:, -1, 0, 0] = (1, 1, 0)
        out = leray_project(SpectralField(grid16, data)).data
        assert np.allclose(out[:, 1, 0, 0], (0, 1, 0), atol=1e-15)

        k = np.array([1.0, 0.0, 0.0])
        dense = np.eye(3) - np.outer(k, k) / k.dot(k)
        assert np.allclose(out[:, 1, 0, 0], dense @ np.array([1, 1, 0]), atol=1e-15)

    def test_dense_matrix_oracle(self, grid16, rng):
        v = SpectralField.from_physical(grid16, rng.standard_normal((3,) + grid16.shape))
        out = leray_project(v).data
        for idx in [(1, 2, 3), (5, -4, 0), (0, 0, 7), (-3, 1, -1)]:
            k = np.array([grid16.wavenumbers[i] for i in idx])
            dense = np.eye(3) - np.outer(k, k) / k.dot(k)
            assert np.allclose(out[(slice(None),) + idx], dense @ v.data[(slice(None),) + idx],
                               atol=1e-15)

    def test_gradient_annihilated(self, grid16, rng):
        phi = ScalarField.from_physical(grid16, rng.standard_normal(grid16.shape))
        out = leray_project(phi.gradient())
        assert np.max(np.abs(out.data)) < 1e-14

    def test_idempotent_and_solenoidal(self, grid16, rng):
        v = SpectralField.from_physical(grid16, rng.standard_normal((3,) + grid16.shape))
        once = leray_project(v)
        twice = leray_project(once)
        assert np.max(np.abs(twice.data - once.data)) <= 1e-14 * np.max(np.abs(once.data))
        assert once.divergence_error() < 1e-12

    def test_solenoidal_unchanged(self, grid16, rng):
        u = random_solenoidal(grid16, rng)
        assert np.max(np.abs(leray_project(u).data - u.data)) < 1e-14

    def test_mean_mode_untouched(self, grid16):
        data = np.zeros((3,) + grid16.shape, dtype=complex)
        data[:, 0, 0, 0] = (0.3, -0.2, 0.1)
        assert np.allclose(leray_project(SpectralField(grid16, data)).data, data)

    def test_component_mismatch(self, grid16):
        with pytest.raises(ConfigurationError):
            SpectralField(grid16, np.zeros((2,) + grid16.shape, dtype=complex))

    def test_orthogonal_to_gradients(self, grid16, rng):
        """Discrete integration by parts: <u, grad phi> vanishes."""
        u = random_solenoidal(grid16, rng)
        phi = ScalarField.from_physical(grid16, rng.standard_normal(grid16.shape))
        g = phi.gradient()
        assert abs(inner(u, g)) <= 1e-10 * np.sqrt(u.norm2() * g.norm2())


class TestShift:
    def test_zero_shift(self, grid16, rng):
        u = random_solenoidal(grid16, rng)
        assert np.array_equal(spectral_shift(u, (0, 0, 0)).data, u.data)

    def test_quarter_period(self, grid16):
        x = grid16.coordinates()
        f = ScalarField.from_physical(grid16, np.sin(x[1]))
        g = spectral_shift(f, (0, np.pi / 2, 0)).physical()
        assert np.max(np.abs(g - np.cos(x[1]))) < 1e-12

    def test_direct_summation_oracle(self, grid16, rng):
        f = random_solenoidal(grid16, rng, kmax=4)
        h = np.array([0.3, -0.7, 0.1])
        shifted = spectral_shift(f, h)
        pts = rng.uniform(0, 2 * np.pi, size=(10, 3))
        direct = fourier_series(f.data, grid16, pts + h)
        via_shift = fourier_series(shifted.data, grid16, pts)
        assert np.max(np.abs(direct - via_shift)) < 1e-10

    def test_group_law_and_isometry(self, grid16, rng):
        f = random_solenoidal(grid16, rng)
        h1, h2 = np.array([0.37, 1.2, -2.1]), np.array([-0.91, 0.05, 0.66])
        a = spectral_shift(spectral_shift(f, h1), h2)
        b = spectral_shift(f, h1 + h2)
        assert np.max(np.abs(a.data - b.data)) <= 1e-12 * np.max(np.abs(f.data))
        assert a.norm2() == pytest.approx(f.norm2(), rel=1e-12)

    def test_bad_shift(self, grid16, rng):
        with pytest.raises(ConfigurationError):
            spectral_shift(random_solenoidal(grid16, rng), (0.1, 0.2))


class TestNonlinear:
    def test_constant_field(self, grid16):
        data = np.zeros((3,) + grid16.shape, dtype=complex)
        data[:, 0, 0, 0] = (1.0, 2.0, -0.5)
        b = nonlinear_term(SpectralField(grid16, data, True))
        assert np.max(np.abs(b.data)) < 1e-15

    def test_shear_is_steady(self, grid16):
        b = nonlinear_term(shear_field(grid16))
        assert np.max(np.abs(b.data)) < 1e-15

    def test_convolution_oracle(self, grid16, rng):
        """Alias-free products on a fine grid agree on the retained modes."""
        u = random_solenoidal(grid16, rng, kmax=grid16.kcut)
        fine = WaveGrid(3, 64)
        ufine = np.zeros((3,) + fine.shape, dtype=complex)
        idx_c = np.r_[0:6, 11:16]
        idx_f = np.r_[0:6, 59:64]
        for i in range(3):
            ufine[i][np.ix_(idx_f, idx_f, idx_f)] = u.data[i][np.ix_(idx_c, idx_c, idx_c)]
        up = fine.to_physical(ufine)
        flux = np.zeros_like(ufine)
        for i in range(3):
            for j in range(3):
                flux[i] += 1j * fine.k[j] * fine.to_spectral(up[i] * up[j])
        ref = leray_project(SpectralField(fine, flux)).data

        got = nonlinear_term(u).data
        sub = ref[np.ix_(range(3), idx_f, idx_f, idx_f)]
        mine = got[np.ix_(range(3), idx_c, idx_c, idx_c)]
        assert np.max(np.abs(sub - mine)) < 1e-10 * np.max(np.abs(sub))

    def test_energy_cancellation(self, grid16, rng):
        u = random_solenoidal(grid16, rng)
        b = nonlinear_term(u)
        assert abs(inner(b, u)) <= 1e-10 * np.sqrt(b.norm2() * u.norm2())
        assert b.divergence_error() < 1e-12

    def test_rejects_compressible_input(self, grid16, rng):
        phi = ScalarField.from_physical(grid16, rng.standard_normal(grid16.shape))
        with pytest.raises(ContractError):
            nonlinear_term(phi.gradient())


class TestPressure:
    def test_constant_and_shear(self, grid16):
        data = np.zeros((3,) + grid16.shape, dtype=complex)
        data[:, 0, 0, 0] = (1.0, 0.5, 0.2)
        assert np.max(np.abs(pressure_recover(SpectralField(grid16, data, True)).data)) == 0
        assert np.max(np.abs(pressure_recover(shear_field(grid16)).data)) < 1e-15

    def test_taylor_green(self, grid16):
        x = grid16.coordinates()
        u = SpectralField.from_physical(grid16, np.stack([
            np.cos(x[0]) * np.sin(x[1]), -np.sin(x[0]) * np.cos(x[1]), 0 * x[0]]), True)
        p = pressure_recover(u).physical()
        expected = -(np.cos(2 * x[0]) + np.cos(2 * x[1])) / 4
        assert np.max(np.abs(p - expected)) < 1e-12

    def test_poisson_by_grid_oracle(self, grid16, rng):
        """-Lap p = d_i d_j (u_i u_j), checked with finite-difference-free
        spectral derivatives of the physical products."""
        u = random_solenoidal(grid16, rng, kmax=3)
        p = pressure_recover(u)
        up = u.physical()
        src = np.zeros(grid16.shape, dtype=complex)
        for i in range(3):
            for j in range(3):
                src -= grid16.k[i] * grid16.k[j] * grid16.to_spectral(up[i] * up[j])
        lhs = grid16.k2 * p.data
        src *= grid16.dealias
        assert np.max(np.abs(lhs - src)) < 1e-12

    def test_decomposition(self, grid16, rng):
        """div(u u) = P div(u u) - grad p on the retained modes.

        With -Lap p = d_i d_j (u_i u_j) the gradient part removed by the
        projection is -grad p, matching u.grad u + grad p = P(u.grad u).
        """
        u = random_solenoidal(grid16, rng)
        up = u.physical()
        flux = np.zeros_like(u.data)
        for i in range(3):
            for j in range(3):
                flux[i] += 1j * grid16.k[j] * grid16.to_spectral(up[i] * up[j])
        flux *= grid16.dealias
        proj = leray_project(SpectralField(grid16, flux)).data
        gradp = pressure_recover(u).gradient().data
        assert np.max(np.abs(flux - proj + gradp)) < 1e-10 * np.max(np.abs(flux))
        assert pressure_recover(u).data[0, 0, 0] == 0


class TestCutoff:
    def test_uniform(self, grid16):
        c = make_cutoff(grid16, "uniform")
        assert np.sum(c.psi.physical()) * grid16.cell_volume == pytest.approx((2 * np.pi) ** 3)
        assert all(np.all(g.data == 0) for g in c.grad_psi)
        assert np.all(c.lap_psi.data == 0)

    def test_bump_center_and_range(self):
        grid = WaveGrid(3, 32)
        c = make_cutoff(grid, "bump", center=(np.pi, np.pi, np.pi), radius=2.5)
        x = np.array([[np.pi, np.pi, np.pi]])
        centre = fourier_series(c.psi.data, grid, x)[0]
        # truncation to the dealiased band leaves ringing of a few 1e-3
        assert centre == pytest.approx(1.0, abs=5e-3)
        values = c.psi.physical()
        assert values.min() > -5e-3 and values.max() < 1.005
        assert 0 < c.ringing < 1e-4

    def test_bump_converges_with_resolution(self):
        """Centre value and ringing shrink as the retained band grows."""
        errs = []
        for n in (16, 32, 64):
            grid = WaveGrid(3, n)
            c = make_cutoff(grid, "bump", radius=2.5, oversample=2 if n == 64 else 4)
            errs.append(c.ringing)
        assert errs[0] > errs[1] > errs[2]

    def test_laplacian_integrates_to_zero(self, grid16):
        c = make_cutoff(grid16, "bump", radius=1.0)
        assert abs(np.sum(c.lap_psi.physical()) * grid16.cell_volume) < 1e-10

    def test_derivatives_consistent(self, grid16):
        c = make_cutoff(grid16, "bump", center=(1.0, 2.0, 3.0), radius=2.0)
        grad = c.psi.gradient().data
        for i in range(3):
            assert np.max(np.abs(c.grad_psi[i].data - grad[i])) < 1e-12
        lap = divergence(c.psi.gradient()).data
        assert np.max(np.abs(c.lap_psi.data - lap)) < 1e-12
        assert np.max(np.abs(c.psi.physical().imag if np.iscomplexobj(c.psi.physical())
                             else 0)) == 0

    def test_periodic_wrap(self, grid16):
        """A bump centred at the origin is symmetric under x -> -x."""
        c = make_cutoff(grid16, "bump", center=(0, 0, 0), radius=2.0)
        v = c.psi.physical()
        flipped = np.roll(np.flip(v), 1, axis=(0, 1, 2))
        assert np.max(np.abs(v - flipped)) < 1e-12

    @pytest.mark.parametrize("radius", [np.pi, 4.0, 0.0])
    def test_radius_rejected(self, grid16, radius):
        with pytest.raises(ConfigurationError):
            make_cutoff(grid16, "bump", radius=radius)


class TestMonitors:
    def test_zero_field(self, grid16):
        u = SpectralField.zeros(grid16)
        p = ScalarField(grid16, np.zeros(grid16.shape, dtype=complex))
        m = assumption_monitors(u, p, [(0.3, 0, 0)])
        assert (m.u_l3, m.du_l3_max, m.p_l32, m.dp_l32_max) == (0, 0, 0, 0)

    def test_shear_l3(self):
        grid = WaveGrid(3, 64)
        u = shear_field(grid)
        p = pressure_recover(u)
        m = assumption_monitors(u, p, [(0, 0, 0)])
        line, _ = integrate.quad(lambda s: abs(np.sin(s)) ** 3, 0, 2 * np.pi, points=[np.pi])
        assert line == pytest.approx(8 / 3, rel=1e-12)
        assert m.u_l3 == pytest.approx((2 * np.pi) ** 2 * line, rel=1e-4)
        assert m.du_l3_max == 0 and m.dp_l32_max == 0

    def test_nonnegative(self, grid16, rng):
        u = random_solenoidal(grid16, rng)
        m = assumption_monitors(u, pressure_recover(u), [(0.1, 0.2, 0.3), (1, 0, 0)])
        assert min(m.u_l3, m.du_l3_max, m.p_l32, m.dp_l32_max) > 0
