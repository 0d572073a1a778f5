"""Tests for time stepping, runs, checkpoints and the shear testbed."""

from dataclasses import replace

import numpy as np
import pytest

from turbkit.checkpoint import load_snapshot, save_snapshot
from turbkit.forcing import ou_from_amplitudes, ou_zero_state
from turbkit.integrator import (
    CheckpointError, DivergenceError, SimConfig, SimState, StepSizeError,
    balance_report, burgers_run, degenerate_shear_run, initial_state,
    load_checkpoint, run, save_checkpoint, stationarity_check, step,
)
from turbkit.spectral import (
    ConfigurationError, SpectralField, WaveGrid, nonlinear_term, random_solenoidal,
)


def quiet(cfg, u):
    """State with velocity u and a zero noise field."""
    return SimState(u, ou_zero_state(cfg.spectrum()), 0.0, 0, np.random.default_rng(0), cfg.nu)


def advance(state, cfg, n):
    for _ in range(n):
        state = step(state, cfg)
    return state


def shear(grid, amp=1.0):
    """u = (amp sin y, 0, 0) as Fourier data."""
    x = grid.coordinates()
    return SpectralField.from_physical(grid, np.stack([amp * np.sin(x[1]), 0 * x[0], 0 * x[0]]), True)


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ConfigurationError):
            SimConfig(nu=0.0)
        with pytest.raises(ConfigurationError):
            SimConfig(nu=0.1, dt=-1.0)
        with pytest.raises(ConfigurationError):
            SimConfig(nu=0.1, t_burnin=-1.0)
        with pytest.raises(ConfigurationError):
            SimConfig(nu=0.1, N=7)

    def test_step_counts(self):
        cfg = SimConfig(nu=0.1, dt=0.01, t_burnin=1.0, t_sample=0.5)
        assert (cfg.n_burnin, cfg.n_sample) == (100, 50)


class TestStep:
    def test_zero_stays_zero(self):
        cfg = SimConfig(nu=0.1, N=16, epsilon=0.0)
        state = advance(quiet(cfg, SpectralField.zeros(cfg.grid)), cfg, 5)
        assert np.all(state.u.data == 0)

    def test_heat_decay(self):
        cfg = SimConfig(nu=0.3, N=16, dt=0.05, epsilon=0.0, nonlinear=False)
        grid = cfg.grid
        u = SpectralField.zeros(grid)
        u.data[1, 1, 0, 0] = 0.5
        u.data[1, -1, 0, 0] = 0.5
        state = step(quiet(cfg, u), cfg)
        ratio = state.u.data[1, 1, 0, 0] / 0.5
        assert abs(ratio - np.exp(-0.3 * 0.05)) < 1e-15

    def test_shear_is_steady_under_nonlinearity(self):
        # (sin y, 0, 0) has zero advection, so it decays exactly
        cfg = SimConfig(nu=0.2, N=16, dt=0.1, epsilon=0.0)
        state = advance(quiet(cfg, shear(cfg.grid)), cfg, 10)
        expect = shear(cfg.grid, np.exp(-0.2 * 1.0)).data
        assert np.max(np.abs(state.u.data - expect)) < 1e-14

    def test_rhs_matches_reference_operator(self):
        from turbkit.integrator import _rhs
        grid = WaveGrid(3, 16)
        u = random_solenoidal(grid, np.random.default_rng(3), energy=2.0)
        fast, _ = _rhs(grid, u.data, True)
        assert np.max(np.abs(fast + nonlinear_term(u).data)) < 1e-15

    def test_second_order(self):
        # Richardson: errors of dt and dt/2 against a fine reference
        cfg = SimConfig(nu=0.05, N=16, epsilon=0.0, dt=0.04)
        u0 = random_solenoidal(cfg.grid, np.random.default_rng(1), kmax=3, energy=20.0)
        final = {}
        for dt in (0.04, 0.02, 0.0025):
            c = replace(cfg, dt=dt)
            final[dt] = advance(quiet(c, u0), c, int(round(0.4 / dt))).u.data
        e1 = np.linalg.norm(final[0.04] - final[0.0025])
        e2 = np.linalg.norm(final[0.02] - final[0.0025])
        assert 3.5 < e1 / e2 < 4.5

    def test_forcing_integral_converges(self):
        # deterministic decaying Z (sigma = 0, nonzero start), no nonlinearity
        cfg = SimConfig(nu=0.5, N=8, epsilon=0.0, nonlinear=False, dt=0.1, shell=(1, 1))
        spec = cfg.spectrum()
        amps = np.ones(spec.sigma.shape, dtype=complex)
        lam = spec.lam[0]
        ou = ou_from_amplitudes(spec, amps)

        def final(dt):
            c = replace(cfg, dt=dt)
            s = SimState(SpectralField.zeros(c.grid), ou, 0.0, 0, np.random.default_rng(0), c.nu)
            return advance(s, c, int(round(1.0 / dt))).u.data

        # exact: int_0^1 exp(-nu (1 - s)) exp(-lam s) ds times Z0
        exact = (np.exp(-lam) - np.exp(-0.5)) / (0.5 - lam) * ou.Z.data
        e1 = np.abs(final(0.1) - exact).max()
        e2 = np.abs(final(0.05) - exact).max()
        assert 14 < e1 / e2 < 18  # Simpson: fourth order for this linear problem

    def test_energy_balance_per_step(self):
        cfg = SimConfig(nu=0.1, N=16, epsilon=0.0, dt=0.02)
        spec = cfg.spectrum()
        ou = ou_from_amplitudes(spec, np.full(spec.sigma.shape, 0.3 + 0.1j))
        u0 = random_solenoidal(cfg.grid, np.random.default_rng(2), kmax=3, energy=5.0)
        grid = cfg.grid

        def defect(dt):
            c = replace(cfg, dt=dt)
            s0 = SimState(u0, ou, 0.0, 0, np.random.default_rng(0), c.nu)
            s1 = step(s0, c)
            de = s1.u.norm2() - s0.u.norm2()
            inp = grid.volume * np.real(np.vdot(u0.data, ou.Z.data))
            diss = c.nu * grid.volume * np.sum(grid.k2 * np.abs(u0.data) ** 2)
            return abs(de - 2 * (inp - diss) * dt)

        assert 3.5 < defect(0.02) / defect(0.01) < 4.5

    def test_divergence_free_long_run(self):
        cfg = SimConfig(nu=0.05, N=8, dt=0.01, epsilon=5.0, init_energy=2.0, seed=4)
        state = advance(initial_state(cfg), cfg, 10_000)
        grid = cfg.grid
        div = np.max(np.abs(np.sum(grid.k * state.u.data, axis=0)))
        assert div <= 1e-10 * np.sqrt(state.u.norm2())
        assert np.isfinite(state.u.norm2())

    def test_cfl_error(self):
        cfg = SimConfig(nu=0.01, N=16, dt=1.0, epsilon=0.0, cfl_max=0.5)
        u = shear(cfg.grid, 5.0)
        with pytest.raises(StepSizeError) as info:
            step(quiet(cfg, u), cfg)
        assert info.value.umax == pytest.approx(5.0, rel=1e-3)

    def test_nan_detected(self):
        cfg = SimConfig(nu=0.01, N=16, epsilon=0.0)
        u = shear(cfg.grid)
        u.data[0, 0, 1, 0] = np.nan
        with pytest.raises(DivergenceError):
            step(quiet(cfg, u), cfg)


class TestRun:
    def test_no_sample_no_snapshots(self):
        cfg = SimConfig(nu=0.1, N=8, dt=0.01, t_burnin=0.1, t_sample=0.0, epsilon=1.0)
        stream = run(cfg)
        assert stream.drain() == []
        assert len(stream.series.t) == 11

    def test_snapshot_contract(self):
        cfg = SimConfig(nu=0.1, N=8, dt=0.01, t_burnin=0.05, t_sample=0.2,
                        snapshot_stride=5, epsilon=1.0, init_energy=1.0)
        snaps = run(cfg).drain()
        assert len(snaps) == 4
        assert [s.step for s in snaps] == [10, 15, 20, 25]
        assert all(s.p is not None for s in snaps)
        assert snaps[-1].t == pytest.approx(0.25)

    def test_pure_decay_monotone(self):
        cfg = SimConfig(nu=0.05, N=16, dt=0.01, t_burnin=1.0, epsilon=0.0, init_energy=3.0)
        stream = run(cfg)
        stream.drain()
        e = np.asarray(stream.series.energy)
        assert e[-1] < e[0]
        assert np.all(np.diff(e) < 0)

    def test_seeded_determinism(self):
        cfg = SimConfig(nu=0.1, N=8, dt=0.01, t_sample=0.3, snapshot_stride=10,
                        epsilon=2.0, init_energy=1.0, seed=11)
        a = run(cfg).drain()
        b = run(cfg).drain()
        for x, y in zip(a, b):
            assert x.u.data.tobytes() == y.u.data.tobytes()
            assert x.Z.data.tobytes() == y.Z.data.tobytes()


class TestCheckpoint:
    @pytest.fixture
    def state(self):
        cfg = SimConfig(nu=0.1, N=8, dt=0.01, epsilon=2.0, init_energy=1.0, seed=5)
        return cfg, advance(initial_state(cfg), cfg, 7)

    def test_round_trip_bitwise(self, state, tmp_path):
        cfg, s = state
        path = save_checkpoint(s, tmp_path / "c.tksc")
        back = load_checkpoint(path, cfg.spectrum())
        assert back.u.data.tobytes() == s.u.data.tobytes()
        assert back.ou.Z.data.tobytes() == s.ou.Z.data.tobytes()
        assert (back.t, back.step_count, back.nu) == (s.t, s.step_count, s.nu)
        assert back.rng.bit_generator.state == s.rng.bit_generator.state

    def test_resume_matches_uninterrupted(self, state, tmp_path):
        cfg, s = state
        path = save_checkpoint(s, tmp_path / "c.tksc")
        resumed = advance(load_checkpoint(path, cfg.spectrum()), cfg, 100)
        straight = advance(s, cfg, 100)
        assert resumed.u.data.tobytes() == straight.u.data.tobytes()
        assert resumed.t == straight.t

    def test_truncated(self, state, tmp_path):
        cfg, s = state
        path = save_checkpoint(s, tmp_path / "c.tksc")
        raw = path.read_bytes()
        for cut in (10, len(raw) // 2, len(raw) - 1):
            path.write_bytes(raw[:cut])
            with pytest.raises(CheckpointError):
                load_checkpoint(path, cfg.spectrum())

    def test_corruption_and_magic(self, state, tmp_path):
        cfg, s = state
        path = save_checkpoint(s, tmp_path / "c.tksc")
        raw = bytearray(path.read_bytes())
        raw[200] ^= 1
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path, cfg.spectrum())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path, cfg.spectrum())

    def test_version_mismatch(self, state, tmp_path):
        cfg, s = state
        path = save_checkpoint(s, tmp_path / "c.tksc")
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path, cfg.spectrum())

    def test_snapshot_file(self, tmp_path):
        cfg = SimConfig(nu=0.1, N=8, dt=0.01, t_sample=0.05, snapshot_stride=5,
                        epsilon=1.0, init_energy=1.0)
        (snap,) = run(cfg).drain()
        back = load_snapshot(save_snapshot(snap, tmp_path / "s.tksc"))
        assert back.u.data.tobytes() == snap.u.data.tobytes()
        assert back.p.data.tobytes() == snap.p.data.tobytes()
        bare = load_snapshot(save_snapshot(replace(snap, p=None), tmp_path / "b.tksc"))
        assert bare.p is None
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "s.tksc", cfg.spectrum())


class TestReports:
    def test_stationarity_and_balance(self):
        class Series:
            pass

        rng = np.random.default_rng(0)
        n = 4000
        s = Series()
        t = np.arange(n) * 0.1
        s.tail = lambda t0: {
            "t": t, "energy": 5 + rng.standard_normal(n),
            "dissipation": 2 + 0.1 * rng.standard_normal(n),
            "input": 2 + 0.1 * rng.standard_normal(n),
        }
        assert stationarity_check(s, 0.0)["stationary"]
        rep = balance_report(s, 0.0, nu=0.1)
        assert abs(rep["difference"]) <= 3 * rep["combined_stderr"]
        assert rep["c1"] == pytest.approx(2 / (0.1 * 5), rel=0.02)


class TestShear:
    @pytest.mark.parametrize("nu", [1.0, 0.1])
    def test_remark_value(self, nu):
        est = degenerate_shear_run(nu, 2e5, 0.05, np.random.default_rng(1))
        assert abs(est - 1 / (1 + nu)) < 0.03 / (1 + nu)

    def test_noise_scaling(self):
        a = degenerate_shear_run(0.5, 2e3, 0.01, np.random.default_rng(2))
        b = degenerate_shear_run(0.5, 2e3, 0.01, np.random.default_rng(2), s=2.0)
        assert b == pytest.approx(4 * a, rel=1e-12)

    def test_rejects_nonpositive_nu(self):
        with pytest.raises(ConfigurationError):
            degenerate_shear_run(0.0, 10.0, 0.1, np.random.default_rng(0))


class TestBurgers:
    def test_requires_1d(self):
        with pytest.raises(ConfigurationError):
            burgers_run(SimConfig(nu=0.1, N=16))

    def test_decay(self):
        cfg = SimConfig(nu=0.05, N=64, dimension=1, dt=0.01, t_burnin=2.0, epsilon=0.0,
                        shell=(1, 1))
        grid = cfg.grid
        x = grid.coordinates()[0]
        u = SpectralField.from_physical(grid, np.sin(x)[None])
        stream = burgers_run(cfg, quiet(cfg, u))
        stream.drain()
        e = np.asarray(stream.series.energy)
        assert np.all(np.diff(e) < 0)

    def test_inviscid_invariant(self):
        # the dealiased nonlinearity conserves energy exactly
        from turbkit.integrator import _rhs
        grid = WaveGrid(1, 64)
        x = grid.coordinates()[0]
        u = SpectralField.from_physical(grid, (np.sin(x) + 0.5 * np.cos(3 * x))[None])
        nl, _ = _rhs(grid, u.data, True)
        assert abs(np.real(np.vdot(u.data, nl))) < 1e-14
