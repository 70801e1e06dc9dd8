import numpy as np
import pytest

from nfsense import Grid, grid_coordinates
from nfsense.simulate import (
    SimulateError,
    dense_encoding_matrix,
    forward_signal,
    make_b0,
    make_cartesian,
    make_phantom,
    make_spiral,
    solid_harmonics,
    synth_coils,
)
from nfsense.kfilter import kspace_grid_coordinates


class TestSolidHarmonics:
    @pytest.mark.parametrize("ndim,order,n_terms", [
        (2, 1, 2), (3, 1, 3), (2, 2, 8), (3, 2, 8), (2, 3, 15), (3, 3, 15),
    ])
    def test_term_counts(self, rng, ndim, order, n_terms):
        coords = rng.standard_normal((10, 3))
        out = solid_harmonics(order, coords, ndim=ndim)
        assert out.shape == (10, n_terms)
        with_c = solid_harmonics(order, coords, ndim=ndim, include_constant=True)
        assert with_c.shape == (10, n_terms + 1)
        assert np.all(with_c[:, 0] == 1.0)

    def test_every_term_is_harmonic(self, rng):
        # central second differences are exact for cubics, so the discrete
        # Laplacian of each basis term must vanish identically
        pts = rng.standard_normal((20, 3))
        h = 0.37
        lap = np.zeros((20, 15))
        for axis in range(3):
            step = np.zeros(3)
            step[axis] = h
            lap += (solid_harmonics(3, pts + step) - 2 * solid_harmonics(3, pts)
                    + solid_harmonics(3, pts - step)) / h**2
        assert np.allclose(lap, 0.0, atol=1e-12)

    def test_order1_2d_drops_z(self, rng):
        coords = rng.standard_normal((5, 3))
        out = solid_harmonics(1, coords, ndim=2)
        assert np.allclose(out, coords[:, :2])

    def test_bad_order(self):
        with pytest.raises(SimulateError):
            solid_harmonics(4, np.zeros((3, 3)))


class TestPhantoms:
    def test_checker_exact_fill(self, grid32):
        img, support = make_phantom(grid32, "checker", fill=0.3)
        n_on = int(round(0.3 * grid32.nvox))
        assert int(np.sum(img.real > 0)) == n_on
        assert img.real.mean() == pytest.approx(n_on / grid32.nvox)
        assert np.all(support)

    def test_discs_support(self, grid32):
        img, support = make_phantom(grid32, "discs")
        assert np.array_equal(support, np.abs(img) > 0)
        assert 0.1 < support.mean() < 0.9

    def test_shepp_like_nonnegative(self, grid32):
        img, support = make_phantom(grid32, "shepp-like")
        assert np.all(img.real >= 0)
        assert support.any()

    def test_smooth_phase_keeps_magnitude(self, grid32):
        flat, _ = make_phantom(grid32, "discs")
        phased, _ = make_phantom(grid32, "discs", smooth_phase=True)
        assert np.allclose(np.abs(phased), np.abs(flat))
        assert np.max(np.abs(np.angle(phased[np.abs(phased) > 0]))) > 0.5

    def test_unknown_kind(self, grid8):
        with pytest.raises(SimulateError):
            make_phantom(grid8, "cube")


class TestCoilsAndB0:
    def test_coils_nonzero_everywhere(self, grid32):
        maps = synth_coils(grid32, 4)
        assert maps.shape == (grid32.nvox, 4)
        assert np.all(np.abs(maps) > 0)

    def test_coils_cover_object(self, grid32):
        # combined magnitude has no deep null in the FOV center region
        maps = synth_coils(grid32, 8)
        ssq = np.sqrt(np.sum(np.abs(maps) ** 2, axis=1))
        assert ssq.min() > 0.05 * ssq.max()

    def test_coil_count_validation(self, grid8):
        with pytest.raises(SimulateError):
            synth_coils(grid8, 0)

    def test_b0_patterns(self, grid32):
        assert np.all(make_b0(grid32, "zero") == 0)
        lin = make_b0(grid32, "linear", amplitude=100.0)
        x = grid_coordinates(grid32)[:, 0]
        assert np.allclose(lin, 100.0 * x / (grid32.fov_m[0] / 2))
        blob = make_b0(grid32, "blob", amplitude=50.0)
        assert 0 < blob.max() <= 50.0
        with pytest.raises(SimulateError):
            make_b0(grid32, "spiral")


class TestTrajectories:
    def test_spiral_endpoints(self):
        traj = make_spiral(200, turns=8, k_max=500.0, readout_s=0.02)
        assert traj.shape == (200, 3)
        assert traj[0, 0] == 0.0 and traj[-1, 0] == pytest.approx(0.02)
        assert np.hypot(traj[0, 1], traj[0, 2]) == 0.0
        assert np.hypot(traj[-1, 1], traj[-1, 2]) == pytest.approx(500.0)

    def test_spiral_radius_grows_linearly(self):
        traj = make_spiral(100, turns=4, k_max=300.0)
        r = np.hypot(traj[:, 1], traj[:, 2])
        assert np.allclose(r, 300.0 * np.linspace(0, 1, 100), atol=1e-9)

    def test_spiral_3d_planes(self):
        traj = make_spiral(50, turns=4, k_max=300.0, ndim=3, n_planes=3, kz_max=100.0)
        assert traj.shape == (150, 4)
        assert np.allclose(np.unique(traj[:, 3]), [-100.0, 0.0, 100.0])

    def test_spiral_validation(self):
        with pytest.raises(SimulateError):
            make_spiral(1, turns=1, k_max=1.0)

    def test_cartesian_full_matches_fft_grid(self, grid8):
        traj = make_cartesian(grid8)
        assert traj.shape == (grid8.nvox, 3)
        k = kspace_grid_coordinates(grid8)
        assert np.allclose(traj[:, 1:], k[:, :2])

    def test_cartesian_undersampling(self, grid8):
        traj = make_cartesian(grid8, undersample=2, axis=1)
        assert traj.shape[0] == grid8.nvox // 2
        full = np.unique(make_cartesian(grid8)[:, 2])
        kept = np.unique(traj[:, 2])
        assert np.allclose(kept, full[::2])

    def test_cartesian_validation(self, grid8):
        with pytest.raises(SimulateError):
            make_cartesian(grid8, undersample=0)
        with pytest.raises(SimulateError):
            make_cartesian(grid8, axis=2)


class TestForwardModel:
    def _small_problem(self, grid8, rng):
        rho = rng.standard_normal(grid8.nvox) + 1j * rng.standard_normal(grid8.nvox)
        sens = rng.standard_normal((grid8.nvox, 3)) + 1j * rng.standard_normal(
            (grid8.nvox, 3))
        temporal = make_spiral(40, turns=3, k_max=300.0)
        coords = grid_coordinates(grid8)
        b0 = make_b0(grid8, "linear", 150.0)
        spatial = np.vstack([b0, coords[:, :2].T])
        return rho, sens, spatial, temporal

    def test_matches_dense_matrix(self, grid8, rng):
        rho, sens, spatial, temporal = self._small_problem(grid8, rng)
        sigma = forward_signal(rho, sens, spatial, temporal)
        dense = dense_encoding_matrix(sens, spatial, temporal)
        assert np.allclose(sigma.ravel(order="F"), dense @ rho, atol=1e-10)

    def test_noise_reproducible(self, grid8, rng):
        rho, sens, spatial, temporal = self._small_problem(grid8, rng)
        s1 = forward_signal(rho, sens, spatial, temporal, noise_sd=0.1,
                            rng=np.random.default_rng(7))
        s2 = forward_signal(rho, sens, spatial, temporal, noise_sd=0.1,
                            rng=np.random.default_rng(7))
        clean = forward_signal(rho, sens, spatial, temporal)
        assert np.array_equal(s1, s2)
        assert not np.array_equal(s1, clean)

    def test_noise_level(self, grid8, rng):
        rho, sens, spatial, temporal = self._small_problem(grid8, rng)
        temporal = make_spiral(2000, turns=3, k_max=300.0)
        clean = forward_signal(rho, sens, spatial, temporal)
        noisy = forward_signal(rho, sens, spatial, temporal, noise_sd=0.5,
                               rng=np.random.default_rng(3))
        diff = noisy - clean
        assert np.std(diff.real) == pytest.approx(0.5, rel=0.1)
        assert np.std(diff.imag) == pytest.approx(0.5, rel=0.1)

    def test_dense_matrix_row_ordering(self, grid8, rng):
        # row = coil * K + sample: row k of coil block lam equals sens-weighted carrier
        rho, sens, spatial, temporal = self._small_problem(grid8, rng)
        dense = dense_encoding_matrix(sens, spatial, temporal)
        k_samp = temporal.shape[0]
        phase = temporal @ spatial
        row = dense[2 * k_samp + 5]
        assert np.allclose(row, np.exp(1j * phase[5]) * sens[:, 2])

    def test_dense_matrix_size_cap(self, grid8, rng):
        _, sens, spatial, temporal = self._small_problem(grid8, rng)
        with pytest.raises(SimulateError):
            dense_encoding_matrix(sens, spatial, temporal, cap=10)
