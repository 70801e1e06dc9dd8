import numpy as np
import pytest

from nfsense import (
    EncodingInputs,
    Grid,
    apply_E,
    apply_EH,
    build_bases,
    grid_coordinates,
    phase_block,
    recon_full,
    recon_split,
)
from nfsense.engine import (
    EngineError,
    MemoryBudgetError,
    choose_block_starts,
)
from nfsense.simulate import (
    dense_encoding_matrix,
    forward_signal,
    make_b0,
    make_cartesian,
    make_phantom,
    make_spiral,
    synth_coils,
)


def small_setup(grid, rng, n_coils=3, n_samples=60, b0_amp=150.0):
    sens = rng.standard_normal((grid.nvox, n_coils)) + 1j * rng.standard_normal(
        (grid.nvox, n_coils))
    temporal = make_spiral(n_samples, turns=4, k_max=320.0)
    coords = grid_coordinates(grid)
    spatial = np.vstack([make_b0(grid, "linear", b0_amp), coords[:, :2].T])
    return sens, spatial, temporal


def make_inputs(grid, sigma, spatial, temporal, sens, n_iter=10, block_starts=None,
                kfilter=None):
    return EncodingInputs(
        sigma=sigma,
        spatial=spatial,
        temporal=temporal,
        sens=sens,
        intensity=np.ones(grid.nvox),
        kfilter=kfilter,
        mask_r=np.ones(grid.nvox, bool),
        grid=grid,
        n_iter=n_iter,
        block_starts=block_starts,
    )


class TestKernelsAgainstDenseOracle:
    def test_phase_block(self, grid8, rng):
        _, spatial, temporal = small_setup(grid8, rng)
        blk = phase_block(temporal[10:20], spatial)
        assert np.allclose(blk, np.exp(1j * temporal[10:20] @ spatial), atol=1e-14)
        assert np.allclose(np.abs(blk), 1.0)

    def test_forward(self, grid8, rng):
        sens, spatial, temporal = small_setup(grid8, rng)
        rho = rng.standard_normal(grid8.nvox) + 1j * rng.standard_normal(grid8.nvox)
        phase = phase_block(temporal, spatial)
        out = apply_E(rho, sens, phase)
        dense = dense_encoding_matrix(sens, spatial, temporal)
        assert np.allclose(out.ravel(order="F"), dense @ rho, atol=1e-10)

    def test_adjoint(self, grid8, rng):
        sens, spatial, temporal = small_setup(grid8, rng)
        sigma = rng.standard_normal((60, 3)) + 1j * rng.standard_normal((60, 3))
        phase = phase_block(temporal, spatial)
        out = apply_EH(sigma, sens, phase)
        dense = dense_encoding_matrix(sens, spatial, temporal)
        assert np.allclose(out, dense.conj().T @ sigma.ravel(order="F"), atol=1e-10)

    def test_adjoint_identity(self, grid8, rng):
        sens, spatial, temporal = small_setup(grid8, rng)
        phase = phase_block(temporal, spatial)
        rho = rng.standard_normal(grid8.nvox) + 1j * rng.standard_normal(grid8.nvox)
        sigma = rng.standard_normal((60, 3)) + 1j * rng.standard_normal((60, 3))
        lhs = np.vdot(sigma.ravel(order="F"), apply_E(rho, sens, phase).ravel(order="F"))
        rhs = np.vdot(apply_EH(sigma, sens, phase), rho)
        assert lhs == pytest.approx(rhs, abs=1e-9)


class TestReconFull:
    def test_exact_recovery_fully_sampled(self, grid8):
        # fully sampled Cartesian raster, uniform coil: E^H E = L * I
        rho_true, _ = make_phantom(grid8, "discs", smooth_phase=True)
        sens = np.ones((grid8.nvox, 1), dtype=complex)
        temporal = make_cartesian(grid8)
        spatial = np.vstack([np.zeros(grid8.nvox), grid_coordinates(grid8)[:, :2].T])
        sigma = forward_signal(rho_true, sens, spatial, temporal)
        img, log = recon_full(make_inputs(grid8, sigma, spatial, temporal, sens))
        err = np.linalg.norm(img.values - rho_true) / np.linalg.norm(rho_true)
        assert err < 1e-12
        assert len(log.residual_norms) < 10  # early stop, not all 10 iterations

    def test_matches_dense_least_squares(self, grid8, rng):
        sens, spatial, temporal = small_setup(grid8, rng, n_samples=160)
        rho_true = rng.standard_normal(grid8.nvox) + 1j * rng.standard_normal(grid8.nvox)
        sigma = forward_signal(rho_true, sens, spatial, temporal)
        img, _ = recon_full(make_inputs(grid8, sigma, spatial, temporal, sens, n_iter=300))
        dense = dense_encoding_matrix(sens, spatial, temporal)
        ref, *_ = np.linalg.lstsq(dense, sigma.ravel(order="F"), rcond=None)
        assert np.linalg.norm(img.values - ref) / np.linalg.norm(ref) < 1e-6

    def test_memory_budget(self, grid8, rng):
        sens, spatial, temporal = small_setup(grid8, rng)
        inputs = make_inputs(grid8, np.zeros((60, 3), complex), spatial, temporal, sens)
        with pytest.raises(MemoryBudgetError, match="split"):
            recon_full(inputs, memory_budget_bytes=100)

    def test_nonfinite_data_rejected(self, grid8, rng):
        sens, spatial, temporal = small_setup(grid8, rng)
        sigma = np.zeros((60, 3), complex)
        sigma[5, 1] = np.nan
        with pytest.raises(EngineError):
            recon_full(make_inputs(grid8, sigma, spatial, temporal, sens))

    def test_callback_and_log(self, grid8, rng):
        sens, spatial, temporal = small_setup(grid8, rng)
        sigma = forward_signal(rng.standard_normal(grid8.nvox) + 0j, sens, spatial, temporal)
        seen = []
        img, log = recon_full(make_inputs(grid8, sigma, spatial, temporal, sens, n_iter=6),
                              callback=lambda n, rho: seen.append(n))
        assert seen == list(range(1, len(log.residual_norms) + 1))
        assert len(log.solution_norms) == len(log.residual_norms)
        labels = [lab for lab, _ in log.timings]
        assert "build_phase_matrix" in labels
        assert "initial_adjoint" in labels
        assert any(lab.startswith("cg_iteration_") for lab in labels)

    def test_restricted_mask_scatter(self, grid8, rng):
        # voxels outside the reconstruction mask stay exactly zero
        mask_r = rng.random(grid8.nvox) > 0.4
        n_r = int(mask_r.sum())
        sens, spatial, temporal = small_setup(grid8, rng)
        spatial = spatial[:, mask_r]
        sens = sens[mask_r]
        sigma = forward_signal(rng.standard_normal(n_r) + 0j, sens, spatial, temporal)
        inputs = EncodingInputs(
            sigma=sigma, spatial=spatial, temporal=temporal, sens=sens,
            intensity=np.ones(n_r), kfilter=None, mask_r=mask_r, grid=grid8, n_iter=5)
        img, _ = recon_full(inputs)
        assert np.all(img.values[~mask_r] == 0)
        assert np.any(img.values[mask_r] != 0)


class TestReconSplit:
    def test_matches_full(self, grid8, rng):
        sens, spatial, temporal = small_setup(grid8, rng, n_samples=90)
        sigma = forward_signal(rng.standard_normal(grid8.nvox) + 0j, sens, spatial,
                               temporal, noise_sd=0.01, rng=rng)
        full_img, full_log = recon_full(
            make_inputs(grid8, sigma, spatial, temporal, sens, n_iter=15))
        starts = np.array([0, 13, 40, 41, 90])
        split_img, split_log = recon_split(
            make_inputs(grid8, sigma, spatial, temporal, sens, n_iter=15,
                        block_starts=starts))
        assert np.allclose(split_img.values, full_img.values, atol=1e-10)
        assert np.allclose(split_log.residual_norms, full_log.residual_norms, rtol=1e-8)

    def test_single_block(self, grid8, rng):
        sens, spatial, temporal = small_setup(grid8, rng)
        sigma = forward_signal(rng.standard_normal(grid8.nvox) + 0j, sens, spatial, temporal)
        full_img, _ = recon_full(make_inputs(grid8, sigma, spatial, temporal, sens, n_iter=8))
        split_img, _ = recon_split(
            make_inputs(grid8, sigma, spatial, temporal, sens, n_iter=8,
                        block_starts=np.array([0, 60])))
        assert np.allclose(split_img.values, full_img.values, atol=1e-10)

    def test_needs_block_starts(self, grid8, rng):
        sens, spatial, temporal = small_setup(grid8, rng)
        with pytest.raises(EngineError):
            recon_split(make_inputs(grid8, np.zeros((60, 3), complex), spatial,
                                    temporal, sens))


class TestEncodingInputsValidation:
    def test_shape_checks(self, grid8, rng):
        sens, spatial, temporal = small_setup(grid8, rng)
        with pytest.raises(EngineError):
            make_inputs(grid8, np.zeros((61, 3), complex), spatial, temporal, sens)
        with pytest.raises(EngineError):
            make_inputs(grid8, np.zeros((60, 2), complex), spatial, temporal, sens)

    def test_mask_sum_check(self, grid8, rng):
        sens, spatial, temporal = small_setup(grid8, rng)
        mask = np.ones(grid8.nvox, bool)
        mask[0] = False
        with pytest.raises(EngineError):
            EncodingInputs(sigma=np.zeros((60, 3), complex), spatial=spatial,
                           temporal=temporal, sens=sens,
                           intensity=np.ones(grid8.nvox), kfilter=None,
                           mask_r=mask, grid=grid8, n_iter=1)

    def test_block_starts_check(self, grid8, rng):
        sens, spatial, temporal = small_setup(grid8, rng)
        for starts in ([1, 60], [0, 59], [0, 30, 30, 60]):
            with pytest.raises(EngineError):
                make_inputs(grid8, np.zeros((60, 3), complex), spatial, temporal,
                            sens, block_starts=np.array(starts))


class TestChooseBlockStarts:
    def test_covers_all_samples(self):
        starts = choose_block_starts(1000, 50, 50 * 16 * 64)
        assert starts[0] == 0 and starts[-1] == 1000
        assert np.all(np.diff(starts) > 0)
        assert np.max(np.diff(starts)) <= 64

    def test_tiny_budget_single_rows(self):
        starts = choose_block_starts(5, 100, 1)
        assert np.array_equal(starts, [0, 1, 2, 3, 4, 5])

    def test_large_budget_one_block(self):
        starts = choose_block_starts(100, 10, 10**9)
        assert np.array_equal(starts, [0, 100])


class TestBuildBases:
    def test_shapes_and_rows(self, grid8, rng):
        mask_r = rng.random(grid8.nvox) > 0.3
        b0 = rng.standard_normal(grid8.nvox)
        temporal = make_spiral(40, turns=3, k_max=200.0)
        spatial, temp = build_bases(b0, mask_r, grid8, temporal[:, 0], temporal[:, 1:])
        n_r = int(mask_r.sum())
        assert spatial.shape == (3, n_r)
        assert np.allclose(spatial[0], b0[mask_r])
        assert np.allclose(spatial[1:], grid_coordinates(grid8)[mask_r][:, :2].T)
        assert temp.shape == (40, 3)
        assert np.allclose(temp[:, 0], temporal[:, 0])

    def test_term_count_mismatch(self, grid8):
        temporal = make_spiral(40, turns=3, k_max=200.0)
        with pytest.raises(EngineError):
            build_bases(np.zeros(grid8.nvox), np.ones(grid8.nvox, bool), grid8,
                        temporal[:, 0], temporal[:, 1:], order=2)

    def test_time_count_mismatch(self, grid8):
        temporal = make_spiral(40, turns=3, k_max=200.0)
        with pytest.raises(EngineError):
            build_bases(np.zeros(grid8.nvox), np.ones(grid8.nvox, bool), grid8,
                        temporal[:10, 0], temporal[:, 1:])
