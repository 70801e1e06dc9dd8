import numpy as np
import pytest

from nfsense import FieldMap, PrescanData
from nfsense.b0map import (
    B0Error,
    coil_combine,
    default_alpha_b,
    estimate_b0,
    fit_phase_evolution,
    smooth_b0,
    unwrap_temporal,
)
from nfsense.solver import difference_operator


def make_prescan(images, dte=1e-3):
    n = images.shape[0]
    return PrescanData(images, 4e-3 + dte * np.arange(n))


class TestCoilCombine:
    def test_recovers_separable_object(self, grid8, rng):
        n_echo, n_coil = 4, 3
        maps = rng.standard_normal((grid8.nvox, n_coil)) + 1j * rng.standard_normal(
            (grid8.nvox, n_coil))
        rho = rng.standard_normal((n_echo, grid8.nvox)) + 1j * rng.standard_normal(
            (n_echo, grid8.nvox))
        images = maps.T[None] * rho[:, None, :]  # (N, Gamma, L)
        out = coil_combine(make_prescan(images), maps)
        assert np.allclose(out, rho, atol=1e-12)

    def test_zero_where_maps_vanish(self, grid8, rng):
        maps = np.zeros((grid8.nvox, 2), dtype=complex)
        maps[1:] = 1.0
        images = rng.standard_normal((3, 2, grid8.nvox)) + 0j
        out = coil_combine(make_prescan(images), maps)
        assert np.all(out[:, 0] == 0)


class TestUnwrapTemporal:
    def test_diff_lands_in_half_open_interval(self):
        # a diff of exactly -pi maps to +pi, +pi stays put
        phases = np.array([[0.0], [-np.pi]])
        out = unwrap_temporal(phases)
        assert out[1, 0] == pytest.approx(np.pi)
        phases = np.array([[0.0], [np.pi]])
        assert unwrap_temporal(phases)[1, 0] == pytest.approx(np.pi)

    def test_recovers_steep_linear_evolution(self):
        true = np.outer(np.arange(6), [2.8, -2.8, 0.5])  # |diff| < pi
        wrapped = np.angle(np.exp(1j * true))
        out = unwrap_temporal(wrapped)
        assert np.allclose(out, true, atol=1e-12)

    def test_noop_on_smooth_phases(self, rng):
        phases = np.cumsum(rng.uniform(-1.0, 1.0, (5, 7)), axis=0)
        phases[0] = 0.0
        assert np.allclose(unwrap_temporal(phases), phases, atol=1e-12)


class TestFitPhaseEvolution:
    def test_exact_slope_and_offset(self):
        dte = 1.2e-3
        n = np.arange(5)
        b0_true = np.array([100.0, -50.0, 0.0])
        beta_true = np.array([0.1, -0.2, 0.3])
        unwrapped = n[:, None] * dte * b0_true[None] + (n % 2)[:, None] * beta_true[None]
        fm = fit_phase_evolution(unwrapped, dte)
        assert np.allclose(fm.b0, b0_true, atol=1e-9)
        assert np.allclose(fm.beta, beta_true, atol=1e-9)
        assert np.allclose(fm.stderr, 0.0, atol=1e-10)

    def test_stderr_matches_residual_oracle(self, rng):
        dte = 1e-3
        unwrapped = rng.standard_normal((6, 10))
        fm = fit_phase_evolution(unwrapped, dte)
        n = np.arange(6)
        design = np.column_stack([n * dte, n % 2])
        coef, *_ = np.linalg.lstsq(design, unwrapped, rcond=None)
        resid = unwrapped - design @ coef
        assert np.allclose(fm.stderr, np.sqrt((resid**2).sum(axis=0) / 6))

    def test_too_few_echoes(self):
        with pytest.raises(B0Error):
            fit_phase_evolution(np.zeros((2, 4)), 1e-3)

    def test_bad_spacing(self):
        with pytest.raises(B0Error):
            fit_phase_evolution(np.zeros((4, 4)), 0.0)

    def test_nyquist_warning(self):
        dte = 1e-3
        b0 = 0.95 * np.pi / dte
        unwrapped = np.arange(4)[:, None] * dte * b0
        with pytest.warns(UserWarning, match="unwrapping limit"):
            fit_phase_evolution(unwrapped, dte)


class TestEstimateB0:
    def test_end_to_end_with_wraps(self, grid8, rng):
        # phase advances beyond pi per full period but below pi per echo step
        dte = 1e-3
        n_echo, n_coil = 6, 3
        b0_true = rng.uniform(-2500.0, 2500.0, grid8.nvox)
        maps = rng.standard_normal((grid8.nvox, n_coil)) + 1j * rng.standard_normal(
            (grid8.nvox, n_coil))
        n = np.arange(n_echo)
        rho = np.exp(1j * (0.4 + n[:, None] * dte * b0_true[None]))  # first echo nonzero phase
        images = maps.T[None] * rho[:, None, :]
        fm = estimate_b0(make_prescan(images, dte), maps)
        assert np.allclose(fm.b0, b0_true, atol=1e-6)
        assert np.allclose(fm.stderr, 0.0, atol=1e-8)


class TestSmoothB0:
    def test_exact_where_error_is_zero(self, grid8, rng):
        b0 = rng.standard_normal(grid8.nvox) * 100
        fm = FieldMap(b0=b0, beta=np.zeros(grid8.nvox), stderr=np.zeros(grid8.nvox))
        out = smooth_b0(fm, grid8, alpha=1.0)
        assert np.allclose(out, b0, atol=1e-8)

    def test_matches_dense_least_squares(self, grid8, rng):
        b0 = rng.standard_normal(grid8.nvox) * 50
        stderr = np.abs(rng.standard_normal(grid8.nvox)) * 0.1
        fm = FieldMap(b0=b0, beta=np.zeros(grid8.nvox), stderr=stderr)
        alpha = 4.0
        out = smooth_b0(fm, grid8, alpha, tol=1e-12)
        rows = [np.eye(grid8.nvox)]
        rhs = [b0]
        for axis in (0, 1):
            d1 = difference_operator(grid8, axis, 1).toarray()
            rows.append(np.sqrt(alpha) * stderr[:, None] * d1)
            rhs.append(np.zeros(grid8.nvox))
        ref, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
        assert np.allclose(out, ref, atol=1e-7)

    def test_noisy_voxel_pulled_toward_neighbors(self, grid32):
        b0 = np.full(grid32.nvox, 10.0)
        l_bad = grid32.linear_index(16, 16, 0)
        b0[l_bad] = 500.0
        stderr = np.full(grid32.nvox, 1e-4)
        stderr[l_bad] = 5.0  # fit there was unreliable
        fm = FieldMap(b0=b0, beta=np.zeros(grid32.nvox), stderr=stderr)
        out = smooth_b0(fm, grid32, alpha=default_alpha_b(grid32, stderr))
        assert abs(out[l_bad] - 10.0) < abs(b0[l_bad] - 10.0) * 0.5

    def test_negative_alpha_rejected(self, grid8):
        fm = FieldMap(b0=np.zeros(grid8.nvox), beta=np.zeros(grid8.nvox),
                      stderr=np.zeros(grid8.nvox))
        with pytest.raises(B0Error):
            smooth_b0(fm, grid8, alpha=-1.0)


class TestDefaultAlphaB:
    def test_formula(self, grid8):
        stderr = np.array([0.1, 0.2, 0.4])
        pitch = grid8.fov_m[0] / grid8.dims[0]
        assert default_alpha_b(grid8, stderr) == pytest.approx((pitch / 0.2) ** 2)

    def test_all_zero_stderr(self, grid8):
        assert default_alpha_b(grid8, np.zeros(5)) > 0
