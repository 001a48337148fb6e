"""
Tests for the Bartlett beamformer.
"""
import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.optimize import brentq

from array_model import make_ula, single_source_crb_deg, steering_matrix, steering_vector
from bartlett import BartlettBeamformer, bartlett_spectrum
from scenario_gen import Source, make_rng, snr_to_sigma, synthesize_snapshot
from spectrum_core import AngleGrid, default_grid, find_peaks, pair_and_error, rmse


class TestBartlettSpectrum:
    """Tests for bartlett_spectrum and BartlettBeamformer"""

    def test_matches_explicit_scan(self, ula16):
        grid = AngleGrid.uniform(45.0, 135.0, 1.0)
        x = make_rng(1).standard_normal(16) + 1j * make_rng(2).standard_normal(16)
        spec = bartlett_spectrum(ula16, x, grid)
        expected = [abs(np.vdot(steering_vector(ula16, t), x)) ** 2 for t in grid.angles]
        assert_allclose(spec.scores, expected, rtol=1e-12)

    def test_noiseless_on_grid_source_zero_error(self, ula16):
        grid = default_grid()
        x = synthesize_snapshot(ula16, [Source(120.0, np.exp(0.4j))], 0.0, make_rng(0))
        est = find_peaks(bartlett_spectrum(ula16, x, grid), 1)
        assert abs(pair_and_error(est, [120.0])[0]) < 1e-9

    def test_peak_value_is_source_power(self, ula16):
        x = 2.0 * steering_vector(ula16, 90.0)
        spec = bartlett_spectrum(ula16, x, AngleGrid.uniform(80.0, 100.0, 0.5))
        assert spec.scores.max() == pytest.approx(4.0, rel=1e-12)

    def test_reused_beamformer_matches_function(self, ula16):
        grid = AngleGrid.uniform(45.0, 135.0, 0.1)
        beamformer = BartlettBeamformer(ula16, grid)
        for seed in range(3):
            x = make_rng(seed).standard_normal(16) * (1 + 1j)
            assert_allclose(beamformer.spectrum(x).scores, bartlett_spectrum(ula16, x, grid).scores)

    def test_works_on_irregular_grid(self, ula16):
        grid = AngleGrid.irregular([47.3, 90.0, 133.1])
        spec = bartlett_spectrum(ula16, steering_vector(ula16, 90.0), grid)
        assert spec.scores[1] == pytest.approx(1.0)

    def test_half_power_width_matches_dirichlet_kernel(self, ula16):
        m = ula16.num_elements
        grid = AngleGrid.uniform(100.0, 140.0, 0.01)
        scores = bartlett_spectrum(ula16, steering_vector(ula16, 120.0), grid).scores
        peak = int(np.argmax(scores))
        lo = peak
        while scores[lo - 1] >= 0.5:
            lo -= 1
        hi = peak
        while scores[hi + 1] >= 0.5:
            hi += 1
        measured = grid.angles[hi] - grid.angles[lo]

        def dirichlet(delta):
            return (np.sin(m * delta / 2) / (m * np.sin(delta / 2))) ** 2

        delta_half = brentq(lambda d: dirichlet(d) - 0.5, 1e-6, 2 * np.pi / m)
        c0 = np.cos(np.deg2rad(120.0))
        analytic = np.rad2deg(np.arccos(c0 - delta_half / np.pi) - np.arccos(c0 + delta_half / np.pi))
        assert measured == pytest.approx(analytic, abs=0.02)

    def test_scale_equivariance(self, ula16):
        grid = AngleGrid.uniform(45.0, 135.0, 0.5)
        x = make_rng(8).standard_normal(16) + 1j * make_rng(9).standard_normal(16)
        c = 0.3 - 2.1j
        base = bartlett_spectrum(ula16, x, grid).scores
        scaled = bartlett_spectrum(ula16, c * x, grid).scores
        assert_allclose(scaled, abs(c) ** 2 * base, rtol=1e-12)
        assert np.argmax(scaled) == np.argmax(base)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_scores_bounded_by_snapshot_energy(self, ula16, seed):
        rng = make_rng(seed, 4)
        x = rng.standard_normal(16) + 1j * rng.standard_normal(16)
        scores = bartlett_spectrum(ula16, x, default_grid()).scores
        assert scores.max() <= np.real(np.vdot(x, x)) * (1 + 1e-12)

    def test_snapshot_length_mismatch(self, ula16):
        with pytest.raises(ValueError):
            bartlett_spectrum(ula16, np.ones(8, dtype=complex), default_grid())

    def test_manifold_shape_mismatch(self, ula16):
        grid = AngleGrid.uniform(45.0, 135.0, 1.0)
        with pytest.raises(ValueError):
            BartlettBeamformer(ula16, grid, manifold=steering_matrix(make_ula(8), grid.angles))


class TestBartlettAccuracy:
    """Single-source accuracy against the Cramér-Rao bound"""

    def test_rmse_within_three_crb_at_40db(self, ula16):
        grid = default_grid()
        beamformer = BartlettBeamformer(ula16, grid)
        sigma = snr_to_sigma(40.0)
        errors = []
        for trial in range(500):
            rng = make_rng(2024, trial)
            source = Source(120.0, complex(np.exp(1j * rng.uniform(0, 2 * np.pi))))
            x = synthesize_snapshot(ula16, [source], sigma, rng)
            errors.append(pair_and_error(find_peaks(beamformer.spectrum(x), 1), [120.0]))
        bound = single_source_crb_deg(ula16, 120.0, 40.0)
        assert rmse(errors) < 3.0 * bound

    def test_rmse_falls_with_snr(self, ula16):
        grid = default_grid()
        beamformer = BartlettBeamformer(ula16, grid)

        def run(snr_db):
            errors = []
            for trial in range(200):
                rng = make_rng(7, int(snr_db), trial)
                source = Source(120.0, complex(np.exp(1j * rng.uniform(0, 2 * np.pi))))
                x = synthesize_snapshot(ula16, [source], snr_to_sigma(snr_db), rng)
                errors.append(pair_and_error(find_peaks(beamformer.spectrum(x), 1), [120.0]))
            return rmse(errors)

        assert run(40.0) < run(0.0)
