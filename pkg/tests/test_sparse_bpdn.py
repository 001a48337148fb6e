"""
Tests for the constrained l1 (basis pursuit denoising) estimator.
Covers: closed-form single-atom optimum, agreement with an independent
Lagrangian solver, KKT conditions, feasibility and solver diagnostics.
"""
import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.optimize import brentq

from array_model import make_ula, steering_vector
from scenario_gen import Source, make_rng, synthesize_snapshot
from sparse_bpdn import (
    SparseBpdnSolver,
    SparseConfig,
    build_manifold_matrix,
    project_ball,
    soft_threshold,
    solve_bpdn,
    sparse_spectrum,
)
from spectrum_core import AngleGrid, default_grid, find_peaks

# Generous cap so convergence-dependent assertions are not cut short
PATIENT = SparseConfig(max_iterations=20000)


# ---------------------------------------------------------------------------
# Independent oracle: FISTA on the penalized form, bisection on the penalty
# ---------------------------------------------------------------------------

def lasso_fista(manifold, x, lam, iterations=3000):
    lipschitz = np.linalg.norm(manifold, 2) ** 2
    s = np.zeros(manifold.shape[1], dtype=complex)
    y = s.copy()
    t = 1.0
    for _ in range(iterations):
        grad = manifold.conj().T @ (manifold @ y - x)
        s_next = soft_threshold(y - grad / lipschitz, lam / lipschitz)
        t_next = (1 + np.sqrt(1 + 4 * t * t)) / 2
        y = s_next + ((t - 1) / t_next) * (s_next - s)
        s, t = s_next, t_next
    return s


def constrained_oracle(manifold, x, bound):
    """Penalty λ whose lasso solution sits exactly on the residual bound."""
    lam_max = np.max(np.abs(manifold.conj().T @ x))

    def excess(lam):
        r = x - manifold @ lasso_fista(manifold, x, lam)
        return np.real(np.vdot(r, r)) - bound

    lam = brentq(excess, 1e-6 * lam_max, lam_max * (1 - 1e-9), xtol=1e-12, rtol=1e-10)
    return lasso_fista(manifold, x, lam)


def small_instance(seed, sigma=0.1):
    geom = make_ula(4)
    grid = AngleGrid.uniform(45.0, 135.0, 2.25)
    rng = make_rng(seed)
    angles = rng.uniform(50.0, 130.0, size=2)
    sources = [Source(float(a), complex(np.exp(1j * rng.uniform(0, 2 * np.pi)))) for a in angles]
    x = synthesize_snapshot(geom, sources, sigma, rng)
    return geom, grid, build_manifold_matrix(geom, grid), x


# ===========================================================================
# BUILDING BLOCKS
# ===========================================================================

class TestBuildingBlocks:
    """Tests for build_manifold_matrix, soft_threshold and project_ball"""

    def test_manifold_columns_unit_norm(self, ula16):
        manifold = build_manifold_matrix(ula16, AngleGrid.uniform(45.0, 135.0, 0.5))
        assert manifold.shape == (16, 181)
        assert_allclose(np.linalg.norm(manifold, axis=0), 1.0, atol=1e-12)

    def test_soft_threshold_shrinks_modulus(self):
        v = np.array([3 * np.exp(0.5j), 0.5j, 0.0])
        out = soft_threshold(v, 1.0)
        assert_allclose(out, [2 * np.exp(0.5j), 0.0, 0.0], atol=1e-15)

    def test_project_ball(self):
        center = np.zeros(2, dtype=complex)
        inside = np.array([0.3, 0.4j])
        assert project_ball(inside, center, 1.0) is inside
        outside = np.array([3.0, 4.0j])
        assert_allclose(project_ball(outside, center, 1.0), [0.6, 0.8j])


# ===========================================================================
# SOLVER
# ===========================================================================

class TestSingleAtomOptimum:
    """x = c·a(θ_g) has the closed-form optimum (|c| - ε)·e^{j arg c} on atom g"""

    def test_objective_and_support(self, ula16):
        grid = AngleGrid.uniform(45.0, 135.0, 1.0)
        g = 75  # 120°
        c = 1.5 * np.exp(0.7j)
        sigma = 0.1
        x = c * steering_vector(ula16, grid.angles[g])
        solution = SparseBpdnSolver(build_manifold_matrix(ula16, grid), PATIENT).solve(x, sigma)
        eps = np.sqrt(2.0 * 16 * sigma ** 2)
        assert solution.converged
        assert solution.objective == pytest.approx(abs(c) - eps, rel=1e-3)
        assert np.argmax(np.abs(solution.coefficients)) == g
        assert solution.residual_norm_sq <= solution.bound * (1 + 1e-6)

    def test_small_snapshot_gives_zero(self, ula16):
        grid = AngleGrid.uniform(45.0, 135.0, 1.0)
        x = 0.01 * steering_vector(ula16, 100.0)
        solution = solve_bpdn(build_manifold_matrix(ula16, grid), x, 0.1)
        assert solution.converged
        assert solution.iterations_used == 0
        assert np.all(solution.coefficients == 0)


class TestFineGrid:
    """Default 0.01° grid: the splitting loop alone stalls on the coherent manifold"""

    def test_single_atom_on_default_grid(self, ula16):
        grid = default_grid()
        g = 7500
        assert grid.angles[g] == pytest.approx(120.0)
        x = steering_vector(ula16, grid.angles[g])
        solution = SparseBpdnSolver(build_manifold_matrix(ula16, grid)).solve(x, 1e-6)
        strength = np.abs(solution.coefficients)
        assert solution.converged
        assert solution.residual_norm_sq <= solution.bound * (1 + 1e-6)
        assert np.argmax(strength) == g
        assert strength[g] == pytest.approx(1.0, rel=0.01)
        assert np.all(np.abs(grid.angles[strength > 1e-3] - 120.0) <= 0.05 + 1e-9)

    def test_two_close_sources_converge(self, ula16):
        grid = default_grid()
        solver = SparseBpdnSolver(build_manifold_matrix(ula16, grid))
        for snr_db in (20.0, 40.0):
            sigma = 10 ** (-snr_db / 20.0)
            sources = [Source(100.0, 1 + 0j), Source(105.0, np.exp(0.4j))]
            x = synthesize_snapshot(ula16, sources, sigma, make_rng(11))
            solution = solver.solve(x, sigma)
            assert solution.converged
            assert solution.residual_norm_sq <= solution.bound * (1 + 1e-6)
            assert solution.duality_gap is None or solution.duality_gap <= 1e-4


class TestInteriorPointFinish:
    """Newton finish taking over from a deliberately truncated splitting loop"""

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_oracle_after_truncated_loop(self, seed):
        geom, grid, manifold, x = small_instance(seed)
        solution = SparseBpdnSolver(manifold, SparseConfig(max_iterations=3)).solve(x, 0.1)
        oracle = constrained_oracle(manifold, x, solution.bound)
        assert solution.refined
        assert solution.converged
        assert solution.duality_gap <= 1e-4
        assert solution.iterations_used > 3
        assert solution.residual_norm_sq <= solution.bound * (1 + 1e-6)
        assert solution.objective == pytest.approx(np.sum(np.abs(oracle)), rel=1e-4)

    def test_refinement_silent_on_success(self, ula16, capsys):
        grid = AngleGrid.uniform(45.0, 135.0, 1.0)
        x = steering_vector(ula16, 100.0) + 0.5 * steering_vector(ula16, 70.0)
        solver = SparseBpdnSolver(build_manifold_matrix(ula16, grid), SparseConfig(max_iterations=2))
        solution = solver.solve(x, 0.01)
        assert solution.converged and solution.refined
        assert "[SparseSolver]" not in capsys.readouterr().err


class TestAgainstOracle:
    """Agreement with the independent penalized solver on small instances"""

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_objective_matches(self, seed):
        geom, grid, manifold, x = small_instance(seed)
        solution = SparseBpdnSolver(manifold, PATIENT).solve(x, 0.1)
        oracle = constrained_oracle(manifold, x, solution.bound)
        assert solution.converged
        assert solution.objective == pytest.approx(np.sum(np.abs(oracle)), rel=1e-4)
        assert solution.residual_norm_sq <= solution.bound * (1 + 1e-6)

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(3, 13))
    def test_objective_matches_more_seeds(self, seed):
        geom, grid, manifold, x = small_instance(seed, sigma=0.05)
        solution = SparseBpdnSolver(manifold, PATIENT).solve(x, 0.05)
        oracle = constrained_oracle(manifold, x, solution.bound)
        assert solution.objective == pytest.approx(np.sum(np.abs(oracle)), rel=1e-4)


class TestOptimalityConditions:
    """KKT certificate and feasibility of converged solutions"""

    @pytest.mark.parametrize("seed", [4, 5, 6, 7])
    def test_kkt_on_support(self, seed):
        geom, grid, manifold, x = small_instance(seed)
        solution = SparseBpdnSolver(manifold, PATIENT).solve(x, 0.1)
        s = solution.coefficients
        correlation = manifold.conj().T @ (x - manifold @ s)
        mu = np.max(np.abs(correlation))
        support = np.abs(s) > 0.05 * np.abs(s).max()
        assert np.all(np.abs(correlation[support]) >= 0.98 * mu)
        phase_gap = np.angle(correlation[support] * np.conj(s[support]))
        assert np.all(np.abs(phase_gap) < 0.1)

    def test_converged_solutions_are_feasible(self):
        geom = make_ula(16)
        grid = AngleGrid.uniform(45.0, 135.0, 0.25)
        solver = SparseBpdnSolver(build_manifold_matrix(geom, grid), PATIENT)
        converged = 0
        for seed in range(8):
            rng = make_rng(99, seed)
            sigma = 10 ** (-rng.uniform(0, 2))
            sources = [Source(float(a), complex(np.exp(1j * rng.uniform(0, 6.28)))) for a in (60.0, 90.0, 95.0)]
            x = synthesize_snapshot(geom, sources, sigma, rng)
            solution = solver.solve(x, sigma)
            if solution.converged:
                converged += 1
                assert solution.residual_norm_sq <= 2.0 * 16 * sigma ** 2 * (1 + 1e-6)
        assert converged > 0


class TestDiagnostics:
    """Sigma floor, iteration cap and spectrum conversion"""

    def test_sigma_floor_applied(self, ula16):
        grid = AngleGrid.uniform(45.0, 135.0, 1.0)
        x = steering_vector(ula16, 100.0)
        solution = SparseBpdnSolver(build_manifold_matrix(ula16, grid)).solve(x, 0.0)
        assert solution.sigma_floored
        assert solution.sigma_used == SparseConfig().sigma_floor
        assert solution.bound == pytest.approx(2.0 * 16 * 1e-12)

    def test_iteration_cap_reports_not_converged(self, ula16, capsys):
        grid = AngleGrid.uniform(45.0, 135.0, 1.0)
        x = steering_vector(ula16, 100.0) + 0.5 * steering_vector(ula16, 70.0)
        cfg = SparseConfig(max_iterations=2, refine=False)
        solver = SparseBpdnSolver(build_manifold_matrix(ula16, grid), cfg)
        solution = solver.solve(x, 0.01)
        assert not solution.converged
        assert solution.iterations_used == 2
        assert "[SparseSolver]" in capsys.readouterr().err

    def test_negative_sigma_rejected(self, ula16):
        solver = SparseBpdnSolver(build_manifold_matrix(ula16, AngleGrid.uniform(45.0, 135.0, 1.0)))
        with pytest.raises(ValueError):
            solver.solve(np.ones(16, dtype=complex), -0.1)

    def test_snapshot_length_mismatch(self, ula16):
        solver = SparseBpdnSolver(build_manifold_matrix(ula16, AngleGrid.uniform(45.0, 135.0, 1.0)))
        with pytest.raises(ValueError):
            solver.solve(np.ones(4, dtype=complex), 0.1)

    def test_unknown_config_key_rejected(self):
        with pytest.raises(ValueError):
            SparseConfig(c_bond=2.0)

    def test_spectrum_peaks_near_sources(self, ula16):
        grid = AngleGrid.uniform(45.0, 135.0, 0.1)
        x = synthesize_snapshot(
            ula16, [Source(70.0, 1 + 0j), Source(110.0, 1j)], 0.01, make_rng(3)
        )
        solver = SparseBpdnSolver(build_manifold_matrix(ula16, grid))
        spectrum = solver.spectrum(x, 0.01, grid)
        est = find_peaks(spectrum, 2)
        assert_allclose(est.angles, [70.0, 110.0], atol=0.5)

    def test_spectrum_length_checked(self, ula16):
        grid = AngleGrid.uniform(45.0, 135.0, 1.0)
        solution = solve_bpdn(build_manifold_matrix(ula16, grid), steering_vector(ula16, 90.0), 0.1)
        with pytest.raises(ValueError):
            sparse_spectrum(solution, AngleGrid.uniform(45.0, 135.0, 2.0))
