# sparse_bpdn.py
# Sparsity-based DOA baseline: min ||s||_1 subject to ||x - A s||^2 <= C*M*sigma_v^2

import sys
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg as la
from pydantic import BaseModel, ConfigDict, Field

from array_model import ArrayGeometry, steering_matrix
from spectrum_core import AngleGrid, Spectrum


# ============================================================================
# CONFIGURATION
# ============================================================================

RESIDUAL_BALANCE_RATIO = 10.0
RHO_SCALE = 2.0
ADAPT_EVERY = 10
FEASIBILITY_SLACK = 1e-6
ABS_TOL_FLOOR = 1e-14

# Interior-point finish
BARRIER_GROWTH = 10.0
NEWTON_TOL = 1e-10
ARMIJO_FRACTION = 0.25
MIN_STEP = 1e-14
CERTIFIED_GAP = 1e-4
SUPPORT_FRACTION = 1e-3


class SparseConfig(BaseModel):
    """Solver settings for the l1-constrained estimator."""
    model_config = ConfigDict(extra="forbid")

    c_bound: float = Field(default=2.0, gt=0, description="C in the bound C*M*sigma_v^2")
    max_iterations: int = Field(default=5000, ge=1)
    primal_tol: float = Field(default=1e-6, gt=0)
    dual_tol: float = Field(default=1e-6, gt=0)
    penalty_rho: float = Field(default=1.0, gt=0)
    sigma_floor: float = Field(default=1e-6, gt=0)
    refine: bool = Field(default=True, description="interior-point finish when the splitting loop hits its cap")
    gap_tol: float = Field(default=1e-7, gt=0, description="relative duality gap targeted by the finish")
    max_newton_steps: int = Field(default=1000, ge=1)


@dataclass
class SparseSolution:
    """Recovered grid coefficients plus solver diagnostics."""
    coefficients: np.ndarray
    residual_norm_sq: float
    iterations_used: int
    converged: bool
    bound: float
    sigma_used: float
    sigma_floored: bool = False
    primal_residual: float = 0.0
    dual_residual: float = 0.0
    rho: float = 1.0
    refined: bool = False
    duality_gap: Optional[float] = None

    @property
    def objective(self) -> float:
        return float(np.sum(np.abs(self.coefficients)))


# ============================================================================
# MANIFOLD
# ============================================================================

def build_manifold_matrix(geom: ArrayGeometry, grid: AngleGrid) -> np.ndarray:
    """
    Array manifold A = [a(θ_1), ..., a(θ_N)] over a scan grid.

    Returns:
        Complex matrix of shape (M, N_hyp) with unit-norm columns
    """
    if len(grid) == 0:
        raise ValueError("grid is empty")
    return steering_matrix(geom, grid.angles)


def soft_threshold(v: np.ndarray, tau: float) -> np.ndarray:
    """Complex shrinkage: scale each entry's modulus down by tau, clip at zero."""
    magnitude = np.abs(v)
    scale = np.maximum(1.0 - tau / np.maximum(magnitude, np.finfo(float).tiny), 0.0)
    return v * scale


def project_ball(v: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    offset = v - center
    norm = np.linalg.norm(offset)
    if norm <= radius:
        return v
    return center + offset * (radius / norm)


# ============================================================================
# SOLVER
# ============================================================================

class SparseBpdnSolver:
    """
    ADMM solver for the constrained l1 problem over a fixed manifold.

    The splitting is s = w (l1 term), A s = z (ball constraint). The s-update
    solves (I + A^H A) s = b through the matrix-inversion identity, so only the
    M x M matrix I + A A^H is ever factorized; the N_hyp x N_hyp Gram matrix is
    never formed. If the loop hits its iteration cap (dense, highly coherent
    grids) a log-barrier Newton path on the M-dimensional dual finishes the
    job and certifies it with the duality gap. One instance can be shared
    read-only across threads.
    """

    def __init__(self, manifold: np.ndarray, cfg: Optional[SparseConfig] = None):
        """
        Args:
            manifold: Complex matrix (M, N_hyp)
            cfg: Solver settings (defaults if omitted)
        """
        self.manifold = np.ascontiguousarray(manifold, dtype=np.complex128)
        self.manifold_h = np.ascontiguousarray(self.manifold.conj().T)
        self.cfg = cfg or SparseConfig()
        m = self.manifold.shape[0]
        gram_small = self.manifold @ self.manifold_h
        self._woodbury = la.cho_factor(np.eye(m) + gram_small, lower=True)
        self._gram_pinv = np.linalg.pinv(gram_small, hermitian=True)

    @property
    def num_elements(self) -> int:
        return int(self.manifold.shape[0])

    def _solve_normal(self, b: np.ndarray) -> np.ndarray:
        # (I + A^H A)^-1 b = b - A^H (I + A A^H)^-1 A b
        return b - self.manifold_h @ la.cho_solve(self._woodbury, self.manifold @ b)

    def _polish(
        self,
        w: np.ndarray,
        x: np.ndarray,
        radius: float,
        support: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        # Minimal-norm correction that moves A w onto the feasible ball
        aw = self.manifold @ w
        target = project_ball(aw, x, radius)
        if target is aw:
            return w
        if support is None:
            return w + self.manifold_h @ (self._gram_pinv @ (target - aw))
        polished = w.copy()
        polished[support] += np.linalg.lstsq(self.manifold[:, support], target - aw, rcond=None)[0]
        return polished

    # ------------------------------------------------------------------------
    # Interior-point finish on the dual problem
    # ------------------------------------------------------------------------

    def _newton_step(
        self,
        gradient: np.ndarray,
        u: np.ndarray,
        slack: np.ndarray,
        y: np.ndarray,
        y_norm: float,
        mu: float,
        radius: float,
    ) -> np.ndarray:
        # Hessian in the real embedding y -> [Re y; Im y]
        m = y.size
        weighted = self.manifold * u
        stacked = np.vstack([weighted.real, weighted.imag])
        hessian = (stacked * (4.0 / slack ** 2)) @ stacked.T
        gram = (self.manifold * (2.0 / slack)) @ self.manifold_h
        hessian += np.block([[gram.real, -gram.imag], [gram.imag, gram.real]])
        direction = np.concatenate([y.real, y.imag]) / y_norm
        hessian += (mu * radius / y_norm) * (np.eye(2 * m) - np.outer(direction, direction))

        rhs = -np.concatenate([gradient.real, gradient.imag])
        scale = 1.0 / np.sqrt(np.diag(hessian))
        scaled = hessian * np.outer(scale, scale)
        try:
            z = la.cho_solve(la.cho_factor(scaled, lower=True, check_finite=False), rhs * scale)
        except la.LinAlgError:
            z = np.linalg.lstsq(scaled, rhs * scale, rcond=None)[0]
        step = z * scale
        return step[:m] + 1j * step[m:]

    def _line_search(
        self,
        x: np.ndarray,
        y: np.ndarray,
        y_norm: float,
        u: np.ndarray,
        slack: np.ndarray,
        step: np.ndarray,
        mu: float,
        radius: float,
        decrement: float,
    ) -> float:
        # Backtracking on the barrier objective; every change is formed
        # incrementally so it stays accurate next to the constraint boundary
        du_unit = self.manifold_h @ step
        x_dir = float(np.real(np.vdot(x, step)))
        y_dir = float(np.real(np.vdot(y, step)))
        step_sq = float(np.real(np.vdot(step, step)))
        t = 1.0
        while t >= MIN_STEP:
            du = t * du_unit
            ratio = -np.real(du * np.conj(2.0 * u + du)) / slack
            if np.all(ratio > -1.0):
                y_new = y + t * step
                if np.max(np.abs(self.manifold_h @ y_new)) < 1.0:
                    grow = 2.0 * t * y_dir + t * t * step_sq
                    new_norm = float(np.sqrt(max(y_norm ** 2 + grow, 0.0)))
                    if new_norm > 0.0:
                        norm_change = grow / (new_norm + y_norm)
                        change = mu * (radius * norm_change - t * x_dir) - float(np.sum(np.log1p(ratio)))
                        if change <= -ARMIJO_FRACTION * t * decrement:
                            return t
            t *= 0.5
        return 0.0

    def _centre(
        self,
        x: np.ndarray,
        y: np.ndarray,
        mu: float,
        radius: float,
        budget: int,
    ) -> Tuple[np.ndarray, int, bool]:
        """Damped Newton on mu*(radius*||y|| - Re(x^H y)) - sum_i log(1 - |a_i^H y|^2)."""
        taken = 0
        while taken < budget:
            u = self.manifold_h @ y
            magnitude = np.abs(u)
            slack = (1.0 - magnitude) * (1.0 + magnitude)
            y_norm = float(np.linalg.norm(y))
            gradient = mu * (radius * y / y_norm - x) + 2.0 * (self.manifold @ (u / slack))
            step = self._newton_step(gradient, u, slack, y, y_norm, mu, radius)
            decrement = -float(np.real(np.vdot(gradient, step)))
            if decrement <= 2.0 * NEWTON_TOL:
                return y, taken, False
            t = self._line_search(x, y, y_norm, u, slack, step, mu, radius, decrement)
            taken += 1
            if t == 0.0:
                return y, taken, True
            y = y + t * step
        return y, taken, True

    def _refine(
        self, x: np.ndarray, radius: float, bound: float
    ) -> Tuple[np.ndarray, float, int, float, bool]:
        """
        Log-barrier path on the dual problem

            max Re(x^H y) - radius*||y||   s.t.  |a_i^H y| <= 1 for every atom,

        which has M complex unknowns however fine the grid is. On the path the
        primal coefficients are s_i = 2 u_i / (mu (1 - |u_i|^2)) with u = A^H y.
        They are moved onto the residual ball, first through the atoms they
        actually use, and the primal-dual gap decides whether the result is
        certified.

        Returns:
            (coefficients, residual_norm_sq, newton_steps, relative_gap, certified)
        """
        cfg = self.cfg
        n = self.manifold.shape[1]
        tiny = np.finfo(float).tiny

        peak = float(np.max(np.abs(self.manifold_h @ x)))
        y = x * (0.5 / (peak if peak > 0.0 else float(np.linalg.norm(x))))
        mu = n / float(np.linalg.norm(x))
        steps = 0
        while True:
            y, taken, stalled = self._centre(x, y, mu, radius, cfg.max_newton_steps - steps)
            steps += taken
            dual = float(np.real(np.vdot(x, y))) - radius * float(np.linalg.norm(y))
            if stalled or n / mu <= cfg.gap_tol * max(dual, tiny):
                break
            mu *= BARRIER_GROWTH

        u = self.manifold_h @ y
        magnitude = np.abs(u)
        coefficients = 2.0 * u / (mu * (1.0 - magnitude) * (1.0 + magnitude))
        strength = np.abs(coefficients)
        support = strength >= SUPPORT_FRACTION * strength.max() if strength.max() > 0.0 else None
        coefficients = self._polish(coefficients, x, radius, support=support)
        residual = x - self.manifold @ coefficients
        residual_sq = float(np.real(np.vdot(residual, residual)))
        if residual_sq > bound * (1.0 + FEASIBILITY_SLACK):
            coefficients = self._polish(coefficients, x, radius)
            residual = x - self.manifold @ coefficients
            residual_sq = float(np.real(np.vdot(residual, residual)))

        primal = float(np.sum(np.abs(coefficients)))
        gap = (primal - dual) / max(primal, tiny)
        certified = residual_sq <= bound * (1.0 + FEASIBILITY_SLACK) and gap <= CERTIFIED_GAP
        return coefficients, residual_sq, steps, gap, certified

    def solve(self, snapshot: np.ndarray, sigma_v: float) -> SparseSolution:
        """
        Solve min ||s||_1 s.t. ||x - A s||^2 <= C*M*sigma_v^2.

        Args:
            snapshot: Complex measurements x, length M
            sigma_v: Noise standard deviation; values below sigma_floor are floored

        Returns:
            SparseSolution; converged=False when neither the iteration cap nor
            the interior-point finish produce a feasible, gap-certified solution
        """
        cfg = self.cfg
        x = np.asarray(snapshot, dtype=np.complex128).reshape(-1)
        m, n = self.manifold.shape
        if x.size != m:
            raise ValueError(f"snapshot has {x.size} entries, manifold has {m} rows")
        if sigma_v < 0 or not np.isfinite(sigma_v):
            raise ValueError(f"sigma_v must be a finite non-negative number, got {sigma_v}")

        floored = sigma_v < cfg.sigma_floor
        sigma_used = max(float(sigma_v), cfg.sigma_floor)
        bound = cfg.c_bound * m * sigma_used ** 2
        radius = float(np.sqrt(bound))

        x_norm_sq = float(np.real(np.vdot(x, x)))
        if x_norm_sq <= bound:
            # s = 0 is feasible, hence optimal
            return SparseSolution(
                coefficients=np.zeros(n, dtype=np.complex128),
                residual_norm_sq=x_norm_sq,
                iterations_used=0,
                converged=True,
                bound=bound,
                sigma_used=sigma_used,
                sigma_floored=floored,
                rho=cfg.penalty_rho,
            )

        rho = cfg.penalty_rho
        w = np.zeros(n, dtype=np.complex128)
        z = project_ball(np.zeros(m, dtype=np.complex128), x, radius)
        u1 = np.zeros(n, dtype=np.complex128)
        u2 = np.zeros(m, dtype=np.complex128)
        abs_pri = ABS_TOL_FLOOR * np.sqrt(n + m)
        abs_dual = ABS_TOL_FLOOR * np.sqrt(n)

        r_norm = d_norm = np.inf
        best = None
        iteration = 0
        for iteration in range(1, cfg.max_iterations + 1):
            s = self._solve_normal((w - u1) + self.manifold_h @ (z - u2))
            a_s = self.manifold @ s

            w_old, z_old = w, z
            w = soft_threshold(s + u1, 1.0 / rho)
            z = project_ball(a_s + u2, x, radius)

            u1 = u1 + (s - w)
            u2 = u2 + (a_s - z)

            r_norm = float(np.sqrt(np.linalg.norm(s - w) ** 2 + np.linalg.norm(a_s - z) ** 2))
            d_norm = float(rho * np.linalg.norm((w - w_old) + self.manifold_h @ (z - z_old)))

            eps_pri = abs_pri + cfg.primal_tol * max(
                np.sqrt(np.linalg.norm(s) ** 2 + np.linalg.norm(a_s) ** 2),
                np.sqrt(np.linalg.norm(w) ** 2 + np.linalg.norm(z) ** 2),
            )
            eps_dual = abs_dual + cfg.dual_tol * rho * np.linalg.norm(u1 + self.manifold_h @ u2)

            if r_norm <= eps_pri and d_norm <= eps_dual:
                candidate = self._polish(w, x, radius)
                residual = x - self.manifold @ candidate
                residual_sq = float(np.real(np.vdot(residual, residual)))
                if residual_sq <= bound * (1.0 + FEASIBILITY_SLACK):
                    return SparseSolution(
                        coefficients=candidate,
                        residual_norm_sq=residual_sq,
                        iterations_used=iteration,
                        converged=True,
                        bound=bound,
                        sigma_used=sigma_used,
                        sigma_floored=floored,
                        primal_residual=r_norm,
                        dual_residual=d_norm,
                        rho=rho,
                    )

            if iteration % ADAPT_EVERY == 0:
                if r_norm > RESIDUAL_BALANCE_RATIO * d_norm:
                    rho *= RHO_SCALE
                    u1 = u1 / RHO_SCALE
                    u2 = u2 / RHO_SCALE
                elif d_norm > RESIDUAL_BALANCE_RATIO * r_norm:
                    rho /= RHO_SCALE
                    u1 = u1 * RHO_SCALE
                    u2 = u2 * RHO_SCALE
            best = w

        residual = x - self.manifold @ best
        residual_sq = float(np.real(np.vdot(residual, residual)))
        steps = 0
        gap = None
        if cfg.refine:
            refined, refined_sq, steps, gap, certified = self._refine(x, radius, bound)
            if certified:
                return SparseSolution(
                    coefficients=refined,
                    residual_norm_sq=refined_sq,
                    iterations_used=iteration + steps,
                    converged=True,
                    bound=bound,
                    sigma_used=sigma_used,
                    sigma_floored=floored,
                    primal_residual=r_norm,
                    dual_residual=d_norm,
                    rho=rho,
                    refined=True,
                    duality_gap=gap,
                )
            if refined_sq <= bound * (1.0 + FEASIBILITY_SLACK):
                best, residual_sq = refined, refined_sq

        gap_note = f", gap {gap:.3e}" if gap is not None else ""
        print(
            f"[SparseSolver] no convergence after {iteration} iterations "
            f"(primal {r_norm:.3e}, dual {d_norm:.3e}, rho {rho:g}{gap_note})",
            file=sys.stderr,
            flush=True,
        )
        return SparseSolution(
            coefficients=best,
            residual_norm_sq=residual_sq,
            iterations_used=iteration + steps,
            converged=False,
            bound=bound,
            sigma_used=sigma_used,
            sigma_floored=floored,
            primal_residual=r_norm,
            dual_residual=d_norm,
            rho=rho,
            refined=steps > 0,
            duality_gap=gap,
        )

    def spectrum(self, snapshot: np.ndarray, sigma_v: float, grid: AngleGrid) -> Spectrum:
        """Solve and return |s̃_i| as a spectrum over grid."""
        return sparse_spectrum(self.solve(snapshot, sigma_v), grid)


def solve_bpdn(
    manifold: np.ndarray,
    snapshot: np.ndarray,
    sigma_v: float,
    cfg: Optional[SparseConfig] = None,
) -> SparseSolution:
    """
    One-off constrained l1 solve. For many snapshots on the same grid build a
    SparseBpdnSolver once instead.
    """
    return SparseBpdnSolver(manifold, cfg).solve(snapshot, sigma_v)


def sparse_spectrum(solution: SparseSolution, grid: AngleGrid) -> Spectrum:
    """Spectrum whose score at θ_i is the modulus of the recovered coefficient."""
    if solution.coefficients.size != len(grid):
        raise ValueError(
            f"solution has {solution.coefficients.size} coefficients for {len(grid)} angles"
        )
    return Spectrum(grid=grid, scores=np.abs(solution.coefficients))
