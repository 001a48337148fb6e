# array_model.py
# Linear array geometry and steering vectors for single-snapshot DOA estimation

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np


# ============================================================================
# CONFIGURATION
# ============================================================================

DEFAULT_NUM_ELEMENTS = 16
DEFAULT_WAVELENGTH = 1.0
HALF_WAVELENGTH = 0.5
CENTERING_TOL = 1e-12

AngleLike = Union[float, Sequence[float], np.ndarray]


# ============================================================================
# GEOMETRY
# ============================================================================

@dataclass(frozen=True)
class ArrayGeometry:
    """
    Sensor positions of a linear array.

    Positions are expressed in units of the wavelength and measured from the
    array center. Angles are measured from the array axis, so broadside is 90°.
    """
    positions: np.ndarray
    wavelength: float = DEFAULT_WAVELENGTH

    def __post_init__(self):
        positions = np.array(self.positions, dtype=np.float64).reshape(-1)
        if positions.size == 0:
            raise ValueError("array geometry needs at least one element")
        if not np.all(np.isfinite(positions)):
            raise ValueError("element positions must be finite")
        if not (np.isfinite(self.wavelength) and self.wavelength > 0):
            raise ValueError(f"wavelength must be positive, got {self.wavelength}")
        if abs(positions.mean()) > CENTERING_TOL:
            raise ValueError(
                f"element positions must be centered (mean {positions.mean():.3e})"
            )
        positions.setflags(write=False)
        object.__setattr__(self, "positions", positions)

    @property
    def num_elements(self) -> int:
        return int(self.positions.size)

    @property
    def aperture(self) -> float:
        """Physical extent of the array in wavelengths."""
        return float(self.positions.max() - self.positions.min())

    def __eq__(self, other) -> bool:
        if not isinstance(other, ArrayGeometry):
            return NotImplemented
        return (
            self.wavelength == other.wavelength
            and np.array_equal(self.positions, other.positions)
        )

    def __hash__(self) -> int:
        return hash((self.positions.tobytes(), self.wavelength))


def make_ula(num_elements: int = DEFAULT_NUM_ELEMENTS) -> ArrayGeometry:
    """
    Build a centered uniform linear array with half-wavelength spacing.

    Args:
        num_elements: Number of sensors (M)

    Returns:
        ArrayGeometry with M equidistant positions, spacing λ/2
    """
    if int(num_elements) != num_elements or num_elements < 1:
        raise ValueError(f"num_elements must be a positive integer, got {num_elements}")
    m = int(num_elements)
    positions = (np.arange(m) - (m - 1) / 2.0) * HALF_WAVELENGTH
    return ArrayGeometry(positions=positions)


def make_linear_array(positions: Sequence[float]) -> ArrayGeometry:
    """
    Build an arbitrary linear array, re-centering the given positions.

    Args:
        positions: Sensor locations along the axis, in wavelengths

    Returns:
        ArrayGeometry with the positions shifted so their mean is zero
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    if positions.size == 0:
        raise ValueError("array geometry needs at least one element")
    return ArrayGeometry(positions=positions - positions.mean())


# ============================================================================
# STEERING VECTORS
# ============================================================================

def _as_angles(theta: AngleLike) -> np.ndarray:
    angles = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(angles)):
        raise ValueError("angles must be finite")
    return angles


def steering_vector(geom: ArrayGeometry, theta: float) -> np.ndarray:
    """
    Unit-norm array response to a far-field source at angle theta.

    Entry m is exp(j·2π·p_m·cos θ / λ) / √M.

    Args:
        geom: Array geometry
        theta: Direction in degrees, measured from the array axis

    Returns:
        Complex vector of length M
    """
    angle = _as_angles(theta)
    if angle.ndim != 0:
        raise ValueError("steering_vector takes a single angle; use steering_matrix")
    # Same kernel as the batched form so columns match bit for bit
    return steering_matrix(geom, angle.reshape(1))[:, 0]


def steering_matrix(geom: ArrayGeometry, angles: AngleLike) -> np.ndarray:
    """
    Stack steering vectors column-wise.

    Args:
        geom: Array geometry
        angles: Directions in degrees

    Returns:
        Complex matrix of shape (M, len(angles))
    """
    angles = np.atleast_1d(_as_angles(angles))
    if angles.ndim != 1:
        raise ValueError("angles must be one-dimensional")
    cosines = np.cos(np.deg2rad(angles))
    phase = (2.0 * np.pi / geom.wavelength) * np.outer(geom.positions, cosines)
    return np.exp(1j * phase) / np.sqrt(geom.num_elements)


def beam_pattern(geom: ArrayGeometry, theta: AngleLike, theta0: float) -> np.ndarray:
    """|a^H(θ)·a(θ₀)|², the normalized power pattern steered to theta0."""
    response = steering_matrix(geom, theta).conj().T @ steering_vector(geom, theta0)
    return np.abs(response) ** 2


def single_source_crb_deg(geom: ArrayGeometry, theta: float, snr_db: float) -> float:
    """
    Deterministic Cramér-Rao bound on the standard deviation of a single DOA.

    Assumes one source of unit magnitude in white noise with σ_v² = 10^(-snr/10),
    unknown complex amplitude, one snapshot.

    Args:
        geom: Array geometry
        theta: True direction in degrees
        snr_db: |s|²/σ_v² in dB

    Returns:
        Bound on the DOA standard deviation, in degrees
    """
    a = steering_vector(geom, theta)
    k = 2.0 * np.pi / geom.wavelength
    derivative = -1j * k * geom.positions * np.sin(np.deg2rad(theta)) * a
    # Only the part of da/dθ orthogonal to a(θ) carries angle information
    derivative = derivative - a * (a.conj() @ derivative)
    fisher = 2.0 * 10 ** (snr_db / 10.0) * float(np.real(derivative.conj() @ derivative))
    if fisher <= 0:
        return float("inf")
    return float(np.rad2deg(np.sqrt(1.0 / fisher)))
