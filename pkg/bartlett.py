# bartlett.py
# Classical Bartlett (delay-and-sum) spectrum from a single snapshot

from typing import Optional

import numpy as np

from array_model import ArrayGeometry, steering_matrix
from spectrum_core import AngleGrid, Spectrum


class BartlettBeamformer:
    """
    Bartlett scanner with the array manifold precomputed for one grid.

    Reusing one instance across Monte-Carlo trials avoids rebuilding the
    M x N_hyp manifold for every snapshot.
    """

    def __init__(self, geom: ArrayGeometry, grid: AngleGrid, manifold: Optional[np.ndarray] = None):
        """
        Args:
            geom: Receiving array
            grid: Scan angles
            manifold: Optional precomputed steering matrix for (geom, grid)
        """
        self.geom = geom
        self.grid = grid
        if manifold is None:
            manifold = steering_matrix(geom, grid.angles)
        if manifold.shape != (geom.num_elements, len(grid)):
            raise ValueError(
                f"manifold shape {manifold.shape} does not match "
                f"({geom.num_elements}, {len(grid)})"
            )
        self._manifold_h = np.ascontiguousarray(manifold.conj().T)

    def spectrum(self, snapshot: np.ndarray) -> Spectrum:
        """Score |a^H(θ_i)·x|² at every grid angle."""
        snapshot = np.asarray(snapshot, dtype=np.complex128).reshape(-1)
        if snapshot.size != self.geom.num_elements:
            raise ValueError(
                f"snapshot has {snapshot.size} entries, array has {self.geom.num_elements}"
            )
        response = self._manifold_h @ snapshot
        return Spectrum(grid=self.grid, scores=response.real ** 2 + response.imag ** 2)


def bartlett_spectrum(geom: ArrayGeometry, snapshot: np.ndarray, grid: AngleGrid) -> Spectrum:
    """
    Bartlett spectrum of one snapshot.

    Args:
        geom: Receiving array
        snapshot: Complex measurements, length M
        grid: Scan angles in degrees

    Returns:
        Spectrum with score |a^H(θ)x|² per angle
    """
    return BartlettBeamformer(geom, grid).spectrum(snapshot)
