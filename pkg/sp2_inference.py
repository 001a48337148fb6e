# sp2_inference.py
# Spatial spectrum from a trained network by scanning hypothesis angles

from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from array_model import ArrayGeometry, steering_matrix
from neural_net import ModelParams, encode_batch, forward_batch
from spectrum_core import AngleGrid, Spectrum


# ============================================================================
# CONFIGURATION
# ============================================================================

# Angles per forward pass; every block is padded to this size so each angle
# sees the same matmul shapes however the grid is split
SCAN_BLOCK = 1024


def _scan_block(model: ModelParams, snapshot: np.ndarray, sigma_v: float, steering: np.ndarray) -> np.ndarray:
    count = steering.shape[1]
    if count < SCAN_BLOCK:
        padded = np.zeros((steering.shape[0], SCAN_BLOCK), dtype=np.complex128)
        padded[:, :count] = steering
        steering = padded
    return forward_batch(model, encode_batch(snapshot, steering, sigma_v))[:count]


def net_spectrum(
    model: ModelParams,
    geom: ArrayGeometry,
    snapshot: np.ndarray,
    sigma_v: float,
    grid: AngleGrid,
    workers: int = 1,
    executor: Optional[ThreadPoolExecutor] = None,
) -> Spectrum:
    """
    Score every grid angle with the network.

    Works on any AngleGrid, uniform or irregular.

    Args:
        model: Trained weights; input width must be 4M+1
        geom: Receiving array
        snapshot: Complex measurements, length M
        sigma_v: Noise standard deviation fed to the network
        grid: Hypothesis angles
        workers: Threads for scanning blocks when no executor is given
        executor: Optional shared pool

    Returns:
        Spectrum with scores in (0, 1)
    """
    snapshot = np.asarray(snapshot, dtype=np.complex128).reshape(-1)
    m = geom.num_elements
    if snapshot.size != m:
        raise ValueError(f"snapshot has {snapshot.size} entries, array has {m}")
    if model.input_dim != 4 * m + 1:
        raise ValueError(f"model input width {model.input_dim} does not match 4M+1 = {4 * m + 1}")

    manifold = steering_matrix(geom, grid.angles)
    blocks = [manifold[:, i:i + SCAN_BLOCK] for i in range(0, len(grid), SCAN_BLOCK)]

    def run(steering: np.ndarray) -> np.ndarray:
        return _scan_block(model, snapshot, sigma_v, steering)

    if executor is not None:
        scores = list(executor.map(run, blocks))
    elif workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(run, blocks))
    else:
        scores = [run(b) for b in blocks]
    return Spectrum(grid=grid, scores=np.concatenate(scores))
