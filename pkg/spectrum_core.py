# spectrum_core.py
# Angle grids, spatial spectra, peak picking and RMSE shared by every estimator

import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np


# ============================================================================
# CONFIGURATION
# ============================================================================

DEFAULT_GRID_START = 45.0
DEFAULT_GRID_STOP = 135.0
DEFAULT_GRID_STEP = 0.01
UNIFORM_TOL = 1e-9


# ============================================================================
# ANGLE GRID
# ============================================================================

@dataclass(frozen=True)
class AngleGrid:
    """
    Ordered set of hypothesis angles in degrees.

    Uniform grids come from `AngleGrid.uniform`; arbitrary scan sets from
    `AngleGrid.irregular`, which leaves `step` unset. Peak picking only accepts
    uniform grids.
    """
    angles: np.ndarray
    start: float
    stop: float
    step: Optional[float] = None

    def __post_init__(self):
        angles = np.array(self.angles, dtype=np.float64).reshape(-1)
        if angles.size == 0:
            raise ValueError("angle grid is empty")
        if not np.all(np.isfinite(angles)):
            raise ValueError("grid angles must be finite")
        if angles.size > 1 and np.any(np.diff(angles) <= 0):
            raise ValueError("grid angles must be strictly increasing")
        angles.setflags(write=False)
        object.__setattr__(self, "angles", angles)

    @classmethod
    def uniform(
        cls,
        start: float = DEFAULT_GRID_START,
        stop: float = DEFAULT_GRID_STOP,
        step: float = DEFAULT_GRID_STEP,
    ) -> "AngleGrid":
        """Grid from start to stop (inclusive when stop lands on the lattice)."""
        if not step > 0:
            raise ValueError(f"grid step must be positive, got {step}")
        if stop < start:
            raise ValueError(f"grid stop {stop} is below start {start}")
        count = int(np.floor((stop - start) / step + UNIFORM_TOL)) + 1
        angles = start + step * np.arange(count)
        return cls(angles=angles, start=float(start), stop=float(angles[-1]), step=float(step))

    @classmethod
    def irregular(cls, angles: Sequence[float]) -> "AngleGrid":
        """Arbitrary scan set; sorted, no spacing requirement."""
        angles = np.sort(np.asarray(angles, dtype=np.float64).reshape(-1))
        if angles.size == 0:
            raise ValueError("angle grid is empty")
        return cls(angles=angles, start=float(angles[0]), stop=float(angles[-1]), step=None)

    @property
    def is_uniform(self) -> bool:
        return self.step is not None

    def __len__(self) -> int:
        return int(self.angles.size)


def default_grid() -> AngleGrid:
    return AngleGrid.uniform(DEFAULT_GRID_START, DEFAULT_GRID_STOP, DEFAULT_GRID_STEP)


# ============================================================================
# SPECTRUM AND ESTIMATES
# ============================================================================

@dataclass(frozen=True)
class Spectrum:
    """Non-negative score per grid angle."""
    grid: AngleGrid
    scores: np.ndarray

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64).reshape(-1)
        if scores.size != len(self.grid):
            raise ValueError(
                f"spectrum has {scores.size} scores for a grid of {len(self.grid)} angles"
            )
        if not np.all(np.isfinite(scores)):
            raise ValueError("spectrum scores must be finite")
        if np.any(scores < 0):
            raise ValueError("spectrum scores must be non-negative")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)

    def normalized(self) -> "Spectrum":
        """Same spectrum scaled so its maximum is 1 (all-zero stays zero)."""
        peak = float(self.scores.max())
        if peak == 0:
            return self
        return Spectrum(grid=self.grid, scores=self.scores / peak)


@dataclass(frozen=True)
class DoaEstimate:
    """Angles of the selected peaks, ascending, with their scores."""
    angles: np.ndarray
    scores: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def num_sources(self) -> int:
        return int(np.asarray(self.angles).size)


# ============================================================================
# PEAK PICKING
# ============================================================================

def local_maxima(scores: np.ndarray) -> np.ndarray:
    """
    Indices of local maxima.

    A run of equal samples counts once, at its leftmost index, when it is
    strictly above both exterior neighbors. Grid ends only need to beat their
    single neighbor.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    change = np.flatnonzero(np.diff(scores) != 0) + 1
    starts = np.concatenate(([0], change))
    values = scores[starts]
    left = np.concatenate(([-np.inf], values[:-1]))
    right = np.concatenate((values[1:], [-np.inf]))
    return starts[(values > left) & (values > right)].astype(np.int64)


def _rank(indices: np.ndarray, scores: np.ndarray) -> np.ndarray:
    # Highest score first, lowest angle among ties
    return indices[np.lexsort((indices, -scores[indices]))]


def find_peaks(spec: Spectrum, q: int) -> DoaEstimate:
    """
    Pick the q highest local maxima of a spectrum.

    When fewer than q local maxima exist, the remaining slots take the
    highest-scoring grid points that are neither selected nor adjacent to a
    selected point; if even those run out, adjacency is no longer enforced.

    Args:
        spec: Spectrum on a uniform grid, at least 3 points
        q: Number of DOAs to read out

    Returns:
        DoaEstimate sorted by angle
    """
    n = len(spec.grid)
    if not spec.grid.is_uniform:
        raise ValueError("peak picking requires a uniform angle grid")
    if n < 3:
        raise ValueError(f"peak picking needs at least 3 grid points, got {n}")
    if q < 1 or q >= n:
        raise ValueError(f"q must satisfy 1 <= q < {n}, got {q}")

    scores = spec.scores
    selected: List[int] = [int(i) for i in _rank(local_maxima(scores), scores)[:q]]

    if len(selected) < q:
        blocked = np.zeros(n, dtype=bool)
        for i in selected:
            blocked[max(i - 1, 0):i + 2] = True
        for i in _rank(np.arange(n), scores):
            if len(selected) == q:
                break
            if not blocked[i]:
                selected.append(int(i))
                blocked[max(i - 1, 0):i + 2] = True
        if len(selected) < q:
            taken = set(selected)
            for i in _rank(np.arange(n), scores):
                if len(selected) == q:
                    break
                if int(i) not in taken:
                    selected.append(int(i))
                    taken.add(int(i))

    order = np.sort(np.array(selected, dtype=np.int64))
    return DoaEstimate(angles=spec.grid.angles[order], scores=scores[order], indices=order)


# ============================================================================
# ERROR METRICS
# ============================================================================

def pair_and_error(estimated, true_angles: Sequence[float]) -> np.ndarray:
    """
    Signed errors after sorting both angle lists.

    Args:
        estimated: DoaEstimate or a sequence of angles in degrees
        true_angles: Ground-truth directions in degrees

    Returns:
        estimated_i - true_i for the i-th smallest of each list
    """
    est = np.sort(np.asarray(getattr(estimated, "angles", estimated), dtype=np.float64).reshape(-1))
    true = np.sort(np.asarray(true_angles, dtype=np.float64).reshape(-1))
    if est.size != true.size:
        raise ValueError(f"got {est.size} estimates for {true.size} true angles")
    return est - true


def rmse(trials: Iterable) -> float:
    """
    Root mean square error over every source of every trial.

    Args:
        trials: TrialRecord objects (anything with an `errors` attribute) or
            raw error sequences

    Returns:
        RMSE in degrees
    """
    chunks = [np.asarray(getattr(t, "errors", t), dtype=np.float64).reshape(-1) for t in trials]
    if not chunks:
        raise ValueError("rmse needs at least one trial")
    errors = np.concatenate(chunks)
    if errors.size == 0:
        raise ValueError("rmse needs at least one error value")
    return float(np.sqrt(np.mean(errors ** 2)))


# ============================================================================
# EXPORT
# ============================================================================

def write_spectrum(
    spec: Spectrum,
    path: str,
    estimator: str,
    metadata: Optional[Dict[str, object]] = None,
) -> None:
    """
    Write a two-column (angle_deg, score) text file.

    The first line is a header carrying the estimator name and scenario
    metadata as key=value pairs.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fields = [f"estimator={estimator}"]
    for key, value in (metadata or {}).items():
        if isinstance(value, (list, tuple, np.ndarray)):
            value = ",".join(repr(float(v)) for v in value)
        fields.append(f"{key}={value}")
    with open(path, "w") as f:
        f.write("# " + " ".join(fields) + "\n")
        f.write("# angle_deg score\n")
        for angle, score in zip(spec.grid.angles.tolist(), spec.scores.tolist()):
            f.write(f"{angle:.6f} {score!r}\n")


def read_spectrum(path: str) -> Tuple[Spectrum, Dict[str, str]]:
    """Read a file written by write_spectrum; returns (spectrum, header fields)."""
    header: Dict[str, str] = {}
    angles: List[float] = []
    scores: List[float] = []
    with open(path, "r") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for token in line[1:].split():
                    if "=" in token:
                        key, value = token.split("=", 1)
                        header[key] = value
                continue
            angle, score = line.split()
            angles.append(float(angle))
            scores.append(float(score))
    grid = AngleGrid.irregular(angles)
    return Spectrum(grid=grid, scores=np.array(scores)), header
