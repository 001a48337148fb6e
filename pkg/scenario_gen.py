# scenario_gen.py
# Ground-truth source scenarios and noisy single snapshots

import json
import os
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from array_model import ArrayGeometry, steering_matrix


# ============================================================================
# CONFIGURATION
# ============================================================================

FOV_DEG: Tuple[float, float] = (45.0, 135.0)
SNR_RANGE_DB: Tuple[int, int] = (0, 40)
MAX_SOURCES = 3
SECONDARY_MAGNITUDE_RANGE: Tuple[float, float] = (0.5, 1.0)


# ============================================================================
# RANDOM STREAMS
# ============================================================================

def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Create a counter-based generator for one independent stream.

    The same (seed, stream) pair always yields the same sequence, so work items
    keyed by e.g. (snr index, trial) can run in any order or in parallel.

    Args:
        seed: 64-bit unsigned seed
        *stream: Non-negative integers identifying the sub-stream

    Returns:
        numpy Generator backed by Philox
    """
    if seed < 0 or seed >= 2 ** 64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    if any(s < 0 for s in stream):
        raise ValueError(f"stream keys must be non-negative, got {stream}")
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(sequence))


# ============================================================================
# DOMAIN TYPES
# ============================================================================

@dataclass(frozen=True)
class Source:
    """One far-field emitter: direction in degrees and complex amplitude s_q."""
    theta: float
    amplitude: complex


@dataclass(frozen=True)
class Scenario:
    """Sources, noise level and the single snapshot they produce."""
    sources: Tuple[Source, ...]
    sigma_v: float
    snapshot: np.ndarray
    snr_db: float

    @property
    def num_sources(self) -> int:
        return len(self.sources)

    @property
    def true_angles(self) -> np.ndarray:
        return np.sort(np.array([s.theta for s in self.sources], dtype=np.float64))


def snr_to_sigma(snr_db: float) -> float:
    """Noise standard deviation for SNR = |s₁|²/σ_v² with |s₁| = 1."""
    return float(10.0 ** (-snr_db / 20.0))


def source_snrs_db(scenario: Scenario) -> np.ndarray:
    """Per-source SNR 10·log10(|s_q|²/σ_v²); +inf for a noiseless scenario."""
    powers = np.array([abs(s.amplitude) ** 2 for s in scenario.sources])
    if scenario.sigma_v == 0:
        return np.full(powers.shape, np.inf)
    return 10.0 * np.log10(powers / scenario.sigma_v ** 2)


# ============================================================================
# SIGNAL MODEL
# ============================================================================

def draw_noise(rng: np.random.Generator, m: int, sigma_v: float) -> np.ndarray:
    """
    Draw circularly-symmetric white complex Gaussian noise.

    Real and imaginary parts each have variance σ_v²/2.

    Args:
        rng: Generator owned by the caller
        m: Number of samples
        sigma_v: Noise standard deviation (total per-entry)

    Returns:
        Complex vector of length m
    """
    if sigma_v < 0 or not np.isfinite(sigma_v):
        raise ValueError(f"sigma_v must be a finite non-negative number, got {sigma_v}")
    if m < 1:
        raise ValueError(f"m must be positive, got {m}")
    draws = rng.standard_normal((2, m))
    if sigma_v == 0:
        return np.zeros(m, dtype=np.complex128)
    return (sigma_v / np.sqrt(2.0)) * (draws[0] + 1j * draws[1])


def synthesize_snapshot(
    geom: ArrayGeometry,
    sources: Sequence[Source],
    sigma_v: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Build x = Σ a(θ_q)·s_q + v for one snapshot.

    Args:
        geom: Receiving array
        sources: Emitters, at least one, directions inside (0°, 180°)
        sigma_v: Noise standard deviation
        rng: Generator used for the noise draw

    Returns:
        Complex snapshot of length M
    """
    if len(sources) == 0:
        raise ValueError("at least one source is required")
    angles = np.array([s.theta for s in sources], dtype=np.float64)
    if np.any(angles <= 0) or np.any(angles >= 180):
        raise ValueError(f"source angles must lie in (0, 180) degrees, got {angles.tolist()}")
    amplitudes = np.array([s.amplitude for s in sources], dtype=np.complex128)
    signal = steering_matrix(geom, angles) @ amplitudes
    return signal + draw_noise(rng, geom.num_elements, sigma_v)


def sample_training_scenario(
    geom: ArrayGeometry,
    rng: np.random.Generator,
    fov: Tuple[float, float] = FOV_DEG,
    snr_range: Tuple[int, int] = SNR_RANGE_DB,
    max_sources: int = MAX_SOURCES,
) -> Scenario:
    """
    Draw one scenario from the training distribution.

    Q is uniform on {1..max_sources}, angles uniform over the FOV, |s₁| = 1,
    the other magnitudes uniform on [0.5, 1], all phases uniform, and the SNR
    an integer number of dB drawn uniformly from snr_range.

    Args:
        geom: Receiving array
        rng: Generator owned by the caller
        fov: Field of view in degrees
        snr_range: Inclusive integer SNR bounds in dB
        max_sources: Largest Q

    Returns:
        Scenario with its noisy snapshot
    """
    q = int(rng.integers(1, max_sources + 1))
    angles = rng.uniform(fov[0], fov[1], size=q)
    magnitudes = np.ones(q)
    if q > 1:
        magnitudes[1:] = rng.uniform(*SECONDARY_MAGNITUDE_RANGE, size=q - 1)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=q)
    snr_db = float(rng.integers(snr_range[0], snr_range[1] + 1))
    sigma_v = snr_to_sigma(snr_db)

    sources = tuple(
        Source(theta=float(angles[i]), amplitude=complex(magnitudes[i] * np.exp(1j * phases[i])))
        for i in range(q)
    )
    snapshot = synthesize_snapshot(geom, sources, sigma_v, rng)
    return Scenario(sources=sources, sigma_v=sigma_v, snapshot=snapshot, snr_db=snr_db)


def sample_scenario_set(
    geom: ArrayGeometry,
    count: int,
    seed: int,
    fov: Tuple[float, float] = FOV_DEG,
) -> List[Scenario]:
    """Draw a fixed set of training-distribution scenarios from a dedicated seed."""
    rng = make_rng(seed)
    return [sample_training_scenario(geom, rng, fov=fov) for _ in range(count)]


# ============================================================================
# SERIALIZATION (one JSON object per line)
# ============================================================================

def scenario_to_json(scenario: Scenario) -> str:
    record = {
        "q": scenario.num_sources,
        "angles": [s.theta for s in scenario.sources],
        "amplitudes": [[s.amplitude.real, s.amplitude.imag] for s in scenario.sources],
        "sigma_v": scenario.sigma_v,
        "snr_db": scenario.snr_db,
        "snapshot": [[z.real, z.imag] for z in scenario.snapshot.tolist()],
    }
    return json.dumps(record, separators=(",", ":"))


def scenario_from_json(line: str) -> Scenario:
    record = json.loads(line)
    angles = record["angles"]
    amplitudes = record["amplitudes"]
    if record["q"] != len(angles) or len(angles) != len(amplitudes):
        raise ValueError("scenario record has inconsistent source counts")
    sources = tuple(
        Source(theta=float(theta), amplitude=complex(re, im))
        for theta, (re, im) in zip(angles, amplitudes)
    )
    snapshot = np.array([complex(re, im) for re, im in record["snapshot"]], dtype=np.complex128)
    return Scenario(
        sources=sources,
        sigma_v=float(record["sigma_v"]),
        snapshot=snapshot,
        snr_db=float(record["snr_db"]),
    )


def write_scenarios(path: str, scenarios: Iterable[Scenario]) -> int:
    """
    Write scenarios as JSON lines.

    Returns:
        Number of scenarios written
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    count = 0
    with open(path, "w") as f:
        for scenario in scenarios:
            f.write(scenario_to_json(scenario) + "\n")
            count += 1
    return count


def read_scenarios(path: str) -> List[Scenario]:
    with open(path, "r") as f:
        return [scenario_from_json(line) for line in f if line.strip()]
