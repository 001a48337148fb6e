# bench_harness.py
# Monte-Carlo RMSE-vs-SNR experiments comparing Bartlett, sparse recovery and the network spectrum

import csv
import json
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pydantic
import scipy
from pydantic import BaseModel, ConfigDict, Field, field_validator
from tqdm import tqdm

from array_model import ArrayGeometry, make_ula, single_source_crb_deg
from bartlett import BartlettBeamformer
from neural_net import ModelParams
from scenario_gen import Source, make_rng, snr_to_sigma, synthesize_snapshot
from sp2_inference import net_spectrum
from sparse_bpdn import SparseBpdnSolver, SparseConfig, build_manifold_matrix, sparse_spectrum
from spectrum_core import AngleGrid, Spectrum, find_peaks, pair_and_error, rmse, write_spectrum


# ============================================================================
# CONFIGURATION
# ============================================================================

METHODS = ("bartlett", "sparse", "sp2net")

RMSE_CSV = "rmse_vs_snr.csv"
TRIALS_CSV = "trials.csv"
CRB_CSV = "crb_vs_snr.csv"
TIMING_JSON = "timing.json"
MANIFEST_JSON = "manifest.json"
SPECTRA_DIR = "spectra"

# Stream index (past the last SNR index) reserved for the plotted realization
FLAGGED_TRIAL = 0


class ExperimentSpec(BaseModel):
    """One Monte-Carlo experiment: fixed source directions swept over SNR."""
    model_config = ConfigDict(extra="forbid")

    name: str = "custom"
    true_angles: List[float] = Field(default_factory=lambda: [120.0], min_length=1)
    snr_grid: List[float] = Field(default_factory=lambda: [float(s) for s in range(41)], min_length=1)
    trials_per_snr: int = Field(default=500, ge=1)
    methods: List[str] = Field(default_factory=lambda: list(METHODS), min_length=1)
    grid_start: float = 45.0
    grid_stop: float = 135.0
    grid_step: float = Field(default=0.01, gt=0)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    spectrum_snr_db: float = 25.0

    @field_validator("true_angles")
    @classmethod
    def _angles_in_range(cls, value: List[float]) -> List[float]:
        bad = [a for a in value if not 0 < a < 180]
        if bad:
            raise ValueError(f"true angles must lie in (0, 180) degrees, got {bad}")
        return value

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, value: List[str]) -> List[str]:
        unknown = [m for m in value if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown method(s) {unknown}; valid methods: {', '.join(METHODS)}")
        if len(set(value)) != len(value):
            raise ValueError(f"duplicate methods in {value}")
        return value

    @property
    def grid(self) -> AngleGrid:
        return AngleGrid.uniform(self.grid_start, self.grid_stop, self.grid_step)

    @property
    def num_sources(self) -> int:
        return len(self.true_angles)


PRESETS: Dict[str, Dict[str, object]] = {
    "single_120": {"true_angles": [120.0], "spectrum_snr_db": 25.0},
    "two_100_105": {"true_angles": [100.0, 105.0], "spectrum_snr_db": 25.0},
    "three_60_90_95": {"true_angles": [60.0, 90.0, 95.0], "spectrum_snr_db": 30.0},
    "three_63_67_72": {"true_angles": [63.0, 67.0, 72.0], "spectrum_snr_db": 30.0},
}


def preset(name: str, **overrides) -> ExperimentSpec:
    """
    Build a built-in experiment, optionally overriding fields.

    Args:
        name: One of PRESETS
        **overrides: ExperimentSpec fields to replace

    Returns:
        Validated ExperimentSpec
    """
    if name not in PRESETS:
        raise ValueError(f"unknown preset '{name}'; available: {', '.join(PRESETS)}")
    fields = {"name": name, **PRESETS[name]}
    fields.update(overrides)
    return ExperimentSpec(**fields)


# ============================================================================
# RESULT TYPES
# ============================================================================

@dataclass
class TrialRecord:
    experiment: str
    method: str
    snr_db: float
    trial: int
    estimated_angles: np.ndarray
    errors: np.ndarray
    wall_clock_s: float
    converged: Optional[bool] = None


@dataclass
class RmseRow:
    method: str
    snr_db: float
    rmse_deg: float
    trials: int


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    records: List[TrialRecord]
    rmse_table: List[RmseRow]
    geometry: ArrayGeometry
    flagged_spectra: Dict[str, Spectrum] = field(default_factory=dict)
    flagged_snr_db: Optional[float] = None
    sparse_cfg: Optional[SparseConfig] = None
    model_dims: Optional[List[int]] = None

    @property
    def num_elements(self) -> int:
        return self.geometry.num_elements


# ============================================================================
# EXPERIMENT
# ============================================================================

def _build_estimators(
    spec: ExperimentSpec,
    geom: ArrayGeometry,
    grid: AngleGrid,
    model: Optional[ModelParams],
    sparse_cfg: SparseConfig,
) -> Dict[str, Callable[[np.ndarray, float], Tuple[Spectrum, Optional[bool]]]]:
    estimators = {}
    manifold = build_manifold_matrix(geom, grid)
    if "bartlett" in spec.methods:
        beamformer = BartlettBeamformer(geom, grid, manifold)
        estimators["bartlett"] = lambda x, sigma: (beamformer.spectrum(x), None)
    if "sparse" in spec.methods:
        solver = SparseBpdnSolver(manifold, sparse_cfg)

        def run_sparse(x, sigma):
            solution = solver.solve(x, sigma)
            return sparse_spectrum(solution, grid), solution.converged

        estimators["sparse"] = run_sparse
    if "sp2net" in spec.methods:
        estimators["sp2net"] = lambda x, sigma: (net_spectrum(model, geom, x, sigma, grid), None)
    return estimators


def _draw_snapshot(
    spec: ExperimentSpec,
    geom: ArrayGeometry,
    snr_db: float,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, float]:
    # Unit magnitudes, fresh phases per trial
    sigma_v = snr_to_sigma(snr_db)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=spec.num_sources)
    sources = [Source(theta=float(t), amplitude=complex(np.exp(1j * p))) for t, p in zip(spec.true_angles, phases)]
    return synthesize_snapshot(geom, sources, sigma_v, rng), sigma_v


def rmse_table(spec: ExperimentSpec, records: List[TrialRecord]) -> List[RmseRow]:
    """RMSE per (method, SNR), ordered by method then SNR grid order."""
    grouped: Dict[Tuple[str, float], List[TrialRecord]] = {}
    for record in records:
        grouped.setdefault((record.method, record.snr_db), []).append(record)
    rows = []
    for method in spec.methods:
        for snr in spec.snr_grid:
            trials = grouped.get((method, float(snr)), [])
            if trials:
                rows.append(RmseRow(method, float(snr), rmse(trials), len(trials)))
    return rows


def run_experiment(
    spec: ExperimentSpec,
    model: Optional[ModelParams] = None,
    sparse_cfg: Optional[SparseConfig] = None,
    geom: Optional[ArrayGeometry] = None,
    workers: int = 1,
    verbose: bool = False,
    progress: bool = False,
) -> ExperimentResult:
    """
    Run every (SNR, trial) of an experiment for every requested method.

    Trial (i, k) draws its phases and noise from stream (seed, i, k), and all
    methods of that trial see the same snapshot. Work items may run on a
    thread pool; records come back in (SNR, trial, method) order.

    Args:
        spec: Experiment definition
        model: Trained network, required when "sp2net" is requested
        sparse_cfg: Sparse solver settings (defaults if omitted)
        geom: Receiving array (16-element ULA if omitted)
        workers: Thread count for trials
        verbose: Print an RMSE line per SNR
        progress: Show a tqdm bar

    Returns:
        ExperimentResult with trial records, RMSE table and the flagged spectra
    """
    if "sp2net" in spec.methods and model is None:
        raise ValueError("method 'sp2net' requires a trained model (--model)")
    geom = geom or make_ula()
    sparse_cfg = sparse_cfg or SparseConfig()
    if model is not None and model.input_dim != 4 * geom.num_elements + 1:
        raise ValueError(
            f"model input width {model.input_dim} does not match 4M+1 = {4 * geom.num_elements + 1}"
        )
    grid = spec.grid
    if spec.num_sources >= len(grid):
        raise ValueError(f"{spec.num_sources} sources cannot be resolved on {len(grid)} grid points")
    estimators = _build_estimators(spec, geom, grid, model, sparse_cfg)
    true_angles = np.array(spec.true_angles)

    def run_trial(key: Tuple[int, int]) -> List[TrialRecord]:
        snr_index, trial = key
        snr_db = float(spec.snr_grid[snr_index])
        snapshot, sigma_v = _draw_snapshot(spec, geom, snr_db, make_rng(spec.seed, snr_index, trial))
        out = []
        for method in spec.methods:
            started = time.perf_counter()
            spectrum, converged = estimators[method](snapshot, sigma_v)
            estimate = find_peaks(spectrum, spec.num_sources)
            out.append(TrialRecord(
                experiment=spec.name,
                method=method,
                snr_db=snr_db,
                trial=trial,
                estimated_angles=estimate.angles,
                errors=pair_and_error(estimate, true_angles),
                wall_clock_s=time.perf_counter() - started,
                converged=converged,
            ))
        return out

    keys = [(i, k) for i in range(len(spec.snr_grid)) for k in range(spec.trials_per_snr)]
    bar = tqdm(total=len(keys), desc=spec.name, disable=not progress)
    records: List[TrialRecord] = []
    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for chunk in pool.map(run_trial, keys):
                    records.extend(chunk)
                    bar.update(1)
        else:
            for key in keys:
                records.extend(run_trial(key))
                bar.update(1)
    finally:
        bar.close()

    table = rmse_table(spec, records)
    if verbose:
        by_snr: Dict[float, List[str]] = {}
        for row in table:
            by_snr.setdefault(row.snr_db, []).append(f"{row.method}={row.rmse_deg:.4f}")
        for snr in spec.snr_grid:
            print(f"[Benchmark] {spec.name} snr={snr:g} " + " ".join(by_snr.get(float(snr), [])), flush=True)
    failures = sum(1 for r in records if r.converged is False)
    if failures:
        print(f"[Benchmark] WARNING: sparse solver did not converge in {failures} trials", file=sys.stderr, flush=True)

    # Representative realization for the spectrum dumps
    flagged_rng = make_rng(spec.seed, len(spec.snr_grid), FLAGGED_TRIAL)
    snapshot, sigma_v = _draw_snapshot(spec, geom, spec.spectrum_snr_db, flagged_rng)
    flagged = {method: estimators[method](snapshot, sigma_v)[0] for method in spec.methods}

    return ExperimentResult(
        spec=spec,
        records=records,
        rmse_table=table,
        geometry=geom,
        flagged_spectra=flagged,
        flagged_snr_db=spec.spectrum_snr_db,
        sparse_cfg=sparse_cfg if "sparse" in spec.methods else None,
        model_dims=list(model.layer_dims) if model is not None else None,
    )


# ============================================================================
# OUTPUT
# ============================================================================

def _fmt(value: float) -> str:
    return repr(float(value))


def _package_versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pydantic": pydantic.VERSION,
    }


def emit_results(result: ExperimentResult, output_dir: str) -> List[str]:
    """
    Write an experiment's plot data and run manifest.

    Files: rmse_vs_snr.csv (method, snr_db, rmse_deg, trials), trials.csv
    (one row per trial and method), crb_vs_snr.csv for single-source
    experiments, one spectrum file per method for the flagged realization,
    timing.json, and manifest.json. The manifest is written last, atomically.

    Args:
        result: Output of run_experiment
        output_dir: Destination directory (created if missing)

    Returns:
        Paths written, manifest last
    """
    if not result.records:
        raise ValueError("no trial records to write")
    spec = result.spec
    os.makedirs(output_dir, exist_ok=True)
    written: List[str] = []

    path = os.path.join(output_dir, RMSE_CSV)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "snr_db", "rmse_deg", "trials"])
        for row in result.rmse_table:
            writer.writerow([row.method, _fmt(row.snr_db), _fmt(row.rmse_deg), row.trials])
    written.append(path)

    path = os.path.join(output_dir, TRIALS_CSV)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["experiment", "method", "snr_db", "trial", "estimated_deg", "error_deg", "converged"])
        for r in result.records:
            writer.writerow([
                r.experiment,
                r.method,
                _fmt(r.snr_db),
                r.trial,
                ";".join(_fmt(a) for a in r.estimated_angles),
                ";".join(_fmt(e) for e in r.errors),
                "" if r.converged is None else int(r.converged),
            ])
    written.append(path)

    if spec.num_sources == 1:
        geom = result.geometry
        path = os.path.join(output_dir, CRB_CSV)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["snr_db", "crb_deg"])
            for snr in spec.snr_grid:
                writer.writerow([_fmt(snr), _fmt(single_source_crb_deg(geom, spec.true_angles[0], snr))])
        written.append(path)

    for method, spectrum in result.flagged_spectra.items():
        path = os.path.join(output_dir, SPECTRA_DIR, f"{spec.name}_{method}.txt")
        write_spectrum(spectrum, path, method, {
            "experiment": spec.name,
            "true_angles": spec.true_angles,
            "snr_db": result.flagged_snr_db,
            "seed": spec.seed,
        })
        written.append(path)

    timing: Dict[str, float] = {}
    for method in spec.methods:
        times = [r.wall_clock_s for r in result.records if r.method == method]
        timing[method] = float(np.mean(times)) if times else 0.0
    path = os.path.join(output_dir, TIMING_JSON)
    with open(path, "w") as f:
        json.dump({"mean_trial_wall_clock_s": timing}, f, indent=2)
    written.append(path)

    manifest = {
        "experiment": spec.model_dump(),
        "seed": spec.seed,
        "num_elements": result.num_elements,
        "sparse": result.sparse_cfg.model_dump() if result.sparse_cfg else None,
        "model_layer_dims": result.model_dims,
        "versions": _package_versions(),
        "files": [os.path.relpath(p, output_dir) for p in written],
    }
    path = os.path.join(output_dir, MANIFEST_JSON)
    tmp_path = path + ".tmp"
    with open(tmp_path, "w") as f:
        json.dump(manifest, f, indent=2)
    os.replace(tmp_path, path)
    written.append(path)
    return written
