# sp2_training.py
# Virtual-target scores, hypothesis sampling, SNR-weighted loss and the on-the-fly training loop

import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from tqdm import tqdm

from array_model import ArrayGeometry, make_ula, steering_matrix
from neural_net import (
    Gradients,
    ModelParams,
    adam_step,
    encode_batch,
    forward_batch,
    init_adam,
    loss_and_gradients,
    save_model,
)
from scenario_gen import (
    FOV_DEG,
    SNR_RANGE_DB,
    Scenario,
    make_rng,
    sample_scenario_set,
    sample_training_scenario,
)


# ============================================================================
# CONFIGURATION
# ============================================================================

TARGET_ARRAY_FACTOR = 4
MAX_SNR_DB = 40.0
CHECKPOINT_TEMPLATE = "sp2net_iter{iteration:07d}.sp2n"
VALIDATION_HYPOTHESIS_STREAM = 1
OUT_OF_RANGE_DRAW_FACTOR = 2


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss or gradient; carries the last good checkpoint."""

    def __init__(self, message: str, best_model: ModelParams, log: List["TrainingLogEntry"]):
        super().__init__(message)
        self.best_model = best_model
        self.log = log


@dataclass(frozen=True)
class TargetSpec:
    """Noise-free virtual ULA used only to define training targets."""
    m_target: int
    target_geom: ArrayGeometry
    delta: float


def make_target_spec(m_target: int = 64) -> TargetSpec:
    """
    Virtual half-wavelength ULA with m_target elements.

    Δ = (2/M_tg)·(180/π) degrees, the half-width used for main-lobe sampling.
    """
    if m_target < 1:
        raise ValueError(f"m_target must be positive, got {m_target}")
    return TargetSpec(
        m_target=int(m_target),
        target_geom=make_ula(m_target),
        delta=(2.0 / m_target) * (180.0 / np.pi),
    )


class TrainConfig(BaseModel):
    """Training-loop settings."""
    model_config = ConfigDict(extra="forbid")

    k_hypotheses: int = Field(default=80, ge=2, description="K hypothesis angles per true DOA")
    scenarios_per_iteration: int = Field(default=200, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    validation_size: int = Field(default=1000, ge=1)
    validation_seed: int = Field(default=7, ge=0, lt=2 ** 64)
    eval_interval: int = Field(default=50, ge=1)
    patience: int = Field(default=20, ge=1, description="evaluations without improvement")
    max_iterations: int = Field(default=100_000, ge=1)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    weight_floor: Optional[float] = Field(default=None, gt=0, le=1)
    grad_chunk_size: int = Field(default=4096, ge=1)
    fov: Tuple[float, float] = FOV_DEG

    @field_validator("k_hypotheses")
    @classmethod
    def _k_even(cls, value: int) -> int:
        if value % 2:
            raise ValueError(f"k_hypotheses must be even, got {value}")
        return value

    @model_validator(mode="after")
    def _fov_ordered(self) -> "TrainConfig":
        lo, hi = self.fov
        if not (0 < lo < hi < 180):
            raise ValueError(f"fov must satisfy 0 < start < stop < 180, got {self.fov}")
        return self


@dataclass
class TrainingBatch:
    """
    Encoded samples with their targets and loss weights.

    Row i is one (scenario, θ_hyp) training sample.
    """
    inputs: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    theta_hyp: np.ndarray
    scenario_index: np.ndarray

    def __len__(self) -> int:
        return int(self.targets.size)


@dataclass
class TrainingLogEntry:
    iteration: int
    train_wmse: Optional[float]
    val_wmse: float
    wall_clock_s: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainingResult:
    """Best-validation model and the record of how it was reached."""
    model: ModelParams
    log: List[TrainingLogEntry]
    best_iteration: int
    best_val_wmse: float
    baseline_val_wmse: float
    iterations_run: int
    stop_reason: str
    checkpoints: List[str] = field(default_factory=list)


# ============================================================================
# TARGETS AND WEIGHTS
# ============================================================================

def target_scores(spec: TargetSpec, theta_hyp, true_angles: Sequence[float]) -> np.ndarray:
    """
    Virtual-array target t(θ_hyp) = max_q |a_tg^H(θ_hyp)·a_tg(θ_q)|² for many θ_hyp.

    Args:
        spec: Virtual target array
        theta_hyp: Hypothesis angle(s) in degrees
        true_angles: Source directions in degrees, at least one

    Returns:
        Scores in [0, 1], one per hypothesis angle
    """
    true_angles = np.asarray(true_angles, dtype=np.float64).reshape(-1)
    if true_angles.size == 0:
        raise ValueError("target score needs at least one true angle")
    hyp_h = steering_matrix(spec.target_geom, np.atleast_1d(np.asarray(theta_hyp, dtype=np.float64))).conj().T
    src = steering_matrix(spec.target_geom, true_angles)
    # One matrix-vector product per source: a repeated angle reproduces its gains exactly
    gains = np.abs(hyp_h @ np.ascontiguousarray(src[:, 0])) ** 2
    for q in range(1, src.shape[1]):
        gains = np.maximum(gains, np.abs(hyp_h @ np.ascontiguousarray(src[:, q])) ** 2)
    return np.clip(gains, 0.0, 1.0)


def target_score(spec: TargetSpec, theta_hyp: float, true_angles: Sequence[float]) -> float:
    return float(target_scores(spec, [theta_hyp], true_angles)[0])


def snr_weight(snr_db: float, floor: Optional[float] = None) -> float:
    """
    Linear-scale SNR normalized to 1 at 40 dB.

    Args:
        snr_db: Scenario SNR in [0, 40] dB
        floor: Optional lower bound on the weight

    Returns:
        10^(snr_db/10) / 10^4, raised to floor when given
    """
    if not SNR_RANGE_DB[0] <= snr_db <= SNR_RANGE_DB[1]:
        raise ValueError(f"snr_db must lie in {list(SNR_RANGE_DB)}, got {snr_db}")
    weight = 10.0 ** ((snr_db - MAX_SNR_DB) / 10.0)
    if floor is not None:
        weight = max(weight, floor)
    return float(weight)


# ============================================================================
# HYPOTHESIS SAMPLING
# ============================================================================

def sample_hypotheses(
    spec: TargetSpec,
    cfg: TrainConfig,
    true_angle: float,
    fov: Tuple[float, float],
    rng: np.random.Generator,
) -> np.ndarray:
    """
    K hypothesis angles for one true DOA.

    The first K/2 are uniform on [θ_q - Δ/2, θ_q + Δ/2] clipped to the FOV;
    the last K/2 are uniform over the rest of the FOV, drawn by rejection.

    Args:
        spec: Virtual target array (supplies Δ)
        cfg: Supplies K
        true_angle: θ_q in degrees, inside the FOV
        fov: (start, stop) in degrees
        rng: Generator owned by the caller

    Returns:
        Array of K angles in degrees
    """
    lo_fov, hi_fov = fov
    if not lo_fov <= true_angle <= hi_fov:
        raise ValueError(f"true angle {true_angle} is outside the FOV {fov}")
    half = cfg.k_hypotheses // 2
    half_width = spec.delta / 2.0

    lo = max(true_angle - half_width, lo_fov)
    hi = min(true_angle + half_width, hi_fov)
    inside = rng.uniform(lo, hi, size=half)

    outside = np.empty(0)
    if hi - lo >= hi_fov - lo_fov:
        raise ValueError("main-lobe interval covers the whole FOV; nothing to sample outside it")
    while outside.size < half:
        draws = rng.uniform(lo_fov, hi_fov, size=OUT_OF_RANGE_DRAW_FACTOR * half)
        keep = draws[np.abs(draws - true_angle) > half_width]
        outside = np.concatenate((outside, keep))
    return np.concatenate((inside, outside[:half]))


def build_training_batch(
    scenarios: Sequence[Scenario],
    spec: TargetSpec,
    cfg: TrainConfig,
    geom: ArrayGeometry,
    rng: np.random.Generator,
) -> TrainingBatch:
    """
    Expand scenarios into encoded training samples.

    Every true DOA of every scenario contributes K hypothesis angles; each
    sample's target is the virtual-array score against all of the scenario's
    DOAs and its weight is the scenario's SNR weight.
    """
    inputs, targets, weights, hyps, owners = [], [], [], [], []
    for index, scenario in enumerate(scenarios):
        true_angles = scenario.true_angles
        weight = snr_weight(scenario.snr_db, cfg.weight_floor)
        for theta_q in true_angles:
            theta = sample_hypotheses(spec, cfg, float(theta_q), cfg.fov, rng)
            inputs.append(encode_batch(scenario.snapshot, steering_matrix(geom, theta), scenario.sigma_v))
            targets.append(target_scores(spec, theta, true_angles))
            weights.append(np.full(theta.size, weight))
            hyps.append(theta)
            owners.append(np.full(theta.size, index, dtype=np.int64))
    if not inputs:
        raise ValueError("no scenarios to build a batch from")
    return TrainingBatch(
        inputs=np.concatenate(inputs),
        targets=np.concatenate(targets),
        weights=np.concatenate(weights),
        theta_hyp=np.concatenate(hyps),
        scenario_index=np.concatenate(owners),
    )


def make_validation_set(geom: ArrayGeometry, spec: TargetSpec, cfg: TrainConfig) -> TrainingBatch:
    """Fixed validation samples drawn from cfg.validation_seed, independent of the training streams."""
    scenarios = sample_scenario_set(geom, cfg.validation_size, cfg.validation_seed, fov=cfg.fov)
    rng = make_rng(cfg.validation_seed, VALIDATION_HYPOTHESIS_STREAM)
    return build_training_batch(scenarios, spec, cfg, geom, rng)


# ============================================================================
# LOSS
# ============================================================================

def _chunks(n: int, size: int) -> List[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def weighted_mse(params: ModelParams, batch: TrainingBatch, chunk_size: int = 4096) -> float:
    """Mean over samples of weight·(prediction - target)²."""
    total = 0.0
    for part in _chunks(len(batch), chunk_size):
        diff = forward_batch(params, batch.inputs[part]) - batch.targets[part]
        total += float(np.sum(batch.weights[part] * diff ** 2))
    return total / len(batch)


def constant_predictor_wmse(batch: TrainingBatch, value: float = 0.5) -> float:
    """Weighted MSE of a model that always outputs `value`."""
    return float(np.mean(batch.weights * (value - batch.targets) ** 2))


def accumulate_gradients(
    params: ModelParams,
    batch: TrainingBatch,
    chunk_size: int,
    executor: Optional[ThreadPoolExecutor] = None,
) -> Tuple[float, Gradients]:
    """
    Weighted-MSE loss and gradients over a batch, in fixed-size chunks.

    Chunks may run on an executor; partial results are summed in chunk order
    so the outcome does not depend on the worker count.
    """
    n = len(batch)

    def run(part: slice):
        return loss_and_gradients(
            params, batch.inputs[part], batch.targets[part], batch.weights[part], normalizer=n
        )

    parts = _chunks(n, chunk_size)
    results = list(executor.map(run, parts)) if executor is not None else [run(p) for p in parts]
    loss, grads = results[0]
    for part_loss, part_grads in results[1:]:
        loss += part_loss
        grads += part_grads
    return loss, grads


# ============================================================================
# TRAINING LOOP
# ============================================================================

def _draw_iteration_batch(
    iteration: int,
    spec: TargetSpec,
    cfg: TrainConfig,
    geom: ArrayGeometry,
) -> TrainingBatch:
    rng = make_rng(cfg.seed, iteration)
    scenarios = [
        sample_training_scenario(geom, rng, fov=cfg.fov)
        for _ in range(cfg.scenarios_per_iteration)
    ]
    return build_training_batch(scenarios, spec, cfg, geom, rng)


def train(
    model: ModelParams,
    cfg: TrainConfig,
    spec: TargetSpec,
    geom: ArrayGeometry,
    log_path: Optional[str] = None,
    checkpoint_dir: Optional[str] = None,
    workers: int = 1,
    verbose: bool = False,
    progress: bool = False,
) -> TrainingResult:
    """
    Train on freshly drawn scenarios with validation-based early stopping.

    Each iteration draws cfg.scenarios_per_iteration scenarios from stream
    (seed, iteration), expands them into hypothesis samples and applies one
    Adam step on the weighted MSE. Every eval_interval iterations the fixed
    validation set is scored; training stops after `patience` evaluations
    without improvement or at max_iterations.

    Args:
        model: Initial weights (not modified)
        cfg: Training settings
        spec: Virtual target array
        geom: Receiving array; model input width must be 4M+1
        log_path: Optional JSON-lines training log
        checkpoint_dir: Optional directory for per-evaluation checkpoints
        workers: Threads used for gradient chunks
        verbose: Print progress lines
        progress: Show a tqdm bar

    Returns:
        TrainingResult holding the best-validation model

    Raises:
        TrainingAborted: non-finite loss or gradient
    """
    if model.input_dim != 4 * geom.num_elements + 1:
        raise ValueError(
            f"model input width {model.input_dim} does not match 4M+1 = {4 * geom.num_elements + 1}"
        )
    started = time.perf_counter()
    params = model.copy()
    state = init_adam(params, cfg.learning_rate)

    validation = make_validation_set(geom, spec, cfg)
    baseline = constant_predictor_wmse(validation)
    best_val = weighted_mse(params, validation, cfg.grad_chunk_size)
    best_model = params.copy()
    best_iteration = 0
    log = [TrainingLogEntry(0, None, best_val, time.perf_counter() - started)]
    checkpoints: List[str] = []

    log_file = None
    if log_path:
        os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
        log_file = open(log_path, "w")
        log_file.write(log[0].to_json() + "\n")
        log_file.flush()
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)

    if verbose:
        print(
            f"[Trainer] {len(validation)} validation samples, "
            f"constant-0.5 wmse={baseline:.6e}, initial wmse={best_val:.6e}",
            flush=True,
        )

    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    stale = 0
    iteration = 0
    stop_reason = "max_iterations"
    bar = tqdm(total=cfg.max_iterations, desc="train", disable=not progress)
    try:
        for iteration in range(1, cfg.max_iterations + 1):
            batch = _draw_iteration_batch(iteration, spec, cfg, geom)
            loss, grads = accumulate_gradients(params, batch, cfg.grad_chunk_size, executor)
            if not np.isfinite(loss):
                raise TrainingAborted(
                    f"non-finite training loss {loss} at iteration {iteration}", best_model, log
                )
            try:
                adam_step(params, state, grads)
            except FloatingPointError as e:
                raise TrainingAborted(str(e), best_model, log) from e
            bar.update(1)

            if iteration % cfg.eval_interval:
                continue

            val = weighted_mse(params, validation, cfg.grad_chunk_size)
            entry = TrainingLogEntry(iteration, float(loss), val, time.perf_counter() - started)
            log.append(entry)
            if log_file:
                log_file.write(entry.to_json() + "\n")
                log_file.flush()
            if checkpoint_dir:
                path = os.path.join(checkpoint_dir, CHECKPOINT_TEMPLATE.format(iteration=iteration))
                save_model(params, path)
                checkpoints.append(path)
            if verbose:
                print(
                    f"[Trainer] iter {iteration} train={loss:.6e} val={val:.6e} "
                    f"best={min(best_val, val):.6e}",
                    flush=True,
                )

            if not np.isfinite(val):
                raise TrainingAborted(
                    f"non-finite validation loss at iteration {iteration}", best_model, log
                )
            if val < best_val:
                best_val = val
                best_model = params.copy()
                best_iteration = iteration
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    stop_reason = "patience"
                    break
    finally:
        bar.close()
        if executor is not None:
            executor.shutdown()
        if log_file:
            log_file.close()

    if verbose:
        print(
            f"[Trainer] stopped ({stop_reason}) after {iteration} iterations; "
            f"best val={best_val:.6e} at iter {best_iteration}",
            flush=True,
        )
    if best_iteration == 0 and iteration > 0:
        print("[Trainer] WARNING: no evaluation improved on the initial model", file=sys.stderr, flush=True)

    return TrainingResult(
        model=best_model,
        log=log,
        best_iteration=best_iteration,
        best_val_wmse=best_val,
        baseline_val_wmse=baseline,
        iterations_run=iteration,
        stop_reason=stop_reason,
        checkpoints=checkpoints,
    )


def read_training_log(path: str) -> List[TrainingLogEntry]:
    with open(path, "r") as f:
        return [TrainingLogEntry(**json.loads(line)) for line in f if line.strip()]
