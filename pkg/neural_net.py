# neural_net.py
# Coordinate-style spatial-spectrum network: encoding, MLP with skips, backprop, Adam, persistence

import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit


# ============================================================================
# CONFIGURATION
# ============================================================================

MODEL_MAGIC = b"SP2N"
MODEL_FORMAT_VERSION = 1
HIDDEN_START_WIDTH = 256
HIDDEN_MAX_WIDTH = 2048
HIDDEN_PLATEAU_LAYERS = 4
HEAD_INIT_BOUND = 1e-3

# Keeps sigmoid outputs strictly inside (0, 1) in float64
_OUTPUT_LOW = np.finfo(np.float64).tiny
_OUTPUT_HIGH = 1.0 - np.finfo(np.float64).epsneg


class ModelFormatError(ValueError):
    """Raised when a model file cannot be decoded."""


# ============================================================================
# MODEL PARAMETERS
# ============================================================================

@dataclass
class ModelParams:
    """
    Weights of the fully connected network.

    Activations are indexed 0..L-1: h_0 is the encoded input and h_l for
    l >= 1 is the output of hidden layer l. Layer l maps h_{l-1} to h_l with
    weights[l-1] of shape (layer_dims[l-1], layer_dims[l]); the last layer
    maps to the scalar logit. A skip pair (s, t) adds h_s to h_t after the
    ReLU of layer t.
    """
    layer_dims: List[int]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    skip_pairs: List[Tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        self.skip_pairs = [(int(s), int(t)) for s, t in self.skip_pairs]
        validate_params(self)

    @property
    def num_layers(self) -> int:
        """Number of learnable (affine) layers."""
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    def copy(self) -> "ModelParams":
        return ModelParams(
            layer_dims=list(self.layer_dims),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            skip_pairs=list(self.skip_pairs),
        )

    def count_parameters(self) -> int:
        return int(sum(w.size + b.size for w, b in zip(self.weights, self.biases)))


@dataclass
class Gradients:
    """Per-layer gradients, shaped like ModelParams weights and biases."""
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __iadd__(self, other: "Gradients") -> "Gradients":
        for mine, theirs in zip(self.weights, other.weights):
            mine += theirs
        for mine, theirs in zip(self.biases, other.biases):
            mine += theirs
        return self

    def scale(self, factor: float) -> "Gradients":
        return Gradients(
            weights=[w * factor for w in self.weights],
            biases=[b * factor for b in self.biases],
        )


def validate_params(params: ModelParams) -> None:
    dims = params.layer_dims
    if len(dims) < 2 or dims[-1] != 1:
        raise ValueError(f"layer_dims must end in a scalar output, got {dims}")
    if any(d < 1 for d in dims):
        raise ValueError(f"layer widths must be positive, got {dims}")
    if len(params.weights) != len(dims) - 1 or len(params.biases) != len(dims) - 1:
        raise ValueError(
            f"expected {len(dims) - 1} weight/bias pairs, got "
            f"{len(params.weights)}/{len(params.biases)}"
        )
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if w.shape != (dims[i], dims[i + 1]):
            raise ValueError(f"layer {i + 1} weights have shape {w.shape}, expected {(dims[i], dims[i + 1])}")
        if b.shape != (dims[i + 1],):
            raise ValueError(f"layer {i + 1} biases have shape {b.shape}, expected {(dims[i + 1],)}")
    last_hidden = len(dims) - 2
    for s, t in params.skip_pairs:
        if not (0 <= s < t <= last_hidden):
            raise ValueError(f"skip pair {(s, t)} must satisfy 0 <= source < target <= {last_hidden}")
        if dims[s] != dims[t]:
            raise ValueError(f"skip pair {(s, t)} joins widths {dims[s]} and {dims[t]}")
    if len(set(params.skip_pairs)) != len(params.skip_pairs):
        raise ValueError("duplicate skip pairs")


def default_layer_dims(num_elements: int) -> List[int]:
    """
    Input 4M+1, then 256 doubling up to 2048, held at 2048 for a plateau of
    layers, then the scalar output.
    """
    dims = [4 * num_elements + 1]
    width = HIDDEN_START_WIDTH
    while width < HIDDEN_MAX_WIDTH:
        dims.append(width)
        width *= 2
    dims.extend([HIDDEN_MAX_WIDTH] * HIDDEN_PLATEAU_LAYERS)
    dims.append(1)
    return dims


def default_skip_pairs(layer_dims: Sequence[int]) -> List[Tuple[int, int]]:
    """Residual links between consecutive equal-width hidden layers."""
    last_hidden = len(layer_dims) - 2
    return [
        (l, l + 1)
        for l in range(1, last_hidden)
        if layer_dims[l] == layer_dims[l + 1]
    ]


def init_model(
    layer_dims: Sequence[int],
    rng: np.random.Generator,
    skip_pairs: Optional[Sequence[Tuple[int, int]]] = None,
) -> ModelParams:
    """
    He-uniform initialization for ReLU layers, small uniform head, zero biases.

    Args:
        layer_dims: Widths from input to the scalar output
        rng: Generator used for the weights
        skip_pairs: Residual links; default_skip_pairs when omitted

    Returns:
        Freshly initialized ModelParams
    """
    dims = [int(d) for d in layer_dims]
    weights, biases = [], []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        bound = HEAD_INIT_BOUND if i == len(dims) - 2 else np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    if skip_pairs is None:
        skip_pairs = default_skip_pairs(dims)
    return ModelParams(layer_dims=dims, weights=weights, biases=biases, skip_pairs=list(skip_pairs))


def zeros_like_params(params: ModelParams) -> Gradients:
    return Gradients(
        weights=[np.zeros_like(w) for w in params.weights],
        biases=[np.zeros_like(b) for b in params.biases],
    )


# ============================================================================
# INPUT ENCODING
# ============================================================================

def encode_input(snapshot: np.ndarray, steering: np.ndarray, sigma_v: float) -> np.ndarray:
    """
    Real-valued network input for one hypothesis angle.

    Layout: [Re x | Im x | Re a | Im a | σ_v], length 4M+1.

    Args:
        snapshot: Complex measurements x, length M
        steering: Complex steering vector a(θ_hyp), length M
        sigma_v: Noise standard deviation

    Returns:
        Float vector of length 4M+1
    """
    x = np.asarray(snapshot, dtype=np.complex128).reshape(-1)
    a = np.asarray(steering, dtype=np.complex128).reshape(-1)
    if x.size != a.size:
        raise ValueError(f"snapshot length {x.size} differs from steering length {a.size}")
    return np.concatenate((x.real, x.imag, a.real, a.imag, [float(sigma_v)]))


def encode_batch(snapshot: np.ndarray, steering: np.ndarray, sigma_v: float) -> np.ndarray:
    """
    Encode one snapshot against many hypothesis angles.

    Args:
        snapshot: Complex measurements x, length M
        steering: Complex matrix (M, N) of steering vectors
        sigma_v: Noise standard deviation

    Returns:
        Float matrix (N, 4M+1)
    """
    x = np.asarray(snapshot, dtype=np.complex128).reshape(-1)
    steering = np.asarray(steering, dtype=np.complex128)
    if steering.ndim != 2 or steering.shape[0] != x.size:
        raise ValueError(f"steering shape {steering.shape} does not match snapshot length {x.size}")
    n = steering.shape[1]
    m = x.size
    batch = np.empty((n, 4 * m + 1))
    batch[:, :m] = x.real
    batch[:, m:2 * m] = x.imag
    batch[:, 2 * m:3 * m] = steering.real.T
    batch[:, 3 * m:4 * m] = steering.imag.T
    batch[:, 4 * m] = sigma_v
    return batch


# ============================================================================
# FORWARD / BACKWARD
# ============================================================================

def _check_batch(params: ModelParams, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != params.input_dim:
        raise ValueError(f"input shape {inputs.shape} does not match input width {params.input_dim}")
    return inputs


def _forward_cache(params: ModelParams, inputs: np.ndarray):
    skips_into: Dict[int, List[int]] = {}
    for s, t in params.skip_pairs:
        skips_into.setdefault(t, []).append(s)

    activations = [inputs]
    pre_activations = []
    for l in range(1, params.num_layers):
        a = activations[-1] @ params.weights[l - 1] + params.biases[l - 1]
        h = np.maximum(a, 0.0)
        for s in skips_into.get(l, ()):
            h = h + activations[s]
        pre_activations.append(a)
        activations.append(h)
    logits = activations[-1] @ params.weights[-1] + params.biases[-1]
    outputs = np.clip(expit(logits[:, 0]), _OUTPUT_LOW, _OUTPUT_HIGH)
    return activations, pre_activations, outputs


def forward_batch(params: ModelParams, inputs: np.ndarray) -> np.ndarray:
    """Scores in (0, 1) for a (B, 4M+1) batch of encoded inputs."""
    _, _, outputs = _forward_cache(params, _check_batch(params, inputs))
    return outputs


def forward(params: ModelParams, inputs: np.ndarray) -> float:
    """
    Score of a single encoded input: affine+ReLU hidden layers with residual
    additions, then affine+sigmoid.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 1:
        raise ValueError("forward takes one encoded input; use forward_batch for batches")
    return float(forward_batch(params, inputs[None, :])[0])


def loss_and_gradients(
    params: ModelParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    normalizer: Optional[float] = None,
) -> Tuple[float, Gradients]:
    """
    Weighted squared error and its gradients.

    loss = Σ_i w_i (f(x_i) - t_i)² / normalizer, normalizer defaulting to 1.

    Args:
        params: Network weights
        inputs: Encoded inputs (B, 4M+1)
        targets: Target scores (B,)
        weights: Per-sample loss weights (B,)
        normalizer: Divisor applied to loss and gradients

    Returns:
        (loss, gradients)
    """
    inputs = _check_batch(params, inputs)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if targets.size != inputs.shape[0] or weights.size != inputs.shape[0]:
        raise ValueError("targets and weights must match the batch size")
    scale = 1.0 if normalizer is None else 1.0 / normalizer

    activations, pre_activations, outputs = _forward_cache(params, inputs)
    diff = outputs - targets
    loss = float(np.sum(weights * diff ** 2) * scale)

    grad_w = [None] * params.num_layers
    grad_b = [None] * params.num_layers

    # d loss / d logit through the sigmoid
    d_logits = (2.0 * scale * weights * diff * outputs * (1.0 - outputs))[:, None]
    grad_w[-1] = activations[-1].T @ d_logits
    grad_b[-1] = d_logits.sum(axis=0)

    grad_h = [None] * len(activations)
    grad_h[-1] = d_logits @ params.weights[-1].T
    skips_from: Dict[int, List[int]] = {}
    for s, t in params.skip_pairs:
        skips_from.setdefault(t, []).append(s)

    for l in range(params.num_layers - 1, 0, -1):
        upstream = grad_h[l]
        for s in skips_from.get(l, ()):
            grad_h[s] = upstream if grad_h[s] is None else grad_h[s] + upstream
        d_pre = upstream * (pre_activations[l - 1] > 0)
        grad_w[l - 1] = activations[l - 1].T @ d_pre
        grad_b[l - 1] = d_pre.sum(axis=0)
        if l > 1:
            through = d_pre @ params.weights[l - 1].T
            grad_h[l - 1] = through if grad_h[l - 1] is None else grad_h[l - 1] + through

    return loss, Gradients(weights=grad_w, biases=grad_b)


def backward(params: ModelParams, inputs: np.ndarray, target: float, weight: float) -> Gradients:
    """
    Gradients of weight·(forward(inputs) - target)² for one encoded input.

    Args:
        params: Network weights
        inputs: Encoded input, length 4M+1
        target: Target score in [0, 1]
        weight: Non-negative loss weight

    Returns:
        Gradients for every weight and bias
    """
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"target must lie in [0, 1], got {target}")
    if weight < 0:
        raise ValueError(f"weight must be non-negative, got {weight}")
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 1:
        raise ValueError("backward takes one encoded input")
    _, grads = loss_and_gradients(params, inputs[None, :], np.array([target]), np.array([weight]))
    return grads


# ============================================================================
# ADAM
# ============================================================================

@dataclass
class AdamState:
    """Adam moments and hyper-parameters."""
    first_moment: Gradients
    second_moment: Gradients
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0


def init_adam(params: ModelParams, learning_rate: float = 1e-3) -> AdamState:
    if learning_rate <= 0:
        raise ValueError(f"learning_rate must be positive, got {learning_rate}")
    return AdamState(
        first_moment=zeros_like_params(params),
        second_moment=zeros_like_params(params),
        learning_rate=learning_rate,
    )


def adam_step(params: ModelParams, state: AdamState, gradients: Gradients) -> Tuple[ModelParams, AdamState]:
    """
    One bias-corrected Adam update, applied in place.

    Args:
        params: Weights to update
        state: Moments; step_count is incremented
        gradients: Gradients matching params

    Returns:
        (params, state), the same objects that were passed in
    """
    pairs = list(zip(params.weights, gradients.weights, state.first_moment.weights, state.second_moment.weights))
    pairs += list(zip(params.biases, gradients.biases, state.first_moment.biases, state.second_moment.biases))
    if len(gradients.weights) != params.num_layers or len(gradients.biases) != params.num_layers:
        raise ValueError("gradient layer count does not match the model")
    for index, (p, g, _, _) in enumerate(pairs):
        if g.shape != p.shape:
            raise ValueError(f"gradient {index} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            kind = "weights" if index < params.num_layers else "biases"
            layer = index % params.num_layers + 1
            raise FloatingPointError(
                f"non-finite gradient in layer {layer} {kind} at step {state.step_count + 1}"
            )

    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step_count
    correction2 = 1.0 - b2 ** state.step_count
    for p, g, m, v in pairs:
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
    return params, state


# ============================================================================
# PERSISTENCE
# ============================================================================

def _header_bytes(params: ModelParams, num_elements: int) -> bytes:
    fields = [MODEL_FORMAT_VERSION, num_elements, len(params.layer_dims), *params.layer_dims]
    fields.append(len(params.skip_pairs))
    for s, t in params.skip_pairs:
        fields.extend([s, t])
    return MODEL_MAGIC + np.asarray(fields, dtype="<u4").tobytes()


def save_model(params: ModelParams, path: str) -> None:
    """
    Write params in the SP2N binary format.

    Layout: magic "SP2N", then u32 little-endian version, M, layer count,
    layer dims, skip count, skip pairs; then per layer the weights (row-major)
    and biases as little-endian float64. The file is written to a temporary
    name and renamed into place.
    """
    if (params.input_dim - 1) % 4 != 0:
        raise ValueError(f"input width {params.input_dim} is not 4M+1")
    for w, b in zip(params.weights, params.biases):
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("refusing to save non-finite parameters")
    num_elements = (params.input_dim - 1) // 4

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as f:
        f.write(_header_bytes(params, num_elements))
        for w, b in zip(params.weights, params.biases):
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    os.replace(tmp_path, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise ModelFormatError(f"model file truncated while reading {what}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def _parse_header(reader: _Reader) -> Dict[str, object]:
    magic = reader.take(4, "magic")
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    version = reader.u32("version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    num_elements = reader.u32("element count")
    layer_count = reader.u32("layer count")
    if layer_count < 2:
        raise ModelFormatError(f"layer count {layer_count} is too small")
    dims = [reader.u32(f"layer dim {i}") for i in range(layer_count)]
    if dims[0] != 4 * num_elements + 1:
        raise ModelFormatError(f"input width {dims[0]} inconsistent with M={num_elements}")
    if dims[-1] != 1 or any(d == 0 for d in dims):
        raise ModelFormatError(f"invalid layer dims {dims}")
    skip_count = reader.u32("skip count")
    skips = [(reader.u32("skip source"), reader.u32("skip target")) for _ in range(skip_count)]
    return {
        "version": version,
        "num_elements": num_elements,
        "layer_dims": dims,
        "skip_pairs": skips,
    }


def read_model_header(path: str) -> Dict[str, object]:
    """Decode only the header of a model file (for inspection)."""
    with open(path, "rb") as f:
        data = f.read()
    reader = _Reader(data)
    header = _parse_header(reader)
    dims = header["layer_dims"]
    expected = sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))
    header["parameter_count"] = expected
    header["file_bytes"] = len(data)
    return header


def load_model(path: str) -> ModelParams:
    """
    Read a model written by save_model.

    Raises:
        ModelFormatError: bad magic/version, inconsistent header, truncated or
            over-long payload
    """
    with open(path, "rb") as f:
        data = f.read()
    reader = _Reader(data)
    header = _parse_header(reader)
    dims: List[int] = header["layer_dims"]

    expected_floats = sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))
    remaining = len(data) - reader.offset
    if remaining != 8 * expected_floats:
        raise ModelFormatError(
            f"payload has {remaining} bytes, header declares {8 * expected_floats}"
        )

    weights, biases = [], []
    for i in range(len(dims) - 1):
        w = np.frombuffer(reader.take(8 * dims[i] * dims[i + 1], f"layer {i + 1} weights"), dtype="<f8")
        b = np.frombuffer(reader.take(8 * dims[i + 1], f"layer {i + 1} biases"), dtype="<f8")
        weights.append(w.astype(np.float64).reshape(dims[i], dims[i + 1]))
        biases.append(b.astype(np.float64))
    try:
        return ModelParams(layer_dims=dims, weights=weights, biases=biases, skip_pairs=header["skip_pairs"])
    except ValueError as e:
        raise ModelFormatError(f"inconsistent model file: {e}") from e
