# run_config.py
# YAML run configuration: sections, defaults, dotted overrides and validation

import os
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from array_model import ArrayGeometry, DEFAULT_NUM_ELEMENTS, make_ula
from bench_harness import ExperimentSpec, preset
from neural_net import default_layer_dims, default_skip_pairs
from sp2_training import TARGET_ARRAY_FACTOR, TargetSpec, TrainConfig, make_target_spec
from sparse_bpdn import SparseConfig


# ============================================================================
# CONFIGURATION
# ============================================================================

THREADS_ENV = "SP2NET_THREADS"
MODEL_INIT_STREAM = 0


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ArraySection(_Section):
    num_elements: int = Field(default=DEFAULT_NUM_ELEMENTS, ge=1)


class ModelSection(_Section):
    hidden_dims: Optional[List[int]] = Field(default=None, description="null = 256..2048 ladder")
    skip_pairs: Union[Literal["auto"], List[Tuple[int, int]]] = "auto"

    @model_validator(mode="after")
    def _positive_widths(self) -> "ModelSection":
        if self.hidden_dims is not None and (not self.hidden_dims or min(self.hidden_dims) < 1):
            raise ValueError("hidden_dims must be a non-empty list of positive widths")
        return self


class TargetSection(_Section):
    m_target: Optional[int] = Field(default=None, ge=1, description="null = 4 * num_elements")


class BenchmarkSection(_Section):
    """A preset name and/or explicit experiment fields; explicit fields win."""
    preset: Optional[str] = "two_100_105"
    name: Optional[str] = None
    true_angles: Optional[List[float]] = None
    snr_grid: Optional[List[float]] = None
    trials_per_snr: Optional[int] = None
    methods: Optional[List[str]] = None
    grid_start: Optional[float] = None
    grid_stop: Optional[float] = None
    grid_step: Optional[float] = None
    seed: Optional[int] = None
    spectrum_snr_db: Optional[float] = None


class PathsSection(_Section):
    model: str = "runs/sp2net.sp2n"
    train_log: str = "runs/train_log.jsonl"
    checkpoint_dir: Optional[str] = None
    output_dir: str = "runs/benchmark"


class RunConfig(_Section):
    """Complete configuration tree; every field has a default."""
    array: ArraySection = Field(default_factory=ArraySection)
    model: ModelSection = Field(default_factory=ModelSection)
    target: TargetSection = Field(default_factory=TargetSection)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sparse: SparseConfig = Field(default_factory=SparseConfig)
    benchmark: BenchmarkSection = Field(default_factory=BenchmarkSection)
    paths: PathsSection = Field(default_factory=PathsSection)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    threads: Optional[int] = Field(default=None, ge=1)

    def geometry(self) -> ArrayGeometry:
        return make_ula(self.array.num_elements)

    def layer_dims(self) -> List[int]:
        m = self.array.num_elements
        if self.model.hidden_dims is None:
            return default_layer_dims(m)
        return [4 * m + 1, *self.model.hidden_dims, 1]

    def skip_pairs(self) -> List[Tuple[int, int]]:
        if self.model.skip_pairs == "auto":
            return default_skip_pairs(self.layer_dims())
        return [tuple(p) for p in self.model.skip_pairs]

    def target_spec(self) -> TargetSpec:
        m_target = self.target.m_target or TARGET_ARRAY_FACTOR * self.array.num_elements
        return make_target_spec(m_target)

    def train_config(self) -> TrainConfig:
        """Training settings, inheriting the top-level seed unless train.seed is set."""
        if "seed" in self.train.model_fields_set:
            return self.train
        return self.train.model_copy(update={"seed": self.seed})

    def experiment(self) -> ExperimentSpec:
        """Resolve the benchmark section into a validated ExperimentSpec."""
        fields = self.benchmark.model_dump(exclude_none=True)
        name = fields.pop("preset", None)
        fields.setdefault("seed", self.seed)
        try:
            if name:
                return preset(name, **fields)
            return ExperimentSpec(**fields)
        except ValidationError as e:
            raise ConfigError(_describe(e, prefix="benchmark")) from e
        except ValueError as e:
            raise ConfigError(f"benchmark.preset: {e}") from e


# ============================================================================
# LOADING
# ============================================================================

def _describe(error: ValidationError, prefix: str = "") -> str:
    lines = []
    for item in error.errors():
        path = ".".join(str(p) for p in ((prefix,) if prefix else ()) + tuple(item["loc"]))
        lines.append(f"{path or '<root>'}: {item['msg']}")
    return "invalid configuration:\n  " + "\n  ".join(lines)


def _set_dotted(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError(f"{dotted}: '{key}' is not a section")
        node = child
    node[keys[-1]] = value


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Load a YAML run configuration and apply dotted-key overrides.

    Args:
        path: YAML file; None gives the all-defaults configuration
        overrides: e.g. {"train.max_iterations": 50}; None values are skipped

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: malformed YAML, unknown keys or invalid values
        OSError: the file cannot be read
    """
    data: Dict[str, Any] = {}
    if path is not None:
        with open(path, "r") as f:
            try:
                loaded = yaml.safe_load(f)
            except yaml.YAMLError as e:
                raise ConfigError(f"{path}: not valid YAML ({e})") from e
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping of sections")
        data = loaded

    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(data, dotted, value)

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_describe(e)) from e


def dump_config(cfg: RunConfig) -> str:
    """Fully expanded configuration as YAML (defaults and the resolved training seed included)."""
    data = cfg.model_dump(mode="json")
    data["train"] = cfg.train_config().model_dump(mode="json")
    return yaml.safe_dump(data, sort_keys=False)


def resolve_threads(flag: Optional[int] = None, cfg: Optional[RunConfig] = None) -> int:
    """
    Worker thread count: the flag, then the config, then SP2NET_THREADS, then
    the CPU count.
    """
    if flag is not None:
        if flag < 1:
            raise ConfigError(f"--threads must be positive, got {flag}")
        return flag
    if cfg is not None and cfg.threads is not None:
        return cfg.threads
    env_value = os.getenv(THREADS_ENV)
    if env_value:
        try:
            threads = int(env_value)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}={env_value!r} is not an integer")
        if threads < 1:
            raise ConfigError(f"{THREADS_ENV} must be positive, got {threads}")
        return threads
    return os.cpu_count() or 1
