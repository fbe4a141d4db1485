"""
TensorFact - Configuration
"""

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from dotenv import load_dotenv

from .errors import ConfigError
from .utils import parse_bool, parse_optional_int, text_digest

BASE_DIR = Path(__file__).resolve().parent.parent
CONFIG_DIR = BASE_DIR / "configs"
REFERENCE_CONFIG = CONFIG_DIR / "reference.cfg"

# Published protocol constants
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
PLATEAU_THRESHOLD = 1e-8
LEAKY_SLOPE = 0.1
OBJECTNESS_THRESHOLD = 0.5
MAP50_THRESHOLDS = (0.5,)
MAP50_95_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class Settings:
    """Process-level settings read from the environment."""

    out_dir: Path
    log_level: str
    n_jobs: int


def get_settings(env_file: Optional[Union[str, Path]] = None) -> Settings:
    """
    Load process settings, honouring a ``.env`` file when present.

    Args:
        env_file: Optional explicit dotenv path

    Returns:
        Settings: Resolved settings
    """
    load_dotenv(env_file, override=False)
    try:
        n_jobs = int(os.environ.get("TENSORFACT_N_JOBS", "1"))
    except ValueError as e:
        raise ConfigError(f"TENSORFACT_N_JOBS must be an integer: {e}") from e
    return Settings(
        out_dir=Path(os.environ.get("TENSORFACT_OUT_DIR", "runs")),
        log_level=os.environ.get("TENSORFACT_LOG_LEVEL", "WARNING").upper(),
        n_jobs=n_jobs,
    )


@dataclass(frozen=True)
class TrainConfig:
    """
    Experiment configuration.

    Defaults are the published protocol values; ``TrainConfig.reference()``
    is the desk-scale variant used when no config file is given.
    """

    alpha: float = 0.8
    delta_ratio: float = 1.0 / 9.0
    omega_c: float = 0.01
    p_norm: Optional[int] = None
    lr_phase1: float = 1e-5
    lr_phase2: float = 1e-3
    epochs: int = 200
    epochs_phase1: int = 200
    batch_size: int = 40
    accum_steps: int = 2
    patience: int = 10
    sched_factor: float = 0.1
    seed: int = 0
    canvas: int = 128
    classes: int = 3
    train_frac_b: float = 0.01
    n_train_a: int = 4129
    n_val: int = 1013
    n_pool_b: int = 5000
    train_head_phase2: bool = True
    lc_all_layers: bool = True
    anchors_k: int = 3

    @classmethod
    def reference(cls) -> "TrainConfig":
        """Desk-scale reference configuration (from-scratch phase 1)."""
        return cls(
            lr_phase1=1e-3,
            epochs=60,
            epochs_phase1=10,
            batch_size=8,
            n_train_a=1000,
            n_val=100,
        )

    def with_overrides(self, **changes) -> "TrainConfig":
        config = replace(self, **changes)
        is_valid, errors = validate_config(config)
        if not is_valid:
            raise ConfigError("; ".join(errors))
        return config

    @property
    def n_train_b(self) -> int:
        """Number of scarce modality-B training images drawn from the pool."""
        return max(1, int(self.n_pool_b * self.train_frac_b))

    def to_text(self) -> str:
        """Canonical ``key = value`` text, keys sorted."""
        lines = []
        for name in sorted(f.name for f in fields(self)):
            value = getattr(self, name)
            if value is None:
                text = "none"
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = repr(value)
            lines.append(f"{name} = {text}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return text_digest(self.to_text())


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if key == "p_norm":
        return parse_optional_int(raw)
    if kind in (bool, "bool"):
        return parse_bool(raw)
    if kind in (int, "int"):
        return int(raw)
    return float(raw)


def validate_config(config: TrainConfig) -> Tuple[bool, List[str]]:
    """
    Validate a configuration.

    Args:
        config: Configuration to check

    Returns:
        tuple: (is_valid, error_messages)
    """
    errors = []
    if not 0.0 < config.alpha <= 1.0:
        errors.append(f"alpha must be in (0, 1], got {config.alpha}")
    if config.delta_ratio <= 0:
        errors.append(f"delta_ratio must be positive, got {config.delta_ratio}")
    if config.omega_c < 0:
        errors.append(f"omega_c must be >= 0, got {config.omega_c}")
    if config.p_norm not in (None, 1, 2):
        errors.append(f"p_norm must be 1, 2 or none, got {config.p_norm}")
    for key in ("lr_phase1", "lr_phase2"):
        if getattr(config, key) < 0:
            errors.append(f"{key} must be >= 0")
    for key in ("epochs", "epochs_phase1", "batch_size", "accum_steps", "patience",
                "classes", "n_train_a", "n_val", "n_pool_b", "anchors_k"):
        if getattr(config, key) < 1:
            errors.append(f"{key} must be >= 1, got {getattr(config, key)}")
    if not 0.0 < config.sched_factor <= 1.0:
        errors.append(f"sched_factor must be in (0, 1], got {config.sched_factor}")
    if not 0.0 < config.train_frac_b <= 1.0:
        errors.append(f"train_frac_b must be in (0, 1], got {config.train_frac_b}")
    if config.canvas < 16 or config.canvas % 8 != 0:
        errors.append(f"canvas must be a multiple of 8 and >= 16, got {config.canvas}")
    return len(errors) == 0, errors


def parse_config_text(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """
    Parse flat ``key = value`` text on top of a base configuration.

    Args:
        text: Config file contents
        base: Configuration supplying values for absent keys

    Returns:
        TrainConfig: Parsed and validated configuration

    Raises:
        ConfigError: On unknown keys, malformed lines or invalid values
    """
    base = base or TrainConfig()
    values: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _convert(key, raw)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {raw!r}") from e
    return base.with_overrides(**values)


def load_config(path: Optional[Union[str, Path]] = None) -> TrainConfig:
    """
    Load a configuration file; without a path, the reference configuration.

    Args:
        path: Config file path

    Returns:
        TrainConfig: Loaded configuration
    """
    if path is None:
        return TrainConfig.reference()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))
