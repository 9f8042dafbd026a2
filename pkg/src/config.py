"""
╔══════════════════════════════════════════════════════════════════════════════╗
║                          COBRA CONFIGURATION                                  ║
║                                                                               ║
║  Architecture, intensity windows and pipeline settings.                       ║
║  The reference architecture lives in configs/cobra-reference.                 ║
╚══════════════════════════════════════════════════════════════════════════════╝
"""

import os
import typing
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from core.errors import ConfigError, FileIOError

Shape3 = Tuple[int, int, int]

REFERENCE_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "cobra-reference"
THREADS_ENV = "COBRA_THREADS"

# Dataset label scheme after background split
AIR, BODY, LIVER, KIDNEY, SPLEEN, PANCREAS = range(6)
ORGAN_NAMES = {1: "liver", 2: "kidney", 3: "spleen", 4: "pancreas"}


# ══════════════════════════════════════════════════════════════════════════════
#  INTENSITY WINDOWS
# ══════════════════════════════════════════════════════════════════════════════

class WindowSpec(BaseModel):
    """Grey-level window: width W and level L in HU."""

    model_config = ConfigDict(frozen=True)

    width: float = Field(gt=0, description="Window width W (HU)")
    level: float = Field(description="Window level L (HU)")

    @property
    def lower(self) -> float:
        return self.level - self.width / 2.0

    @property
    def upper(self) -> float:
        return self.level + self.width / 2.0


WINDOW_WIDE = WindowSpec(width=400, level=50)
WINDOW_NARROW = WindowSpec(width=100, level=60)
INPUT_WINDOWS = (WINDOW_WIDE, WINDOW_NARROW)

BODY_THRESHOLD_HU = -200.0
AIR_HU = -1024.0


# ══════════════════════════════════════════════════════════════════════════════
#  ARCHITECTURE
# ══════════════════════════════════════════════════════════════════════════════

class ArchConfig(BaseModel):
    """
    COBRA network layout.

    Level 0 runs at the stem's half resolution; every further level halves
    again. Levels listed in ``wide_levels`` use the wide bottleneck factor.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    input_channels: int = Field(default=2, ge=1)
    class_count: int = Field(default=6, ge=2)
    levels: int = Field(default=4, ge=1, description="Resolution levels below the stem")
    widths: Tuple[int, ...] = Field(default=(32, 64, 144, 256), description="Channels per level")
    bottleneck_factor_default: int = Field(default=2, ge=1)
    bottleneck_factor_wide: int = Field(default=4, ge=1)
    wide_levels: Tuple[int, ...] = Field(default=(2, 3), description="Levels using the wide factor")
    input_shape: Shape3 = Field(default=(96, 192, 192))
    stem_kernel: int = Field(default=7, ge=1)
    kernel: int = Field(default=3, ge=1, description="Kernel extent of the double-conv layers")
    factorize: bool = Field(default=True, description="Split cubic kernels into three 1D kernels")

    @model_validator(mode="after")
    def _validate(self) -> "ArchConfig":
        if len(self.widths) != self.levels:
            raise ValueError(f"widths has {len(self.widths)} entries for {self.levels} levels")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be >= 1, got {self.widths}")
        bad = [l for l in self.wide_levels if not 0 <= l < self.levels]
        if bad:
            raise ValueError(f"wide_levels {bad} outside 0..{self.levels - 1}")
        for level, width in enumerate(self.widths):
            if width % self.factor(level):
                raise ValueError(f"bottleneck factor {self.factor(level)} does not divide width {width} "
                                 f"at level {level}")
        step = 2 ** self.levels
        if any(n % step for n in self.input_shape):
            raise ValueError(f"input shape {self.input_shape} not divisible by {step}")
        if self.kernel % 2 == 0 or self.stem_kernel % 2 == 0:
            raise ValueError("kernel extents must be odd")
        return self

    def factor(self, level: int) -> int:
        return self.bottleneck_factor_wide if level in self.wide_levels else self.bottleneck_factor_default

    def level_shape(self, level: int) -> Shape3:
        return tuple(n // 2 ** (level + 1) for n in self.input_shape)


def _is_tuple_field(model, key: str) -> bool:
    return typing.get_origin(model.model_fields[key].annotation) is tuple


def parse_key_values(text: str, model=ArchConfig) -> Dict[str, object]:
    """``key = value`` lines; ``#`` starts a comment; tuple values are comma separated."""
    values: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in model.model_fields:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if _is_tuple_field(model, key):
            values[key] = tuple(v.strip() for v in value.replace("x", ",").split(",") if v.strip())
        else:
            values[key] = value
    return values


def load_arch_config(path: Union[str, Path] = REFERENCE_CONFIG) -> ArchConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileIOError(f"cannot read config {path}: {exc}") from exc
    return ArchConfig(**parse_key_values(text))


def parse_shape(text: str) -> Shape3:
    """'96x192x192' -> (96, 192, 192)."""
    try:
        shape = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"malformed shape {text!r}, expected DxHxW") from None
    if len(shape) != 3 or min(shape) < 1:
        raise ConfigError(f"malformed shape {text!r}, expected DxHxW")
    return shape


# ══════════════════════════════════════════════════════════════════════════════
#  PIPELINE
# ══════════════════════════════════════════════════════════════════════════════

def default_threads() -> int:
    value = os.environ.get(THREADS_ENV)
    if not value:
        return 1
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}={value!r} is not an integer") from None


class PipelineConfig(BaseModel):
    """Settings shared by the command-line subcommands."""

    model_path: Optional[Path] = Field(default=None, description="Serialized .cbr model")
    threads: int = Field(default_factory=default_threads, ge=1, description="Worker threads per node")
    input_path: Optional[Path] = None
    output_path: Optional[Path] = None
    passes: Tuple[str, ...] = Field(default=("fold", "eliminate", "fuse"))
    nsd_tolerance: float = Field(default=1.0, gt=0, description="NSD tolerance in mm")

    def check_inputs(self) -> None:
        for path in (self.model_path, self.input_path):
            if path is not None and not Path(path).exists():
                raise FileIOError(f"no such file: {path}")
