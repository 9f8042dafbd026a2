"""Writer for preprocessed cases."""

import logging
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .errors import ConfigError, FileIOError
from .graph import WeightStore
from .schemas import LabelVolume
from .serialization import load_weights, save_weights

logger = logging.getLogger(__name__)

INPUT_FILE = "input.cbw"
TARGETS_FILE = "targets.cbw"
META_FILE = "meta.txt"


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(float(v)) if isinstance(v, float) else str(v) for v in value)
    return str(value)


class CaseWriter:
    """Writes one preprocessed case to a directory: input tensor, targets, metadata."""

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise FileIOError(f"cannot create {self.output_dir}: {exc}") from exc

    def write_case(self, x: np.ndarray, targets: Optional[LabelVolume], meta: Dict) -> Path:
        """Write a case. The tensor is stored under ``input``, labels under ``targets``."""
        save_weights(WeightStore({"input": x}), self.output_dir / INPUT_FILE)
        if targets is not None:
            save_weights(WeightStore({"targets": targets.data.astype(np.float32)}),
                         self.output_dir / TARGETS_FILE)

        lines = [f"{key} = {_format(value)}" for key, value in meta.items()]
        try:
            (self.output_dir / META_FILE).write_text("\n".join(lines) + "\n")
        except OSError as exc:
            raise FileIOError(f"cannot write {self.output_dir / META_FILE}: {exc}") from exc
        logger.info("wrote case to %s", self.output_dir)
        return self.output_dir


def read_case(case_dir: Path):
    """(input tensor, target labels as uint8 or None, metadata as strings)."""
    case_dir = Path(case_dir)
    x = load_weights(case_dir / INPUT_FILE)["input"]
    targets = None
    if (case_dir / TARGETS_FILE).exists():
        targets = load_weights(case_dir / TARGETS_FILE)["targets"].astype(np.uint8)
    meta = {}
    try:
        text = (case_dir / META_FILE).read_text()
    except OSError as exc:
        raise FileIOError(f"cannot read {case_dir / META_FILE}: {exc}") from exc
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise ConfigError(f"malformed metadata line {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        meta[key] = value
    return x, targets, meta
