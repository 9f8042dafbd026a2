"""Pydantic schemas for volumetric data."""

from typing import Any, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

Shape3 = Tuple[int, int, int]
Vec3 = Tuple[float, float, float]


def _coerce_geometry(values: dict) -> dict:
    for key in ("spacing", "origin"):
        if key in values and values[key] is not None:
            values[key] = tuple(float(v) for v in values[key])
    return values


class _Geometry(BaseModel):
    """Voxel grid geometry in canonical (z, y, x) order."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: Any
    spacing: Vec3 = (1.0, 1.0, 1.0)  # mm per voxel
    origin: Vec3 = (0.0, 0.0, 0.0)  # mm

    @property
    def shape(self) -> Shape3:
        return tuple(int(s) for s in self.data.shape)

    def _check_geometry(self) -> None:
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got {self.data.ndim}D")
        if min(self.data.shape) < 1:
            raise ValueError(f"all shape components must be >= 1, got {self.data.shape}")
        if any(not np.isfinite(s) or s <= 0 for s in self.spacing):
            raise ValueError(f"all spacing components must be > 0, got {self.spacing}")

    def same_geometry(self, other: "_Geometry", atol: float = 1e-6) -> bool:
        return self.shape == other.shape and np.allclose(self.spacing, other.spacing, rtol=0, atol=atol)


class Volume(_Geometry):
    """A CT scan: 32-bit real intensities in HU."""

    @model_validator(mode="before")
    @classmethod
    def _coerce(cls, values: Any) -> Any:
        if isinstance(values, dict) and "data" in values:
            values = dict(values)
            _coerce_geometry(values)
            values["data"] = np.ascontiguousarray(values["data"], dtype=np.float32)
        return values

    @model_validator(mode="after")
    def _validate(self) -> "Volume":
        self._check_geometry()
        return self

    def with_data(self, data: np.ndarray, spacing: Vec3 = None, origin: Vec3 = None) -> "Volume":
        return Volume(
            data=data,
            spacing=self.spacing if spacing is None else spacing,
            origin=self.origin if origin is None else origin,
        )


class LabelVolume(_Geometry):
    """An integer class map sharing Volume geometry."""

    class_count: int = Field(default=256, ge=1, le=256, description="Declared class count K")

    @model_validator(mode="before")
    @classmethod
    def _coerce(cls, values: Any) -> Any:
        if isinstance(values, dict) and "data" in values:
            values = dict(values)
            _coerce_geometry(values)
            data = np.asarray(values["data"])
            if not np.issubdtype(data.dtype, np.integer) and data.dtype != np.bool_:
                raise ValueError(f"label data must be integer typed, got {data.dtype}")
            if data.size and (data.min() < 0 or data.max() > 255):
                raise ValueError("label values must fit in uint8")
            values["data"] = np.ascontiguousarray(data, dtype=np.uint8)
        return values

    @model_validator(mode="after")
    def _validate(self) -> "LabelVolume":
        self._check_geometry()
        top = int(self.data.max())
        if top >= self.class_count:
            raise ValueError(f"label value {top} outside declared class range 0..{self.class_count - 1}")
        return self

    def labels(self) -> set:
        return set(np.unique(self.data).tolist())

    def with_data(self, data: np.ndarray, class_count: int = None, spacing: Vec3 = None,
                  origin: Vec3 = None) -> "LabelVolume":
        return LabelVolume(
            data=data,
            class_count=self.class_count if class_count is None else class_count,
            spacing=self.spacing if spacing is None else spacing,
            origin=self.origin if origin is None else origin,
        )
