"""
Dense tensor kernels for 3D convolutional networks.

Tensors are float32 numpy arrays in (channels, depth, height, width) layout.
Convolution is cross-correlation (no kernel flip) with zero padding.

Two families share one contract:
    - ``*_direct`` kernels are the reference oracles: an explicit loop over
      input channels and kernel taps, vectorised only across output voxels.
    - ``conv3d_fast`` / ``conv_transpose3d`` turn every kernel tap into one
      matrix product over channels and split the output into a fixed set of
      slabs, so results do not depend on the number of worker threads.
"""

import logging
from concurrent.futures import Executor, ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ShapeMismatchError

logger = logging.getLogger(__name__)

Triple = Tuple[int, int, int]

# Output planes per slab task; fixed so the partition never depends on threads.
SLAB_DEPTH = 4
# Output channels per task in transpose convolution.
CHANNEL_CHUNK = 8


class ConvSpec(BaseModel):
    """Geometry of a (transpose) convolution layer."""

    model_config = ConfigDict(frozen=True)

    kernel: Triple = Field(default=(3, 3, 3), description="Kernel extent (kz, ky, kx)")
    stride: Triple = Field(default=(1, 1, 1), description="Stride (sz, sy, sx)")
    padding: Triple = Field(default=(0, 0, 0), description="Zero padding (pz, py, px)")
    in_channels: int = Field(default=1, ge=1)
    out_channels: int = Field(default=1, ge=1)
    bias: bool = True

    @model_validator(mode="after")
    def _validate(self) -> "ConvSpec":
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError(f"kernel {self.kernel} and stride {self.stride} must be >= 1")
        if min(self.padding) < 0:
            raise ValueError(f"padding {self.padding} must be >= 0")
        return self

    @classmethod
    def same(cls, kernel: Triple, in_channels: int, out_channels: int,
             stride: Triple = (1, 1, 1), bias: bool = True) -> "ConvSpec":
        """Spec with k//2 padding so only the stride changes spatial extents."""
        return cls(kernel=kernel, stride=stride, padding=tuple(k // 2 for k in kernel),
                   in_channels=in_channels, out_channels=out_channels, bias=bias)

    @property
    def kernel_volume(self) -> int:
        return int(np.prod(self.kernel))

    @property
    def is_pointwise(self) -> bool:
        return self.kernel == (1, 1, 1)

    def weight_shape(self, transpose: bool = False) -> Tuple[int, ...]:
        if transpose:
            return (self.in_channels, self.out_channels) + tuple(self.kernel)
        return (self.out_channels, self.in_channels) + tuple(self.kernel)

    def output_spatial(self, spatial: Sequence[int]) -> Triple:
        out = tuple((n + 2 * p - k) // s + 1
                    for n, k, s, p in zip(spatial, self.kernel, self.stride, self.padding))
        if min(out) < 1 or any(n + 2 * p < k for n, k, p in zip(spatial, self.kernel, self.padding)):
            raise ShapeMismatchError(f"conv output extent < 1 for input {tuple(spatial)} and {self}")
        return out

    def transpose_output_spatial(self, spatial: Sequence[int]) -> Triple:
        out = tuple((n - 1) * s - 2 * p + k
                    for n, k, s, p in zip(spatial, self.kernel, self.stride, self.padding))
        if min(out) < 1:
            raise ShapeMismatchError(f"transpose conv output extent < 1 for input {tuple(spatial)}")
        return out


# ══════════════════════════════════════════════════════════════════════════════
#  VALIDATION / SCHEDULING HELPERS
# ══════════════════════════════════════════════════════════════════════════════

def _check_operands(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray],
                    spec: ConvSpec, transpose: bool) -> None:
    if x.ndim != 4:
        raise ShapeMismatchError(f"input must be (C, D, H, W), got dims {x.shape}")
    if x.shape[0] != spec.in_channels:
        raise ShapeMismatchError(f"input has {x.shape[0]} channels, spec expects {spec.in_channels}")
    if tuple(w.shape) != spec.weight_shape(transpose):
        raise ShapeMismatchError(f"weight dims {w.shape} != {spec.weight_shape(transpose)}")
    if spec.bias:
        if b is None or tuple(b.shape) != (spec.out_channels,):
            raise ShapeMismatchError(f"bias must have dims ({spec.out_channels},)")
    elif b is not None:
        raise ShapeMismatchError("bias supplied for a spec without bias")


def _output(shape: Tuple[int, ...], out: Optional[np.ndarray]) -> np.ndarray:
    if out is None:
        return np.empty(shape, dtype=np.float32)
    if tuple(out.shape) != tuple(shape) or out.dtype != np.float32:
        raise ShapeMismatchError(f"destination {out.shape}/{out.dtype} != {shape}/float32")
    return out


def run_tasks(fn: Callable[[object], None], tasks: Iterable[object],
              threads: int = 1, pool: Optional[Executor] = None) -> None:
    """Run independent tasks; results must not depend on the worker count."""
    tasks = list(tasks)
    if pool is not None and len(tasks) > 1:
        for future in [pool.submit(fn, t) for t in tasks]:
            future.result()
    elif threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            for future in [executor.submit(fn, t) for t in tasks]:
                future.result()
    else:
        for t in tasks:
            fn(t)


def _slabs(depth: int) -> List[Tuple[int, int]]:
    return [(z, min(z + SLAB_DEPTH, depth)) for z in range(0, depth, SLAB_DEPTH)]


def _pad(x: np.ndarray, padding: Triple) -> np.ndarray:
    if not any(padding):
        return x
    return np.pad(x, ((0, 0),) + tuple((p, p) for p in padding))


def _window(xp: np.ndarray, tap: Triple, stride: Triple, start: Triple, count: Triple) -> np.ndarray:
    """Strided view of the padded input seen by one kernel tap."""
    idx = tuple(slice(t + s * o, t + s * (o + n - 1) + 1, s)
                for t, s, o, n in zip(tap, stride, start, count))
    return xp[(slice(None),) + idx]


def _taps(kernel: Triple) -> List[Triple]:
    return [(a, b, c) for a in range(kernel[0]) for b in range(kernel[1]) for c in range(kernel[2])]


# ══════════════════════════════════════════════════════════════════════════════
#  REFERENCE KERNELS
# ══════════════════════════════════════════════════════════════════════════════

def conv3d_direct(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], spec: ConvSpec) -> np.ndarray:
    """Reference cross-correlation; the oracle for every other convolution."""
    _check_operands(x, w, b, spec, transpose=False)
    spatial = spec.output_spatial(x.shape[1:])
    xp = _pad(x.astype(np.float32, copy=False), spec.padding)
    out = np.zeros((spec.out_channels,) + spatial, dtype=np.float32)
    for ci in range(spec.in_channels):
        for tap in _taps(spec.kernel):
            patch = _window(xp, tap, spec.stride, (0, 0, 0), spatial)[ci]
            out += w[(slice(None), ci) + tap].astype(np.float32)[:, None, None, None] * patch[None]
    if spec.bias:
        out += b.astype(np.float32)[:, None, None, None]
    return out


def conv_transpose3d_direct(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray],
                            spec: ConvSpec) -> np.ndarray:
    """Reference transpose convolution by scatter-add of every input voxel."""
    _check_operands(x, w, b, spec, transpose=True)
    spatial = spec.transpose_output_spatial(x.shape[1:])
    full = tuple((n - 1) * s + k for n, s, k in zip(x.shape[1:], spec.stride, spec.kernel))
    acc = np.zeros((spec.out_channels,) + full, dtype=np.float32)
    for ci in range(spec.in_channels):
        for tap in _taps(spec.kernel):
            target = _window(acc, tap, spec.stride, (0, 0, 0), x.shape[1:])
            target += w[(ci, slice(None)) + tap].astype(np.float32)[:, None, None, None] * x[ci][None]
    pz, py, px = spec.padding
    out = np.ascontiguousarray(acc[:, pz:pz + spatial[0], py:py + spatial[1], px:px + spatial[2]])
    if spec.bias:
        out += b.astype(np.float32)[:, None, None, None]
    return out


# ══════════════════════════════════════════════════════════════════════════════
#  OPTIMISED KERNELS
# ══════════════════════════════════════════════════════════════════════════════

def conv3d_fast(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], spec: ConvSpec,
                relu: bool = False, threads: int = 1, pool: Optional[Executor] = None,
                out: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Convolution as one channel matmul per kernel tap.

    Args:
        relu: apply max(0, .) in the same pass (fused conv-relu)
        threads: worker count when no pool is given
        pool: shared executor supplied by the engine
        out: preallocated (Cout, D', H', W') float32 destination
    """
    _check_operands(x, w, b, spec, transpose=False)
    spatial = spec.output_spatial(x.shape[1:])
    dest = _output((spec.out_channels,) + spatial, out)
    x = x.astype(np.float32, copy=False)
    bias = b.astype(np.float32)[:, None] if spec.bias else None

    if spec.is_pointwise and not any(spec.padding):
        _pointwise(x, w, bias, spec, spatial, dest, relu, threads, pool)
        return dest

    # Factorised kx1x1, 1xkx1 and 1x1xk kernels reduce to k taps; stride is folded
    # into the strided tap windows.
    xp = _pad(x, spec.padding)
    taps = _taps(spec.kernel)
    # (taps, Cout, Cin) so each tap's matrix is contiguous
    wt = np.ascontiguousarray(
        w.astype(np.float32).reshape(spec.out_channels, spec.in_channels, -1).transpose(2, 0, 1))
    _, ho, wo = spatial

    def slab(bounds: Tuple[int, int]) -> None:
        z0, z1 = bounds
        count = (z1 - z0, ho, wo)
        acc = None
        for i, tap in enumerate(taps):
            cols = _window(xp, tap, spec.stride, (z0, 0, 0), count).reshape(spec.in_channels, -1)
            prod = wt[i] @ cols
            if acc is None:
                acc = prod
            else:
                np.add(acc, prod, out=acc)
        if bias is not None:
            acc += bias
        if relu:
            np.maximum(acc, 0.0, out=acc)
        dest[:, z0:z1] = acc.reshape((spec.out_channels,) + count)

    run_tasks(slab, _slabs(spatial[0]), threads, pool)
    return dest


def _pointwise(x, w, bias, spec, spatial, dest, relu, threads, pool) -> None:
    sz, sy, sx = spec.stride
    matrix = w.astype(np.float32).reshape(spec.out_channels, spec.in_channels)
    _, ho, wo = spatial

    def slab(bounds: Tuple[int, int]) -> None:
        z0, z1 = bounds
        cols = x[:, z0 * sz:(z1 - 1) * sz + 1:sz, ::sy, ::sx][:, :, :ho, :wo].reshape(spec.in_channels, -1)
        acc = matrix @ cols
        if bias is not None:
            acc += bias
        if relu:
            np.maximum(acc, 0.0, out=acc)
        dest[:, z0:z1] = acc.reshape(spec.out_channels, z1 - z0, ho, wo)

    run_tasks(slab, _slabs(spatial[0]), threads, pool)


def conv_transpose3d(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], spec: ConvSpec,
                     relu: bool = False, threads: int = 1, pool: Optional[Executor] = None,
                     out: Optional[np.ndarray] = None) -> np.ndarray:
    """Transpose convolution (gradient of conv3d with respect to its input)."""
    _check_operands(x, w, b, spec, transpose=True)
    spatial = spec.transpose_output_spatial(x.shape[1:])
    dest = _output((spec.out_channels,) + spatial, out)
    full = tuple((n - 1) * s + k for n, s, k in zip(x.shape[1:], spec.stride, spec.kernel))
    cols = x.astype(np.float32, copy=False).reshape(spec.in_channels, -1)
    taps = _taps(spec.kernel)
    # (taps, Cout, Cin)
    wt = np.ascontiguousarray(
        w.astype(np.float32).reshape(spec.in_channels, spec.out_channels, -1).transpose(2, 1, 0))
    pz, py, px = spec.padding

    def chunk(bounds: Tuple[int, int]) -> None:
        c0, c1 = bounds
        acc = np.zeros((c1 - c0,) + full, dtype=np.float32)
        for i, tap in enumerate(taps):
            contrib = (wt[i, c0:c1] @ cols).reshape((c1 - c0,) + x.shape[1:])
            _window(acc, tap, spec.stride, (0, 0, 0), x.shape[1:])[...] += contrib
        res = acc[:, pz:pz + spatial[0], py:py + spatial[1], px:px + spatial[2]]
        if b is not None:
            res += b[c0:c1].astype(np.float32)[:, None, None, None]
        if relu:
            np.maximum(res, 0.0, out=res)
        dest[c0:c1] = res

    chunks = [(c, min(c + CHANNEL_CHUNK, spec.out_channels)) for c in range(0, spec.out_channels, CHANNEL_CHUNK)]
    run_tasks(chunk, chunks, threads, pool)
    return dest


# ══════════════════════════════════════════════════════════════════════════════
#  ELEMENTWISE / STRUCTURAL OPS
# ══════════════════════════════════════════════════════════════════════════════

def relu(x: np.ndarray, out: Optional[np.ndarray] = None) -> np.ndarray:
    dest = _output(x.shape, out)
    np.maximum(x, np.float32(0.0), out=dest)
    return dest


def add(x: np.ndarray, y: np.ndarray, out: Optional[np.ndarray] = None) -> np.ndarray:
    """Elementwise sum; ``y`` may broadcast (e.g. a per-channel (C,1,1,1) constant)."""
    try:
        shape = np.broadcast_shapes(x.shape, y.shape)
    except ValueError as exc:
        raise ShapeMismatchError(f"cannot add {x.shape} and {y.shape}") from exc
    if shape != x.shape and shape != y.shape:
        raise ShapeMismatchError(f"cannot add {x.shape} and {y.shape}")
    dest = _output(shape, out)
    np.add(x, y, out=dest)
    return dest


def concat_channels(x: np.ndarray, y: np.ndarray, out: Optional[np.ndarray] = None) -> np.ndarray:
    if x.shape[1:] != y.shape[1:]:
        raise ShapeMismatchError(f"concat spatial mismatch {x.shape} vs {y.shape}")
    dest = _output((x.shape[0] + y.shape[0],) + tuple(x.shape[1:]), out)
    dest[:x.shape[0]] = x
    dest[x.shape[0]:] = y
    return dest


# ══════════════════════════════════════════════════════════════════════════════
#  INITIALISATION
# ══════════════════════════════════════════════════════════════════════════════

def standard_normal(seed: int, count: int) -> np.ndarray:
    """Philox-keyed uniforms mapped to normals with Box-Muller."""
    gen = np.random.Generator(np.random.Philox(key=seed))
    half = (count + 1) // 2
    u1 = 1.0 - gen.random(half)  # (0, 1]
    u2 = gen.random(half)
    radius = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    return np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])[:count]


def he_normal_init(spec: ConvSpec, seed: int, transpose: bool = False) -> np.ndarray:
    """Normal(0, sqrt(2 / fan_in)) weights with fan_in = Cin * kz * ky * kx."""
    fan_in = spec.in_channels * spec.kernel_volume
    shape = spec.weight_shape(transpose)
    values = standard_normal(seed, int(np.prod(shape))) * np.sqrt(2.0 / fan_in)
    return values.astype(np.float32).reshape(shape)


def init_bias(spec: ConvSpec) -> Optional[np.ndarray]:
    return np.zeros(spec.out_channels, dtype=np.float32) if spec.bias else None
