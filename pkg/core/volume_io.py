"""
NIfTI-1 reading and writing for CT volumes and label maps.

Only single-file images (magic ``n+1``) with 3 spatial dimensions and an
int16, uint8 or float32 payload are accepted. Data is returned in canonical
(z, y, x) order with x fastest-varying; spacing comes from ``pixdim[1..3]``
and the origin from the qform offsets. Orientation beyond spacing is ignored.
"""

import gzip
import io
import logging
import struct
from pathlib import Path
from typing import Union

import nibabel as nib
import numpy as np

from .errors import LabelTypeError, NiftiFormatError, FileIOError
from .schemas import LabelVolume, Volume

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

HEADER_SIZE = 348
NIFTI_MAGIC = b"n+1\x00"
GZIP_MAGIC = b"\x1f\x8b"
DESCRIP = b"cobra-engine"

# NIfTI datatype codes accepted by the readers
SUPPORTED_DATATYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    16: np.dtype("<f4"),
}
INTEGER_DATATYPES = {2, 4}


def _read_raw(path: PathLike) -> bytes:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FileIOError(f"cannot read {path}: {exc}") from exc
    if raw[:2] == GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise NiftiFormatError(f"{path}: corrupt gzip container: {exc}") from exc
    return raw


def _open_image(path: PathLike) -> nib.Nifti1Image:
    """Validate the raw header and hand the bytes to nibabel."""
    raw = _read_raw(path)
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[344:348] != NIFTI_MAGIC:
        raise NiftiFormatError(f"{path}: malformed header, magic {raw[344:348]!r} is not 'n+1\\0'")
    (sizeof_hdr,) = struct.unpack("<i", raw[:4])
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiFormatError(f"{path}: sizeof_hdr is {sizeof_hdr}, expected little-endian {HEADER_SIZE}")

    header = nib.Nifti1Header.from_fileobj(io.BytesIO(raw[:HEADER_SIZE]), check=False)
    code = int(header["datatype"])
    if code not in SUPPORTED_DATATYPES:
        raise NiftiFormatError(f"{path}: unsupported NIfTI datatype code {code}")
    dims = header["dim"]
    if int(dims[0]) != 3:
        raise NiftiFormatError(f"{path}: expected 3 dimensions, header declares {int(dims[0])}")
    shape = tuple(int(d) for d in dims[1:4])
    if min(shape) < 1:
        raise NiftiFormatError(f"{path}: invalid extents {shape}")
    offset = int(header["vox_offset"])
    if offset < 352:
        raise NiftiFormatError(f"{path}: vox_offset {offset} < 352")
    needed = offset + int(np.prod(shape)) * SUPPORTED_DATATYPES[code].itemsize
    if len(raw) < needed:
        raise NiftiFormatError(f"{path}: truncated payload ({len(raw)} of {needed} bytes)")

    return nib.Nifti1Image.from_bytes(raw)


def _geometry(img: nib.Nifti1Image):
    header = img.header
    zooms = [float(z) for z in header["pixdim"][1:4]]
    origin = [float(header["qoffset_x"]), float(header["qoffset_y"]), float(header["qoffset_z"])]
    return tuple(reversed(zooms)), tuple(reversed(origin))


def _to_zyx(array: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(array, (2, 1, 0)))


def _build_image(data_zyx: np.ndarray, spacing, origin, dtype) -> nib.Nifti1Image:
    sz, sy, sx = spacing
    oz, oy, ox = origin
    affine = np.array([
        [sx, 0.0, 0.0, ox],
        [0.0, sy, 0.0, oy],
        [0.0, 0.0, sz, oz],
        [0.0, 0.0, 0.0, 1.0],
    ])
    img = nib.Nifti1Image(np.transpose(data_zyx, (2, 1, 0)).astype(dtype), affine)
    header = img.header
    header.set_data_dtype(dtype)
    header.set_zooms((sx, sy, sz))
    header["descrip"] = DESCRIP
    img.set_qform(affine, code=1)
    img.set_sform(affine, code=1)
    return img


def _save(img: nib.Nifti1Image, path: PathLike) -> None:
    try:
        nib.save(img, str(path))
    except OSError as exc:
        raise FileIOError(f"cannot write {path}: {exc}") from exc
    logger.debug("wrote %s", path)


# ══════════════════════════════════════════════════════════════════════════════
#  PUBLIC API
# ══════════════════════════════════════════════════════════════════════════════

def read_volume(path: PathLike) -> Volume:
    """Read a CT scan, applying scl_slope/scl_inter, as float32 HU."""
    img = _open_image(path)
    data = np.asarray(img.dataobj).astype(np.float32)
    spacing, origin = _geometry(img)
    return Volume(data=_to_zyx(data), spacing=spacing, origin=origin)


def write_volume(v: Volume, path: PathLike) -> None:
    """Write a Volume as a float32 NIfTI-1 file (gzip when the name ends in .gz)."""
    _save(_build_image(v.data, v.spacing, v.origin, np.float32), path)


def read_labels(path: PathLike, class_count: int = 256) -> LabelVolume:
    """Read an integer label map; no intensity scaling is applied."""
    img = _open_image(path)
    code = int(img.header["datatype"])
    if code not in INTEGER_DATATYPES:
        raise LabelTypeError(f"{path}: label maps must be integer typed, datatype code is {code}")
    data = np.asarray(img.dataobj.get_unscaled())
    if data.size and (int(data.min()) < 0 or int(data.max()) > 255):
        raise LabelTypeError(f"{path}: label values outside 0..255")
    spacing, origin = _geometry(img)
    return LabelVolume(data=_to_zyx(data.astype(np.uint8)), class_count=class_count,
                       spacing=spacing, origin=origin)


def write_labels(lv: LabelVolume, path: PathLike) -> None:
    """Write a LabelVolume as a uint8 NIfTI-1 file."""
    _save(_build_image(lv.data, lv.spacing, lv.origin, np.uint8), path)
