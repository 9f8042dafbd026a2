"""
Binary containers for graphs and weights.

Model file (``.cbr``), little-endian throughout::

    "CBRG" | version u16 | graph section | weight section | crc32 u32

Weight file (``.cbw``)::

    "CBRW" | version u16 | weight section | crc32 u32

The graph section is a u32 byte length followed by length-prefixed records:
one header record (graph inputs and outputs) then a u32 node count and one
record per node, each record being ``u32 length | UTF-8 JSON``. The weight
section is a u32 entry count followed by, per entry::

    u16 name length | name | u8 dtype (1 = f32) | u8 ndim | ndim x u32 dims |
    u64 payload length | payload

The CRC-32 (IEEE polynomial) covers every preceding byte.
"""

import json
import logging
import struct
import zlib
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .errors import ChecksumError, FileIOError, GraphError, SerializationError, VersionError
from .graph import Graph, Node, WeightStore, check_weights

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MODEL_MAGIC = b"CBRG"
WEIGHTS_MAGIC = b"CBRW"
FORMAT_VERSION = 1
DTYPE_F32 = 1


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.offset = offset

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise SerializationError("unexpected end of container")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def record(self) -> dict:
        (length,) = self.unpack("<I")
        try:
            return json.loads(self.take(length).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SerializationError(f"corrupt record: {exc}") from exc


def _record(payload: Union[str, bytes]) -> bytes:
    raw = payload.encode("utf-8") if isinstance(payload, str) else payload
    return struct.pack("<I", len(raw)) + raw


def _encode_graph(graph: Graph) -> bytes:
    header = json.dumps({
        "inputs": [[name, list(shape)] for name, shape in graph.inputs.items()],
        "outputs": list(graph.outputs),
    }, separators=(",", ":"))
    body = _record(header) + struct.pack("<I", len(graph.nodes))
    body += b"".join(_record(node.model_dump_json()) for node in graph.nodes)
    return struct.pack("<I", len(body)) + body


def _decode_graph(reader: _Reader) -> Graph:
    (length,) = reader.unpack("<I")
    section = _Reader(reader.take(length))
    header = section.record()
    (count,) = section.unpack("<I")
    nodes = []
    for _ in range(count):
        (size,) = section.unpack("<I")
        try:
            nodes.append(Node.model_validate_json(section.take(size)))
        except ValueError as exc:
            raise SerializationError(f"invalid node record: {exc}") from exc
    inputs = {name: tuple(shape) for name, shape in header["inputs"]}
    return Graph.build(inputs, nodes, header["outputs"])


def _encode_weights(weights: WeightStore) -> bytes:
    parts = [struct.pack("<I", len(weights))]
    for name, array in weights.items():
        raw_name = name.encode("utf-8")
        payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", DTYPE_F32, array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(struct.pack("<Q", len(payload)) + payload)
    return b"".join(parts)


def _decode_weights(reader: _Reader) -> WeightStore:
    (count,) = reader.unpack("<I")
    store = WeightStore()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        dtype, ndim = reader.unpack("<BB")
        if dtype != DTYPE_F32:
            raise SerializationError(f"weight {name!r}: unsupported dtype code {dtype}")
        dims = reader.unpack(f"<{ndim}I")
        (nbytes,) = reader.unpack("<Q")
        if nbytes != int(np.prod(dims)) * 4:
            raise SerializationError(f"weight {name!r}: payload length {nbytes} does not match dims {dims}")
        store.add(name, np.frombuffer(reader.take(nbytes), dtype="<f4").reshape(dims))
    return store


def _seal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _open(data: bytes, magic: bytes) -> _Reader:
    if len(data) < 10 or data[:4] != magic:
        raise SerializationError(f"not a {magic.decode()} container")
    body, (stored,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise ChecksumError("CRC-32 mismatch")
    (version,) = struct.unpack("<H", body[4:6])
    if version != FORMAT_VERSION:
        raise VersionError(f"container version {version}, reader supports {FORMAT_VERSION}")
    return _Reader(body, 6)


def _write(path: PathLike, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise FileIOError(f"cannot write {path}: {exc}") from exc
    logger.debug("wrote %d bytes to %s", len(data), path)


def _read(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FileIOError(f"cannot read {path}: {exc}") from exc


# ══════════════════════════════════════════════════════════════════════════════
#  PUBLIC API
# ══════════════════════════════════════════════════════════════════════════════

def model_to_bytes(graph: Graph, weights: WeightStore) -> bytes:
    check_weights(graph, weights)
    body = MODEL_MAGIC + struct.pack("<H", FORMAT_VERSION) + _encode_graph(graph) + _encode_weights(weights)
    return _seal(body)


def model_from_bytes(data: bytes) -> Tuple[Graph, WeightStore]:
    reader = _open(data, MODEL_MAGIC)
    graph = _decode_graph(reader)
    weights = _decode_weights(reader)
    if reader.offset != len(reader.data):
        raise SerializationError("trailing bytes after weight section")
    try:
        check_weights(graph, weights)
    except GraphError as exc:
        raise SerializationError(f"dangling weight reference: {exc}") from exc
    return graph, weights


def serialize(graph: Graph, weights: WeightStore, path: PathLike) -> None:
    _write(path, model_to_bytes(graph, weights))


def deserialize(path: PathLike) -> Tuple[Graph, WeightStore]:
    return model_from_bytes(_read(path))


def save_weights(weights: WeightStore, path: PathLike) -> None:
    _write(path, _seal(WEIGHTS_MAGIC + struct.pack("<H", FORMAT_VERSION) + _encode_weights(weights)))


def load_weights(path: PathLike) -> WeightStore:
    reader = _open(_read(path), WEIGHTS_MAGIC)
    store = _decode_weights(reader)
    if reader.offset != len(reader.data):
        raise SerializationError("trailing bytes after weight section")
    return store
