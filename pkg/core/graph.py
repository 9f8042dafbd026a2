"""Computational graph IR: nodes, graphs, weight stores and shape inference."""

from collections import OrderedDict
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import GraphError, ShapeMismatchError
from .kernels import ConvSpec

TensorShape = Tuple[int, ...]


class OpKind(str, Enum):
    CONV = "conv"
    CONV_RELU = "conv_relu"
    CONV_TRANSPOSE = "conv_transpose"
    RELU = "relu"
    ADD = "add"
    CONCAT = "concat"
    CONSTANT = "constant"
    IDENTITY = "identity"


CONV_KINDS = (OpKind.CONV, OpKind.CONV_RELU, OpKind.CONV_TRANSPOSE)

_ARITY = {
    OpKind.CONV: 1,
    OpKind.CONV_RELU: 1,
    OpKind.CONV_TRANSPOSE: 1,
    OpKind.RELU: 1,
    OpKind.IDENTITY: 1,
    OpKind.ADD: 2,
    OpKind.CONCAT: 2,
    OpKind.CONSTANT: 0,
}


class Node(BaseModel):
    """One operation; its single output tensor is named after the node id."""

    model_config = ConfigDict(frozen=True)

    id: str
    op: OpKind
    inputs: List[str] = Field(default_factory=list)
    spec: Optional[ConvSpec] = None
    weights: List[str] = Field(default_factory=list)
    shape: Optional[TensorShape] = None  # constants only

    @model_validator(mode="after")
    def _validate(self) -> "Node":
        if len(self.inputs) != _ARITY[self.op]:
            raise ValueError(f"{self.op.value} node {self.id!r} takes {_ARITY[self.op]} inputs, got {len(self.inputs)}")
        if self.op in CONV_KINDS:
            if self.spec is None:
                raise ValueError(f"conv node {self.id!r} needs a ConvSpec")
            if len(self.weights) != (2 if self.spec.bias else 1):
                raise ValueError(f"conv node {self.id!r} weight refs do not match bias flag")
        elif self.op == OpKind.CONSTANT:
            if len(self.weights) != 1 or self.shape is None:
                raise ValueError(f"constant node {self.id!r} needs one weight ref and a shape")
        elif self.spec is not None or self.weights:
            raise ValueError(f"{self.op.value} node {self.id!r} carries no attributes")
        return self

    @property
    def is_transpose(self) -> bool:
        return self.op == OpKind.CONV_TRANSPOSE


class Graph(BaseModel):
    """
    Directed acyclic graph of nodes stored in topological order.

    Use ``Graph.build`` to construct: it sorts the nodes and verifies that
    every consumed tensor has exactly one producer or is a graph input.
    """

    model_config = ConfigDict(frozen=True)

    inputs: Dict[str, TensorShape]
    nodes: List[Node]
    outputs: List[str]

    @classmethod
    def build(cls, inputs: Dict[str, TensorShape], nodes: Iterable[Node], outputs: List[str]) -> "Graph":
        graph = cls(inputs=dict(inputs), nodes=toposort(inputs, list(nodes)), outputs=list(outputs))
        graph.verify()
        return graph

    def verify(self) -> None:
        seen = set(self.inputs)
        for node in self.nodes:
            if node.id in seen:
                raise GraphError(f"tensor {node.id!r} has more than one producer")
            for ref in node.inputs:
                if ref not in seen:
                    raise GraphError(f"node {node.id!r} consumes {ref!r} before it is produced")
            seen.add(node.id)
        for name in self.outputs:
            if name not in seen:
                raise GraphError(f"graph output {name!r} is never produced")

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise GraphError(f"no node {node_id!r}")

    def node_map(self) -> Dict[str, Node]:
        return {n.id: n for n in self.nodes}

    def consumers(self) -> Dict[str, List[str]]:
        users: Dict[str, List[str]] = {name: [] for name in self.inputs}
        for n in self.nodes:
            users.setdefault(n.id, [])
            for ref in n.inputs:
                users.setdefault(ref, []).append(n.id)
        return users

    def weight_refs(self) -> List[str]:
        return [w for n in self.nodes for w in n.weights]


def toposort(inputs: Dict[str, TensorShape], nodes: List[Node]) -> List[Node]:
    """Kahn's algorithm, stable with respect to the given node order."""
    by_id: Dict[str, Node] = OrderedDict()
    for n in nodes:
        if n.id in by_id or n.id in inputs:
            raise GraphError(f"tensor {n.id!r} has more than one producer")
        by_id[n.id] = n
    pending = {n.id: sum(1 for ref in n.inputs if ref not in inputs) for n in nodes}
    for n in nodes:
        for ref in n.inputs:
            if ref not in inputs and ref not in by_id:
                raise GraphError(f"node {n.id!r} consumes unknown tensor {ref!r}")
    users: Dict[str, List[str]] = {n.id: [] for n in nodes}
    for n in nodes:
        for ref in n.inputs:
            if ref in by_id:
                users[ref].append(n.id)

    ordered: List[Node] = []
    ready = [n.id for n in nodes if pending[n.id] == 0]
    while ready:
        current = ready.pop(0)
        ordered.append(by_id[current])
        for user in users[current]:
            pending[user] -= 1
            if pending[user] == 0:
                ready.append(user)
    if len(ordered) != len(nodes):
        raise GraphError("graph contains a cycle")
    return ordered


class WeightStore:
    """Named float32 tensors referenced by graph nodes."""

    def __init__(self, entries: Optional[Dict[str, np.ndarray]] = None):
        self._entries: Dict[str, np.ndarray] = OrderedDict()
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._entries:
            raise GraphError(f"duplicate weight name {name!r}")
        array = np.ascontiguousarray(value, dtype=np.float32)
        if array.ndim == 0:
            array = array.reshape(1)
        self._entries[name] = array

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._entries[name]
        except KeyError:
            raise GraphError(f"missing weight {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> List[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def subset(self, names: Iterable[str]) -> "WeightStore":
        return WeightStore({n: self[n] for n in names})

    def copy(self) -> "WeightStore":
        return WeightStore(dict(self._entries))

    def total_elements(self) -> int:
        return int(sum(v.size for v in self._entries.values()))

    def fresh_name(self, stem: str) -> str:
        name, i = stem, 0
        while name in self._entries:
            i += 1
            name = f"{stem}.{i}"
        return name

    def equals(self, other: "WeightStore") -> bool:
        if self.names() != other.names():
            return False
        return all(a.shape == other[n].shape and a.tobytes() == other[n].tobytes() for n, a in self.items())


def check_weights(graph: Graph, weights: WeightStore) -> None:
    """Every weight ref resolves and matches its node's declared shape."""
    for node in graph.nodes:
        for ref in node.weights:
            if ref not in weights:
                raise GraphError(f"node {node.id!r} references missing weight {ref!r}")
        if node.op in CONV_KINDS:
            expected = node.spec.weight_shape(node.is_transpose)
            if weights[node.weights[0]].shape != expected:
                raise GraphError(f"weight {node.weights[0]!r} has dims {weights[node.weights[0]].shape}, expected {expected}")
            if node.spec.bias and weights[node.weights[1]].shape != (node.spec.out_channels,):
                raise GraphError(f"bias {node.weights[1]!r} has wrong dims")
        elif node.op == OpKind.CONSTANT and weights[node.weights[0]].shape != tuple(node.shape):
            raise GraphError(f"constant {node.id!r} shape does not match weight {node.weights[0]!r}")


def infer_shapes(graph: Graph) -> Dict[str, TensorShape]:
    """Walk the stored topological order and derive every tensor shape."""
    shapes: Dict[str, TensorShape] = {name: tuple(s) for name, s in graph.inputs.items()}
    for node in graph.nodes:
        ins = [shapes[ref] for ref in node.inputs]
        try:
            shapes[node.id] = _node_shape(node, ins)
        except ShapeMismatchError as exc:
            raise GraphError(f"shape inference failed at {node.id!r}: {exc}") from exc
    return shapes


def _node_shape(node: Node, ins: List[TensorShape]) -> TensorShape:
    if node.op == OpKind.CONSTANT:
        return tuple(node.shape)
    if node.op in (OpKind.RELU, OpKind.IDENTITY):
        return ins[0]
    if node.op in CONV_KINDS:
        x = ins[0]
        if len(x) != 4 or x[0] != node.spec.in_channels:
            raise ShapeMismatchError(f"input {x} does not match {node.spec.in_channels} input channels")
        spatial = (node.spec.transpose_output_spatial(x[1:]) if node.is_transpose
                   else node.spec.output_spatial(x[1:]))
        return (node.spec.out_channels,) + tuple(spatial)
    if node.op == OpKind.ADD:
        try:
            shape = tuple(np.broadcast_shapes(ins[0], ins[1]))
        except ValueError as exc:
            raise ShapeMismatchError(f"cannot add {ins[0]} and {ins[1]}") from exc
        if shape not in (tuple(ins[0]), tuple(ins[1])):
            raise ShapeMismatchError(f"cannot add {ins[0]} and {ins[1]}")
        return shape
    if node.op == OpKind.CONCAT:
        a, b = ins
        if len(a) != len(b) or a[1:] != b[1:]:
            raise ShapeMismatchError(f"concat spatial mismatch {a} vs {b}")
        return (a[0] + b[0],) + tuple(a[1:])
    raise GraphError(f"unknown op {node.op}")
