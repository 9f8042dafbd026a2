"""Reference interpreter: evaluates a graph node by node with the oracle kernels."""

from typing import Dict, Union

import numpy as np

from . import kernels
from .errors import GraphError, ShapeMismatchError
from .graph import Graph, Node, OpKind, WeightStore

Feed = Union[np.ndarray, Dict[str, np.ndarray]]


def evaluate_node(node: Node, args, weights: WeightStore) -> np.ndarray:
    """Evaluate one node with the reference kernels (also used by constant folding)."""
    if node.op == OpKind.CONSTANT:
        return weights[node.weights[0]].copy()
    if node.op == OpKind.IDENTITY:
        return args[0].copy()
    if node.op == OpKind.RELU:
        return kernels.relu(args[0])
    if node.op == OpKind.ADD:
        return kernels.add(args[0], args[1])
    if node.op == OpKind.CONCAT:
        return kernels.concat_channels(args[0], args[1])
    w = weights[node.weights[0]]
    b = weights[node.weights[1]] if node.spec.bias else None
    if node.op == OpKind.CONV_TRANSPOSE:
        return kernels.conv_transpose3d_direct(args[0], w, b, node.spec)
    out = kernels.conv3d_direct(args[0], w, b, node.spec)
    if node.op == OpKind.CONV_RELU:
        np.maximum(out, 0.0, out=out)
    return out


def feeds_for(graph: Graph, x: Feed) -> Dict[str, np.ndarray]:
    if isinstance(x, np.ndarray):
        if len(graph.inputs) != 1:
            raise GraphError("graph has several inputs; pass a name -> array mapping")
        x = {next(iter(graph.inputs)): x}
    feeds = {}
    for name, shape in graph.inputs.items():
        if name not in x:
            raise GraphError(f"missing graph input {name!r}")
        if tuple(x[name].shape) != tuple(shape):
            raise ShapeMismatchError(f"input {name!r} has shape {x[name].shape}, graph expects {shape}")
        feeds[name] = np.asarray(x[name], dtype=np.float32)
    return feeds


def interpret(graph: Graph, weights: WeightStore, x: Feed) -> Dict[str, np.ndarray]:
    """Run every node in stored order; returns graph outputs by name."""
    values = feeds_for(graph, x)
    remaining = graph.consumers()
    pending = {name: len(users) for name, users in remaining.items()}
    keep = set(graph.outputs)
    for node in graph.nodes:
        values[node.id] = evaluate_node(node, [values[ref] for ref in node.inputs], weights)
        for ref in node.inputs:
            pending[ref] -= 1
            if pending[ref] == 0 and ref not in keep:
                del values[ref]
    return {name: values[name] for name in graph.outputs}


def interpret_single(graph: Graph, weights: WeightStore, x: Feed) -> np.ndarray:
    return interpret(graph, weights, x)[graph.outputs[0]]
