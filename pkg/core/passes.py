"""
Graph optimisation passes: constant folding, redundant node elimination and
node fusion, plus a manager that runs them to a fixpoint.

Every pass maps ``(Graph, WeightStore) -> (Graph, WeightStore)`` and returns
new objects; inputs are never mutated. Output names and shapes are preserved.
"""

import logging
from abc import ABC, abstractmethod
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .graph import Graph, Node, OpKind, WeightStore, infer_shapes
from .interpreter import evaluate_node

logger = logging.getLogger(__name__)

Model = Tuple[Graph, WeightStore]

DEFAULT_PASSES = ("fold", "eliminate", "fuse")
MAX_ITERATIONS = 8


class GraphPass(ABC):
    """Base class for graph rewrites. Implement rewrite()."""

    name: str = "pass"

    @abstractmethod
    def rewrite(self, graph: Graph, weights: WeightStore) -> Model:
        """Return the rewritten graph and the weights it references."""
        pass

    def __call__(self, graph: Graph, weights: WeightStore) -> Model:
        new_graph, new_weights = self.rewrite(graph, weights)
        new_graph.verify()
        infer_shapes(new_graph)
        logger.debug("%s: %d -> %d nodes", self.name, len(graph.nodes), len(new_graph.nodes))
        return new_graph, _referenced(new_graph, new_weights)


def _referenced(graph: Graph, weights: WeightStore) -> WeightStore:
    refs = set(graph.weight_refs())
    return weights.subset([n for n in weights.names() if n in refs])


def _use_counts(nodes: Sequence[Node], outputs: Sequence[str]) -> Dict[str, int]:
    counts: Dict[str, int] = {}
    for n in nodes:
        for ref in n.inputs:
            counts[ref] = counts.get(ref, 0) + 1
    for name in outputs:
        counts[name] = counts.get(name, 0) + 1
    return counts


# ══════════════════════════════════════════════════════════════════════════════
#  CONSTANT FOLDING
# ══════════════════════════════════════════════════════════════════════════════

class FoldConstants(GraphPass):
    """Evaluate nodes whose inputs are all constants and replace them by constants."""

    name = "fold"

    def rewrite(self, graph: Graph, weights: WeightStore) -> Model:
        weights = weights.copy()
        nodes: "OrderedDict[str, Node]" = OrderedDict((n.id, n) for n in graph.nodes)
        absorbed: Set[str] = set()
        for node in graph.nodes:
            if not node.inputs or not all(nodes.get(ref) is not None and nodes[ref].op == OpKind.CONSTANT
                                          for ref in node.inputs):
                continue
            args = [weights[nodes[ref].weights[0]] for ref in node.inputs]
            value = evaluate_node(node, args, weights)
            name = weights.fresh_name(f"{node.id}.folded")
            weights.add(name, value)
            nodes[node.id] = Node(id=node.id, op=OpKind.CONSTANT, weights=[name], shape=tuple(value.shape))
            absorbed.update(node.inputs)

        # drop constants whose every consumer was folded away
        counts = _use_counts(list(nodes.values()), graph.outputs)
        for ref in absorbed:
            if counts.get(ref, 0) == 0:
                del nodes[ref]
        return Graph.build(graph.inputs, nodes.values(), graph.outputs), weights


# ══════════════════════════════════════════════════════════════════════════════
#  REDUNDANT NODE ELIMINATION
# ══════════════════════════════════════════════════════════════════════════════

class EliminateRedundant(GraphPass):
    """Splice out identity nodes and remove nodes unreachable from any output."""

    name = "eliminate"

    def rewrite(self, graph: Graph, weights: WeightStore) -> Model:
        outputs = set(graph.outputs)
        alias: Dict[str, str] = {}
        for node in graph.nodes:
            if node.op == OpKind.IDENTITY and node.id not in outputs:
                alias[node.id] = alias.get(node.inputs[0], node.inputs[0])

        kept: List[Node] = []
        for node in graph.nodes:
            if node.id in alias:
                continue
            if any(ref in alias for ref in node.inputs):
                node = node.model_copy(update={"inputs": [alias.get(ref, ref) for ref in node.inputs]})
            kept.append(node)

        by_id = {n.id: n for n in kept}
        live: Set[str] = set()
        stack = [name for name in graph.outputs if name in by_id]
        while stack:
            current = stack.pop()
            if current in live:
                continue
            live.add(current)
            stack.extend(ref for ref in by_id[current].inputs if ref in by_id)
        kept = [n for n in kept if n.id in live]
        return Graph.build(graph.inputs, kept, graph.outputs), weights


# ══════════════════════════════════════════════════════════════════════════════
#  NODE FUSION
# ══════════════════════════════════════════════════════════════════════════════

class FuseNodes(GraphPass):
    """
    Pattern rewrites:
        conv -> add(per-channel constant)  =>  biased conv
        conv -> relu                       =>  conv_relu
    The fused node takes the id of the node it replaces downstream.
    """

    name = "fuse"

    def rewrite(self, graph: Graph, weights: WeightStore) -> Model:
        weights = weights.copy()
        nodes: "OrderedDict[str, Node]" = OrderedDict((n.id, n) for n in graph.nodes)
        changed = True
        while changed:
            changed = False
            counts = _use_counts(list(nodes.values()), graph.outputs)
            for node in list(nodes.values()):
                fused = self._fuse_bias(node, nodes, counts, weights) or self._fuse_relu(node, nodes, counts)
                if fused is not None:
                    changed = True
                    break
        return Graph.build(graph.inputs, nodes.values(), graph.outputs), weights

    @staticmethod
    def _sole_conv_producer(ref: str, nodes, counts, kinds) -> Optional[Node]:
        producer = nodes.get(ref)
        if producer is None or producer.op not in kinds or counts.get(ref, 0) != 1:
            return None
        return producer

    def _fuse_bias(self, node: Node, nodes, counts, weights: WeightStore) -> Optional[Node]:
        if node.op != OpKind.ADD:
            return None
        for conv_ref, const_ref in (node.inputs, node.inputs[::-1]):
            conv = self._sole_conv_producer(conv_ref, nodes, counts, (OpKind.CONV,))
            const = nodes.get(const_ref)
            if conv is None or const is None or const.op != OpKind.CONSTANT:
                continue
            channels = conv.spec.out_channels
            # a bare (C,) addend broadcasts along W, not channels
            if tuple(const.shape) != (channels, 1, 1, 1):
                continue
            addend = weights[const.weights[0]].reshape(channels)
            bias = (weights[conv.weights[1]] if conv.spec.bias else np.zeros(channels, np.float32)) + addend
            bias_name = weights.fresh_name(f"{node.id}.bias")
            weights.add(bias_name, bias.astype(np.float32))
            fused = Node(id=node.id, op=OpKind.CONV, inputs=list(conv.inputs),
                         spec=conv.spec.model_copy(update={"bias": True}),
                         weights=[conv.weights[0], bias_name])
            self._replace(nodes, fused, drop=[conv.id] + ([const.id] if counts.get(const.id, 0) == 1 else []))
            return fused
        return None

    def _fuse_relu(self, node: Node, nodes, counts) -> Optional[Node]:
        if node.op != OpKind.RELU:
            return None
        conv = self._sole_conv_producer(node.inputs[0], nodes, counts, (OpKind.CONV,))
        if conv is None:
            return None
        fused = Node(id=node.id, op=OpKind.CONV_RELU, inputs=list(conv.inputs),
                     spec=conv.spec, weights=list(conv.weights))
        self._replace(nodes, fused, drop=[conv.id])
        return fused

    @staticmethod
    def _replace(nodes, fused: Node, drop: List[str]) -> None:
        rebuilt = OrderedDict()
        for node_id, node in nodes.items():
            if node_id in drop:
                continue
            rebuilt[node_id] = fused if node_id == fused.id else node
        nodes.clear()
        nodes.update(rebuilt)


# ══════════════════════════════════════════════════════════════════════════════
#  PASS MANAGER
# ══════════════════════════════════════════════════════════════════════════════

PASSES = {
    "fold": FoldConstants,
    "eliminate": EliminateRedundant,
    "fuse": FuseNodes,
}


def fold_constants(graph: Graph, weights: WeightStore) -> Model:
    return FoldConstants()(graph, weights)


def eliminate_redundant(graph: Graph, weights: WeightStore) -> Model:
    return EliminateRedundant()(graph, weights)


def fuse_nodes(graph: Graph, weights: WeightStore) -> Model:
    return FuseNodes()(graph, weights)


class PassManager:
    """Runs passes in a fixed order, repeating until nothing changes."""

    def __init__(self, passes: Sequence[str] = DEFAULT_PASSES, max_iterations: int = MAX_ITERATIONS):
        unknown = [p for p in passes if p not in PASSES]
        if unknown:
            raise ValueError(f"unknown passes {unknown}; choose from {sorted(PASSES)}")
        self.passes = [PASSES[p]() for p in passes]
        self.max_iterations = max_iterations

    def run(self, graph: Graph, weights: WeightStore) -> Model:
        for iteration in range(self.max_iterations):
            before = graph
            for graph_pass in self.passes:
                graph, weights = graph_pass(graph, weights)
            logger.info("optimisation round %d: %d nodes", iteration + 1, len(graph.nodes))
            if graph == before:
                break
        return graph, weights


def optimize(graph: Graph, weights: WeightStore, passes: Sequence[str] = DEFAULT_PASSES) -> Model:
    return PassManager(passes).run(graph, weights)
