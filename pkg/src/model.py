"""
╔══════════════════════════════════════════════════════════════════════════════╗
║                           COBRA GRAPH BUILDER                                 ║
║                                                                               ║
║  Residual 3D U-Net with a factorised stride-2 stem, 1x1x1 bottlenecks         ║
║  around every double convolution and 3x1x1 / 1x3x1 / 1x1x3 kernels.           ║
║  Also counts parameters and FLOPs of any graph.                               ║
╚══════════════════════════════════════════════════════════════════════════════╝
"""

import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import GraphError
from core.graph import CONV_KINDS, Graph, Node, OpKind, WeightStore, infer_shapes
from core.kernels import ConvSpec, he_normal_init, init_bias
from core.serialization import model_to_bytes

from .config import ArchConfig

logger = logging.getLogger(__name__)

INPUT_NAME = "ct"
OUTPUT_NAME = "logits"


# ══════════════════════════════════════════════════════════════════════════════
#  REWRITES
# ══════════════════════════════════════════════════════════════════════════════

def _conv_node(node_id: str, x: str, spec: ConvSpec, op: OpKind = OpKind.CONV) -> Node:
    refs = [f"{node_id}.weight"] + ([f"{node_id}.bias"] if spec.bias else [])
    return Node(id=node_id, op=op, inputs=[x], spec=spec, weights=refs)


def factorize_conv(node: Node) -> List[Node]:
    """
    Replace a k x k x k convolution by k x 1 x 1 -> 1 x k x 1 -> 1 x 1 x k.

    Stride and padding are split per axis; the intermediate width is the
    node's output width. The last conv keeps the node id so consumers are
    untouched.
    """
    if node.op not in (OpKind.CONV, OpKind.CONV_RELU):
        raise GraphError(f"node {node.id!r} is not a convolution")
    spec = node.spec
    k = spec.kernel[0]
    if len(set(spec.kernel)) != 1:
        raise GraphError(f"node {node.id!r} kernel {spec.kernel} is not cubic")
    if k == 1:
        raise GraphError(f"node {node.id!r} has a 1x1x1 kernel, nothing to factorize")
    if k % 2 == 0:
        raise GraphError(f"node {node.id!r} kernel extent {k} must be odd")

    nodes: List[Node] = []
    x, cin = node.inputs[0], spec.in_channels
    for axis, suffix in enumerate("zyx"):
        kernel, stride, padding = [1, 1, 1], [1, 1, 1], [0, 0, 0]
        kernel[axis], stride[axis], padding[axis] = k, spec.stride[axis], spec.padding[axis]
        last = axis == 2
        part = ConvSpec(kernel=tuple(kernel), stride=tuple(stride), padding=tuple(padding),
                        in_channels=cin, out_channels=spec.out_channels, bias=spec.bias)
        node_id = node.id if last else f"{node.id}/{suffix}"
        nodes.append(_conv_node(node_id, x, part, node.op if last else OpKind.CONV))
        x, cin = node_id, spec.out_channels
    return nodes


class GraphBuilder:
    """Accumulates nodes; every emitted convolution carries a bias."""

    def __init__(self, inputs: dict):
        self.inputs = dict(inputs)
        self.nodes: List[Node] = []

    def _emit(self, node: Node) -> str:
        self.nodes.append(node)
        return node.id

    def relu(self, x: str) -> str:
        return self._emit(Node(id=f"{x}.relu", op=OpKind.RELU, inputs=[x]))

    def add(self, x: str, y: str, name: str) -> str:
        return self._emit(Node(id=name, op=OpKind.ADD, inputs=[x, y]))

    def concat(self, x: str, y: str, name: str) -> str:
        return self._emit(Node(id=name, op=OpKind.CONCAT, inputs=[x, y]))

    def conv(self, x: str, cin: int, cout: int, kernel: int, name: str, stride: int = 1,
             relu: bool = False, factorize: bool = False) -> str:
        spec = ConvSpec.same((kernel,) * 3, cin, cout, stride=(stride,) * 3)
        node = _conv_node(name, x, spec)
        for part in (factorize_conv(node) if factorize and kernel > 1 else [node]):
            self._emit(part)
        return self.relu(name) if relu else name

    def conv_transpose(self, x: str, cin: int, cout: int, name: str, relu: bool = False) -> str:
        spec = ConvSpec(kernel=(2, 2, 2), stride=(2, 2, 2), in_channels=cin, out_channels=cout)
        self._emit(_conv_node(name, x, spec, OpKind.CONV_TRANSPOSE))
        return self.relu(name) if relu else name

    def build(self, outputs: Sequence[str]) -> Graph:
        return Graph.build(self.inputs, self.nodes, list(outputs))


Inner = Callable[[GraphBuilder, str, int], str]


def wrap_bottleneck(b: GraphBuilder, x: str, cin: int, cout: int, factor: int, inner: Inner,
                    name: str, restore_relu: bool = False, base: Optional[int] = None) -> str:
    """
    1x1x1 reduce cin -> base/factor, ``inner`` at the reduced width, 1x1x1
    restore to cout. ``base`` defaults to cout; ``inner(builder, tensor,
    width)`` returns its output tensor.
    """
    base = cout if base is None else base
    if factor < 1 or base % factor:
        raise GraphError(f"bottleneck factor {factor} does not divide {base} channels")
    width = base // factor
    reduced = b.conv(x, cin, width, 1, f"{name}.reduce", relu=True)
    body = inner(b, reduced, width)
    return b.conv(body, width, cout, 1, f"{name}.restore", relu=restore_relu)


# ══════════════════════════════════════════════════════════════════════════════
#  COBRA
# ══════════════════════════════════════════════════════════════════════════════

def _double_conv(cfg: ArchConfig, name: str, stride: int) -> Inner:
    def inner(b: GraphBuilder, x: str, width: int) -> str:
        x = b.conv(x, width, width, cfg.kernel, f"{name}.conv1", stride=stride, relu=True,
                   factorize=cfg.factorize)
        return b.conv(x, width, width, cfg.kernel, f"{name}.conv2", relu=True, factorize=cfg.factorize)
    return inner


def _residual_block(b: GraphBuilder, cfg: ArchConfig, x: str, cin: int, cout: int, level: int,
                    name: str, stride: int = 1) -> str:
    body = wrap_bottleneck(b, x, cin, cout, cfg.factor(level), _double_conv(cfg, name, stride), name)
    shortcut = x
    if cin != cout or stride != 1:
        shortcut = b.conv(x, cin, cout, 1, f"{name}.project", stride=stride)
    return b.relu(b.add(body, shortcut, f"{name}.add"))


def _up_path(cfg: ArchConfig, name: str) -> Inner:
    def inner(b: GraphBuilder, x: str, width: int) -> str:
        return b.conv_transpose(x, width, width, f"{name}.up", relu=True)
    return inner


def build_cobra(cfg: ArchConfig) -> Graph:
    """Emit the COBRA graph for ``cfg``; the output is named ``logits``."""
    b = GraphBuilder({INPUT_NAME: (cfg.input_channels,) + tuple(cfg.input_shape)})
    w = cfg.widths

    x = b.conv(INPUT_NAME, cfg.input_channels, w[0], cfg.stem_kernel, "stem", stride=2, relu=True,
               factorize=cfg.factorize)

    skips = []
    cin = w[0]
    for level in range(cfg.levels):
        x = _residual_block(b, cfg, x, cin, w[level], level, f"enc{level}", stride=1 if level == 0 else 2)
        skips.append(x)
        cin = w[level]

    for level in range(cfg.levels - 2, -1, -1):
        up = wrap_bottleneck(b, x, cin, w[level], cfg.factor(level + 1), _up_path(cfg, f"dec{level}"),
                             f"dec{level}.upsample", restore_relu=True, base=cin)
        joined = b.concat(skips[level], up, f"dec{level}.concat")
        x = _residual_block(b, cfg, joined, 2 * w[level], w[level], level, f"dec{level}")
        cin = w[level]

    x = b.conv(x, w[0], cfg.class_count, 1, "head")
    x = b.conv_transpose(x, cfg.class_count, cfg.class_count, OUTPUT_NAME)
    graph = b.build([x])
    infer_shapes(graph)
    logger.info("built COBRA graph: %d nodes, %d parameters", len(graph.nodes), count_params(graph))
    return graph


# ══════════════════════════════════════════════════════════════════════════════
#  WEIGHTS
# ══════════════════════════════════════════════════════════════════════════════

def random_weights(graph: Graph, seed: int) -> WeightStore:
    """He-normal kernels and zero biases; each conv draws from its own Philox key."""
    store = WeightStore()
    for index, node in enumerate(graph.nodes):
        if node.op not in CONV_KINDS:
            continue
        key = seed * 2 ** 32 + index
        store.add(node.weights[0], he_normal_init(node.spec, key, transpose=node.is_transpose))
        if node.spec.bias:
            store.add(node.weights[1], init_bias(node.spec))
    return store


def zero_weights(graph: Graph) -> WeightStore:
    store = WeightStore()
    for node in graph.nodes:
        if node.op in CONV_KINDS:
            store.add(node.weights[0], np.zeros(node.spec.weight_shape(node.is_transpose), np.float32))
            if node.spec.bias:
                store.add(node.weights[1], np.zeros(node.spec.out_channels, np.float32))
    return store


def build_model(cfg: ArchConfig, seed: Optional[int] = None) -> Tuple[Graph, WeightStore]:
    graph = build_cobra(cfg)
    return graph, (zero_weights(graph) if seed is None else random_weights(graph, seed))


# ══════════════════════════════════════════════════════════════════════════════
#  ACCOUNTING
# ══════════════════════════════════════════════════════════════════════════════

def count_params(graph: Graph) -> int:
    """Elements of every distinct weight tensor the graph references, biases included."""
    sizes = {}
    for node in graph.nodes:
        if node.op in CONV_KINDS:
            sizes[node.weights[0]] = int(np.prod(node.spec.weight_shape(node.is_transpose)))
            if node.spec.bias:
                sizes[node.weights[1]] = node.spec.out_channels
        elif node.op == OpKind.CONSTANT:
            sizes[node.weights[0]] = int(np.prod(node.shape))
    return sum(sizes.values())


def count_flops(graph: Graph, input_shape: Optional[Sequence[int]] = None) -> int:
    """
    Multiply-add counted as 2 FLOPs. Convolutions: 2 * kvol * Cin * Cout per
    output voxel (per input voxel for transpose convolutions) plus one per
    output element for the bias; relu and add one per element.

    ``input_shape`` overrides the spatial extent of the graph's inputs.
    """
    if input_shape is not None:
        inputs = {name: (shape[0],) + tuple(input_shape) for name, shape in graph.inputs.items()}
        graph = Graph.build(inputs, graph.nodes, graph.outputs)
    shapes = infer_shapes(graph)
    total = 0
    for node in graph.nodes:
        out_elems = int(np.prod(shapes[node.id]))
        if node.op in CONV_KINDS:
            spec = node.spec
            volume = int(np.prod(shapes[node.inputs[0]][1:])) if node.is_transpose \
                else int(np.prod(shapes[node.id][1:]))
            total += 2 * spec.kernel_volume * spec.in_channels * spec.out_channels * volume
            if spec.bias:
                total += out_elems
            if node.op == OpKind.CONV_RELU:
                total += out_elems
        elif node.op in (OpKind.RELU, OpKind.ADD):
            total += out_elems
    return total


def serialized_size(graph: Graph, weights: WeightStore) -> int:
    """Bytes of the .cbr container for this model."""
    return len(model_to_bytes(graph, weights))
