import numpy as np
import pytest

from core.errors import GraphError
from core.graph import Graph, Node, OpKind, infer_shapes
from core.interpreter import interpret_single
from core.kernels import ConvSpec
from src.config import ArchConfig, load_arch_config
from src.model import (
    GraphBuilder,
    build_cobra,
    build_model,
    count_flops,
    count_params,
    factorize_conv,
    random_weights,
    wrap_bottleneck,
)

PUBLISHED_PARAMS = 436_982
PUBLISHED_FLOPS = 48e9


def _cubic(c, k=3, bias=True):
    spec = ConvSpec.same((k, k, k), c, c, bias=bias)
    return Node(id="c", op=OpKind.CONV, inputs=["x"], spec=spec,
                weights=["c.weight"] + (["c.bias"] if bias else []))


def _params(nodes):
    return count_params(Graph.build({"x": (nodes[0].spec.in_channels, 8, 8, 8)}, nodes, [nodes[-1].id]))


# ══════════════════════════════════════════════════════════════════════════════
#  FACTORIZATION
# ══════════════════════════════════════════════════════════════════════════════

@pytest.mark.parametrize("c, cubic, factorized", [(16, 6928, 2352), (1, 28, 12)])
def test_factorized_parameter_counts(c, cubic, factorized):
    node = _cubic(c)
    assert _params([node]) == cubic
    assert _params(factorize_conv(node)) == factorized


def test_factorization_saves_two_thirds():
    for c in (16, 32, 64, 256):
        node = _cubic(c)
        assert _params(factorize_conv(node)) / _params([node]) <= 0.36


def test_factorized_structure():
    parts = factorize_conv(_cubic(4))
    assert [p.id for p in parts] == ["c/z", "c/y", "c"]
    assert [p.spec.kernel for p in parts] == [(3, 1, 1), (1, 3, 1), (1, 1, 3)]
    assert [p.spec.padding for p in parts] == [(1, 0, 0), (0, 1, 0), (0, 0, 1)]


def test_factorized_stride_is_split_per_axis():
    spec = ConvSpec.same((7, 7, 7), 2, 8, stride=(2, 2, 2))
    node = Node(id="stem", op=OpKind.CONV, inputs=["x"], spec=spec, weights=["stem.weight", "stem.bias"])
    parts = factorize_conv(node)
    assert [p.spec.stride for p in parts] == [(2, 1, 1), (1, 2, 1), (1, 1, 2)]
    graph = Graph.build({"x": (2, 96, 192, 192)}, parts, ["stem"])
    assert infer_shapes(graph)["stem"] == (8, 48, 96, 96)


@pytest.mark.parametrize("kernel", [(1, 1, 1), (2, 2, 2), (3, 3, 1)])
def test_factorize_rejects(kernel):
    spec = ConvSpec(kernel=kernel, in_channels=1, out_channels=1)
    node = Node(id="c", op=OpKind.CONV, inputs=["x"], spec=spec, weights=["c.weight", "c.bias"])
    with pytest.raises(GraphError):
        factorize_conv(node)


# ══════════════════════════════════════════════════════════════════════════════
#  BOTTLENECK
# ══════════════════════════════════════════════════════════════════════════════

@pytest.mark.parametrize("factor, width", [(1, 16), (2, 8), (4, 4)])
def test_bottleneck_widths(factor, width):
    b = GraphBuilder({"x": (16, 4, 4, 4)})
    out = wrap_bottleneck(b, "x", 16, 16, factor, lambda bb, t, w: bb.relu(t), "blk")
    graph = b.build([out])
    nodes = graph.node_map()
    assert nodes["blk.reduce"].spec.out_channels == width
    assert nodes["blk.restore"].spec.in_channels == width
    assert infer_shapes(graph)[out] == (16, 4, 4, 4)


def test_bottleneck_factor_must_divide():
    b = GraphBuilder({"x": (16, 4, 4, 4)})
    with pytest.raises(GraphError):
        wrap_bottleneck(b, "x", 16, 16, 3, lambda bb, t, w: t, "blk")


def test_arch_config_rejects_bad_factor():
    with pytest.raises(ValueError):
        ArchConfig(widths=(32, 64, 130, 256))


# ══════════════════════════════════════════════════════════════════════════════
#  ACCOUNTING
# ══════════════════════════════════════════════════════════════════════════════

def test_flops_pointwise():
    spec = ConvSpec(kernel=(1, 1, 1), in_channels=2, out_channels=3, bias=False)
    graph = Graph.build({"x": (2, 1, 1, 1)},
                        [Node(id="c", op=OpKind.CONV, inputs=["x"], spec=spec, weights=["c.weight"])], ["c"])
    assert count_flops(graph) == 12


def test_flops_cubic():
    spec = ConvSpec.same((3, 3, 3), 1, 1, bias=False)
    graph = Graph.build({"x": (1, 4, 4, 4)},
                        [Node(id="c", op=OpKind.CONV, inputs=["x"], spec=spec, weights=["c.weight"])], ["c"])
    assert count_flops(graph) == 3456
    assert count_flops(graph, (8, 4, 4)) == 2 * 3456


def test_flops_transpose_and_elementwise():
    spec = ConvSpec(kernel=(2, 2, 2), stride=(2, 2, 2), in_channels=2, out_channels=3)
    nodes = [Node(id="t", op=OpKind.CONV_TRANSPOSE, inputs=["x"], spec=spec, weights=["t.w", "t.b"]),
             Node(id="r", op=OpKind.RELU, inputs=["t"])]
    graph = Graph.build({"x": (2, 2, 2, 2)}, nodes, ["r"])
    assert count_flops(graph) == 2 * 8 * 2 * 3 * 8 + 3 * 64 + 3 * 64


def test_reference_parameters_near_published():
    graph = build_cobra(load_arch_config())
    params = count_params(graph)
    assert abs(params - PUBLISHED_PARAMS) / PUBLISHED_PARAMS < 0.02


def test_reference_flops_near_published():
    flops = count_flops(build_cobra(ArchConfig()))
    assert abs(flops - PUBLISHED_FLOPS) / PUBLISHED_FLOPS < 0.15


def test_reference_config_file_matches_defaults():
    assert load_arch_config() == ArchConfig()


def test_unfactorized_uses_cubic_kernels():
    graph = build_cobra(ArchConfig(factorize=False))
    kernels = {n.spec.kernel for n in graph.nodes if n.op == OpKind.CONV}
    assert (3, 3, 3) in kernels and (7, 7, 7) in kernels
    assert not any(k in kernels for k in ((3, 1, 1), (1, 3, 1), (1, 1, 3)))
    assert count_params(graph) > 1.5 * count_params(build_cobra(ArchConfig()))


def test_count_params_matches_store(tiny_cfg):
    graph, weights = build_model(tiny_cfg, seed=0)
    assert count_params(graph) == weights.total_elements()


# ══════════════════════════════════════════════════════════════════════════════
#  GRAPH
# ══════════════════════════════════════════════════════════════════════════════

def test_tiny_output_shape(tiny_cfg):
    graph = build_cobra(tiny_cfg)
    assert graph.inputs == {"ct": (2, 16, 32, 32)}
    assert graph.outputs == ["logits"]
    assert infer_shapes(graph)["logits"] == (6, 16, 32, 32)


def test_reference_output_shape():
    graph = build_cobra(ArchConfig())
    assert infer_shapes(graph)["logits"] == (6, 96, 192, 192)


def test_every_conv_has_bias(tiny_cfg):
    graph = build_cobra(tiny_cfg)
    assert all(n.spec.bias for n in graph.nodes if n.spec is not None)


def test_random_weights_deterministic(tiny_cfg):
    graph = build_cobra(tiny_cfg)
    assert random_weights(graph, 5).equals(random_weights(graph, 5))
    assert not random_weights(graph, 5).equals(random_weights(graph, 6))


def test_zero_weights_by_default(tiny_cfg):
    _, weights = build_model(tiny_cfg)
    assert all(not v.any() for _, v in weights.items())


def test_tiny_forward_is_finite(tiny_cfg, rng):
    graph, weights = build_model(tiny_cfg, seed=1)
    x = rng.random((2, 16, 32, 32)).astype(np.float32)
    out = interpret_single(graph, weights, x)
    assert out.shape == (6, 16, 32, 32)
    assert np.isfinite(out).all()
    assert np.abs(out).max() > 0
