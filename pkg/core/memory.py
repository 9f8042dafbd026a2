"""
Static memory planning: assign every tensor of a graph to a reusable buffer.

Lifetimes are inclusive step intervals over the stored topological order.
Graph inputs are produced at step 0 and node ``i`` runs at step ``i + 1``;
graph outputs stay live until the last step. Buffers are filled greedily,
largest tensor first, reusing the first buffer whose tensors never overlap.
"""

import logging
from bisect import bisect_left, insort
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import GraphError
from .graph import Graph, TensorShape, infer_shapes

logger = logging.getLogger(__name__)

ALIGNMENT = 64
BYTES_PER_ELEMENT = 4

Interval = Tuple[int, int]


def _round_up(n: int, multiple: int = ALIGNMENT) -> int:
    return ((n + multiple - 1) // multiple) * multiple


class Buffer(BaseModel):
    size: int = Field(description="Bytes, a multiple of the alignment")
    tensors: List[str] = Field(default_factory=list)


class MemoryPlan(BaseModel):
    """Tensor -> buffer binding produced by plan_memory."""

    model_config = ConfigDict(frozen=True)

    buffers: List[Buffer]
    binding: Dict[str, int] = Field(description="Tensor name -> buffer index")
    intervals: Dict[str, Interval] = Field(description="Inclusive [first, last] step of each tensor")
    shapes: Dict[str, TensorShape]
    steps: int

    @property
    def peak_bytes(self) -> int:
        return sum(b.size for b in self.buffers)

    @property
    def naive_bytes(self) -> int:
        """Bytes needed if every tensor had its own buffer."""
        return sum(tensor_bytes(s) for s in self.shapes.values())

    def buffer_of(self, name: str) -> int:
        try:
            return self.binding[name]
        except KeyError:
            raise GraphError(f"tensor {name!r} has no buffer") from None

    def live_at(self, name: str, step: int) -> bool:
        first, last = self.intervals[name]
        return first <= step <= last


def tensor_bytes(shape: TensorShape) -> int:
    return _round_up(int(np.prod(shape)) * BYTES_PER_ELEMENT)


def _overlaps(a: Interval, b: Interval) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


def _fits(taken: List[Interval], interval: Interval) -> bool:
    """True if ``interval`` overlaps none of the disjoint, start-sorted ``taken``."""
    i = bisect_left(taken, interval)
    if i > 0 and taken[i - 1][1] >= interval[0]:
        return False
    return i == len(taken) or taken[i][0] > interval[1]


def lifetimes(graph: Graph) -> Dict[str, Interval]:
    last_step = len(graph.nodes)
    first = {name: 0 for name in graph.inputs}
    for i, node in enumerate(graph.nodes):
        first[node.id] = i + 1
    last = dict(first)
    for i, node in enumerate(graph.nodes):
        for ref in node.inputs:
            last[ref] = max(last[ref], i + 1)
    for name in graph.outputs:
        last[name] = last_step
    return {name: (first[name], last[name]) for name in first}


def plan_memory(graph: Graph) -> MemoryPlan:
    """Greedy interval-graph buffer assignment, then a soundness check."""
    try:
        shapes = infer_shapes(graph)
    except GraphError as exc:
        raise GraphError(f"cannot plan memory: {exc}") from exc
    intervals = lifetimes(graph)
    position = {name: i for i, name in enumerate(intervals)}
    # largest first; ties keep topological order
    ranked = sorted(position, key=lambda n: (-tensor_bytes(shapes[n]), position[n]))

    buffers: List[Buffer] = []
    occupied: List[List[Interval]] = []  # per buffer, sorted by first step and pairwise disjoint
    binding: Dict[str, int] = {}
    for name in ranked:
        size = tensor_bytes(shapes[name])
        interval = intervals[name]
        for index, buf in enumerate(buffers):
            if _fits(occupied[index], interval):
                insort(occupied[index], interval)
                buf.tensors.append(name)
                buf.size = max(buf.size, size)
                binding[name] = index
                break
        else:
            buffers.append(Buffer(size=size, tensors=[name]))
            occupied.append([interval])
            binding[name] = len(buffers) - 1

    plan = MemoryPlan(buffers=buffers, binding=binding, intervals=intervals,
                      shapes=shapes, steps=len(graph.nodes))
    check_plan(plan)
    logger.debug("memory plan: %d buffers, %d bytes (unplanned %d)",
                 len(buffers), plan.peak_bytes, plan.naive_bytes)
    return plan


def check_plan(plan: MemoryPlan) -> None:
    """Raise GraphError if two tensors sharing a buffer have overlapping lifetimes."""
    for index, buf in enumerate(plan.buffers):
        for name in buf.tensors:
            if tensor_bytes(plan.shapes[name]) > buf.size:
                raise GraphError(f"tensor {name!r} does not fit buffer {index}")
        ordered = sorted(buf.tensors, key=lambda n: plan.intervals[n])
        for a, b in zip(ordered, ordered[1:]):
            if _overlaps(plan.intervals[a], plan.intervals[b]):
                raise GraphError(f"tensors {a!r} and {b!r} share buffer {index} while both live")
