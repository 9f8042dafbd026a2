"""
CPU execution engine.

An ``Executor`` owns a buffer pool laid out by ``plan_memory`` and runs the
graph node by node in stored order, each kernel writing straight into its
planned buffer. Work inside a node is split into a fixed set of slab tasks
and handed to a thread pool that lives only for one call, so results are
bit-identical for every thread count.
"""

import logging
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from . import kernels
from .errors import GraphError, ShapeMismatchError
from .graph import Graph, Node, OpKind, WeightStore, check_weights
from .interpreter import Feed, feeds_for
from .memory import ALIGNMENT, MemoryPlan, plan_memory

logger = logging.getLogger(__name__)


def aligned_empty(nbytes: int, alignment: int = ALIGNMENT) -> np.ndarray:
    """Float32 array whose data pointer is a multiple of ``alignment``."""
    raw = np.empty(nbytes + alignment, dtype=np.uint8)
    shift = (-raw.ctypes.data) % alignment
    return raw[shift:shift + nbytes].view(np.float32)


class RunReport(BaseModel):
    """Timing summary of a benchmark."""

    samples: List[float] = Field(description="Wall seconds per timed run (warmup excluded)")
    median_seconds: float
    spread_seconds: float = Field(description="max - min over timed runs")
    mean_seconds: float
    node_seconds: Dict[str, float] = Field(description="Mean seconds per node over timed runs")
    peak_bytes: int = Field(description="Planned buffer pool size")
    naive_bytes: int = Field(description="Sum of all tensor sizes without reuse")
    threads: int
    logical_cores: int
    end_to_end_samples: Optional[List[float]] = Field(
        default=None, description="Read to write seconds per timed run, when measured")
    end_to_end_median: Optional[float] = None

    def node_total(self) -> float:
        return sum(self.node_seconds.values())

    def summary(self) -> str:
        lines = [
            f"network median {self.median_seconds:.3f} s (spread {self.spread_seconds:.3f} s, "
            f"{len(self.samples)} runs, {self.threads} threads, {self.logical_cores} logical cores)",
            f"planned memory {self.peak_bytes / 2**20:.1f} MiB (unplanned {self.naive_bytes / 2**20:.1f} MiB)",
        ]
        if self.end_to_end_median is not None:
            lines.append(f"end-to-end median {self.end_to_end_median:.3f} s")
        return "\n".join(lines)


class Executor:
    """
    Runs one graph with a private buffer pool.

    Graph and weights are shared read-only; an Executor must not be used by
    two threads at once, but separate Executors over the same graph may.

    Args:
        threads: slab workers per call (>= 1)
        instrumented: verify before every write that the destination buffer
            holds no tensor that is still live
    """

    def __init__(self, graph: Graph, weights: WeightStore, threads: int = 1, instrumented: bool = False):
        if threads < 1:
            raise ValueError(f"threads must be >= 1, got {threads}")
        check_weights(graph, weights)
        self.graph = graph
        self.weights = weights
        self.threads = threads
        self.instrumented = instrumented
        self.plan: MemoryPlan = plan_memory(graph)
        self._pool = [aligned_empty(buf.size) for buf in self.plan.buffers]
        self.node_seconds: Dict[str, float] = {}

    def _view(self, name: str) -> np.ndarray:
        shape = self.plan.shapes[name]
        buf = self._pool[self.plan.buffer_of(name)]
        return buf[:int(np.prod(shape))].reshape(shape)

    def _claim(self, name: str, step: int, resident: Dict[int, str]) -> np.ndarray:
        index = self.plan.buffer_of(name)
        if self.instrumented:
            holder = resident.get(index)
            if holder is not None and holder != name and self.plan.live_at(holder, step):
                raise GraphError(f"memory plan violation: {name!r} overwrites live {holder!r} in buffer {index}")
            resident[index] = name
        return self._view(name)

    def _run_node(self, node: Node, dest: np.ndarray, pool) -> None:
        args = [self._view(ref) for ref in node.inputs]
        if node.op == OpKind.CONSTANT:
            np.copyto(dest, self.weights[node.weights[0]].reshape(dest.shape))
        elif node.op == OpKind.IDENTITY:
            np.copyto(dest, args[0])
        elif node.op == OpKind.RELU:
            kernels.relu(args[0], out=dest)
        elif node.op == OpKind.ADD:
            kernels.add(args[0], args[1], out=dest)
        elif node.op == OpKind.CONCAT:
            kernels.concat_channels(args[0], args[1], out=dest)
        else:
            w = self.weights[node.weights[0]]
            b = self.weights[node.weights[1]] if node.spec.bias else None
            conv = kernels.conv_transpose3d if node.is_transpose else kernels.conv3d_fast
            conv(args[0], w, b, node.spec, relu=node.op == OpKind.CONV_RELU,
                 threads=self.threads, pool=pool, out=dest)

    def run(self, x: Feed) -> Dict[str, np.ndarray]:
        """Execute once; returns copies of the graph outputs."""
        feeds = feeds_for(self.graph, x)
        resident: Dict[int, str] = {}
        self.node_seconds = {}
        pool = ThreadPoolExecutor(max_workers=self.threads) if self.threads > 1 else None
        try:
            for name, value in feeds.items():
                np.copyto(self._claim(name, 0, resident), value)
            for step, node in enumerate(self.graph.nodes, start=1):
                start = time.perf_counter()
                self._run_node(node, self._claim(node.id, step, resident), pool)
                self.node_seconds[node.id] = time.perf_counter() - start
        finally:
            if pool is not None:
                pool.shutdown(wait=True)
        return {name: self._view(name).copy() for name in self.graph.outputs}

    def run_single(self, x: Feed) -> np.ndarray:
        return self.run(x)[self.graph.outputs[0]]


def execute(graph: Graph, weights: WeightStore, x: Feed, threads: int = 1) -> np.ndarray:
    """Run the graph once on CPU and return its first output."""
    if isinstance(x, np.ndarray) and x.ndim != 4:
        raise ShapeMismatchError(f"input must be (C, D, H, W), got dims {x.shape}")
    return Executor(graph, weights, threads=threads).run_single(x)


def _summarise(samples: List[float]) -> Dict[str, float]:
    return {
        "median_seconds": statistics.median(samples),
        "spread_seconds": max(samples) - min(samples),
        "mean_seconds": statistics.fmean(samples),
    }


def benchmark(graph: Graph, weights: WeightStore, runs: int = 5, threads: int = 1,
              x: Optional[np.ndarray] = None, seed: int = 0, verbose: bool = False) -> RunReport:
    """
    Time ``runs`` executions; the first is warmup and discarded.

    A uniform [0, 1) input is drawn from ``seed`` when ``x`` is not given.
    """
    if runs < 3:
        raise ValueError(f"benchmark needs at least 3 runs, got {runs}")
    if x is None:
        shape = next(iter(graph.inputs.values()))
        x = np.random.default_rng(seed).random(shape, dtype=np.float32)

    executor = Executor(graph, weights, threads=threads)
    samples: List[float] = []
    node_totals: Dict[str, float] = {n.id: 0.0 for n in graph.nodes}
    for i in tqdm(range(runs), desc="benchmark", disable=not verbose):
        start = time.perf_counter()
        executor.run_single(x)
        elapsed = time.perf_counter() - start
        if i == 0:
            continue
        samples.append(elapsed)
        for node_id, seconds in executor.node_seconds.items():
            node_totals[node_id] += seconds

    timed = len(samples)
    report = RunReport(
        samples=samples,
        node_seconds={k: v / timed for k, v in node_totals.items()},
        peak_bytes=executor.plan.peak_bytes,
        naive_bytes=executor.plan.naive_bytes,
        threads=threads,
        logical_cores=os.cpu_count() or 1,
        **_summarise(samples),
    )
    logger.info("benchmark: median %.4f s over %d runs", report.median_seconds, timed)
    return report
