"""
Core machinery for the CPU segmentation engine.

Volumes and NIfTI I/O, dense kernels, the graph IR with its passes and
serialization, memory planning, execution and metrics. Nothing here knows
about a particular network; see src/ for the COBRA task.
"""

from .engine import Executor, RunReport, benchmark, execute
from .errors import CobraError
from .graph import Graph, Node, OpKind, WeightStore
from .kernels import ConvSpec
from .memory import MemoryPlan, plan_memory
from .output_writer import CaseWriter
from .passes import PassManager, optimize
from .schemas import LabelVolume, Volume

__all__ = [
    "CaseWriter",
    "CobraError",
    "ConvSpec",
    "Executor",
    "Graph",
    "LabelVolume",
    "MemoryPlan",
    "Node",
    "OpKind",
    "PassManager",
    "RunReport",
    "Volume",
    "WeightStore",
    "benchmark",
    "execute",
    "optimize",
    "plan_memory",
]
