"""
End-to-end inference: read -> resample -> window -> execute -> argmax ->
upsample -> remap -> write.
"""

import logging
import statistics
import tempfile
import time
from pathlib import Path
from typing import List, Optional, Union

from tqdm import tqdm

from core.engine import Executor, RunReport
from core.errors import GraphError, ShapeMismatchError
from core.graph import Graph, WeightStore
from core.schemas import LabelVolume, Volume
from core.volume_io import read_volume, write_labels

from .postprocess import argmax_channels, remap_labels, upsample_nearest
from .preprocess import make_input_channels, resample_image

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def model_input_shape(graph: Graph):
    if len(graph.inputs) != 1:
        raise GraphError(f"segmentation models take one input, graph has {len(graph.inputs)}")
    shape = next(iter(graph.inputs.values()))
    if len(shape) != 4:
        raise GraphError(f"model input must be (C, D, H, W), got {shape}")
    return tuple(shape)


def infer_volume(graph: Graph, weights: WeightStore, ct: Volume, threads: int = 1,
                 executor: Optional[Executor] = None) -> LabelVolume:
    """Segment one CT; the result has exactly the CT's shape and spacing."""
    shape = model_input_shape(graph)[1:]
    resampled = resample_image(ct, shape)
    x = make_input_channels(resampled, shape)
    executor = executor or Executor(graph, weights, threads=threads)
    logits = executor.run_single(x)
    coarse = argmax_channels(logits, spacing=resampled.spacing, origin=resampled.origin)
    labels = upsample_nearest(coarse, ct.shape, spacing=ct.spacing, origin=ct.origin)
    result = remap_labels(labels)
    if not result.same_geometry(ct):
        raise ShapeMismatchError(f"segmentation {result.shape} does not match CT {ct.shape}")
    return result


def infer_file(graph: Graph, weights: WeightStore, in_path: PathLike, out_path: PathLike,
               threads: int = 1, executor: Optional[Executor] = None) -> LabelVolume:
    ct = read_volume(in_path)
    result = infer_volume(graph, weights, ct, threads=threads, executor=executor)
    write_labels(result, out_path)
    logger.info("segmented %s -> %s", in_path, out_path)
    return result


def benchmark_end_to_end(graph: Graph, weights: WeightStore, ct_path: PathLike, runs: int = 5,
                         threads: int = 1, verbose: bool = False) -> List[float]:
    """Seconds per full file-to-file inference; the first run is warmup and dropped."""
    if runs < 3:
        raise ValueError(f"benchmark needs at least 3 runs, got {runs}")
    executor = Executor(graph, weights, threads=threads)
    samples: List[float] = []
    with tempfile.TemporaryDirectory() as tmp:
        out_path = Path(tmp) / "seg.nii.gz"
        for i in tqdm(range(runs), desc="end-to-end", disable=not verbose):
            start = time.perf_counter()
            infer_file(graph, weights, ct_path, out_path, threads=threads, executor=executor)
            if i > 0:
                samples.append(time.perf_counter() - start)
    return samples


def attach_end_to_end(report: RunReport, samples: List[float]) -> RunReport:
    return report.model_copy(update={"end_to_end_samples": list(samples),
                                     "end_to_end_median": statistics.median(samples)})
