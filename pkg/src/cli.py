"""
╔══════════════════════════════════════════════════════════════════════════════╗
║                              COBRA COMMAND LINE                               ║
║                                                                               ║
║  cobra preprocess | build-model | optimize | infer | bench | evaluate |       ║
║        analyze                                                                ║
║                                                                               ║
║  Exit codes: 0 success, 1 validation or usage error, 2 I/O error.             ║
╚══════════════════════════════════════════════════════════════════════════════╝
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from core.engine import benchmark
from core.errors import CobraError, ConfigError, FileIOError
from core.metrics import score_classes, summarize_cases
from core.output_writer import CaseWriter
from core.passes import optimize
from core.serialization import deserialize, serialize
from core.volume_io import read_labels, read_volume

from .config import ORGAN_NAMES, PipelineConfig, load_arch_config, parse_shape, REFERENCE_CONFIG
from .model import build_model, count_flops, count_params, serialized_size
from .pipeline import attach_end_to_end, benchmark_end_to_end, infer_file, model_input_shape
from .preprocess import TARGET_SHAPE, prepare_case

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2

# Published figures printed next to the measured ones
PUBLISHED_PARAMS = 436_982
PUBLISHED_GFLOPS = 48.0
PUBLISHED_SIZE_MB = 1.7
PUBLISHED_SECONDS = 1.6


class UsageError(CobraError, ValueError):
    """Unknown subcommand or malformed flags"""
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_text(path: Path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise FileIOError(f"cannot write {path}: {exc}") from exc


def _classes(text: str) -> List[int]:
    try:
        return [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise ConfigError(f"malformed class list {text!r}") from None


# ══════════════════════════════════════════════════════════════════════════════
#  SUBCOMMANDS
# ══════════════════════════════════════════════════════════════════════════════

def cmd_preprocess(args) -> int:
    ct = read_volume(args.input)
    labels = read_labels(args.labels) if args.labels else None
    x, targets, meta = prepare_case(ct, labels, parse_shape(args.shape))
    out = CaseWriter(args.out_dir).write_case(x, targets, meta)
    print(f"✅ preprocessed {args.input} -> {out}")
    return EXIT_OK


def cmd_build_model(args) -> int:
    if args.random_weights and args.seed is None:
        raise UsageError("--random-weights requires an explicit --seed")
    cfg = load_arch_config(args.config)
    if args.no_factorize:
        cfg = cfg.model_copy(update={"factorize": False})
    graph, weights = build_model(cfg, seed=args.seed if args.random_weights else None)
    serialize(graph, weights, args.out)
    print(f"✅ {len(graph.nodes)} nodes, {count_params(graph):,} parameters -> {args.out}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    graph, weights = deserialize(args.input)
    passes = [p.strip() for p in args.passes.split(",") if p.strip()]
    try:
        new_graph, new_weights = optimize(graph, weights, passes)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    serialize(new_graph, new_weights, args.out)
    print(f"✅ {len(graph.nodes)} -> {len(new_graph.nodes)} nodes -> {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = PipelineConfig(model_path=args.model, input_path=args.input, output_path=args.out,
                         **({"threads": args.threads} if args.threads is not None else {}))
    cfg.check_inputs()
    graph, weights = deserialize(cfg.model_path)
    result = infer_file(graph, weights, cfg.input_path, cfg.output_path, threads=cfg.threads)
    print(f"✅ segmentation {result.shape} -> {cfg.output_path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = PipelineConfig(model_path=args.model, input_path=args.ct,
                         **({"threads": args.threads} if args.threads is not None else {}))
    cfg.check_inputs()
    graph, weights = deserialize(cfg.model_path)
    report = benchmark(graph, weights, runs=args.runs, threads=cfg.threads, verbose=args.verbose)
    if cfg.input_path is not None:
        samples = benchmark_end_to_end(graph, weights, cfg.input_path, runs=args.runs,
                                       threads=cfg.threads, verbose=args.verbose)
        report = attach_end_to_end(report, samples)
    print(report.summary())
    print(f"   published: ~{PUBLISHED_SECONDS} s per scan on a 16-core host")
    if args.baseline:
        base_graph, base_weights = deserialize(args.baseline)
        base = benchmark(base_graph, base_weights, runs=args.runs, threads=cfg.threads, verbose=args.verbose)
        print(f"   baseline median {base.median_seconds:.3f} s "
              f"({base.median_seconds - report.median_seconds:+.3f} s vs this model)")
    if args.report:
        _write_text(args.report, report.model_dump_json(indent=2))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = PipelineConfig(nsd_tolerance=args.nsd_tol)
    if len(args.pred) != len(args.gold):
        raise UsageError(f"{len(args.pred)} predictions for {len(args.gold)} gold label maps")
    classes = _classes(args.classes)
    per_case = []
    for pred_path, gold_path in zip(args.pred, args.gold):
        per_case.append(score_classes(read_labels(pred_path), read_labels(gold_path), classes, cfg.nsd_tolerance))
    summaries = summarize_cases(per_case)

    print(f"{len(per_case)} case(s), NSD tolerance {cfg.nsd_tolerance:g} mm")
    print(f"{'class':<10} {'DSC mean':>9} {'median':>8} {'std':>8} {'NSD mean':>9} {'median':>8} {'std':>8}")
    for s in summaries:
        print(f"{ORGAN_NAMES.get(s.label, str(s.label)):<10} {s.dsc_mean:>9.4f} {s.dsc_median:>8.4f} "
              f"{s.dsc_std:>8.4f} {s.nsd_mean:>9.4f} {s.nsd_median:>8.4f} {s.nsd_std:>8.4f}")
    mean_dsc = float(np.mean([s.dsc_mean for s in summaries])) if summaries else float("nan")
    mean_nsd = float(np.mean([s.nsd_mean for s in summaries])) if summaries else float("nan")
    print(f"{'mean':<10} {mean_dsc:>9.4f} {'':>8} {'':>8} {mean_nsd:>9.4f}")
    if args.report:
        body = {
            "nsd_tolerance_mm": cfg.nsd_tolerance,
            "cases": [{"pred": str(p), "gold": str(g), "classes": [s.model_dump() for s in scores]}
                      for p, g, scores in zip(args.pred, args.gold, per_case)],
            "classes": [s.model_dump() for s in summaries],
            "mean": {"dsc": mean_dsc, "nsd": mean_nsd},
        }
        _write_text(args.report, json.dumps(body, indent=2))
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.model:
        graph, weights = deserialize(args.model)
    else:
        graph, weights = build_model(load_arch_config(args.config))
    shape = parse_shape(args.input_shape) if args.input_shape else model_input_shape(graph)[1:]
    params = count_params(graph)
    flops = count_flops(graph, shape)
    size = serialized_size(graph, weights)
    print(f"parameters: {params:,} (published {PUBLISHED_PARAMS:,}, "
          f"{100.0 * (params - PUBLISHED_PARAMS) / PUBLISHED_PARAMS:+.1f}%)")
    print(f"flops: {flops:,} at {'x'.join(map(str, shape))} "
          f"({flops / 1e9:.2f} GFLOPs, published {PUBLISHED_GFLOPS:g})")
    print(f"serialized size: {size:,} bytes ({size / 1e6:.2f} MB, published {PUBLISHED_SIZE_MB} MB)")
    return EXIT_OK


# ══════════════════════════════════════════════════════════════════════════════
#  ENTRY POINT
# ══════════════════════════════════════════════════════════════════════════════

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cobra", description="CPU-only abdominal organ segmentation")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging and progress bars")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("preprocess", help="CT (+ labels) -> network input and targets")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--labels")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--shape", default="x".join(map(str, TARGET_SHAPE)))
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("build-model", help="emit the COBRA graph as a .cbr file")
    p.add_argument("--config", default=str(REFERENCE_CONFIG))
    p.add_argument("--out", required=True)
    p.add_argument("--random-weights", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-factorize", action="store_true")
    p.set_defaults(func=cmd_build_model)

    p = sub.add_parser("optimize", help="run graph passes to a fixpoint")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--passes", default="fold,eliminate,fuse")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("infer", help="segment one CT")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="time network and end-to-end inference")
    p.add_argument("--model", required=True)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--threads", type=int)
    p.add_argument("--report")
    p.add_argument("--ct", help="also time file-to-file inference on this CT")
    p.add_argument("--baseline", help="second model to compare against, e.g. the unoptimised one")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("evaluate", help="per-class DSC and NSD")
    p.add_argument("--pred", required=True, nargs="+", help="one or more predicted label maps")
    p.add_argument("--gold", required=True, nargs="+", help="gold label maps, paired with --pred in order")
    p.add_argument("--classes", default="1,2,3,4")
    p.add_argument("--nsd-tol", type=float, default=1.0)
    p.add_argument("--report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="parameters, FLOPs and serialized size")
    p.add_argument("--model")
    p.add_argument("--config", default=str(REFERENCE_CONFIG))
    p.add_argument("--input-shape")
    p.set_defaults(func=cmd_analyze)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
        if args.command is None:
            raise UsageError("no subcommand given")
    except UsageError as exc:
        print(parser.format_usage(), end="", file=sys.stderr)
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileIOError, OSError) as exc:
        print(f"❌ I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CobraError, ValidationError, ValueError) as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def main() -> None:
    sys.exit(run())
