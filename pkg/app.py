import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from loguru import logger

from assembler import assemble_document, write_merge_log
from backend import Backend
from batch_policy import BatchPolicy
from config import AppConfig, ConfigError, create_backend_from_config, load_config
from core_model import PageDescriptor, PageDocument, descriptors_for, load_document, save_document
from embeddings_io import read_embeddings, read_rollouts, read_tasks
from evaluation import EvaluationSettings, evaluate_documents, evaluate_spotting, render_table
from file_io import atomic_write_text
from metrics import MetricError, OverallWeights
from mock_backend import LatencyModel, create_mock_backend
from pipeline_runtime import PipelineResult, PipelineRuntime
from pipeline_simulator import simulate
from spotting_codec import load_spotting_file
from uacs_planner import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    DEFAULT_SAMPLES_PER_CLUSTER,
    DEFAULT_UNSTABLE_DELTA,
    build_plan,
    build_task_plans,
    flag_unstable,
    flag_unstable_from_confidences,
)

EXIT_OK = 0
EXIT_FAILED_ITEMS = 1
EXIT_USAGE = 2

SYNTHETIC_WIDTH_PX = 1000
SYNTHETIC_HEIGHT_PX = 1400


def configure_logging():
    """Install a stderr sink at the level named by DOCPARSE_LOG (default WARNING)"""
    level = os.environ.get("DOCPARSE_LOG", "WARNING").upper()
    logger.remove()
    try:
        logger.add(sys.stderr, level=level)
    except ValueError:
        logger.add(sys.stderr, level="WARNING")
        logger.warning(f"DOCPARSE_LOG={level!r} is not a log level; using WARNING")


def _write_json(path: Path, data) -> None:
    atomic_write_text(path, json.dumps(data, indent=2, ensure_ascii=False) + "\n")


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text)


def _input_documents(args) -> List[Tuple[str, List[PageDocument], List[PageDescriptor]]]:
    """(stem, ground truth pages, descriptors) per input document"""
    if args.input is None:
        if args.pages is None:
            raise ConfigError("parse needs --input, or --pages for a synthetic mock run")
        descriptors = [
            PageDescriptor(page_index=i, width_px=SYNTHETIC_WIDTH_PX, height_px=SYNTHETIC_HEIGHT_PX, source="synthetic")
            for i in range(args.pages)
        ]
        return [("synthetic", [], descriptors)]

    source = Path(args.input)
    if source.is_dir():
        files = sorted(source.glob("*.json"))
    elif source.is_file():
        files = [source]
    else:
        raise ConfigError(f"input {source} does not exist")
    if not files:
        raise ConfigError(f"no .json documents under {source}")

    documents = []
    for path in files:
        pages = load_document(path)
        documents.append((path.stem, pages, descriptors_for(pages, source=str(path))))
    return documents


def _run_pipeline(backend: Backend, descriptors: Sequence[PageDescriptor], config: AppConfig) -> PipelineResult:
    settings = config.pipeline
    if settings.simulated_clock:
        return simulate(descriptors, backend, settings.policy(), settings.queue_capacity, settings.recognition_workers)
    runtime = PipelineRuntime(backend, settings.policy(), settings.queue_capacity, settings.recognition_workers)
    return runtime.run(descriptors)


def cmd_parse(args) -> int:
    """
    Parse documents through the pipeline and write assembled outputs

    Writes <stem>.md, <stem>.json (structured blocks), <stem>.pred.json
    (pages schema, for eval), <stem>.merges.jsonl and <stem>.run_stats.json.
    """
    config = load_config(args.config)
    if args.backend:
        config.backend.kind = args.backend
    if args.seed is not None:
        config.seed = args.seed
    documents = _input_documents(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    any_failed = False
    for stem, gt_pages, descriptors in documents:
        backend = create_backend_from_config(config.backend, config.seed, gt_pages or None)
        result = _run_pipeline(backend, descriptors, config)
        assembled = assemble_document(result.documents)

        atomic_write_text(out_dir / f"{stem}.md", assembled.document.markdown + "\n")
        atomic_write_text(out_dir / f"{stem}.json", assembled.document.to_json())
        save_document(result.documents, out_dir / f"{stem}.pred.json")
        write_merge_log(assembled.decisions, out_dir / f"{stem}.merges.jsonl")
        _write_json(out_dir / f"{stem}.run_stats.json", result.stats.model_dump(mode="json"))

        for page in result.pages:
            if page.failed:
                any_failed = True
                print(f"{stem}: page {page.page_index} failed: {page.error}", file=sys.stderr)
        if result.stream_error:
            any_failed = True
            print(f"{stem}: page stream failed: {result.stream_error}", file=sys.stderr)
        logger.info(f"{stem}: {result.stats.pages} pages -> {out_dir}")
    return EXIT_FAILED_ITEMS if any_failed else EXIT_OK


def cmd_eval(args) -> int:
    config = load_config(args.config)
    try:
        weights = OverallWeights.parse(args.weights) if args.weights else config.metrics.overall_weights()
    except MetricError as exc:
        raise ConfigError(str(exc)) from exc
    settings = EvaluationSettings(
        weights=weights,
        iou_threshold=args.iou if args.iou is not None else config.metrics.iou_threshold,
        exclude_decorative=config.metrics.exclude_decorative,
        workers=args.workers or config.metrics.workers,
    )

    gt_pages = load_document(args.gt)
    pred_pages = load_document(args.pred)
    spotting = None
    if args.spotting_gt or args.spotting_pred:
        if not (args.spotting_gt and args.spotting_pred):
            raise ConfigError("--spotting-gt and --spotting-pred go together")
        spotting = evaluate_spotting(
            load_spotting_file(args.spotting_gt), load_spotting_file(args.spotting_pred), settings.iou_threshold
        )

    report = evaluate_documents(gt_pages, pred_pages, settings, spotting)
    if args.report == "table":
        _emit(render_table(report), args.out)
    else:
        _emit(report.model_dump_json(indent=2) + "\n", args.out)
    return EXIT_OK


def cmd_plan(args) -> int:
    seed = args.seed if args.seed is not None else 0
    embeddings = read_embeddings(args.embeddings)
    rollouts = read_rollouts(args.rollouts)
    options = dict(
        k=args.k,
        budget=args.budget,
        alpha=args.alpha,
        beta=args.beta,
        seed=seed,
        samples_per_cluster=args.samples_per_cluster,
        redistribute=args.redistribute,
    )
    if args.tasks:
        plans = build_task_plans(embeddings, rollouts, read_tasks(args.tasks), **options)
        data = {"tasks": {task: plan.to_json() for task, plan in plans.items()}}
    else:
        data = build_plan(embeddings, rollouts, **options).to_json()
    _emit(json.dumps(data, indent=2) + "\n", args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    seed = args.seed if args.seed is not None else 0
    try:
        latency = LatencyModel.from_stage_latencies(args.stage_latency, seed=seed)
        latency = dataclasses.replace(latency, per_item_ms=args.per_item_ms, jitter_ms=args.jitter_ms)
        policy = BatchPolicy(args.batch_capacity, args.max_wait_ms)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    backend = create_mock_backend(latency, blocks_per_page=args.blocks_per_page, tokens_per_block=args.tokens_per_block)
    descriptors = [
        PageDescriptor(page_index=i, width_px=SYNTHETIC_WIDTH_PX, height_px=SYNTHETIC_HEIGHT_PX, source="bench")
        for i in range(args.pages)
    ]
    result = simulate(
        descriptors, backend, policy,
        queue_capacity=args.queue_capacity,
        recognition_workers=args.workers,
        sequential=args.sequential,
    )
    stats = result.stats
    output = {**stats.table_row(), **stats.model_dump(mode="json", exclude={"total_time_s", "pages_per_s", "tokens_per_s"})}
    _emit(json.dumps(output, indent=2) + "\n", args.out)
    return EXIT_FAILED_ITEMS if stats.failed else EXIT_OK


def cmd_mine(args) -> int:
    if args.confidences:
        confidences = json.loads(Path(args.confidences).read_text(encoding="utf-8"))
        flagged = flag_unstable_from_confidences(confidences, args.low_threshold, args.high_threshold, args.delta)
    elif args.detections:
        counts = json.loads(Path(args.detections).read_text(encoding="utf-8"))
        if not isinstance(counts, dict) or "low" not in counts or "high" not in counts:
            raise ConfigError(f"{args.detections}: expected {{\"low\": {{id: count}}, \"high\": {{id: count}}}}")
        flagged = flag_unstable(counts["low"], counts["high"], args.delta)
    else:
        raise ConfigError("mine needs --detections or --confidences")
    _emit(json.dumps({"unstable": flagged, "delta": args.delta}, indent=2) + "\n", args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="docparse", description="Document parsing pipeline and evaluation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    parse = sub.add_parser("parse", help="run the parsing pipeline and assemble Markdown/JSON")
    parse.add_argument("--input", help="pages-schema JSON file or a directory of them")
    parse.add_argument("--backend", help="backend kind: mock or playback (overrides the config)")
    parse.add_argument("--config", help="TOML or JSON config file")
    parse.add_argument("--out", required=True, help="output directory")
    parse.add_argument("--pages", type=int, help="synthetic page count when no --input is given")
    parse.add_argument("--seed", type=int)
    parse.set_defaults(handler=cmd_parse)

    evaluate = sub.add_parser("eval", help="score predictions against ground truth")
    evaluate.add_argument("--gt", required=True)
    evaluate.add_argument("--pred", required=True)
    evaluate.add_argument("--weights", help="w_text,w_formula,w_table")
    evaluate.add_argument("--report", choices=("json", "table"), default="json")
    evaluate.add_argument("--out")
    evaluate.add_argument("--config")
    evaluate.add_argument("--iou", type=float)
    evaluate.add_argument("--workers", type=int)
    evaluate.add_argument("--spotting-gt")
    evaluate.add_argument("--spotting-pred")
    evaluate.set_defaults(handler=cmd_eval)

    plan = sub.add_parser("plan", help="uncertainty-weighted sampling plan")
    plan.add_argument("--embeddings", required=True)
    plan.add_argument("--rollouts", required=True)
    plan.add_argument("--k", type=int, required=True)
    plan.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    plan.add_argument("--beta", type=float, default=DEFAULT_BETA)
    plan.add_argument("--budget", type=int, required=True)
    plan.add_argument("--seed", type=int)
    plan.add_argument("--samples-per-cluster", type=int, default=DEFAULT_SAMPLES_PER_CLUSTER)
    plan.add_argument("--redistribute", action="store_true")
    plan.add_argument("--tasks", help="JSON map of sample id -> task; plans each task separately")
    plan.add_argument("--out")
    plan.set_defaults(handler=cmd_plan)

    bench = sub.add_parser("bench", help="mock pipeline under the simulated clock")
    bench.add_argument("--pages", type=int, default=200)
    bench.add_argument("--stage-latency", default="10,20,15", help="prep,layout,recognition ms")
    bench.add_argument("--batch-capacity", type=int, default=1)
    bench.add_argument("--max-wait-ms", type=float, default=50.0)
    bench.add_argument("--per-item-ms", type=float, default=0.0)
    bench.add_argument("--jitter-ms", type=float, default=0.0)
    bench.add_argument("--blocks-per-page", type=int, default=1)
    bench.add_argument("--tokens-per-block", type=int, default=32)
    bench.add_argument("--queue-capacity", type=int, default=64)
    bench.add_argument("--workers", type=int, default=1)
    bench.add_argument("--sequential", action="store_true")
    bench.add_argument("--seed", type=int)
    bench.add_argument("--out")
    bench.set_defaults(handler=cmd_bench)

    mine = sub.add_parser("mine", help="dual-threshold hard-case mining")
    mine.add_argument("--detections", help='JSON {"low": {id: n}, "high": {id: n}}')
    mine.add_argument("--confidences", help="JSON {id: [confidence, ...]}")
    mine.add_argument("--low-threshold", type=float, default=0.3)
    mine.add_argument("--high-threshold", type=float, default=0.7)
    mine.add_argument("--delta", type=int, default=DEFAULT_UNSTABLE_DELTA)
    mine.add_argument("--out")
    mine.set_defaults(handler=cmd_mine)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ValueError, OSError) as exc:
        # Every domain error (config, schema, metric, planning, codec) is a ValueError
        print(f"docparse {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
