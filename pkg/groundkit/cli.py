"""Command-line entry point: tokens, build, eval, prompts and report subcommands."""
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence
import argparse
import json
import logging
import sys

from groundkit import __version__
from groundkit.config import ToolConfig, api_key, load_config, set_dotted
from groundkit.box_fusion import is_degenerate
from groundkit.database import ResponseCache
from groundkit.dataset_ingest import (
    GroundingSample,
    build_pairs,
    dataset_stats,
    load_annotations,
    partition_zero_shot,
    read_samples,
    split_samples,
    write_samples,
)
from groundkit.errors import ConfigError, DatasetError, GroundkitError, InputFileError, MetricError, ValidationError
from groundkit.geometry import ImageDims, PixelBox
from groundkit.knowledge_prompts import (
    KNOWLEDGE,
    AttributeSet,
    HttpBackend,
    LlmBackend,
    StubBackend,
    build_llm_query,
    generate_descriptions,
    load_definitions,
    load_descriptions,
    write_descriptions,
)
from groundkit.metrics_map import map_suite
from groundkit.metrics_rodeo import rodeo, rodeo_per_class
from groundkit.predictions import ground_truth_from_samples, load_predictions, vocabulary_gap
from groundkit.report import (
    FORMATS,
    EvalRun,
    ablation_table,
    comparison_table,
    per_class_chart_data,
    per_class_wins,
    read_archive,
    write_archive,
)
from groundkit.token_codec import POLICIES, encode_box, format_tokens, parse_sequence, split_tokens

logger = logging.getLogger(__name__)

DEFAULTS = ToolConfig()


def format_number(value: float) -> str:
    """Integers without a trailing .0, everything else to six decimals at most."""
    if float(value).is_integer():
        return str(int(value))
    return repr(round(float(value), 6))


def format_box(box: PixelBox) -> str:
    return ",".join(format_number(v) for v in box.as_tuple())


def parse_box(text: str) -> PixelBox:
    parts = [p for p in text.replace(" ", ",").split(",") if p]
    if len(parts) != 4:
        raise InputFileError(f"expected x0,y0,x1,y1, got {text!r}")
    try:
        return PixelBox(*(float(p) for p in parts))
    except ValueError:
        raise InputFileError(f"non-numeric coordinate in {text!r}")


def _parse_dims(text: str) -> ImageDims:
    try:
        return ImageDims.parse(text)
    except ValidationError as e:
        raise ConfigError(f"--dims: {e}")


def _read_lines(path: Optional[str]) -> List[str]:
    if path is None:
        return []
    try:
        with open(path, encoding="utf-8") as f:
            return [line.strip() for line in f if line.strip()]
    except OSError as e:
        raise InputFileError(f"cannot read {path}: {e}")


def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _timestamp() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


def _config_from_args(args, overrides: Optional[Dict] = None) -> ToolConfig:
    return load_config(args.config, overrides or {})


# tokens

def cmd_tokens(args) -> int:
    overrides = {}
    if args.policy:
        set_dotted(overrides, "codec.policy", args.policy)
    cfg = _config_from_args(args, overrides)
    dims = _parse_dims(args.dims)
    values = list(args.values) + _read_lines(args.input)
    if not values:
        raise InputFileError("nothing to convert: pass values or --input")

    if args.action == "encode":
        for value in values:
            print(format_tokens([encode_box(parse_box(value), dims, cfg.codec)]))
        return 0

    for value in values:
        parsed = parse_sequence(split_tokens(value), dims, cfg.codec.policy, cfg.codec)
        for diagnostic in parsed.diagnostics:
            print(f"warning: {diagnostic}", file=sys.stderr)
        for box in parsed.boxes:
            print(format_box(box))
    return 0


# build

def cmd_build(args) -> int:
    overrides = {}
    if args.mode:
        set_dotted(overrides, "prompts.mode", args.mode)
    if args.iou_thr is not None:
        set_dotted(overrides, "fusion.iou_threshold", args.iou_thr)
    if args.seed is not None:
        set_dotted(overrides, "dataset.seed", args.seed)
    if args.train_ratio is not None:
        set_dotted(overrides, "dataset.train_ratio", args.train_ratio)
    if args.format:
        set_dotted(overrides, "dataset.format", args.format)
    if args.descriptions:
        set_dotted(overrides, "prompts.descriptions", args.descriptions)
    if args.known_classes:
        set_dotted(overrides, "dataset.known_classes", args.known_classes)
    if args.out:
        set_dotted(overrides, "paths.out_dir", args.out)
    cfg = _config_from_args(args, overrides)
    out_dir = Path(cfg.paths.out_dir)

    loaded = load_annotations(args.annotations, cfg.dataset.format)
    if loaded.reject_ratio > cfg.dataset.max_reject_ratio:
        raise DatasetError(
            f"{len(loaded.rejects)} of {loaded.total} annotation entries rejected "
            f"({loaded.reject_ratio:.1%} > {cfg.dataset.max_reject_ratio:.1%}); first: {loaded.rejects[0]}"
        )

    descriptions = load_descriptions(cfg.prompts.descriptions) if cfg.prompts.mode == KNOWLEDGE else None
    samples = build_pairs(
        loaded.records,
        fusion=cfg.fusion,
        mode=cfg.prompts.mode,
        descriptions=descriptions,
        codec=cfg.codec,
        no_finding_labels=cfg.dataset.no_finding_labels,
        label_template=cfg.prompts.label_template,
        knowledge_template=cfg.prompts.knowledge_template,
        workers=args.workers,
    )
    if not samples:
        raise DatasetError("no image has an annotated abnormality; nothing to build")

    outputs = {}
    if cfg.dataset.known_classes:
        # Zero-shot evaluation set: everything is test data, tagged known/unknown.
        _, test = split_samples(samples, ratio=0.0)
        known, unknown = partition_zero_shot(test, cfg.dataset.known_classes, cfg.dataset.aliases)
        samples = sorted(known + unknown, key=lambda s: s.key)
        outputs["known"] = str(write_samples(out_dir / "known.jsonl", known))
        outputs["unknown"] = str(write_samples(out_dir / "unknown.jsonl", unknown))
        train = []
    else:
        train_ids = _read_lines(args.train_ids) if args.train_ids else None
        test_ids = _read_lines(args.test_ids) if args.test_ids else None
        train, test = split_samples(samples, cfg.dataset.train_ratio, cfg.dataset.seed, train_ids, test_ids)
        samples = sorted(train + test, key=lambda s: s.key)
        outputs["train"] = str(write_samples(out_dir / "train.jsonl", train))
        outputs["test"] = str(write_samples(out_dir / "test.jsonl", test))

    outputs["samples"] = str(write_samples(out_dir / "samples.jsonl", samples))
    for split_name, part in (("train", train), ("test", test)):
        manifest = out_dir / f"{split_name}_images.txt"
        ids = sorted({s.image_id for s in part})
        manifest.write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")
        outputs[f"{split_name}_manifest"] = str(manifest)

    skip = {label.casefold() for label in cfg.dataset.no_finding_labels}
    annotated = [r.box for r in loaded.records if r.box is not None and r.label.casefold() not in skip]
    input_boxes = len(annotated)
    degenerate = sum(1 for b in annotated if is_degenerate(b)) if cfg.fusion.skip_degenerate else 0
    stats = dataset_stats(samples)
    report = {
        "config_fingerprint": cfg.fingerprint(),
        "annotations": Path(args.annotations).name,
        "records": len(loaded.records),
        "rejects": [str(r) for r in loaded.rejects],
        "fusion": {
            "iou_threshold": cfg.fusion.iou_threshold,
            "score_mode": cfg.fusion.score_mode,
            "skip_degenerate": cfg.fusion.skip_degenerate,
            "input_boxes": input_boxes,
            "degenerate_boxes": degenerate,
            "fused_boxes": stats["boxes"],
        },
        "prompts": {
            "mode": cfg.prompts.mode,
            "label_template": cfg.prompts.label_template,
            "knowledge_template": cfg.prompts.knowledge_template,
        },
        "codec": {"bins": cfg.codec.bins, "rounding": cfg.codec.rounding},
        "split": {
            "seed": cfg.dataset.seed,
            "train_ratio": cfg.dataset.train_ratio,
            "explicit": bool(args.train_ids or args.test_ids),
            "zero_shot": bool(cfg.dataset.known_classes),
        },
        "stats": stats,
        "outputs": {key: Path(value).name for key, value in sorted(outputs.items())},
    }
    report_path = _write_json(out_dir / "build_report.json", report)
    _write_json(out_dir / "build_report.meta.json", {"created_at": _timestamp(), "version": __version__})

    print("=== Build Results ===")
    print(f"Annotation records: {len(loaded.records)} ({len(loaded.rejects)} rejected)")
    print(f"Boxes: {input_boxes} annotated, {degenerate} degenerate dropped, {stats['boxes']} after fusion")
    print(f"Grounding pairs: {stats['samples']} over {stats['images']} images")
    for part, count in sorted(stats["per_split"].items()):
        print(f"  {part}: {count['samples']} pairs / {count['images']} images")
    if cfg.dataset.known_classes:
        for part, count in sorted(stats["partitions"].items()):
            print(f"  {part}: {count} pairs")
    print(f"Report: {report_path}")
    return 0


# eval

def cmd_eval(args) -> int:
    overrides = {}
    if args.interp:
        set_dotted(overrides, "metrics.interpolation", args.interp)
    if args.policy:
        set_dotted(overrides, "codec.policy", args.policy)
    if args.aggregation:
        set_dotted(overrides, "metrics.rodeo.aggregation", args.aggregation)
    cfg = _config_from_args(args, overrides)

    samples: List[GroundingSample] = read_samples(args.ground_truth, cfg.codec)
    if args.split:
        samples = [s for s in samples if s.split == args.split]
    if args.partition:
        samples = [s for s in samples if s.partition == args.partition]
    gts, dims = ground_truth_from_samples(samples)
    if not gts:
        raise MetricError(f"no ground truth boxes in {args.ground_truth}")

    detections = load_predictions(args.predictions, dims, cfg.codec, cfg.codec.policy)
    only_predicted, only_expected = vocabulary_gap(detections, gts)
    if detections and len(only_predicted) == len({d.label for d in detections}):
        raise MetricError(
            f"prediction labels do not overlap the ground truth; "
            f"predicted only: {only_predicted}; ground truth only: {only_expected}"
        )
    if only_predicted:
        logger.warning("Labels absent from ground truth: %s", ", ".join(only_predicted))

    ap = map_suite(detections, gts, cfg.metrics.interpolation) if args.which in ("map", "all") else None
    scores, per_class = None, {}
    if args.which in ("rodeo", "all"):
        scores = rodeo(detections, gts, cfg.metrics.rodeo)
        per_class = rodeo_per_class(detections, gts, cfg.metrics.rodeo)

    fingerprint = cfg.fingerprint()
    run = EvalRun(
        run_id=args.run_id or f"{args.method}-{fingerprint[:8]}",
        method_name=args.method,
        config_fingerprint=fingerprint,
        ap=ap,
        rodeo=scores,
        per_class=per_class,
        params_count=args.params,
        train_samples=args.train_samples,
        test_set=args.test_set,
        metadata={
            "predictions": Path(args.predictions).name,
            "ground_truth": Path(args.ground_truth).name,
            "detections": len(detections),
            "ground_truth_boxes": len(gts),
            "images": len(dims),
            "labels_only_predicted": only_predicted,
            "labels_only_in_ground_truth": only_expected,
            "rodeo": cfg.metrics.rodeo.describe() if scores is not None else None,
            "per_class_skipped": only_predicted if scores is not None else [],
        },
    )
    archive = Path(args.out) if args.out else Path(cfg.paths.out_dir) / f"{run.run_id}.json"
    write_archive(archive, [run])

    print("=== Evaluation ===")
    print(f"Images: {len(dims)}, ground-truth boxes: {len(gts)}, detections: {len(detections)}")
    print(f"Archive: {archive}")
    print()
    print(comparison_table([run]), end="")
    return 0


# prompts

def _backend(cfg: ToolConfig) -> LlmBackend:
    prompts = cfg.prompts
    if prompts.backend == "stub":
        return StubBackend.from_file(prompts.descriptions)
    if not prompts.endpoint or not prompts.model:
        raise ConfigError("the http backend needs prompts.endpoint and prompts.model")
    return HttpBackend(prompts.endpoint, prompts.model, api_key(), prompts.temperature, prompts.timeout)


def cmd_prompts(args) -> int:
    overrides = {}
    if args.definitions:
        set_dotted(overrides, "prompts.definitions", args.definitions)
    if args.attributes:
        set_dotted(overrides, "prompts.attributes", args.attributes)
    if args.backend:
        set_dotted(overrides, "prompts.backend", args.backend)
    if args.workers:
        set_dotted(overrides, "prompts.concurrency", args.workers)
    if args.cache:
        set_dotted(overrides, "paths.cache", args.cache)
    cfg = _config_from_args(args, overrides)

    registry = load_definitions(cfg.prompts.definitions)
    attrs = AttributeSet(tuple(cfg.prompts.attributes))
    selected = list(registry)
    if args.name:
        selected = []
        for name in args.name:
            d = registry.get(name)
            if d is None:
                raise InputFileError(f"{name!r} is not in {cfg.prompts.definitions}")
            selected.append(d)

    if args.action == "query":
        queries = [build_llm_query(d, attrs) for d in selected]
        if args.out:
            Path(args.out).write_text("".join(q + "\n" for q in queries), encoding="utf-8")
        else:
            for query in queries:
                print(query)
        return 0

    if not args.out:
        raise ConfigError("prompts generate needs --out")
    cache = ResponseCache(cfg.paths.cache) if cfg.paths.cache else None
    result = generate_descriptions(
        selected, attrs, _backend(cfg), cache,
        max_retries=cfg.prompts.max_retries,
        backoff=cfg.prompts.backoff,
        concurrency=cfg.prompts.concurrency,
    )
    write_descriptions(args.out, result.descriptions, result.missing)

    print("=== Description Generation ===")
    print(f"Described: {len(result.descriptions)} of {len(selected)}")
    print(f"Backend calls: {result.backend_calls}")
    print(f"Output: {args.out}")
    if result.missing:
        print("Missing:", file=sys.stderr)
        for name, error in sorted(result.missing.items()):
            print(f"  {name}: {error}", file=sys.stderr)
        return 1
    return 0


# report

def cmd_report(args) -> int:
    runs: List[EvalRun] = []
    for path in args.archives:
        runs.extend(read_archive(path))
    if not runs:
        raise InputFileError("the archives hold no runs")
    by_id = {run.run_id: run for run in runs}

    def lookup(run_id: str) -> EvalRun:
        if run_id not in by_id:
            raise InputFileError(f"no run {run_id!r}; available: {sorted(by_id)}")
        return by_id[run_id]

    if args.ablation:
        text = ablation_table(lookup(args.ablation[0]), lookup(args.ablation[1]))
    elif args.chart:
        text = json.dumps(per_class_chart_data(lookup(args.chart), args.metric), indent=2) + "\n"
    elif args.wins:
        text = json.dumps(per_class_wins(runs, args.metric), indent=2, sort_keys=True) + "\n"
    else:
        text = comparison_table(runs, args.format)

    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    return 0


# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file; flags override it, it overrides built-in defaults")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")

    parser = argparse.ArgumentParser(
        prog="groundkit",
        description="Grounding dataset preparation and evaluation for detection-as-sequence models.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    tokens = sub.add_parser("tokens", parents=[common], help="convert pixel boxes to/from location tokens")
    tokens.add_argument("action", choices=("encode", "decode"))
    tokens.add_argument("values", nargs="*", help='boxes "x0,y0,x1,y1" (encode) or token strings (decode)')
    tokens.add_argument("--input", help="file with one box or token string per line")
    tokens.add_argument("--dims", required=True, help="image size WxH, e.g. 512x512")
    tokens.add_argument("--policy", choices=POLICIES,
                        help=f"decode policy for malformed sequences (default: {DEFAULTS.codec.policy}; "
                             f"{DEFAULTS.codec.bins} bins, rounding {DEFAULTS.codec.rounding})")
    tokens.set_defaults(handler=cmd_tokens)

    build = sub.add_parser("build", parents=[common], help="build grounding samples from annotations")
    build.add_argument("annotations", help="annotation CSV or COCO-style JSON")
    build.add_argument("--out", help=f"output directory (default: {DEFAULTS.paths.out_dir})")
    build.add_argument("--format", choices=("csv", "coco_json"), help="annotation format (default: by extension)")
    build.add_argument("--mode", choices=("label_only", "knowledge"),
                       help=f"grounding prompt mode (default: {DEFAULTS.prompts.mode})")
    build.add_argument("--descriptions", help="knowledge descriptions YAML (default: bundled VinDr table)")
    build.add_argument("--iou-thr", type=float,
                       help=f"box fusion IoU threshold (default: {DEFAULTS.fusion.iou_threshold}, "
                            f"score mode {DEFAULTS.fusion.score_mode})")
    build.add_argument("--train-ratio", type=float,
                       help=f"fraction of images for training (default: {DEFAULTS.dataset.train_ratio})")
    build.add_argument("--seed", type=int, help=f"split seed (default: {DEFAULTS.dataset.seed})")
    build.add_argument("--train-ids", help="file listing training image ids")
    build.add_argument("--test-ids", help="file listing test image ids")
    build.add_argument("--known-classes", nargs="+",
                       help="build a zero-shot test set partitioned by these training classes")
    build.add_argument("--workers", type=int, default=1, help="parallel workers (default: 1)")
    build.set_defaults(handler=cmd_build)

    ev = sub.add_parser("eval", parents=[common], help="score predictions against ground-truth samples")
    ev.add_argument("--predictions", required=True, help="predictions JSONL")
    ev.add_argument("--ground-truth", required=True, help="samples JSONL written by build")
    ev.add_argument("--which", choices=("map", "rodeo", "all"), default="all", help="metric suites (default: all)")
    ev.add_argument("--interp", choices=("101pt", "cont"),
                    help=f"AP interpolation (default: {DEFAULTS.metrics.interpolation})")
    ev.add_argument("--aggregation", choices=("micro", "macro"),
                    help=f"RoDeO aggregation over images (default: {DEFAULTS.metrics.rodeo.aggregation}, "
                         f"sigma {DEFAULTS.metrics.rodeo.sigma})")
    ev.add_argument("--policy", choices=POLICIES,
                    help=f"decode policy for token predictions (default: {DEFAULTS.codec.policy})")
    ev.add_argument("--split", choices=("train", "test"), help="evaluate only samples of this split")
    ev.add_argument("--partition", choices=("in_domain", "known", "unknown"),
                    help="evaluate only samples of this partition")
    ev.add_argument("--method", default="model", help="method name shown in tables (default: model)")
    ev.add_argument("--run-id", help="run id (default: method plus config fingerprint prefix)")
    ev.add_argument("--params", help="parameter count label, e.g. 0.23B")
    ev.add_argument("--train-samples", type=int, help="number of training samples")
    ev.add_argument("--test-set", help="test set name for grouped tables")
    ev.add_argument("--out", help="run archive path (default: <out_dir>/<run_id>.json)")
    ev.set_defaults(handler=cmd_eval)

    prompts = sub.add_parser("prompts", parents=[common], help="build LLM queries or generate descriptions")
    prompts.add_argument("action", choices=("query", "generate"))
    prompts.add_argument("--definitions", help="definitions YAML (default: bundled VinDr table)")
    prompts.add_argument("--name", nargs="+", help="only these abnormalities")
    prompts.add_argument("--attributes", nargs="+",
                         help=f"visual attributes (default: {', '.join(DEFAULTS.prompts.attributes)})")
    prompts.add_argument("--backend", choices=("stub", "http"),
                         help=f"LLM backend (default: {DEFAULTS.prompts.backend})")
    prompts.add_argument("--cache", help="SQLite response cache path")
    prompts.add_argument("--workers", type=int,
                         help=f"concurrent backend calls (default: {DEFAULTS.prompts.concurrency})")
    prompts.add_argument("--out", help="output file (query: text, generate: YAML)")
    prompts.set_defaults(handler=cmd_prompts)

    rep = sub.add_parser("report", parents=[common], help="render tables and chart data from run archives")
    rep.add_argument("archives", nargs="+", help="run archive JSON files")
    rep.add_argument("--format", choices=FORMATS, default="markdown", help="table format (default: markdown)")
    rep.add_argument("--ablation", nargs=2, metavar=("BASELINE", "IMPROVED"), help="ablation table of two run ids")
    rep.add_argument("--chart", metavar="RUN_ID", help="per-class chart data of one run")
    rep.add_argument("--wins", action="store_true", help="per-class wins across runs")
    rep.add_argument("--metric", default="r_total", choices=("r_loc", "r_shape", "r_cls", "r_total"),
                     help="per-class metric for --chart and --wins (default: r_total)")
    rep.add_argument("--out", help="write to this file instead of stdout")
    rep.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.handler(args)
    except GroundkitError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
