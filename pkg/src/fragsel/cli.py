import argparse
import json
import logging
import sys
from contextlib import ExitStack
from pathlib import Path
from typing import Any, Dict, List, Optional

from fragsel.backends import Backends
from fragsel.config import RunManifest, load_config
from fragsel.exceptions import EXIT_DATA_ERROR, EXIT_OK, EXIT_USAGE, FormatError, FragselError
from fragsel.fig import build_fig_dataset, load_fig_records, load_samples, write_fig_records
from fragsel.http_backend import endpoint_backend, load_http_backends
from fragsel.mock_backends import load_mock_backends, mock_from_fixture
from fragsel.models import Config, Document, load_document, load_query
from fragsel.pipeline import MODE_COARSE, MODE_TRUNCATE, FragmentPipeline, result_row
from fragsel.report import bucket_fig, format_histogram, format_summary, summarize_results
from fragsel.selector import SelectorModel, TrainConfig, evaluate, train
from fragsel.sql_storage import SQLFigStorage
from fragsel.text_segmentation import recur_split, split_sentences, trace_fragments
from fragsel.utils import canonical_json, read_json, read_jsonl, split_manifest, write_jsonl
from fragsel.visual_segmentation import VisualFilterThresholds, explain_candidates

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

logger = logging.getLogger("fragsel")


def setup_logging(verbose: bool):
    for existing in [h for h in logger.handlers if getattr(h, "fragsel_cli", False)]:
        logger.removeHandler(existing)
    handler = logging.StreamHandler(sys.stderr)
    handler.fragsel_cli = True
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.WARNING)


def _endpoint_entry(source: str) -> Optional[Dict[str, Any]]:
    if not Path(source).is_file():
        return None
    try:
        entry = read_json(source)
    except FormatError:
        return None
    if isinstance(entry, dict) and "endpoint_url" in entry:
        return entry
    return None


def _backend(stack: ExitStack, source: str, corpus: Optional[Dict[str, Document]] = None):
    """A fixture file, an http(s) url, or a JSON file holding one endpoint entry.

    HTTP backends are closed when ``stack`` unwinds.
    """
    if source.startswith(("http://", "https://")):
        return stack.enter_context(endpoint_backend(source, logger=logger))
    entry = _endpoint_entry(source)
    if entry is not None:
        backend = endpoint_backend(entry, logger=logger, origin=f"endpoint file {source}")
        return stack.enter_context(backend)
    return mock_from_fixture(source, corpus=corpus)


def _backends(stack: ExitStack, source: str, corpus: Dict[str, Document]) -> Backends:
    if Path(source).is_dir():
        return load_mock_backends(source, corpus=corpus)
    backends = load_http_backends(source, logger=logger)
    stack.callback(backends.close)
    return backends


def load_corpus(path) -> Dict[str, Document]:
    _, rows = split_manifest(read_jsonl(path))
    corpus = {}
    for row in rows:
        doc = load_document(row)
        if doc.id in corpus:
            raise FormatError(f"duplicate document id {doc.id!r} in {path}")
        corpus[doc.id] = doc
    return corpus


def load_queries(path):
    _, rows = split_manifest(read_jsonl(path))
    return [load_query(row) for row in rows]


def _print_json(payload):
    print(json.dumps(payload, indent=2, sort_keys=True))


def _config(args) -> Config:
    return load_config(args.config, overrides={"seed": args.seed})


def cmd_segment_text(args) -> int:
    config = _config(args)
    query = load_query(read_json(args.query))
    doc = load_document(read_json(args.doc))
    sentences = split_sentences(doc.body) if not doc.is_image and doc.body.strip() else None
    with ExitStack() as stack:
        scorer = _backend(stack, args.scores)
        fragment, trace = recur_split(query, doc, scorer, sentences=sentences, logger=logger)
    output = {
        "fragment": {
            "parent_doc_id": fragment.parent_doc_id,
            "sentence_span": list(fragment.sentence_span),
            "text": fragment.text,
            "relevance_score": fragment.relevance_score,
        },
        "trace": trace.to_dict(),
    }
    if config.collect_trace_nodes:
        output["trace_fragments"] = [
            {"sentence_span": list(f.sentence_span), "text": f.text}
            for f in trace_fragments(doc, sentences, trace)
        ]
    _print_json(output)
    return EXIT_OK


def cmd_segment_image(args) -> int:
    config = _config(args)
    query = load_query(read_json(args.query))
    if args.corpus:
        corpus = load_corpus(args.corpus)
        if args.image_id not in corpus:
            raise FormatError(f"image {args.image_id!r} is not in {args.corpus}")
        image = corpus[args.image_id]
    else:
        image = Document.of_image(args.image_id, args.image_id)
    if not image.is_image:
        raise FormatError(f"document {image.id!r} is not an image")

    with ExitStack() as stack:
        candidates = _backend(stack, args.detections).detect(query, image.image_ref)
    verdicts = explain_candidates(candidates, VisualFilterThresholds.from_config(config))
    _print_json(
        {
            "image_id": image.id,
            "kept": [v for v in verdicts if v["kept"]],
            "rejected": [v for v in verdicts if not v["kept"]],
        }
    )
    return EXIT_OK


def cmd_fig_build(args) -> int:
    config = _config(args)
    samples = load_samples(args.input)
    store = SQLFigStorage(args.store) if args.store else None
    with ExitStack() as stack:
        likelihood = _backend(stack, args.likelihood)
        teacher = _backend(stack, args.teacher) if args.teacher else None
        records = build_fig_dataset(
            samples, likelihood, teacher=teacher, config=config, store=store, logger=logger
        )
    descriptors = {"likelihood": likelihood.descriptor}
    if teacher is not None:
        descriptors["teacher"] = teacher.descriptor
    manifest = RunManifest("fig build", config.to_dict(), descriptors, config.seed)
    write_fig_records(
        args.out, records, header={"tau_fig": config.tau_fig, **manifest.to_header()}
    )
    logger.info(f"wrote {len(records)} FIG records to {args.out}")
    return EXIT_OK


def cmd_selector_train(args) -> int:
    config = _config(args)
    train_config = TrainConfig(
        alpha=args.alpha,
        temperature=args.temperature,
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=config.seed,
    )
    records = load_fig_records(args.data)
    model = train(records, config=train_config, logger=logger)
    model.save(args.out)
    summary = {"final_loss": model.final_loss, "loss_curve": model.loss_curve}
    if args.holdout:
        summary["holdout"] = evaluate(model, load_fig_records(args.holdout))
    _print_json(summary)
    return EXIT_OK


def cmd_run(args) -> int:
    config = _config(args)
    if args.baseline == MODE_TRUNCATE and args.budget is None:
        print("error=USAGE --baseline truncate needs --budget", file=sys.stderr)
        return EXIT_USAGE

    corpus = load_corpus(args.corpus)
    queries = load_queries(args.queries)
    model = SelectorModel.load(args.model)

    rows = []
    with ExitStack() as stack:
        backends = _backends(stack, args.backends, corpus)
        pipeline = FragmentPipeline(config, backends, model, logger=logger)
        for query in queries:
            if args.baseline:
                _, report = pipeline.run_baseline(
                    query, args.baseline, token_budget=args.budget, top_k=args.top_k
                )
            else:
                _, report = pipeline.run(query)
            rows.append(result_row(query, report))

    command = f"run --baseline {args.baseline}" if args.baseline else "run"
    manifest = RunManifest(command, config.to_dict(), backends.descriptors(), config.seed)
    write_jsonl(args.out, rows, header=manifest.to_header())
    logger.info(f"wrote {len(rows)} results to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    output = {}
    lines: List[str] = []
    if args.results:
        rows = []
        for path in args.results:
            header, data = split_manifest(read_jsonl(path))
            manifest = RunManifest.from_header(header)
            if manifest is not None:
                lines.append(f"{path}: {manifest.command} at {manifest.created.isoformat()}")
            rows.extend(data)
        summaries = summarize_results(rows)
        output["results"] = summaries
        lines.append(format_summary(summaries))
    if args.fig:
        try:
            edges = [float(e) for e in args.edges.split(",")] if args.edges else []
        except ValueError:
            print(f"error=USAGE --edges {args.edges!r} is not a list of numbers", file=sys.stderr)
            return EXIT_USAGE
        histogram = bucket_fig(load_fig_records(args.fig), edges)
        output["fig"] = histogram.to_dict()
        lines.append(format_histogram(histogram))
    if not output:
        print("error=USAGE report needs --results or --fig", file=sys.stderr)
        return EXIT_USAGE

    if args.json:
        print(canonical_json(output))
    else:
        print("\n\n".join(lines))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument("--verbose", action="store_true", help="debug logging to stderr")

    parser = argparse.ArgumentParser(
        prog="fragsel", description="Fragment-level evidence selection for RAG"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment-text", parents=[common], help="recursive text split")
    p.add_argument("--query", required=True)
    p.add_argument("--doc", required=True)
    p.add_argument("--scores", required=True, help="scorer fixture, url or endpoint file")
    p.set_defaults(func=cmd_segment_text)

    p = sub.add_parser("segment-image", parents=[common], help="filter detector regions")
    p.add_argument("--query", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--detections", required=True, help="detector fixture, url or endpoint file")
    p.add_argument("--corpus", help="corpus resolving the image id to its reference")
    p.set_defaults(func=cmd_segment_image)

    fig = sub.add_parser("fig", help="FIG supervision").add_subparsers(
        dest="fig_command", required=True
    )
    p = fig.add_parser("build", parents=[common], help="score fragments by FIG")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--likelihood", required=True, help="fixture, url or endpoint file")
    p.add_argument("--teacher")
    p.add_argument("--store", help="SQLAlchemy url of a resumable record store")
    p.set_defaults(func=cmd_fig_build)

    selector = sub.add_parser("selector", help="student selector").add_subparsers(
        dest="selector_command", required=True
    )
    defaults = TrainConfig()
    p = selector.add_parser("train", parents=[common], help="train by distillation")
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, default=defaults.alpha)
    p.add_argument("--temperature", type=float, default=defaults.temperature)
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--batch-size", type=int, default=defaults.batch_size)
    p.add_argument("--lr", type=float, default=defaults.learning_rate)
    p.add_argument("--holdout", help="FIG records to evaluate the trained model on")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_selector_train)

    p = sub.add_parser("run", parents=[common], help="answer queries")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--backends", required=True, help="fixture directory or endpoints file")
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", choices=[MODE_TRUNCATE, MODE_COARSE])
    p.add_argument("--budget", type=int, help="token budget of the truncation baseline")
    p.add_argument("--top-k", type=int, help="documents kept by the coarse baseline")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", parents=[common], help="aggregate tables")
    p.add_argument("--results", action="append", help="run output, repeatable")
    p.add_argument("--fig", help="FIG records to bucket")
    p.add_argument("--edges", default="0.0,0.2", help="comma separated bucket edges")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except FragselError as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error={exc.code} {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error=FILE_NOT_FOUND {exc.filename}", file=sys.stderr)
        return EXIT_DATA_ERROR
    except OSError as exc:
        print(f"error=IO_ERROR {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
