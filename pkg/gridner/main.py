"""
GridNER - Command-Line Entry Point
Config-driven runs of corpus statistics, masked-LM pre-training, fine-tuning,
evaluation, prediction, gradient checks and ablations.

Exit codes: 0 success, 1 check or metric failure, 2 usage, config or data error.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from pydantic import ValidationError

from gridner.core.config import settings
from gridner.core.exceptions import CorpusValidationError, GridNERError
from gridner.diffcore import set_default_dtype
from gridner.models.params import ModelParams
from gridner.repositories.corpus_repository import CorpusRepository
from gridner.schemas.config import RunConfig, load_run_config
from gridner.schemas.corpus import SentenceRecord
from gridner.services.corpus_service import (
    QUERIES,
    build_vocab,
    compare_stats,
    compute_stats,
    load_corpus,
    mlm_corpus,
    render_stats_markdown,
)
from gridner.services.evaluation_service import build_report, gold_spans, micro_metrics, render_report
from gridner.services.prediction_service import predict, predict_corpus, render_case
from gridner.services.training_service import (
    checkpoint_model_config,
    finetune,
    load_checkpoint,
    make_meta,
    mlm_pretrain,
    prepare_model,
    restore_model,
    save_checkpoint,
)
from gridner.services.verification_service import render_rows, run_gradcheck
from gridner.utils.logger import logger, run_logger, set_verbosity
from gridner.utils.rng import RngStreams


ABLATIONS = (
    ("Full", {}),
    ("-MLP", {"use_mlp_branch": False}),
    ("-Biaffine", {"use_biaffine": False}),
    ("-DConv", {"use_dconv": False}),
    ("-Region Emb", {"use_region_emb": False}),
    ("-Distance Emb", {"use_distance_emb": False}),
)

CASE_LIMIT = 20

repository = CorpusRepository()


def _load_config(path: str) -> RunConfig:
    config = load_run_config(Path(path))
    set_default_dtype(config.precision)
    return config


def _records(path: Optional[Path], label: str, required: bool = True) -> List[SentenceRecord]:
    if path is None:
        if required:
            raise FileNotFoundError(f"No {label} file configured (paths.{label}_file)")
        return []
    return load_corpus(path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_stats(args: argparse.Namespace) -> int:
    """Entity statistics per split, for train+dev and for the union of all splits."""
    splits = [(Path(p).stem, load_corpus(Path(p))) for p in args.data]
    combined = list(splits)
    if len(splits) >= 3:
        combined.append(("+".join(name for name, _ in splits[:2]), splits[0][1] + splits[1][1]))
    if len(splits) >= 2:
        combined.append(("all", [r for _, records in splits for r in records]))

    stats = {name: compute_stats(records) for name, records in combined}
    out = Path(args.out)
    repository.write_json(out / "stats.json", {name: s.model_dump() for name, s in stats.items()})
    markdown = "".join(render_stats_markdown(s, title=name) + "\n" for name, s in stats.items())
    if args.compare and len(splits) == 2:
        (a, _), (b, _) = splits
        markdown += "## Comparison\n\n" + compare_stats(stats[a], stats[b], labels=(a, b))
    repository.write_text(out / "stats.md", markdown)
    for name, s in stats.items():
        logger.info(f"{name}: {s.records} records, {s.total} entities, {s.nested} nested ({s.nested_ratio:.2f}%)")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    """Masked-LM pre-training of the encoder on the training texts."""
    config = _load_config(args.config)
    streams = RngStreams(config.seed)
    records = _records(config.paths.train_file, "train")

    if args.resume:
        checkpoint = load_checkpoint(Path(args.resume))
        params, vocab = restore_model(checkpoint, config.model)
        start_step = checkpoint.meta.step
        logger.info(f"Resuming pre-training from {args.resume} at step {start_step}")
    else:
        vocab = build_vocab(records, extra_texts=QUERIES.values())
        params = ModelParams.initialize(config.model, len(vocab), streams["init"])
        start_step = 0

    sequences = mlm_corpus(records, vocab, config.model.max_len)
    optimizer, history = mlm_pretrain(sequences, params, vocab, config, streams,
                                      start_step=start_step, epochs=args.epochs)
    meta = make_meta("mlm", vocab, config, optimizer.step_count, epoch=len(history))
    path = save_checkpoint(params, meta, config.paths.checkpoint_dir / "mlm.ckpt", config.precision)
    repository.write_json(config.paths.report_dir / "mlm_log.json",
                          {"step": optimizer.step_count, "losses": history, "checkpoint": str(path)})
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    """Fine-tuning with dev-F1 model selection."""
    config = _load_config(args.config)
    streams = RngStreams(config.seed)
    train_records = _records(config.paths.train_file, "train")
    dev_records = _records(config.paths.dev_file, "dev", required=False)
    init = Path(args.init) if args.init else config.paths.init_checkpoint

    params, vocab, _ = prepare_model(train_records, config, streams, init)
    result = finetune(train_records, dev_records, params, vocab, config, streams,
                      checkpoint_path=config.paths.checkpoint_dir / "best.ckpt")

    summary = {
        "best_epoch": result.best_epoch,
        "best_f1": result.best_f1,
        "history": [vars(log) for log in result.history],
        "config": config.echo(),
    }
    if config.train.eval_on_train:
        predictions, _, _ = predict_corpus(train_records, params, vocab, config.model)
        summary["final_train_f1"] = micro_metrics(predictions, gold_spans(train_records)).f1
        logger.info(f"Final train micro-F1: {summary['final_train_f1']:.4f}")
    repository.write_json(config.paths.report_dir / "train_log.json", summary)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    """Metrics report of a checkpoint on a labelled corpus."""
    config = _load_config(args.config)
    checkpoint = load_checkpoint(Path(args.checkpoint))
    params, vocab = restore_model(checkpoint, config.model)
    data = Path(args.data) if args.data else config.paths.test_file
    records = _records(data, "test")

    predictions, truncation, diagnostics = predict_corpus(records, params, vocab, config.model)
    report = build_report(predictions, gold_spans(records), truncation.as_dict(), diagnostics, config.echo())

    markdown = render_report(report, "markdown")
    cases = [(r, p) for r, p in zip(records, predictions) if set(r.spans()) != {e.span for e in p}]
    if cases:
        markdown += "\n## Cases\n\n"
        for record, predicted in cases[:CASE_LIMIT]:
            markdown += f"- gold: {render_case(record.text, record.entities)}\n"
            markdown += f"  pred: {render_case(record.text, predicted)}\n"

    out = Path(args.out) if args.out else config.paths.report_dir
    repository.write_text(out / "report.json", render_report(report, "json"))
    repository.write_text(out / "report.md", markdown)
    logger.info(f"Micro P/R/F1: {report.micro.precision:.4f} / {report.micro.recall:.4f} / {report.micro.f1:.4f}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    """Entities for raw texts as JSON on stdout (bracketed sentences with --pretty)."""
    checkpoint = load_checkpoint(Path(args.checkpoint))
    model_config = _load_config(args.config).model if args.config else None
    params, vocab = restore_model(checkpoint, model_config)
    config = model_config or checkpoint_model_config(checkpoint)

    if args.text is not None:
        texts, single = [args.text], True
    else:
        texts = Path(args.input).read_text(encoding="utf-8").splitlines()
        single = False

    results = []
    for text in texts:
        entities = predict(SentenceRecord(text=text), params, vocab, config)
        if args.pretty:
            print(render_case(text, entities))
        results.append({"text": text, "entities": [e.model_dump() for e in entities]})

    if not args.pretty:
        payload = results[0]["entities"] if single else results
        print(json.dumps(payload, ensure_ascii=False))
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    """Finite-difference check of every op and the full model; exit 1 on any failure."""
    set_default_dtype("float64")
    rows = run_gradcheck(args.op, inject_fault=args.inject_fault, seed=args.seed)
    print(render_rows(rows), end="")
    return 0 if all(row.passed for row in rows) else 1


def _ablation_label(name: str, pretrained: bool) -> str:
    # Without an MLM checkpoint every row also lacks adaptive pre-training (AP).
    if pretrained:
        return name
    return "-AP" if name == "Full" else f"-(AP+{name[1:]})"


def cmd_ablate(args: argparse.Namespace) -> int:
    """Fine-tune the full model and each ablation with the same seed; write the ablation table."""
    config = _load_config(args.config)
    train_records = _records(config.paths.train_file, "train")
    dev_records = _records(config.paths.dev_file, "dev", required=False)
    test_records = _records(config.paths.test_file, "test", required=False)
    eval_records = test_records or dev_records or train_records
    init = Path(args.init) if args.init else config.paths.init_checkpoint

    rows = []
    for name, flags in ABLATIONS:
        variant = config.model_copy(update={"model": config.model.model_copy(update=flags)})
        streams = RngStreams(variant.seed)
        params, vocab, _ = prepare_model(train_records, variant, streams, init)
        run_logger("cli", phase="ablate", variant=name).info("fine-tuning")
        result = finetune(train_records, dev_records, params, vocab, variant, streams)
        predictions, _, _ = predict_corpus(eval_records, params, vocab, variant.model)
        scores = micro_metrics(predictions, gold_spans(eval_records))
        rows.append({
            "model": name,
            "precision": scores.precision,
            "recall": scores.recall,
            "f1": scores.f1,
            "epochs_to_best": None if result.best_epoch is None else result.best_epoch + 1,
            "epochs_run": len(result.history),
        })

    lines = ["| Model | P | R | F1 | Epochs to best |", "|---|---:|---:|---:|---:|"]
    for row in rows:
        label = _ablation_label(row["model"], pretrained=init is not None)
        best = "-" if row["epochs_to_best"] is None else row["epochs_to_best"]
        lines.append(f"| {label} | {100 * row['precision']:.2f} | {100 * row['recall']:.2f} "
                     f"| {100 * row['f1']:.2f} | {best} |")
    repository.write_json(config.paths.report_dir / "ablation.json", {"rows": rows, "config": config.echo()})
    repository.write_text(config.paths.report_dir / "ablation.md", "\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridner", description=f"{settings.APP_NAME} {settings.APP_VERSION}: "
                                     "MRC co-prediction NER for flat and nested medical entities")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Only warnings and errors on stderr")
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug output on stderr")
    commands = parser.add_subparsers(dest="command", required=True)

    stats = commands.add_parser("stats", help="Corpus statistics")
    stats.add_argument("--data", nargs="+", required=True, help="Corpus files (e.g. train dev test)")
    stats.add_argument("--out", required=True, help="Output directory")
    stats.add_argument("--compare", action="store_true", help="Side-by-side table of two corpus files")
    stats.set_defaults(handler=cmd_stats)

    pretrain = commands.add_parser("pretrain", help="Masked-LM pre-training")
    pretrain.add_argument("--config", required=True)
    pretrain.add_argument("--resume", help="Continue from an MLM checkpoint")
    pretrain.add_argument("--epochs", type=int, help="Override train.mlm_epochs")
    pretrain.set_defaults(handler=cmd_pretrain)

    train = commands.add_parser("train", help="Fine-tuning")
    train.add_argument("--config", required=True)
    train.add_argument("--init", help="Initialize the encoder from a checkpoint")
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("eval", help="Evaluate a checkpoint")
    evaluate.add_argument("--config", required=True)
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--data", help="Labelled corpus (default: paths.test_file)")
    evaluate.add_argument("--out", help="Report directory (default: paths.report_dir)")
    evaluate.set_defaults(handler=cmd_eval)

    predict_cmd = commands.add_parser("predict", help="Predict entities for raw text")
    predict_cmd.add_argument("--checkpoint", required=True)
    predict_cmd.add_argument("--config", help="Run config (default: the one stored in the checkpoint)")
    source = predict_cmd.add_mutually_exclusive_group(required=True)
    source.add_argument("--text")
    source.add_argument("--in", dest="input", help="UTF-8 file with one text per line")
    predict_cmd.add_argument("--pretty", action="store_true", help="Print bracketed sentences instead of JSON")
    predict_cmd.set_defaults(handler=cmd_predict)

    gradcheck = commands.add_parser("gradcheck", help="Finite-difference gradient checks")
    gradcheck.add_argument("--op", action="append", help="Only this check (repeatable)")
    gradcheck.add_argument("--inject-fault", help="Corrupt the backward rule of this check's op")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.set_defaults(handler=cmd_gradcheck)

    ablate = commands.add_parser("ablate", help="Ablation table")
    ablate.add_argument("--config", required=True)
    ablate.add_argument("--init", help="Initialize every variant's encoder from a checkpoint")
    ablate.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments, run the command and map errors to exit codes.

    Returns:
        int: Process exit code
    """
    args = build_parser().parse_args(argv)
    set_verbosity(quiet=args.quiet, verbose=args.verbose)
    try:
        return args.handler(args)
    except CorpusValidationError as exc:
        logger.error(exc.message)
        for violation in exc.violations:
            print(violation, file=sys.stderr)
        return exc.exit_code
    except GridNERError as exc:
        logger.error(exc.message)
        return exc.exit_code
    except ValidationError as exc:
        logger.error(f"Invalid configuration: {exc}")
        return 2
    except FileNotFoundError as exc:
        logger.error(str(exc))
        return 2
    except Exception as exc:
        logger.error(f"Unhandled exception: {exc}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
