"""Command-line entry point.

Subcommands: gen-data, train, eval, predict, stats, sweep, gradcheck.
Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Failures print one line to stderr: `error: <kind>: <message>`.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import reporting, synth
from .data import CorpusError, Vocab, encode_record, load_corpus, read_records, save_corpus
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .evaluation import SWEEP_AXES, corpus_stats, score_corpus, sweep
from .gradcheck import run_gradcheck
from .model import ModelConfig, SeqToSetModel
from .synth import GrammarConfig
from .training import (
    TrainConfig,
    apply_overrides,
    evaluate_model,
    load_checkpoint,
    model_from_state,
    parse_config_file,
    save_checkpoint,
    train,
)


class UsageError(ValueError):
    """Bad flags or inputs; maps to exit code 2."""


def _require_file(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: file not found: {path}")
    return p


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="setner",
        description="Sequence-to-set nested named entity recognition.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic nested-entity corpus")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n", type=int, default=2000, help="training sentences; dev and test each get n/10")
    p.add_argument("--nesting-prob", type=float, default=0.4)
    p.add_argument("--max-depth", type=int, default=3)
    p.add_argument("--categories", type=int, default=3)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--train", required=True, dest="train_path")
    p.add_argument("--dev", required=True, dest="dev_path")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="flat key=value training config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--queries", type=int, help="entity query count")
    p.add_argument("--layers", type=int, help="decoder layer count")
    p.add_argument("--heads", type=int, help="attention head count")
    p.add_argument("--hidden", type=int, help="token BiLSTM hidden size per direction")
    p.add_argument("--loss", choices=["bipartite", "ce"])
    p.add_argument("--freeze-queries", action="store_true")
    p.add_argument("--no-interaction", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or a prediction file")
    p.add_argument("--corpus", required=True, help="gold JSONL corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--pred", help="prediction JSONL (alternative to --checkpoint)")
    p.add_argument("--null-threshold", type=float)
    p.add_argument("--out", help="directory for eval.json/csv/png")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write predictions for a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", required=True, dest="in_path")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--null-threshold", type=float)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("stats", help="corpus statistics")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", help="directory for stats.json/csv/png")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("sweep", help="train once per axis value and compare")
    p.add_argument("--axis", required=True, choices=["queries", "layers", "interaction"])
    p.add_argument("--values", required=True,
                   help="comma-separated values, e.g. 20,40,60 or on,off")
    p.add_argument("--train", required=True, dest="train_path")
    p.add_argument("--dev", required=True, dest="dev_path")
    p.add_argument("--test", required=True, dest="test_path")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, CorpusError, ValueError) as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures
        print(f"error: runtime: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    n_eval = max(1, args.n // 10)
    splits = synth.generate_splits(
        args.seed, args.n, n_eval, n_eval, args.nesting_prob,
        max_depth=args.max_depth, category_count=args.categories,
    )
    out = _out_dir(args.out_dir)
    rows = []
    for name in ("train", "dev", "test"):
        path = out / f"{name}.jsonl"
        save_corpus(splits[name], path)
        sentences, _ = load_corpus(path)
        stats = corpus_stats(sentences)
        rows.append([name, stats.sentences, stats.total_entities,
                     stats.nested_entities, stats.nested_pct])
    print(reporting.format_table(
        ["split", "sentences", "entities", "nested", "nested_pct"], rows))
    print(f"wrote train/dev/test under {out}")
    return 0


def _model_config_from_args(args, train_config: TrainConfig) -> ModelConfig:
    encoder = EncoderConfig(dropout=train_config.dropout)
    decoder = DecoderConfig(dropout=train_config.dropout)
    if getattr(args, "hidden", None):
        encoder.token_lstm_hidden = args.hidden
    if getattr(args, "queries", None):
        decoder.n_queries = args.queries
    if getattr(args, "layers", None):
        decoder.layers = args.layers
    if getattr(args, "heads", None):
        decoder.heads = args.heads
    if getattr(args, "no_interaction", False):
        decoder.interaction = False
    return ModelConfig(encoder=encoder, decoder=decoder)


def _train_config_from_args(args) -> TrainConfig:
    config = TrainConfig()
    if getattr(args, "config", None):
        config = apply_overrides(config, parse_config_file(_require_file(args.config, "--config")))
    for flag, field in (
        ("seed", "seed"), ("epochs", "epochs"), ("batch_size", "batch_size"),
        ("loss", "loss_mode"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(config, field, value)
    if getattr(args, "freeze_queries", False):
        config.freeze_queries = True
    config.validate()
    return config


def cmd_train(args) -> int:
    train_path = _require_file(args.train_path, "--train")
    dev_path = _require_file(args.dev_path, "--dev")
    config = _train_config_from_args(args)
    model_config = _model_config_from_args(args, config)
    train_sentences, vocab = load_corpus(train_path)
    dev_sentences, _ = load_corpus(dev_path, vocab)
    model = SeqToSetModel(vocab, model_config, np.random.default_rng(config.seed))
    out = _out_dir(args.out)

    def progress(m):
        if not args.quiet:
            print(
                f"epoch {m.epoch:3d}  loss {m.train_loss:9.4f}  "
                f"dev P {m.dev_precision:.3f} R {m.dev_recall:.3f} F1 {m.dev_f1:.3f}",
                flush=True,
            )

    result = train(model, train_sentences, dev_sentences, config, on_epoch=progress)
    save_checkpoint(out / "checkpoint_best.npz", result.best_state)
    save_checkpoint(out / "checkpoint_final.npz", result.final_state)
    reporting.save_history(result.history, out)
    (out / "config_used.cfg").write_text(
        "".join(f"{k} = {v}\n" for k, v in vars(config).items())
    )
    print(f"best dev F1 {result.best_dev_f1:.4f} at epoch {result.best_epoch}; "
          f"artifacts in {out}")
    return 0


def _load_predictions_file(path: Path) -> list[list[tuple]]:
    preds = []
    for rec in read_records(path):
        preds.append(
            [(int(e["start"]), int(e["end"]), str(e["type"])) for e in rec["entities"]]
        )
    return preds


def cmd_eval(args) -> int:
    corpus_path = _require_file(args.corpus, "--corpus")
    if bool(args.checkpoint) == bool(args.pred):
        raise UsageError("exactly one of --checkpoint or --pred is required")
    if args.checkpoint:
        state = load_checkpoint(_require_file(args.checkpoint, "--checkpoint"))
        model = model_from_state(state)
        gold_sentences, _ = load_corpus(corpus_path, model.vocab)
        predictions = model.predict(gold_sentences, null_threshold=args.null_threshold)
        vocab = model.vocab
        pairs = [
            (
                {(e.left, e.right, vocab.category_name(e.category)) for e in s.gold},
                {(p.left, p.right, vocab.category_name(p.category)) for p in preds},
            )
            for s, preds in zip(gold_sentences, predictions)
        ]
    else:
        gold_records = read_records(corpus_path)
        pred_lists = _load_predictions_file(_require_file(args.pred, "--pred"))
        if len(pred_lists) != len(gold_records):
            raise UsageError(
                f"--pred: {len(pred_lists)} lines but gold corpus has {len(gold_records)}"
            )
        pairs = [
            (
                {(int(e["start"]), int(e["end"]), str(e["type"])) for e in rec["entities"]},
                set(preds),
            )
            for rec, preds in zip(gold_records, pred_lists)
        ]
    report = score_corpus(
        [({_Tup(*g) for g in gold}, {_Tup(*p) for p in pred}) for gold, pred in pairs]
    )
    rows = [[report.tp, report.fp, report.fn,
             report.precision, report.recall, report.f1]]
    print(reporting.format_table(["tp", "fp", "fn", "precision", "recall", "f1"], rows))
    if args.out:
        reporting.save_metric_report(report, str, _out_dir(args.out))
    return 0


class _Tup:
    """Adapter giving (left, right, category) attribute access to triples."""

    __slots__ = ("left", "right", "category")

    def __init__(self, left, right, category):
        self.left = left
        self.right = right
        self.category = category


def cmd_predict(args) -> int:
    state = load_checkpoint(_require_file(args.checkpoint, "--checkpoint"))
    model = model_from_state(state)
    in_path = _require_file(args.in_path, "--in")
    records = read_records(in_path)
    plain = [{"tokens": r["tokens"], "pos": r["pos"], "entities": []} for r in records]
    sentences = [encode_record(r, model.vocab) for r in plain]
    predictions = model.predict(sentences, null_threshold=args.null_threshold)
    with open(args.out, "w", encoding="utf-8") as fh:
        for rec, preds in zip(records, predictions):
            entities = [
                {
                    "start": p.left,
                    "end": p.right,
                    "type": model.vocab.category_name(p.category),
                    "score": p.score,
                }
                for p in sorted(preds, key=lambda p: (p.left, p.right, p.category))
            ]
            fh.write(json.dumps(
                {"tokens": rec["tokens"], "pos": rec["pos"], "entities": entities},
                ensure_ascii=False,
            ) + "\n")
    print(f"wrote predictions for {len(records)} sentences to {args.out}")
    return 0


def cmd_stats(args) -> int:
    corpus_path = _require_file(args.corpus, "--corpus")
    sentences, _ = load_corpus(corpus_path)
    stats = corpus_stats(sentences)
    payload = stats.to_dict()
    print(reporting.format_table(
        list(payload.keys()), [[payload[k] for k in payload]]))
    if args.out:
        reporting.save_stats(stats, [len(s) for s in sentences], _out_dir(args.out))
    return 0


def cmd_sweep(args) -> int:
    axis = {"queries": "query_count", "layers": "decoder_layers",
            "interaction": "interaction"}[args.axis]
    raw_values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not raw_values:
        raise UsageError("--values: no values given")
    if axis == "interaction":
        values = [v.lower() in ("1", "true", "yes", "on") for v in raw_values]
    else:
        try:
            values = [int(v) for v in raw_values]
        except ValueError as exc:
            raise UsageError(f"--values: expected integers, got {args.values!r}") from exc
    config = _train_config_from_args(args)
    model_config = _model_config_from_args(args, config)
    train_sentences, vocab = load_corpus(_require_file(args.train_path, "--train"))
    dev_sentences, _ = load_corpus(_require_file(args.dev_path, "--dev"), vocab)
    test_sentences, _ = load_corpus(_require_file(args.test_path, "--test"), vocab)
    rows = sweep(axis, values, train_sentences, dev_sentences, test_sentences,
                 model_config, config, vocab)
    table = [
        [r.value,
         "" if r.report is None else f"{r.report.f1:.4f}",
         r.error or ""]
        for r in rows
    ]
    print(reporting.format_table([args.axis, "test_f1", "error"], table))
    reporting.save_sweep(args.axis, rows, _out_dir(args.out))
    return 0


def cmd_gradcheck(args) -> int:
    result = run_gradcheck(seed=args.seed)
    rows = [[r.name, r.size, f"{r.max_rel_err:.2e}", "ok" if r.ok else "FAIL"]
            for r in result.rows]
    print(reporting.format_table(["parameter", "entries", "max_rel_err", "status"], rows))
    print(f"overall: {'ok' if result.ok else 'FAIL'} "
          f"(max relative error {result.max_rel_err:.2e})")
    return 0 if result.ok else 1


if __name__ == "__main__":
    sys.exit(main())
