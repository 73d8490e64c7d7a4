"""Command-line entry point: build-graph, train, eval, predict, export."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .corpus import CorpusError, Sample, UnknownLabelError, build_inventory, format_sample, read_corpus
from .evaluation import (
    VARIANTS,
    export_cooccurrence,
    export_hidden_states,
    model_label_correlation,
    variant_config,
)
from .hlg import (
    GraphSchemaError,
    Relation,
    build_hlg,
    check_graph_matches_inventory,
    compute_stats,
    export_graph,
    import_graph,
)
from .metrics import MetricsReport, compute_metrics
from .model import CheckpointError, ModelConfig, load_checkpoint
from .training import TrainConfig, TrainingDiverged, evaluate_model, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

logger = logging.getLogger("relanet")


class UsageError(Exception):
    pass


def _parent_common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--format", choices=["text", "machine"], default="text")
    p.add_argument("--strict", action="store_true", help="reject BIO violations in corpora")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _parent_graph() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--lambda1", type=float, default=0.4, help="weak dependency threshold")
    p.add_argument("--lambda2", type=float, default=0.9, help="strong dependency threshold")
    return p


def _parent_model() -> argparse.ArgumentParser:
    d = ModelConfig()
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--emb-dim", type=int, default=d.word_dim, help="word embedding size")
    p.add_argument("--label-dim", type=int, default=d.label_dim)
    p.add_argument("--hidden-dim", type=int, default=d.hidden_dim)
    p.add_argument("--attn-dim", type=int, default=d.attn_dim)
    p.add_argument("--layers", type=int, default=d.num_layers, help="HLGT and GAT depth L")
    p.add_argument("--steps", type=int, default=d.steps, help="interaction steps T")
    p.add_argument("--window", type=int, default=d.window, help="Local-GAT window w")
    p.add_argument("--heads", type=int, default=d.gat_heads)
    p.add_argument("--gat-residual", action=argparse.BooleanOptionalAction, default=d.gat_residual)
    p.add_argument("--dropout", type=float, default=d.dropout)
    p.add_argument("--gamma-i", type=float, default=d.gamma_i)
    p.add_argument("--gamma-s", type=float, default=d.gamma_s)
    p.add_argument("--beta-i", type=float, default=d.beta_i)
    p.add_argument("--beta-s", type=float, default=d.beta_s)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--clip-norm", type=float, default=None)
    return p


def build_parser() -> argparse.ArgumentParser:
    common, graph, model = _parent_common(), _parent_graph(), _parent_model()
    parser = argparse.ArgumentParser(prog="relanet", description="Joint multi-intent detection and slot filling.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-graph", parents=[common, graph], help="build the label graph from a training corpus")
    p.add_argument("--train", type=Path, required=True)

    p = sub.add_parser("train", parents=[common, graph, model], help="train and keep the best dev checkpoint")
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--dev", type=Path)
    p.add_argument("--test", type=Path)
    p.add_argument("--graph", type=Path, help="prebuilt graph document (else built from --train)")
    p.add_argument("--checkpoint", type=Path, help="default: OUT/model.pt")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint or a prediction file")
    p.add_argument("--test", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--pred", type=Path, help="predictions in corpus format")

    p = sub.add_parser("predict", parents=[common], help="tag a corpus with a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)

    p = sub.add_parser("export", parents=[common], help="analysis exports")
    p.add_argument("--kind", choices=["cooccurrence", "correlation", "hidden"], required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--train", type=Path)
    p.add_argument("--test", type=Path)
    p.add_argument("--top-k", type=int, default=24)
    p.add_argument("--cap-o", type=int, default=500)
    return parser


def _emit(args, doc: dict, text_lines: list[str]) -> None:
    if args.format == "machine":
        print(json.dumps(doc, sort_keys=True))
    else:
        print("\n".join(text_lines))


def _effective_config(args) -> None:
    """Effective settings block at the head of every run (stderr keeps stdout parseable)."""
    items = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())}
    print("# effective configuration", file=sys.stderr)
    for k, v in items.items():
        print(f"#   {k} = {v}", file=sys.stderr)


def _out_dir(args) -> Path | None:
    if args.out is None:
        return None
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _check_lambdas(args) -> None:
    if not 0 < args.lambda1 < args.lambda2 <= 1:
        raise UsageError(f"need 0 < lambda1 < lambda2 <= 1, got {args.lambda1}, {args.lambda2}")


def _model_config(args) -> ModelConfig:
    try:
        base = ModelConfig(
            word_dim=args.emb_dim, label_dim=args.label_dim, hidden_dim=args.hidden_dim,
            attn_dim=args.attn_dim, num_layers=args.layers, steps=args.steps, window=args.window,
            gat_heads=args.heads, gat_residual=args.gat_residual, dropout=args.dropout,
            lambda1=args.lambda1, lambda2=args.lambda2, gamma_i=args.gamma_i, gamma_s=args.gamma_s,
            beta_i=args.beta_i, beta_s=args.beta_s,
        )
    except ValueError as err:
        raise UsageError(str(err)) from None
    return variant_config(args.variant, base)


def _metric_lines(report) -> list[str]:
    d = report.to_dict()
    return [f"{k}: {d[k]:.4f}" if isinstance(d[k], float) else f"{k}: {d[k]}" for k in d]


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def cmd_build_graph(args) -> int:
    _check_lambdas(args)
    ds = read_corpus(args.train, strict=args.strict)
    inv = build_inventory(ds)
    stats = compute_stats(ds, inv)
    hlg = build_hlg(stats, inv, args.lambda1, args.lambda2, ds.fingerprint())
    out = _out_dir(args) or Path(".")
    (out / "graph.json").write_text(export_graph(hlg) + "\n", encoding="utf-8")
    _write_json(out / "cooccurrence.json", export_cooccurrence(stats))
    _write_json(out / "inventory.json", inv.to_dict())
    counts = hlg.relation_counts()
    relations = {r.value: counts[r.label] for r in Relation}
    kinds = {k: hlg.num_kind(k) for k in ("intent", "slot", "pseudo")}
    lines = [f"nodes {k}: {v}" for k, v in kinds.items()] + [f"edges {r}: {n}" for r, n in relations.items()]
    _emit(args, {"nodes": kinds, "edges": relations, "num_edges": len(hlg.edges)}, lines)
    return EXIT_OK


def cmd_train(args) -> int:
    _check_lambdas(args)
    config = _model_config(args)
    train_set = read_corpus(args.train, strict=args.strict, split="train")
    dev_set = read_corpus(args.dev, strict=args.strict, split="dev") if args.dev else None
    test_set = read_corpus(args.test, strict=args.strict, split="test") if args.test else None
    inv = build_inventory(train_set)
    hlg = None
    if args.graph:
        hlg = import_graph(args.graph.read_text(encoding="utf-8"))
        check_graph_matches_inventory(hlg, inv)
        built_on = hlg.metadata.get("corpus_fingerprint")
        if built_on is not None and built_on != train_set.fingerprint():
            raise GraphSchemaError("graph was built from a different training corpus")
    out = _out_dir(args) or Path(".")
    checkpoint = args.checkpoint or out / "model.pt"
    tc = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                     clip_norm=args.clip_norm, seed=args.seed)
    report = train(train_set, dev_set, config, tc, hlg=hlg, inventory=inv,
                   checkpoint_path=checkpoint, log_path=out / "train_log.jsonl")
    doc = {"best_epoch": report.best_epoch, "best_dev": report.best_dev, "checkpoint": str(checkpoint)}
    lines = [f"best epoch: {report.best_epoch}", f"checkpoint: {checkpoint}"]
    lines += ["dev " + x for x in _metric_lines(MetricsReport(**report.best_dev))]
    if test_set is not None:
        inv.check_dataset(test_set)
        metrics = evaluate_model(report.model, test_set, report.vocab)
        doc["test"] = metrics.to_dict()
        lines += ["test " + x for x in _metric_lines(metrics)]
    _emit(args, doc, lines)
    return EXIT_OK


def cmd_eval(args) -> int:
    gold = read_corpus(args.test, strict=args.strict, split="test")
    if args.pred:
        pred = read_corpus(args.pred, split="pred")
        if len(pred) != len(gold):
            raise CorpusError(f"{len(pred)} predictions for {len(gold)} gold utterances")
        metrics = compute_metrics([p.intents for p in pred], [g.intents for g in gold],
                                  [p.slots for p in pred], [g.slots for g in gold])
    else:
        model, vocab = load_checkpoint(args.checkpoint)
        model.inventory.check_dataset(gold)
        metrics = evaluate_model(model, gold, vocab)
    _emit(args, metrics.to_dict(), _metric_lines(metrics))
    return EXIT_OK


def cmd_predict(args) -> int:
    model, vocab = load_checkpoint(args.checkpoint)
    ds = read_corpus(args.test, strict=args.strict, split="test")
    preds = model.predict(list(ds), vocab)
    blocks = []
    for sample, p in zip(ds, preds):
        blocks.append(format_sample(Sample.build(sample.tokens, p.slots, sorted(p.intents))))
    text = "\n".join(blocks)
    out = _out_dir(args)
    if out is None:
        print(text)
    else:
        (out / "predictions.txt").write_text(text + "\n", encoding="utf-8")
        _emit(args, {"predictions": str(out / "predictions.txt"), "count": len(preds)},
              [f"wrote {len(preds)} predictions to {out / 'predictions.txt'}"])
    return EXIT_OK


def cmd_export(args) -> int:
    if args.kind == "cooccurrence":
        if not args.train:
            raise UsageError("--kind cooccurrence needs --train")
        ds = read_corpus(args.train, strict=args.strict)
        doc = export_cooccurrence(compute_stats(ds, build_inventory(ds)))
    else:
        if not args.checkpoint:
            raise UsageError(f"--kind {args.kind} needs --checkpoint")
        model, vocab = load_checkpoint(args.checkpoint)
        if args.kind == "correlation":
            doc = model_label_correlation(model)
        else:
            if not args.test:
                raise UsageError("--kind hidden needs --test")
            ds = read_corpus(args.test, strict=args.strict, split="test")
            rows = export_hidden_states(model, ds, vocab, top_k=args.top_k, cap_o=args.cap_o, seed=args.seed)
            doc = {"kind": "hidden", "rows": rows}
    out = _out_dir(args)
    if out is None:
        print(json.dumps(doc, sort_keys=True))
    else:
        path = out / f"{args.kind}.json"
        _write_json(path, doc)
        _emit(args, {"kind": args.kind, "path": str(path)}, [f"wrote {path}"])
    return EXIT_OK


COMMANDS = {
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "export": cmd_export,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _effective_config(args)
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, UnknownLabelError, GraphSchemaError, CheckpointError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as err:  # noqa: BLE001 - report anything else as a runtime failure
        logger.debug("unhandled", exc_info=True)
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
