"""Intent accuracy, span-level slot F1 and overall (semantic frame) accuracy."""

from __future__ import annotations

from collections.abc import Collection, Sequence
from dataclasses import asdict, dataclass


@dataclass
class MetricsReport:
    intent_acc: float
    slot_f1: float
    overall_acc: float
    num_utterances: int
    num_gold_spans: int
    num_pred_spans: int
    num_correct_spans: int

    def to_dict(self) -> dict:
        return asdict(self)


def _check_aligned(preds: Sequence, golds: Sequence) -> None:
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} gold items")


def _split(tag: str) -> tuple[str, str | None]:
    if tag == "O" or len(tag) < 2 or tag[1] != "-":
        return "O", None
    return tag[0], tag[2:]


def extract_spans(tags: Sequence[str]) -> set[tuple[str, int, int]]:
    """(type, start, end-exclusive) chunks with conlleval-style lenient segmentation.

    An ``I-x`` that does not continue an ``x`` chunk opens a new one.
    """
    spans = set()
    start, kind = None, None
    for i, tag in enumerate(tags):
        prefix, name = _split(tag)
        continues = prefix == "I" and kind == name
        if start is not None and not continues:
            spans.add((kind, start, i))
            start, kind = None, None
        if prefix in ("B", "I") and not continues:
            start, kind = i, name
    if start is not None:
        spans.add((kind, start, len(tags)))
    return spans


def intent_accuracy(preds: Sequence[Collection[str]], golds: Sequence[Collection[str]]) -> float:
    _check_aligned(preds, golds)
    if not golds:
        return 0.0
    return sum(set(p) == set(g) for p, g in zip(preds, golds)) / len(golds)


def span_counts(preds: Sequence[Sequence[str]], golds: Sequence[Sequence[str]]) -> tuple[int, int, int]:
    _check_aligned(preds, golds)
    correct = n_pred = n_gold = 0
    for p, g in zip(preds, golds):
        if len(p) != len(g):
            raise ValueError(f"tag sequence lengths differ: {len(p)} vs {len(g)}")
        ps, gs = extract_spans(p), extract_spans(g)
        correct += len(ps & gs)
        n_pred += len(ps)
        n_gold += len(gs)
    return correct, n_pred, n_gold


def slot_f1(preds: Sequence[Sequence[str]], golds: Sequence[Sequence[str]]) -> float:
    """Micro F1 over exact (type, boundary) spans; 1.0 when neither side has spans."""
    correct, n_pred, n_gold = span_counts(preds, golds)
    if n_pred == 0 and n_gold == 0:
        return 1.0
    precision = correct / n_pred if n_pred else 0.0
    recall = correct / n_gold if n_gold else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def overall_accuracy(pred_intents, gold_intents, pred_slots, gold_slots) -> float:
    _check_aligned(pred_intents, gold_intents)
    _check_aligned(pred_slots, gold_slots)
    _check_aligned(pred_intents, pred_slots)
    if not gold_intents:
        return 0.0
    hits = sum(
        set(pi) == set(gi) and tuple(ps) == tuple(gs)
        for pi, gi, ps, gs in zip(pred_intents, gold_intents, pred_slots, gold_slots)
    )
    return hits / len(gold_intents)


def compute_metrics(pred_intents, gold_intents, pred_slots, gold_slots) -> MetricsReport:
    correct, n_pred, n_gold = span_counts(pred_slots, gold_slots)
    return MetricsReport(
        intent_acc=intent_accuracy(pred_intents, gold_intents),
        slot_f1=slot_f1(pred_slots, gold_slots),
        overall_acc=overall_accuracy(pred_intents, gold_intents, pred_slots, gold_slots),
        num_utterances=len(gold_intents),
        num_gold_spans=n_gold,
        num_pred_spans=n_pred,
        num_correct_spans=correct,
    )
