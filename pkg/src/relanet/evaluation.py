"""Ablation runs and analysis exports (co-occurrence, label correlation, hidden states)."""

from __future__ import annotations

import dataclasses
import logging
import random
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .corpus import OUTSIDE, Dataset, LabelInventory, Vocabulary
from .hlg import INTENT, CooccurrenceStats, HeterogeneousLabelGraph, conditional_probability
from .metrics import MetricsReport
from .model import ModelConfig, ReLaNet, collate
from .training import TrainConfig, TrainReport, evaluate_model, train

logger = logging.getLogger(__name__)

GRAPH_VARIANTS = ("no_stat_dep", "no_hierarchy", "no_relation")
MODEL_VARIANTS = ("no_matching", "no_gats", "no_dm_hlgt")
VARIANTS = ("full",) + GRAPH_VARIANTS + MODEL_VARIANTS


def variant_config(variant: str, base: ModelConfig) -> ModelConfig:
    """``base`` with exactly one ablation switched on."""
    if variant == "full":
        return dataclasses.replace(base)
    if variant in GRAPH_VARIANTS:
        return dataclasses.replace(base, graph_ablation=variant)
    if variant in MODEL_VARIANTS:
        return dataclasses.replace(base, **{variant: True})
    raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")


@dataclass
class AblationResult:
    variant: str
    metrics: MetricsReport
    report: TrainReport


def run_ablation(
    variant: str,
    train_set: Dataset,
    dev_set: Dataset | None = None,
    test_set: Dataset | None = None,
    config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
    hlg: HeterogeneousLabelGraph | None = None,
) -> AblationResult:
    """Train one variant and score it on test (or dev, or train when nothing else is given)."""
    cfg = variant_config(variant, config or ModelConfig())
    report = train(train_set, dev_set, cfg, train_config, hlg=hlg)
    target = test_set or dev_set or train_set
    metrics = evaluate_model(report.model, target, report.vocab)
    return AblationResult(variant, metrics, report)


def label_key(label) -> str:
    return f"{label.kind}:{label.name}"


def export_cooccurrence(stats: CooccurrenceStats) -> dict:
    """P(j | i) over the statistics universe (labels seen at least once); row i, column j."""
    labels = list(stats.universe)
    matrix = [[conditional_probability(stats, i, j) for j in labels] for i in labels]
    return {
        "kind": "cooccurrence",
        "labels": [label_key(x) for x in labels],
        "counts": [stats.count.get(x, 0) for x in labels],
        "matrix": matrix,
    }


def export_label_correlation(embeddings, labels: Sequence[str], eps: float = 1e-12) -> dict:
    """Pairwise cosine similarity; entries involving a zero-norm row are null."""
    emb = np.asarray(embeddings.detach().cpu() if isinstance(embeddings, torch.Tensor) else embeddings,
                     dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] != len(labels):
        raise ValueError(f"embedding matrix {emb.shape} does not match {len(labels)} labels")
    norms = np.linalg.norm(emb, axis=1)
    zero = norms <= eps
    unit = emb / np.where(zero, 1.0, norms)[:, None]
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    cos = (cos + cos.T) / 2
    np.fill_diagonal(cos, 1.0)
    matrix = [[None if zero[i] or zero[j] else float(cos[i, j]) for j in range(len(labels))]
              for i in range(len(labels))]
    if zero.any():
        logger.warning("zero-norm embeddings: %s", [labels[k] for k in np.flatnonzero(zero)])
    return {
        "kind": "correlation",
        "labels": list(labels),
        "zero_norm": [labels[k] for k in np.flatnonzero(zero)],
        "matrix": matrix,
    }


@torch.no_grad()
def model_label_correlation(model: ReLaNet) -> dict:
    """Correlation of the global intent and slot embeddings of a trained model."""
    emb = model.label_embeddings()
    inv = model.inventory
    rows = torch.cat([model.intent_rows(emb), model.slot_rows(emb)])
    labels = [f"{INTENT}:{x}" for x in inv.intent_labels] + [f"slot:{x}" for x in inv.slot_labels]
    return export_label_correlation(rows, labels)


def select_hidden_rows(rows: list[dict], top_k: int | None = 24, cap_o: int | None = 500,
                       seed: int = 0) -> list[dict]:
    """Keep rows whose gold tag is among the ``top_k`` most frequent non-O tags, plus at
    most ``cap_o`` randomly drawn O rows. Input order is preserved."""
    freq = Counter(r["gold"] for r in rows if r["gold"] != OUTSIDE)
    ranked = sorted(freq, key=lambda t: (-freq[t], t))
    keep_tags = set(ranked if top_k is None else ranked[:top_k])
    o_positions = [k for k, r in enumerate(rows) if r["gold"] == OUTSIDE]
    if cap_o is not None and len(o_positions) > cap_o:
        o_positions = random.Random(seed).sample(o_positions, cap_o)
    keep_o = set(o_positions)
    return [r for k, r in enumerate(rows) if k in keep_o or r["gold"] in keep_tags]


@torch.no_grad()
def export_hidden_states(model: ReLaNet, dataset: Sequence, vocab: Vocabulary, top_k: int | None = 24,
                         cap_o: int | None = 500, seed: int = 0, batch_size: int = 64) -> list[dict]:
    """Final-step slot hidden vector of every token with its gold and predicted tag."""
    samples = list(dataset)
    inv: LabelInventory = model.inventory
    was_training = model.training
    model.eval()
    rows = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        batch = collate(chunk, vocab)
        out = model(batch)
        hidden, pred = out.final.slot_hidden, out.final.slot_pred
        for b, sample in enumerate(chunk):
            for i, (token, gold) in enumerate(zip(sample.tokens, sample.slots)):
                rows.append({
                    "token": token,
                    "gold": gold,
                    "pred": inv.slot_labels[int(pred[b, i])],
                    "vector": hidden[b, i].tolist(),
                })
    model.train(was_training)
    return select_hidden_rows(rows, top_k, cap_o, seed)
