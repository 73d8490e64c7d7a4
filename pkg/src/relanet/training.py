"""Losses, the optimisation loop with dev-set model selection, and gradient checking."""

from __future__ import annotations

import copy
import json
import logging
import random
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import torch

from .corpus import Dataset, LabelInventory, Vocabulary, build_inventory
from .hlg import HeterogeneousLabelGraph, ablate_graph, build_hlg, compute_stats
from .metrics import MetricsReport, compute_metrics
from .model import ForwardOutput, ModelConfig, ReLaNet, collate, save_checkpoint

logger = logging.getLogger(__name__)

EPS = 1e-12


class TrainingDiverged(RuntimeError):
    pass


def intent_loss(step_probs: torch.Tensor, gold: torch.Tensor, token_mask=None, eps: float = EPS):
    """Binary cross-entropy summed over steps, tokens and intent labels.

    step_probs: (T, n, N) with gold (N,), or (T, B, n, N) with gold (B, N).
    The sentence-level gold vector supervises every token at every step.
    Returns a scalar (unbatched) or per-sample losses (B,).
    """
    unbatched = step_probs.dim() == 3
    if unbatched:
        step_probs, gold = step_probs.unsqueeze(1), gold.unsqueeze(0)
        token_mask = None if token_mask is None else token_mask.unsqueeze(0)
    if step_probs.shape[-1] != gold.shape[-1]:
        raise ValueError(f"{step_probs.shape[-1]} intent scores vs {gold.shape[-1]} gold labels")
    if token_mask is None:
        token_mask = torch.ones(step_probs.shape[1:3], dtype=torch.bool)
    y = gold[None, :, None, :]
    ll = y * torch.log(step_probs.clamp(min=eps)) + (1 - y) * torch.log((1 - step_probs).clamp(min=eps))
    ll = ll * token_mask[None, :, :, None].to(ll.dtype)
    loss = -ll.sum(dim=(0, 2, 3))
    return loss[0] if unbatched else loss


def _gold_slot_probs(step_dists, gold):
    idx = gold.unsqueeze(0).unsqueeze(-1).expand(step_dists.shape[0], -1, -1, 1)
    return torch.gather(step_dists, -1, idx).squeeze(-1)  # (T, B, n)


def slot_loss(step_dists: torch.Tensor, gold: torch.Tensor, token_mask=None, eps: float = EPS):
    """Negative log-likelihood of the gold slot, summed over steps and tokens.

    step_dists: (T, n, N) with gold (n,), or (T, B, n, N) with gold (B, n).
    """
    unbatched = step_dists.dim() == 3
    if unbatched:
        step_dists, gold = step_dists.unsqueeze(1), gold.unsqueeze(0)
        token_mask = None if token_mask is None else token_mask.unsqueeze(0)
    if step_dists.shape[1:3] != gold.shape:
        raise ValueError(f"slot distributions {tuple(step_dists.shape)} vs gold {tuple(gold.shape)}")
    if token_mask is None:
        token_mask = torch.ones(gold.shape, dtype=torch.bool)
    p = _gold_slot_probs(step_dists, gold)
    nll = -torch.log(p.clamp(min=eps)) * token_mask[None].to(p.dtype)
    loss = nll.sum(dim=(0, 2))
    return loss[0] if unbatched else loss


def intent_constraint_loss(step_probs: torch.Tensor, gold: torch.Tensor, token_mask=None):
    """Hinge on any step-to-step drop of a gold intent's probability."""
    unbatched = step_probs.dim() == 3
    if unbatched:
        step_probs, gold = step_probs.unsqueeze(1), gold.unsqueeze(0)
        token_mask = None if token_mask is None else token_mask.unsqueeze(0)
    if token_mask is None:
        token_mask = torch.ones(step_probs.shape[1:3], dtype=torch.bool)
    if step_probs.shape[0] < 2:
        loss = step_probs.new_zeros(step_probs.shape[1])
        return loss[0] if unbatched else loss
    drop = torch.relu(step_probs[:-1] - step_probs[1:])
    drop = drop * gold[None, :, None, :] * token_mask[None, :, :, None].to(drop.dtype)
    loss = drop.sum(dim=(0, 2, 3))
    return loss[0] if unbatched else loss


def slot_constraint_loss(step_dists: torch.Tensor, gold: torch.Tensor, token_mask=None):
    """Hinge on any step-to-step drop of the gold slot's probability."""
    unbatched = step_dists.dim() == 3
    if unbatched:
        step_dists, gold = step_dists.unsqueeze(1), gold.unsqueeze(0)
        token_mask = None if token_mask is None else token_mask.unsqueeze(0)
    if token_mask is None:
        token_mask = torch.ones(gold.shape, dtype=torch.bool)
    if step_dists.shape[0] < 2:
        loss = step_dists.new_zeros(step_dists.shape[1])
        return loss[0] if unbatched else loss
    p = _gold_slot_probs(step_dists, gold)
    drop = torch.relu(p[:-1] - p[1:]) * token_mask[None].to(p.dtype)
    loss = drop.sum(dim=(0, 2))
    return loss[0] if unbatched else loss


@dataclass
class LossBreakdown:
    intent: torch.Tensor
    slot: torch.Tensor
    intent_constraint: torch.Tensor
    slot_constraint: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def total_loss(intent, slot, intent_constraint, slot_constraint, config: ModelConfig) -> LossBreakdown:
    total = config.gamma_i * (intent + config.beta_i * intent_constraint) + config.gamma_s * (
        slot + config.beta_s * slot_constraint
    )
    return LossBreakdown(intent, slot, intent_constraint, slot_constraint, total)


def batch_loss(out: ForwardOutput, batch, config: ModelConfig) -> LossBreakdown:
    """Loss components summed per sample, averaged over the batch."""
    intent_probs = torch.stack([s.intent_probs for s in out.steps])
    slot_probs = torch.stack([s.slot_probs for s in out.steps])
    mask = batch.token_mask
    gold_i = batch.intent_gold.to(intent_probs.dtype)
    return total_loss(
        intent_loss(intent_probs, gold_i, mask).mean(),
        slot_loss(slot_probs, batch.slot_gold, mask).mean(),
        intent_constraint_loss(intent_probs, gold_i, mask).mean(),
        slot_constraint_loss(slot_probs, batch.slot_gold, mask).mean(),
        config,
    )


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    clip_norm: float | None = None
    seed: int = 0
    eval_batch_size: int = 64

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_dev: dict | None = None
    checkpoint_path: str | None = None
    model: ReLaNet | None = field(default=None, repr=False)
    vocab: Vocabulary | None = field(default=None, repr=False)

    def loss_sequence(self) -> list[float]:
        return [e["loss"]["total"] for e in self.epochs]


def set_seed(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def evaluate_model(model: ReLaNet, dataset: Dataset, vocab: Vocabulary, batch_size: int = 64) -> MetricsReport:
    preds = model.predict(list(dataset), vocab, batch_size=batch_size)
    return compute_metrics(
        [p.intents for p in preds],
        [s.intents for s in dataset],
        [p.slots for p in preds],
        [s.slots for s in dataset],
    )


def prepare(train_set: Dataset, config: ModelConfig, hlg: HeterogeneousLabelGraph | None = None,
            inventory: LabelInventory | None = None):
    """Inventory, vocabulary and (ablated) label graph for a training split."""
    inventory = inventory or build_inventory(train_set)
    vocab = Vocabulary.from_dataset(train_set)
    if hlg is None:
        stats = compute_stats(train_set, inventory)
        hlg = build_hlg(stats, inventory, config.lambda1, config.lambda2, train_set.fingerprint())
    return inventory, vocab, ablate_graph(hlg, config.graph_ablation)


def train(
    train_set: Dataset,
    dev_set: Dataset | None,
    config: ModelConfig,
    train_config: TrainConfig | None = None,
    hlg: HeterogeneousLabelGraph | None = None,
    inventory: LabelInventory | None = None,
    checkpoint_path=None,
    log_path=None,
    dtype=torch.float32,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainReport:
    """Adam training with best-dev-overall-accuracy model selection.

    Without a dev set the training split is used for selection.
    """
    tc = train_config or TrainConfig()
    set_seed(tc.seed)
    inventory, vocab, graph = prepare(train_set, config, hlg, inventory)
    inventory.check_dataset(train_set)
    dev_set = dev_set if dev_set is not None else train_set
    inventory.check_dataset(dev_set)

    model = ReLaNet(config, inventory, len(vocab), graph).to(dtype)
    optimizer = torch.optim.Adam(model.parameters(), lr=tc.lr)
    order_rng = torch.Generator().manual_seed(tc.seed)
    samples = list(train_set)
    report = TrainReport(vocab=vocab)
    best_state = None
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        if log_fh:
            header = {"config": config.to_dict(), "train_config": tc.to_dict(),
                      "inventory_fingerprint": inventory.fingerprint()}
            log_fh.write(json.dumps(header, sort_keys=True) + "\n")
        for epoch in range(tc.epochs):
            model.train()
            order = torch.randperm(len(samples), generator=order_rng).tolist()
            sums = {"intent": 0.0, "slot": 0.0, "intent_constraint": 0.0, "slot_constraint": 0.0, "total": 0.0}
            n_batches = 0
            for start in range(0, len(order), tc.batch_size):
                chunk = [samples[i] for i in order[start : start + tc.batch_size]]
                batch = collate(chunk, vocab, inventory, dtype=dtype)
                losses = batch_loss(model(batch), batch, config)
                if not torch.isfinite(losses.total):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, batch {n_batches}: {losses.as_floats()}"
                    )
                optimizer.zero_grad()
                losses.total.backward()
                if tc.clip_norm:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), tc.clip_norm)
                optimizer.step()
                for k, v in losses.as_floats().items():
                    sums[k] += v
                n_batches += 1
            dev = evaluate_model(model, dev_set, vocab, tc.eval_batch_size)
            record = {
                "epoch": epoch,
                "loss": {k: v / n_batches for k, v in sums.items()},
                "dev": dev.to_dict(),
            }
            report.epochs.append(record)
            if report.best_dev is None or dev.overall_acc > report.best_dev["overall_acc"]:
                report.best_epoch, report.best_dev = epoch, dev.to_dict()
                best_state = copy.deepcopy(model.state_dict())
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, model, vocab, {"epoch": epoch, "dev": dev.to_dict()})
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            logger.info("epoch %d loss %.4f dev overall %.4f", epoch, record["loss"]["total"], dev.overall_acc)
            if on_epoch:
                on_epoch(record)
    finally:
        if log_fh:
            log_fh.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    report.model = model
    report.checkpoint_path = str(checkpoint_path) if checkpoint_path else None
    return report


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    worst: str = ""
    per_tensor: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def gradient_check(
    fn: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor] | Sequence[torch.Tensor],
    eps: float = 1e-6,
    max_per_tensor: int | None = None,
    floor: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``fn()`` with central differences.

    Relative error per entry is |a - n| / max(|a|, |n|, floor).  Tensors
    should be float64 leaves with ``requires_grad``.  ``max_per_tensor``
    checks a random subset of entries in large tensors.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    fn().backward()
    analytic = {k: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for k, p in params.items()}
    rng = np.random.default_rng(seed)
    worst, worst_name, checked = 0.0, "", 0
    per_tensor = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_per_tensor is not None and flat.numel() > max_per_tensor:
                idx = rng.choice(flat.numel(), size=max_per_tensor, replace=False)
            tensor_worst = 0.0
            for k in idx:
                orig = flat[k].item()
                flat[k] = orig + eps
                f_plus = fn().item()
                flat[k] = orig - eps
                f_minus = fn().item()
                flat[k] = orig
                numeric = (f_plus - f_minus) / (2 * eps)
                a = analytic[name].view(-1)[k].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                checked += 1
                tensor_worst = max(tensor_worst, err)
                if err > worst:
                    worst, worst_name = err, f"{name}[{k}]"
            per_tensor[name] = tensor_worst
    return GradCheckReport(worst, checked, worst_name, per_tensor)

