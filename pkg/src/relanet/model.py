"""ReLa-Net: label-graph embeddings, recurrent dual-task interaction, matching decoders."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import LabelInventory, Sample, Vocabulary
from .hlg import (
    ABLATION_MODES,
    HeterogeneousLabelGraph,
    check_graph_matches_inventory,
    graph_from_dict,
    graph_to_dict,
)
from .layers import GAT, HLGT, SelfAttentiveEncoder, BiRecurrent, adjacency_mask, relation_adjacency

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    word_dim: int = 128
    label_dim: int = 128
    hidden_dim: int = 200
    attn_dim: int = 128
    num_layers: int = 2
    steps: int = 2
    window: int = 1
    gat_heads: int = 4
    gat_residual: bool = True
    lambda1: float = 0.4
    lambda2: float = 0.9
    intent_threshold: float = 0.5
    gamma_i: float = 0.1
    gamma_s: float = 0.9
    beta_i: float = 0.01
    beta_s: float = 1.0
    dropout: float = 0.0
    no_matching: bool = False
    no_gats: bool = False
    no_dm_hlgt: bool = False
    graph_ablation: str = "none"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("word_dim", "label_dim", "hidden_dim", "attn_dim", "steps", "gat_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.window < 0:
            raise ValueError("window must be >= 0")
        if not 0 < self.lambda1 < self.lambda2 <= 1:
            raise ValueError("need 0 < lambda1 < lambda2 <= 1")
        if self.hidden_dim % 2:
            raise ValueError("hidden_dim must be even (two recurrent directions)")
        if self.hidden_dim % self.gat_heads:
            raise ValueError("hidden_dim must be divisible by gat_heads")
        if self.graph_ablation not in ABLATION_MODES:
            raise ValueError(f"unknown graph ablation {self.graph_ablation!r}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    word_ids: torch.Tensor  # (B, n) long, 0 = padding
    lengths: torch.Tensor  # (B,) long
    intent_gold: torch.Tensor | None = None  # (B, N_I) multi-hot
    slot_gold: torch.Tensor | None = None  # (B, n) long, padded with 0

    @property
    def token_mask(self) -> torch.Tensor:
        return torch.arange(self.word_ids.shape[1])[None, :] < self.lengths[:, None]


def collate(samples: Sequence[Sample], vocab: Vocabulary, inv: LabelInventory | None = None,
            dtype=torch.float32) -> Batch:
    if not samples:
        raise ValueError("cannot collate an empty batch")
    n = max(len(s) for s in samples)
    word_ids = torch.zeros(len(samples), n, dtype=torch.long)
    lengths = torch.tensor([len(s) for s in samples], dtype=torch.long)
    for b, s in enumerate(samples):
        word_ids[b, : len(s)] = torch.tensor(vocab.encode(s.tokens))
    if inv is None:
        return Batch(word_ids, lengths)
    intent_gold = torch.zeros(len(samples), inv.num_intents, dtype=dtype)
    slot_gold = torch.zeros(len(samples), n, dtype=torch.long)
    for b, s in enumerate(samples):
        for x in s.intents:
            intent_gold[b, inv.intent_index(x)] = 1.0
        slot_gold[b, : len(s)] = torch.tensor([inv.slot_index(t) for t in s.slots])
    return Batch(word_ids, lengths, intent_gold, slot_gold)


class MatchingDecoder(nn.Module):
    """Project hidden states into label space, score by dot product with label embeddings."""

    uses_label_embeddings = True

    def __init__(self, hidden_dim: int, label_dim: int, negative_slope: float = 0.01):
        super().__init__()
        self.hidden_proj = nn.Linear(hidden_dim, label_dim)
        self.out_proj = nn.Linear(label_dim, label_dim)
        self.negative_slope = negative_slope

    def project(self, h):
        return self.out_proj(F.leaky_relu(self.hidden_proj(h), self.negative_slope))

    def forward(self, h: torch.Tensor, label_embs: torch.Tensor) -> torch.Tensor:
        """h: (..., n, hidden); label_embs: (..., N, d) -> scores (..., n, N)."""
        return self.project(h) @ label_embs.transpose(-1, -2)


class LinearDecoder(nn.Module):
    uses_label_embeddings = False

    def __init__(self, hidden_dim: int, num_labels: int):
        super().__init__()
        self.linear = nn.Linear(hidden_dim, num_labels)

    def forward(self, h, label_embs=None):
        return self.linear(h)


def vote_intents(token_probs: torch.Tensor, token_mask: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Sentence intents from per-token probabilities (B, n, N) -> bool (B, N).

    An intent is kept when at least ceil(len/2) tokens select it; a sentence
    where nothing clears the vote gets the intent with the highest mean
    token probability.
    """
    valid = token_mask.unsqueeze(-1)
    selected = (token_probs > threshold) & valid
    votes = selected.sum(1)
    lengths = token_mask.sum(1)
    need = torch.div(lengths + 1, 2, rounding_mode="floor").clamp(min=1)
    chosen = votes >= need[:, None]
    mean_prob = (token_probs * valid).sum(1) / lengths.clamp(min=1)[:, None]
    fallback = F.one_hot(mean_prob.argmax(-1), token_probs.shape[-1]).bool()
    empty = ~chosen.any(-1, keepdim=True)
    return torch.where(empty, fallback, chosen)


def decode_intent(h, intent_embs, decoder, token_mask=None, threshold: float = 0.5):
    """Per-token intent probabilities and the voted sentence-level intent set."""
    scores = decoder(h, intent_embs)
    probs = torch.sigmoid(scores)
    if token_mask is None:
        token_mask = torch.ones(probs.shape[:-1], dtype=torch.bool)
    return probs, vote_intents(probs, token_mask, threshold), scores


def decode_slot(h, slot_embs, decoder):
    """Per-token slot distributions and independent argmax tags."""
    scores = decoder(h, slot_embs)
    return torch.softmax(scores, dim=-1), scores.argmax(-1), scores


def project_label_knowledge(intent_sel, slot_pred, token_mask, intent_embs, slot_embs, outside_index):
    """Label knowledge vectors from hard predictions.

    intent_sel (B, N_I) bool; slot_pred (B, n) long; embeddings (B, N, d).
    Returns sentence-level intent knowledge (B, d), sentence-level slot
    knowledge over distinct predicted non-O slots (B, d) and per-token slot
    knowledge (B, n, d).
    """
    k_intent = torch.einsum("bk,bkd->bd", intent_sel.to(intent_embs.dtype), intent_embs)
    num_slots = slot_embs.shape[1]
    hot = F.one_hot(slot_pred, num_slots) & token_mask.unsqueeze(-1)
    present = hot.any(1)
    present[:, outside_index] = False
    k_slot = torch.einsum("bk,bkd->bd", present.to(slot_embs.dtype), slot_embs)
    k_token = torch.gather(
        slot_embs, 1, slot_pred.unsqueeze(-1).expand(-1, -1, slot_embs.shape[-1])
    )
    k_token = k_token * token_mask.unsqueeze(-1).to(k_token.dtype)
    return k_intent, k_slot, k_token


@dataclass
class StepTrace:
    intent_probs: torch.Tensor  # (B, n, N_I)
    slot_probs: torch.Tensor  # (B, n, N_S)
    intent_pred: torch.Tensor  # (B, N_I) bool
    slot_pred: torch.Tensor  # (B, n) long
    intent_hidden: torch.Tensor
    slot_hidden: torch.Tensor
    node_embs: torch.Tensor  # (B, V, d) label embeddings used for this step's decoding
    decoder: str = "matching"
    dm_mask: torch.Tensor | None = None


@dataclass
class ForwardOutput:
    steps: list[StepTrace] = field(default_factory=list)

    @property
    def final(self) -> StepTrace:
        return self.steps[-1]


@dataclass(frozen=True)
class Prediction:
    intents: frozenset[str]
    slots: tuple[str, ...]
    steps: tuple[tuple[frozenset[str], tuple[str, ...]], ...] = ()


class ReLaNet(nn.Module):
    def __init__(self, config: ModelConfig, inventory: LabelInventory, vocab_size: int,
                 graph: HeterogeneousLabelGraph):
        super().__init__()
        config.validate()
        check_graph_matches_inventory(graph, inventory)
        self.config = config
        self.inventory = inventory
        self.graph = graph
        self.vocab_size = vocab_size
        n_i, n_s = inventory.num_intents, inventory.num_slots
        self.num_intents, self.num_slots = n_i, n_s
        self.num_nodes = len(graph.nodes)
        d, hid = config.label_dim, config.hidden_dim

        adj = relation_adjacency(graph, self.num_nodes)
        self.register_buffer("adjacency", adj)
        undirected = adj.sum(0)
        self.register_buffer("undirected", ((undirected + undirected.T) > 0).to(adj.dtype))

        bound = 1.0 / math.sqrt(d)
        self.label_init = nn.Parameter(torch.empty(self.num_nodes, d).uniform_(-bound, bound))
        self.hlgt = HLGT(d, config.num_layers)
        self.dm_hlgt = HLGT(d, config.num_layers)

        self.embedding = nn.Embedding(vocab_size, config.word_dim, padding_idx=0)
        self.encoder = SelfAttentiveEncoder(config.word_dim, hid // 2, config.attn_dim)
        enc = self.encoder.out_dim
        self.intent_rnn = BiRecurrent(enc + 2 * d, hid // 2)
        self.slot_rnn = BiRecurrent(enc + 2 * d, hid // 2)
        self.use_gats = not config.no_gats and config.num_layers > 0
        if self.use_gats:
            self.intent_gat = GAT(hid, config.num_layers, config.gat_heads, residual=config.gat_residual)
            self.slot_gat = GAT(hid, config.num_layers, config.gat_heads, residual=config.gat_residual)
        if config.no_matching:
            self.intent_decoder = LinearDecoder(hid, n_i)
            self.slot_decoder = LinearDecoder(hid, n_s)
        else:
            self.intent_decoder = MatchingDecoder(hid, d)
            self.slot_decoder = MatchingDecoder(hid, d)
        self.dropout = nn.Dropout(config.dropout)

    @property
    def encoder_dim(self) -> int:
        return self.encoder.out_dim

    def label_embeddings(self) -> torch.Tensor:
        """Global node embeddings (V, d) after the HLGT stack over the full graph."""
        return self.hlgt(self.label_init, self.adjacency)

    def intent_rows(self, node_embs):
        return node_embs[..., : self.num_intents, :]

    def slot_rows(self, node_embs):
        return node_embs[..., self.num_intents : self.num_intents + self.num_slots, :]

    def dm_node_mask(self, intent_sel: torch.Tensor, slot_pred: torch.Tensor, token_mask) -> torch.Tensor:
        """Predicted label nodes plus first-order neighbours, as a (B, V) bool mask."""
        bsz = intent_sel.shape[0]
        seeds = torch.zeros(bsz, self.num_nodes, dtype=torch.bool)
        seeds[:, : self.num_intents] = intent_sel
        slot_hot = (F.one_hot(slot_pred, self.num_slots) & token_mask.unsqueeze(-1)).any(1)
        seeds[:, self.num_intents : self.num_intents + self.num_slots] = slot_hot
        reach = seeds.to(self.undirected.dtype) @ self.undirected
        return seeds | (reach > 0)

    def refresh_embeddings(self, node_embs, intent_sel, slot_pred, token_mask):
        if self.config.no_dm_hlgt:
            return node_embs, None
        mask = self.dm_node_mask(intent_sel, slot_pred, token_mask)
        return self.dm_hlgt(node_embs, self.adjacency, mask), mask

    def interaction_step(self, enc, knowledge, lengths, global_mask, local_mask):
        """BiLSTM then GAT for each task; ``knowledge`` is None on the first step."""
        bsz, n, _ = enc.shape
        d = self.config.label_dim
        if knowledge is None:
            # zero knowledge columns leave the recurrent gates driven by the encoder alone
            zeros = enc.new_zeros(bsz, n, 2 * d)
            intent_in = slot_in = torch.cat([enc, zeros], -1)
        else:
            k_intent, k_slot, k_token = knowledge
            if k_intent.shape[-1] != d:
                raise ValueError(f"knowledge dim {k_intent.shape[-1]} != label_dim {d}")
            k_i = k_intent.unsqueeze(1).expand(-1, n, -1)
            k_s = k_slot.unsqueeze(1).expand(-1, n, -1)
            intent_in = torch.cat([enc, k_i, k_s], -1)
            slot_in = torch.cat([enc, k_i, k_token], -1)
        h_intent = self.intent_rnn(intent_in, lengths)
        h_slot = self.slot_rnn(slot_in, lengths)
        if self.use_gats:
            h_intent = self.intent_gat(h_intent, global_mask)
            h_slot = self.slot_gat(h_slot, local_mask)
        return h_intent, h_slot

    def forward(self, batch: Batch) -> ForwardOutput:
        cfg = self.config
        lengths, token_mask = batch.lengths, batch.token_mask
        n = batch.word_ids.shape[1]
        words = self.dropout(self.embedding(batch.word_ids))
        enc = self.dropout(self.encoder(words, lengths))
        global_mask = adjacency_mask(lengths, n)
        local_mask = adjacency_mask(lengths, n, window=cfg.window)

        node_embs = self.label_embeddings().unsqueeze(0).expand(len(lengths), -1, -1)
        out = ForwardOutput()
        knowledge = None
        for t in range(1, cfg.steps + 1):
            h_intent, h_slot = self.interaction_step(enc, knowledge, lengths, global_mask, local_mask)
            intent_probs, intent_sel, _ = decode_intent(
                h_intent, self.intent_rows(node_embs), self.intent_decoder, token_mask,
                cfg.intent_threshold,
            )
            slot_probs, slot_pred, _ = decode_slot(h_slot, self.slot_rows(node_embs), self.slot_decoder)
            slot_pred = slot_pred.masked_fill(~token_mask, 0)
            trace = StepTrace(
                intent_probs, slot_probs, intent_sel, slot_pred, h_intent, h_slot, node_embs,
                decoder="matching" if self.intent_decoder.uses_label_embeddings else "linear",
            )
            out.steps.append(trace)
            if t == cfg.steps:
                break
            node_embs, trace.dm_mask = self.refresh_embeddings(node_embs, intent_sel, slot_pred, token_mask)
            knowledge = project_label_knowledge(
                intent_sel, slot_pred, token_mask, self.intent_rows(node_embs),
                self.slot_rows(node_embs), self.inventory.outside_index,
            )
        return out

    def to_predictions(self, batch: Batch, out: ForwardOutput, with_steps: bool = False) -> list[Prediction]:
        inv = self.inventory
        preds = []
        for b, length in enumerate(batch.lengths.tolist()):
            per_step = []
            for step in out.steps:
                intents = frozenset(
                    inv.intent_labels[k] for k in step.intent_pred[b].nonzero().flatten().tolist()
                )
                slots = tuple(inv.slot_labels[k] for k in step.slot_pred[b, :length].tolist())
                per_step.append((intents, slots))
            final = per_step[-1]
            preds.append(Prediction(final[0], final[1], tuple(per_step) if with_steps else ()))
        return preds

    @torch.no_grad()
    def predict(self, samples: Sequence[Sample], vocab: Vocabulary, batch_size: int = 64,
                with_steps: bool = False) -> list[Prediction]:
        was_training = self.training
        self.eval()
        preds = []
        for start in range(0, len(samples), batch_size):
            batch = collate(samples[start : start + batch_size], vocab)
            preds.extend(self.to_predictions(batch, self(batch), with_steps))
        self.train(was_training)
        return preds


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: ReLaNet, vocab: Vocabulary, extra: dict | None = None) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": model.config.to_dict(),
            "inventory": model.inventory.to_dict(),
            "inventory_fingerprint": model.inventory.fingerprint(),
            "vocab": list(vocab.itos),
            "graph": graph_to_dict(model.graph),
            "dtype": str(next(model.parameters()).dtype),
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path, expected_inventory: LabelInventory | None = None):
    """Returns (model, vocab); rejects a checkpoint built for another inventory."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob.get('format_version')!r}")
    inv = LabelInventory.from_dict(blob["inventory"])
    if inv.fingerprint() != blob["inventory_fingerprint"]:
        raise CheckpointError("checkpoint inventory is corrupted")
    if expected_inventory is not None and expected_inventory.fingerprint() != inv.fingerprint():
        raise CheckpointError("checkpoint was trained on a different label inventory")
    vocab = Vocabulary()
    vocab.itos = list(blob["vocab"])
    vocab.stoi = {w: i for i, w in enumerate(vocab.itos)}
    config = ModelConfig.from_dict(blob["config"])
    model = ReLaNet(config, inv, len(vocab), graph_from_dict(blob["graph"]))
    if blob.get("dtype") == "torch.float64":
        model.double()
    model.load_state_dict(blob["state_dict"])
    return model, vocab


def forward_sample(model: ReLaNet, sample: Sample, vocab: Vocabulary) -> Prediction:
    """Single-utterance inference with per-step traces."""
    return model.predict([sample], vocab, with_steps=True)[0]

