"""Differentiable building blocks: relational graph transforms, GAT, BiLSTM, self-attention."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .hlg import NUM_RELATIONS, HeterogeneousLabelGraph


def relation_adjacency(
    hlg: HeterogeneousLabelGraph, num_nodes: int | None = None, dtype=torch.float32
) -> torch.Tensor:
    """Binary tensor ``A[r, i, j] = 1`` iff there is an ``r``-edge from j to i.

    Node ids index rows directly, so subgraphs keeping their original ids can be
    laid out against the full graph by passing its ``num_nodes``.
    """
    if num_nodes is None:
        num_nodes = max((n.id for n in hlg.nodes), default=-1) + 1
    adj = torch.zeros(NUM_RELATIONS, num_nodes, num_nodes, dtype=dtype)
    for e in hlg.edges:
        adj[e.relation.index, e.dst, e.src] = 1.0
    return adj


def normalize_adjacency(adj: torch.Tensor) -> torch.Tensor:
    """Divide each (relation, node) row by its neighbour count; empty rows stay zero."""
    deg = adj.sum(-1, keepdim=True)
    return adj / deg.clamp(min=1.0)


def masked_adjacency(adj: torch.Tensor, node_mask: torch.Tensor) -> torch.Tensor:
    """Restrict ``adj`` (R, V, V) to the induced subgraph of each mask row (B, V)."""
    m = node_mask.to(adj.dtype)
    return adj.unsqueeze(0) * m[:, None, :, None] * m[:, None, None, :]


def hlgt_forward(
    x: torch.Tensor, norm_adj: torch.Tensor, self_weight: torch.Tensor, rel_weights: torch.Tensor
) -> torch.Tensor:
    """One relation-specific transform layer.

    out_i = ReLU(W e_i + sum_r mean_{j in N_i^r} W_r e_j)

    x is (V, d) or (B, V, d); norm_adj is (R, V, V) or (B, R, V, V) with rows
    already divided by neighbour counts; rel_weights is (R, d_out, d).
    """
    out = x @ self_weight.T
    projected = torch.einsum("...jd,red->...rje", x, rel_weights)
    out = out + torch.einsum("...rij,...rje->...ie", norm_adj, projected)
    return torch.relu(out)


class HLGTLayer(nn.Module):
    def __init__(self, dim: int, num_relations: int = NUM_RELATIONS):
        super().__init__()
        bound = 1.0 / math.sqrt(dim)
        self.self_weight = nn.Parameter(torch.empty(dim, dim).uniform_(-bound, bound))
        self.rel_weights = nn.Parameter(torch.empty(num_relations, dim, dim).uniform_(-bound, bound))

    def forward(self, x, norm_adj):
        return hlgt_forward(x, norm_adj, self.self_weight, self.rel_weights)


class HLGT(nn.Module):
    """Stack of relation-specific transform layers over a (possibly masked) label graph."""

    def __init__(self, dim: int, num_layers: int):
        super().__init__()
        self.layers = nn.ModuleList(HLGTLayer(dim) for _ in range(num_layers))

    def forward(self, x: torch.Tensor, adj: torch.Tensor, node_mask: torch.Tensor | None = None):
        """Run every layer; with ``node_mask`` (B, V) masked-out rows keep their input."""
        if node_mask is None:
            norm = normalize_adjacency(adj)
            for layer in self.layers:
                x = layer(x, norm)
            return x
        norm = normalize_adjacency(masked_adjacency(adj, node_mask))
        keep = node_mask.to(x.dtype).unsqueeze(-1)
        for layer in self.layers:
            x = keep * layer(x, norm) + (1 - keep) * x
        return x


def build_global_adjacency(n: int) -> list[list[int]]:
    return [list(range(n)) for _ in range(n)]


def build_local_adjacency(n: int, w: int) -> list[list[int]]:
    return [list(range(max(0, i - w), min(n, i + w + 1))) for i in range(n)]


def adjacency_mask(lengths, max_len: int, window: int | None = None) -> torch.Tensor:
    """Boolean (B, n, n) neighbourhood mask with self-loops over padded batches.

    Real tokens only see real tokens; padding positions see only themselves so
    that every softmax row is non-empty.
    """
    lengths = torch.as_tensor(lengths)
    pos = torch.arange(max_len)
    valid = pos[None, :] < lengths[:, None]
    mask = valid[:, :, None] & valid[:, None, :]
    if window is not None:
        band = (pos[:, None] - pos[None, :]).abs() <= window
        mask = mask & band
    return mask | torch.eye(max_len, dtype=torch.bool)


def neighbor_lists_to_mask(neighbors: list[list[int]]) -> torch.Tensor:
    n = len(neighbors)
    mask = torch.zeros(n, n, dtype=torch.bool)
    for i, nbrs in enumerate(neighbors):
        mask[i, nbrs] = True
    return mask


class GATLayer(nn.Module):
    """Multi-head additive graph attention.

    Hidden layers concatenate heads and apply LeakyReLU; the output layer
    averages the heads and applies no nonlinearity.
    """

    def __init__(self, in_dim: int, out_dim: int, heads: int = 4, concat: bool = True,
                 negative_slope: float = 0.2):
        super().__init__()
        if concat and out_dim % heads:
            raise ValueError(f"out_dim {out_dim} not divisible by {heads} heads")
        self.heads = heads
        self.concat = concat
        self.head_dim = out_dim // heads if concat else out_dim
        self.negative_slope = negative_slope
        self.proj = nn.Linear(in_dim, heads * self.head_dim, bias=False)
        self.att_src = nn.Parameter(torch.empty(heads, self.head_dim))
        self.att_dst = nn.Parameter(torch.empty(heads, self.head_dim))
        nn.init.xavier_uniform_(self.proj.weight)
        nn.init.xavier_uniform_(self.att_src)
        nn.init.xavier_uniform_(self.att_dst)
        self.last_attention: torch.Tensor | None = None

    def forward(self, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """h: (B, n, in_dim); mask: (B, n, n) or (n, n) bool, ``mask[i, j]`` = j in N(i)."""
        *lead, n, _ = h.shape
        wh = self.proj(h).view(*lead, n, self.heads, self.head_dim)
        score_i = (wh * self.att_dst).sum(-1)  # (B, n, K)
        score_j = (wh * self.att_src).sum(-1)
        e = score_i.unsqueeze(-2) + score_j.unsqueeze(-3)  # (B, n_i, n_j, K)
        e = F.leaky_relu(e, self.negative_slope)
        e = e.masked_fill(~mask.unsqueeze(-1), float("-inf"))
        alpha = torch.softmax(e, dim=-2)
        self.last_attention = alpha.detach()
        out = torch.einsum("...ijk,...jkd->...ikd", alpha, wh)
        if self.concat:
            return F.leaky_relu(out.reshape(*lead, n, self.heads * self.head_dim), self.negative_slope)
        return out.mean(-2)


class GAT(nn.Module):
    """Stack of ``num_layers`` GAT layers; the last one averages its heads.

    With ``residual`` the stack input is added to its output, so a token keeps
    its own signal even when attention favours its neighbours.
    """

    def __init__(self, dim: int, num_layers: int, heads: int = 4, negative_slope: float = 0.2,
                 residual: bool = False):
        super().__init__()
        self.residual = residual
        layers = [GATLayer(dim, dim, heads, True, negative_slope) for _ in range(num_layers - 1)]
        layers.append(GATLayer(dim, dim, heads, False, negative_slope))
        self.layers = nn.ModuleList(layers)

    def forward(self, h, mask):
        out = h
        for layer in self.layers:
            out = layer(out, mask)
        return out + h if self.residual else out


def gat_forward(node_feats: torch.Tensor, neighbors: list[list[int]], gat: nn.Module) -> torch.Tensor:
    """Apply a GAT layer or stack to one unbatched graph given as neighbour lists."""
    mask = neighbor_lists_to_mask(neighbors)
    if any(not nbrs for nbrs in neighbors):
        raise ValueError("every node needs a non-empty neighbourhood")
    return gat(node_feats.unsqueeze(0), mask.unsqueeze(0)).squeeze(0)


class BiRecurrent(nn.Module):
    """Single-layer bidirectional LSTM over padded batches."""

    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.lstm = nn.LSTM(in_dim, hidden, batch_first=True, bidirectional=True)

    @property
    def out_dim(self):
        return 2 * self.hidden

    def forward(self, x: torch.Tensor, lengths) -> torch.Tensor:
        lengths = torch.as_tensor(lengths, dtype=torch.long).cpu()
        packed = pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return out


def birecurrent_forward(inputs: torch.Tensor, rnn: BiRecurrent) -> torch.Tensor:
    """Unbatched convenience: (n, d_in) -> (n, 2 * hidden)."""
    return rnn(inputs.unsqueeze(0), [inputs.shape[0]]).squeeze(0)


class SelfAttention(nn.Module):
    """Single-head scaled dot-product attention with learned projections."""

    def __init__(self, in_dim: int, attn_dim: int):
        super().__init__()
        self.query = nn.Linear(in_dim, attn_dim)
        self.key = nn.Linear(in_dim, attn_dim)
        self.value = nn.Linear(in_dim, attn_dim)
        self.scale = 1.0 / math.sqrt(attn_dim)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        scores = self.query(x) @ self.key(x).transpose(-1, -2) * self.scale
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask.unsqueeze(-2), float("-inf"))
        return torch.softmax(scores, dim=-1) @ self.value(x)


class SelfAttentiveEncoder(nn.Module):
    """BiLSTM stream and self-attention stream over word embeddings, concatenated."""

    def __init__(self, in_dim: int, lstm_hidden: int, attn_dim: int):
        super().__init__()
        self.rnn = BiRecurrent(in_dim, lstm_hidden)
        self.attention = SelfAttention(in_dim, attn_dim)
        self.out_dim = 2 * lstm_hidden + attn_dim

    def forward(self, x: torch.Tensor, lengths) -> torch.Tensor:
        lengths = torch.as_tensor(lengths)
        key_mask = torch.arange(x.shape[1])[None, :] < lengths[:, None]
        return torch.cat([self.rnn(x, lengths), self.attention(x, key_mask)], dim=-1)


def self_attentive_encode(word_embs: torch.Tensor, encoder: SelfAttentiveEncoder) -> torch.Tensor:
    return encoder(word_embs.unsqueeze(0), [word_embs.shape[0]]).squeeze(0)
