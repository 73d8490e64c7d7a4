import random

import pytest
import torch

from relanet.corpus import build_inventory
from relanet.hlg import Edge, HeterogeneousLabelGraph, Node, Relation, ablate_graph, build_hlg, compute_stats
from relanet.layers import (
    GAT,
    HLGT,
    BiRecurrent,
    GATLayer,
    SelfAttentiveEncoder,
    adjacency_mask,
    birecurrent_forward,
    build_global_adjacency,
    build_local_adjacency,
    gat_forward,
    hlgt_forward,
    masked_adjacency,
    normalize_adjacency,
    relation_adjacency,
    self_attentive_encode,
)
from relanet.training import gradient_check

from synthetic import synthetic_corpus

R1, R2 = Relation.I2I_STAT_DEP, Relation.I2S_STAT_DEP


def graph(n, edges):
    nodes = tuple(Node(i, "intent", f"n{i}") for i in range(n))
    return HeterogeneousLabelGraph(nodes, tuple(Edge(s, d, r) for s, d, r in edges))


def norm_adj(g, dtype=torch.float64):
    return normalize_adjacency(relation_adjacency(g, dtype=dtype))


def rand_weights(d, gen, dtype=torch.float64):
    return torch.randn(d, d, generator=gen, dtype=dtype), torch.randn(12, d, d, generator=gen, dtype=dtype)


def test_isolated_node_identity():
    x = torch.tensor([[0.3, 1.2, 0.0]], dtype=torch.float64)
    out = hlgt_forward(x, norm_adj(graph(1, [])), torch.eye(3, dtype=torch.float64),
                       torch.randn(12, 3, 3, dtype=torch.float64))
    assert torch.equal(out, x)


def test_duplicate_neighbours_average():
    d = 3
    gen = torch.Generator().manual_seed(0)
    e = torch.rand(d, generator=gen, dtype=torch.float64)
    x = torch.stack([torch.zeros(d, dtype=torch.float64), e, e])
    _, rel = rand_weights(d, gen)
    g = graph(3, [(1, 0, R1), (2, 0, R1)])
    out = hlgt_forward(x, norm_adj(g), torch.zeros(d, d, dtype=torch.float64), rel)
    torch.testing.assert_close(out[0], torch.relu(rel[0] @ e), rtol=0, atol=1e-12)


def scalar_hlgt(values, edges, w_self, w_rel):
    """Direct evaluation for 1-d embeddings, one node at a time."""
    out = []
    for i in range(len(values)):
        total = w_self * values[i]
        for r in range(12):
            srcs = sorted({s for s, d, rel in edges if d == i and rel.index == r})
            for s in srcs:
                total += w_rel[r] * values[s] / len(srcs)
        out.append(max(total, 0.0))
    return out


def test_three_node_toy_graph_by_hand():
    values = [1.0, -2.0, 3.0]
    edges = [(1, 0, R1), (2, 0, R1), (2, 0, R2), (0, 1, R2), (0, 2, Relation.B2I_HIERARCHY)]
    w_self, w_rel = 0.5, [0.1 * (k + 1) for k in range(12)]
    expected = scalar_hlgt(values, edges, w_self, w_rel)
    # node 0: 0.5*1 + 0.1*(-2+3)/2 + 0.2*3 = 1.15 ; node 1: -1 + 0.2*1 -> relu 0 ; node 2: 1.5 + 0.9*1 = 2.4
    assert expected == pytest.approx([1.15, 0.0, 2.4])
    x = torch.tensor(values, dtype=torch.float64).unsqueeze(1)
    out = hlgt_forward(x, norm_adj(graph(3, edges)), torch.tensor([[w_self]], dtype=torch.float64),
                       torch.tensor(w_rel, dtype=torch.float64).view(12, 1, 1))
    torch.testing.assert_close(out.squeeze(1), torch.tensor(expected, dtype=torch.float64))


def real_graph():
    ds = synthetic_corpus()
    inv = build_inventory(ds)
    return build_hlg(compute_stats(ds, inv), inv)


def test_permutation_equivariance():
    g = real_graph()
    v, d = len(g.nodes), 5
    gen = torch.Generator().manual_seed(1)
    x = torch.randn(v, d, generator=gen, dtype=torch.float64)
    w, rel = rand_weights(d, gen)
    out = hlgt_forward(x, norm_adj(g), w, rel)
    perm = list(range(v))
    random.Random(0).shuffle(perm)
    pg = HeterogeneousLabelGraph(
        tuple(Node(perm[n.id], n.kind, n.label) for n in g.nodes),
        tuple(Edge(perm[e.src], perm[e.dst], e.relation) for e in g.edges),
    )
    px = torch.empty_like(x)
    px[perm] = x
    pout = hlgt_forward(px, norm_adj(pg), w, rel)
    torch.testing.assert_close(pout[perm], out, rtol=0, atol=1e-6)


def test_neighbour_order_invariance():
    g = real_graph()
    edges = list(g.edges)
    random.Random(3).shuffle(edges)
    g2 = HeterogeneousLabelGraph(g.nodes, tuple(edges))
    gen = torch.Generator().manual_seed(2)
    x = torch.randn(len(g.nodes), 4, generator=gen, dtype=torch.float64)
    w, rel = rand_weights(4, gen)
    assert torch.equal(hlgt_forward(x, norm_adj(g), w, rel), hlgt_forward(x, norm_adj(g2), w, rel))


def test_no_relation_graph_with_tied_weights_is_single_relation_transform():
    g = ablate_graph(real_graph(), "no_relation")
    d = 4
    gen = torch.Generator().manual_seed(4)
    x = torch.randn(len(g.nodes), d, generator=gen, dtype=torch.float64)
    w_self = torch.randn(d, d, generator=gen, dtype=torch.float64)
    w = torch.randn(d, d, generator=gen, dtype=torch.float64)
    out = hlgt_forward(x, norm_adj(g), w_self, w.expand(12, d, d))
    for i in range(len(g.nodes)):
        srcs = sorted({e.src for e in g.edges if e.dst == i})
        acc = w_self @ x[i]
        if srcs:
            acc = acc + sum(w @ x[j] for j in srcs) / len(srcs)
        torch.testing.assert_close(out[i], torch.relu(acc), rtol=1e-12, atol=1e-12)


def test_masked_layer_matches_subgraph():
    g = real_graph()
    v = len(g.nodes)
    keep = {0, 4, 5, 9}
    mask = torch.zeros(1, v, dtype=torch.bool)
    mask[0, list(keep)] = True
    torch.manual_seed(0)
    stack = HLGT(3, 2).double()
    x = torch.randn(v, 3, dtype=torch.float64)
    adj = relation_adjacency(g, dtype=torch.float64)
    got = stack(x.unsqueeze(0), adj, mask)[0]
    want = stack(x, relation_adjacency(g.subgraph(keep), v, dtype=torch.float64))
    for i in range(v):
        torch.testing.assert_close(got[i], want[i] if i in keep else x[i])
    assert masked_adjacency(adj, mask).shape == (1, 12, v, v)


def test_global_and_local_adjacency():
    assert all(len(nbrs) == 3 for nbrs in build_global_adjacency(3))
    local = build_local_adjacency(5, 1)
    assert local[0] == [0, 1] and local[2] == [1, 2, 3] and local[4] == [3, 4]
    assert build_local_adjacency(5, 10) == build_global_adjacency(5)
    assert build_local_adjacency(1, 0) == [[0]]
    m = adjacency_mask([2, 3], 3, window=0)
    assert m[0].tolist() == [[True, False, False], [False, True, False], [False, False, True]]


def test_gat_single_node():
    torch.manual_seed(0)
    x = torch.randn(1, 8, dtype=torch.float64)
    hidden = GATLayer(8, 8, heads=4, concat=True).double()
    out = gat_forward(x, [[0]], hidden)
    torch.testing.assert_close(out, torch.nn.functional.leaky_relu(hidden.proj(x), 0.2))
    final = GATLayer(8, 8, heads=4, concat=False).double()
    out = gat_forward(x, [[0]], final)
    torch.testing.assert_close(out, final.proj(x).view(1, 4, 8).mean(1))


def test_gat_symmetry_and_row_stochastic():
    torch.manual_seed(1)
    gat = GAT(8, 2, heads=4).double()
    x = torch.randn(1, 8, dtype=torch.float64).repeat(2, 1)
    out = gat_forward(x, [[0, 1], [0, 1]], gat)
    torch.testing.assert_close(out[0], out[1])
    x = torch.randn(6, 8, dtype=torch.float64)
    out = gat_forward(x, build_local_adjacency(6, 2), gat)
    assert torch.isfinite(out).all()
    for layer in gat.layers:
        alpha = layer.last_attention
        assert (alpha >= 0).all()
        torch.testing.assert_close(alpha.sum(-2), torch.ones_like(alpha.sum(-2)), rtol=0, atol=1e-6)


def test_gat_rejects_empty_neighbourhood():
    gat = GATLayer(4, 4, heads=2)
    with pytest.raises(ValueError):
        gat_forward(torch.randn(2, 4), [[0], []], gat)


def test_encoder_width_and_single_token():
    torch.manual_seed(0)
    enc = SelfAttentiveEncoder(6, 5, 7).double()
    for n in (1, 3, 8):
        assert self_attentive_encode(torch.randn(n, 6, dtype=torch.float64), enc).shape == (n, 2 * 5 + 7)
    x = torch.randn(1, 6, dtype=torch.float64)
    out = self_attentive_encode(x, enc)
    torch.testing.assert_close(out[:, 10:], enc.attention.value(x))


def test_attention_stream_is_permutation_equivariant():
    torch.manual_seed(0)
    enc = SelfAttentiveEncoder(6, 5, 7).double()
    x = torch.randn(5, 6, dtype=torch.float64)
    out = self_attentive_encode(x, enc)
    rev = self_attentive_encode(x.flip(0), enc).flip(0)
    torch.testing.assert_close(rev[:, 10:], out[:, 10:])
    assert not torch.allclose(rev[:, :10], out[:, :10])


def test_padded_batch_matches_unbatched():
    torch.manual_seed(0)
    enc = SelfAttentiveEncoder(4, 3, 5).double()
    a, b = torch.randn(2, 4, dtype=torch.float64), torch.randn(4, 4, dtype=torch.float64)
    batch = torch.zeros(2, 4, 4, dtype=torch.float64)
    batch[0, :2], batch[1] = a, b
    out = enc(batch, [2, 4])
    torch.testing.assert_close(out[0, :2], self_attentive_encode(a, enc))
    torch.testing.assert_close(out[1], self_attentive_encode(b, enc))


def test_birecurrent_zero_params():
    rnn = BiRecurrent(3, 4).double()
    for p in rnn.parameters():
        torch.nn.init.zeros_(p)
    out = birecurrent_forward(torch.randn(5, 3, dtype=torch.float64), rnn)
    assert out.shape == (5, 8)
    assert torch.count_nonzero(out) == 0


def test_birecurrent_single_step():
    torch.manual_seed(0)
    rnn = BiRecurrent(3, 4).double()
    x = torch.randn(1, 3, dtype=torch.float64)
    out = birecurrent_forward(x, rnn)
    lstm = rnn.lstm
    fwd = torch.nn.LSTMCell(3, 4).double()
    fwd.load_state_dict({"weight_ih": lstm.weight_ih_l0, "weight_hh": lstm.weight_hh_l0,
                         "bias_ih": lstm.bias_ih_l0, "bias_hh": lstm.bias_hh_l0})
    bwd = torch.nn.LSTMCell(3, 4).double()
    bwd.load_state_dict({"weight_ih": lstm.weight_ih_l0_reverse, "weight_hh": lstm.weight_hh_l0_reverse,
                         "bias_ih": lstm.bias_ih_l0_reverse, "bias_hh": lstm.bias_hh_l0_reverse})
    torch.testing.assert_close(out[0, :4], fwd(x)[0][0])
    torch.testing.assert_close(out[0, 4:], bwd(x)[0][0])
    assert torch.equal(out, birecurrent_forward(x, rnn))


# gradients against central differences in float64


def test_hlgt_gradients():
    g = real_graph()
    torch.manual_seed(0)
    layer_stack = HLGT(3, 2).double()
    x = torch.randn(len(g.nodes), 3, dtype=torch.float64, requires_grad=True)
    adj = relation_adjacency(g, dtype=torch.float64)
    u = torch.randn(len(g.nodes), 3, dtype=torch.float64)
    params = dict(layer_stack.named_parameters(), x=x)
    rep = gradient_check(lambda: (layer_stack(x, adj) * u).sum(), params, max_per_tensor=40)
    assert rep.max_rel_error < 1e-4, rep


def test_gat_gradients():
    torch.manual_seed(0)
    gat = GAT(8, 2, heads=4).double()
    x = torch.randn(5, 8, dtype=torch.float64, requires_grad=True)
    u = torch.randn(5, 8, dtype=torch.float64)
    nbrs = build_local_adjacency(5, 1)
    params = dict(gat.named_parameters(), x=x)
    rep = gradient_check(lambda: (gat_forward(x, nbrs, gat) * u).sum(), params, max_per_tensor=40)
    assert rep.max_rel_error < 1e-4, rep


def test_birecurrent_gradients():
    torch.manual_seed(0)
    rnn = BiRecurrent(3, 4).double()
    x = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    u = torch.randn(4, 8, dtype=torch.float64)
    params = dict(rnn.named_parameters(), x=x)
    rep = gradient_check(lambda: (birecurrent_forward(x, rnn) * u).sum(), params)
    assert rep.max_rel_error < 1e-4, rep


def test_encoder_gradients():
    torch.manual_seed(0)
    enc = SelfAttentiveEncoder(4, 3, 5).double()
    x = torch.randn(4, 4, dtype=torch.float64, requires_grad=True)
    u = torch.randn(4, 11, dtype=torch.float64)
    params = dict(enc.named_parameters(), x=x)
    rep = gradient_check(lambda: (self_attentive_encode(x, enc) * u).sum(), params, max_per_tensor=30)
    assert rep.max_rel_error < 1e-4, rep


def test_residual_stack_adds_input():
    torch.manual_seed(0)
    plain = GAT(8, 2, heads=4).double()
    skip = GAT(8, 2, heads=4, residual=True).double()
    skip.load_state_dict(plain.state_dict())
    x = torch.randn(4, 8, dtype=torch.float64)
    nbrs = build_local_adjacency(4, 1)
    torch.testing.assert_close(gat_forward(x, nbrs, skip), gat_forward(x, nbrs, plain) + x)
