import json
import random

import pytest

from relanet.corpus import Dataset, Sample, UnknownLabelError, build_inventory
from relanet.hlg import (
    INTENT,
    PSEUDO,
    SLOT,
    GraphSchemaError,
    HeterogeneousLabelGraph,
    Label,
    Relation,
    ablate_graph,
    build_hlg,
    compute_stats,
    conditional_probability,
    dm_subgraph,
    export_graph,
    import_graph,
)

from oracles import brute_count, brute_edges, brute_joint, check_graph_invariants, random_corpus
from synthetic import synthetic_corpus


def corpus(*rows):
    return Dataset(tuple(Sample.build(toks, slots, ints) for toks, slots, ints in rows))


def full_graph(ds, l1=0.4, l2=0.9):
    inv = build_inventory(ds)
    return build_hlg(compute_stats(ds, inv), inv, l1, l2), inv


def test_relation_enum():
    assert len(Relation) == 12
    assert Relation.I2I_STAT_DEP.value == "r1"
    assert Relation.CHILD2PARENT_HIERARCHY.label == "child2parent_hierarchy"
    assert [r.label for r in Relation][:4] == [
        "i2i_stat_dep", "i2s_stat_dep", "s2s_stat_dep", "s2i_stat_dep"]


def test_two_sample_counts():
    ds = corpus((["a"], ["O"], ["A"]), (["b"], ["B-x"], ["A"]))
    stats = compute_stats(ds, build_inventory(ds))
    a, bx = Label(INTENT, "A"), Label(SLOT, "B-x")
    assert stats.count[a] == 2
    assert stats.joint_count(a, bx) == 1
    assert conditional_probability(stats, a, bx) == 0.5
    assert conditional_probability(stats, bx, a) == 1.0


def test_all_o_sample_counts_only_intents():
    ds = corpus((["a", "b"], ["O", "O"], ["A"]))
    stats = compute_stats(ds, build_inventory(ds))
    assert stats.count == {Label(INTENT, "A"): 1}
    assert stats.universe == (Label(INTENT, "A"),)


def test_single_sample_identity():
    ds = corpus((["a"], ["O"], ["A", "B"]))
    stats = compute_stats(ds, build_inventory(ds))
    a, b = Label(INTENT, "A"), Label(INTENT, "B")
    assert stats.joint_count(a, b) == stats.count[a] == stats.count[b] == 1
    assert conditional_probability(stats, a, b) == conditional_probability(stats, b, a) == 1.0


def test_conditional_probability_ratio_and_errors():
    rows = [(["w"], ["B-x"], ["A"])] * 3 + [(["w"], ["O"], ["A"]), (["w"], ["B-y"], ["C"])]
    ds = corpus(*rows)
    stats = compute_stats(ds, build_inventory(ds))
    a = Label(INTENT, "A")
    assert conditional_probability(stats, a, Label(SLOT, "B-x")) == 0.75
    assert conditional_probability(stats, a, a) == 1.0
    assert conditional_probability(stats, a, Label(SLOT, "B-y")) == 0.0
    with pytest.raises(UnknownLabelError):
        conditional_probability(stats, Label(INTENT, "nope"), a)


def test_b_label_counted_once_per_sample():
    ds = corpus((["a", "b", "c"], ["B-x", "O", "B-x"], ["A"]))
    stats = compute_stats(ds, build_inventory(ds))
    assert stats.count[Label(SLOT, "B-x")] == 1


def test_stats_reject_labels_outside_inventory():
    ds = corpus((["a"], ["B-x"], ["A"]))
    other = corpus((["a"], ["B-y"], ["A"]))
    with pytest.raises(UnknownLabelError):
        compute_stats(other, build_inventory(ds))


def test_strong_intent_edge():
    # P(B|A) = 19/20 = 0.95
    rows = [(["w"], ["O"], ["A", "B"])] * 19 + [(["w"], ["O"], ["A"])]
    hlg, _ = full_graph(corpus(*rows))
    a, b = hlg.node_id(INTENT, "A"), hlg.node_id(INTENT, "B")
    assert [e.relation for e in hlg.edges if e.src == a and e.dst == b] == [Relation.I2I_STAT_STRONG_DEP]
    # P(A|B) = 1.0 as well
    assert [e.relation for e in hlg.edges if e.src == b and e.dst == a] == [Relation.I2I_STAT_STRONG_DEP]


def test_below_lambda1_no_edge():
    rows = [(["w"], ["O"], ["A", "B"])] + [(["w"], ["O"], ["A"])] * 4  # P(B|A) = 0.2
    hlg, _ = full_graph(corpus(*rows))
    a, b = hlg.node_id(INTENT, "A"), hlg.node_id(INTENT, "B")
    assert not [e for e in hlg.edges if e.src == a and e.dst == b]


def test_b_i_hierarchy_edges_regardless_of_stats():
    ds = corpus((["a", "b"], ["B-x", "I-x"], ["A"]))
    hlg, _ = full_graph(ds, 0.99, 1.0)
    bx, ix = hlg.node_id(SLOT, "B-x"), hlg.node_id(SLOT, "I-x")
    edges = set(hlg.edges)
    assert (bx, ix, Relation.B2I_HIERARCHY) in edges
    assert (ix, bx, Relation.I2B_HIERARCHY) in edges


def test_pseudo_edges_and_node_count():
    ds = synthetic_corpus()
    hlg, inv = full_graph(ds)
    assert len(hlg.nodes) == inv.num_intents + inv.num_slots + inv.num_pseudo
    p = hlg.node_id(PSEUDO, "arrive_time")
    kids = {e.dst for e in hlg.edges if e.src == p}
    assert {hlg.node_by_id[k].label for k in kids} == {
        "B-arrive_time.time", "B-arrive_time.period_of_day"}
    assert all(e.relation == Relation.PARENT2CHILD_HIERARCHY for e in hlg.edges if e.src == p)


def test_threshold_ordering_checked():
    ds = synthetic_corpus()
    inv = build_inventory(ds)
    stats = compute_stats(ds, inv)
    for l1, l2 in [(0.9, 0.4), (0.5, 0.5), (0.0, 0.5), (0.2, 1.1)]:
        with pytest.raises(ValueError):
            build_hlg(stats, inv, l1, l2)


@pytest.mark.parametrize("seed", range(25))
def test_random_corpora_against_brute_force(seed):
    rng = random.Random(seed)
    ds = random_corpus(rng)
    inv = build_inventory(ds)
    stats = compute_stats(ds, inv)
    for u in stats.universe:
        assert stats.count[u] == brute_count(ds, u.kind, u.name)
        for v in stats.universe:
            if u != v:
                assert stats.joint_count(u, v) == brute_joint(ds, tuple(u), tuple(v))
    l1 = rng.choice([0.2, 0.3, 0.4, 0.5])
    l2 = rng.choice([0.6, 0.9, 1.0])
    hlg = build_hlg(stats, inv, l1, l2)
    got = {
        ((hlg.node_by_id[e.src].kind, hlg.node_by_id[e.src].label),
         (hlg.node_by_id[e.dst].kind, hlg.node_by_id[e.dst].label), e.relation.value)
        for e in hlg.edges
    }
    assert got == brute_edges(ds, inv, l1, l2)
    check_graph_invariants(hlg, ds, inv, l1, l2)


def test_dm_single_intent_neighbourhood():
    ds = corpus((["a"], ["B-x"], ["A"]), (["b"], ["B-y"], ["C"]), (["c"], ["B-y"], ["C"]))
    hlg, _ = full_graph(ds)
    sub = dm_subgraph(hlg, ["A"], [])
    assert {n.label for n in sub.nodes} == {"A", "B-x"}
    assert set(sub.edges) == {e for e in hlg.edges if {e.src, e.dst} <= {n.id for n in sub.nodes}}


def test_dm_saturation_and_o_only():
    hlg, inv = full_graph(synthetic_corpus())
    assert dm_subgraph(hlg, inv.intent_labels, inv.slot_labels) == hlg
    sub = dm_subgraph(hlg, [], ["O"])
    # brute-force neighbour scan of O
    o = hlg.node_id(SLOT, "O")
    assert not any(o in (e.src, e.dst) for e in hlg.edges)
    assert [n.label for n in sub.nodes] == ["O"] and sub.edges == ()
    empty = dm_subgraph(hlg, [], [])
    assert empty.nodes == () and empty.edges == ()


def test_dm_monotone():
    hlg, inv = full_graph(synthetic_corpus())
    rng = random.Random(0)
    labels = [("i", x) for x in inv.intent_labels] + [("s", x) for x in inv.slot_labels]
    for _ in range(50):
        small = set(rng.sample(labels, rng.randint(0, 4)))
        big = small | set(rng.sample(labels, rng.randint(0, 4)))

        def sub(sel):
            return dm_subgraph(hlg, [x for k, x in sel if k == "i"], [x for k, x in sel if k == "s"])

        assert {n.id for n in sub(small).nodes} <= {n.id for n in sub(big).nodes}


def test_export_import_round_trip():
    hlg, _ = full_graph(synthetic_corpus())
    doc = export_graph(hlg)
    back = import_graph(doc)
    assert back == hlg
    shuffled = json.loads(doc)
    shuffled["edges"].reverse()
    shuffled["nodes"].reverse()
    assert import_graph(shuffled) == hlg
    assert back.metadata["lambda1"] == 0.4


def test_import_rejects_dangling_edge_and_bad_schema():
    doc = {"nodes": [{"id": 0, "kind": "intent", "label": "A"}],
           "edges": [{"src": 0, "dst": 7, "relation": "r1"}]}
    with pytest.raises(GraphSchemaError):
        import_graph(doc)
    with pytest.raises(GraphSchemaError):
        import_graph({"nodes": [{"id": 0, "kind": "robot", "label": "A"}], "edges": []})
    with pytest.raises(GraphSchemaError):
        import_graph({"nodes": [], "edges": [{"src": 0, "dst": 0, "relation": "r13"}]})
    with pytest.raises(GraphSchemaError):
        import_graph({"edges": []})


def test_empty_graph_document():
    empty = HeterogeneousLabelGraph((), ())
    doc = json.loads(export_graph(empty))
    assert doc["nodes"] == [] and doc["edges"] == []
    assert import_graph(doc) == empty


def test_ablations():
    hlg, inv = full_graph(synthetic_corpus())
    assert ablate_graph(hlg, "none") == hlg

    no_stat = ablate_graph(hlg, "no_stat_dep")
    assert not any(e.relation.is_statistical for e in no_stat.edges)
    assert ablate_graph(no_stat, "no_stat_dep") == no_stat

    no_hier = ablate_graph(hlg, "no_hierarchy")
    assert no_hier.num_kind(PSEUDO) == 0
    assert all(e.relation.is_statistical for e in no_hier.edges)

    no_rel = ablate_graph(hlg, "no_relation")
    assert len({e.relation for e in no_rel.edges}) == 1
    assert sorted((e.src, e.dst) for e in no_rel.edges) == sorted((e.src, e.dst) for e in hlg.edges)

    with pytest.raises(ValueError):
        ablate_graph(hlg, "no_everything")
