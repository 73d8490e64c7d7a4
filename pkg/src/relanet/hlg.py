"""Heterogeneous label graph: co-occurrence statistics, typed relations, subgraphs."""

from __future__ import annotations

import enum
import json
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations
from typing import Iterable, NamedTuple

from .corpus import OUTSIDE, Dataset, LabelInventory, UnknownLabelError

INTENT = "intent"
SLOT = "slot"
PSEUDO = "pseudo"
NODE_KINDS = (INTENT, SLOT, PSEUDO)

ABLATION_MODES = ("none", "no_stat_dep", "no_hierarchy", "no_relation")


class Relation(enum.Enum):
    I2I_STAT_DEP = "r1"
    I2S_STAT_DEP = "r2"
    S2S_STAT_DEP = "r3"
    S2I_STAT_DEP = "r4"
    I2I_STAT_STRONG_DEP = "r5"
    I2S_STAT_STRONG_DEP = "r6"
    S2S_STAT_STRONG_DEP = "r7"
    S2I_STAT_STRONG_DEP = "r8"
    B2I_HIERARCHY = "r9"
    I2B_HIERARCHY = "r10"
    PARENT2CHILD_HIERARCHY = "r11"
    CHILD2PARENT_HIERARCHY = "r12"

    @property
    def index(self) -> int:
        return int(self.value[1:]) - 1

    @property
    def label(self) -> str:
        return self.name.lower()

    @property
    def is_statistical(self) -> bool:
        return self.index < 8

    @classmethod
    def from_index(cls, index: int) -> "Relation":
        return _BY_INDEX[index]


_BY_INDEX = {r.index: r for r in Relation}
NUM_RELATIONS = len(Relation)
STAT_RELATIONS = tuple(r for r in Relation if r.is_statistical)
HIERARCHY_RELATIONS = tuple(r for r in Relation if not r.is_statistical)

# (source kind, target kind) -> (weak relation, strong relation); "B" is a B- slot.
_STAT_RELATION = {
    ("intent", "intent"): (Relation.I2I_STAT_DEP, Relation.I2I_STAT_STRONG_DEP),
    ("intent", "B"): (Relation.I2S_STAT_DEP, Relation.I2S_STAT_STRONG_DEP),
    ("B", "B"): (Relation.S2S_STAT_DEP, Relation.S2S_STAT_STRONG_DEP),
    ("B", "intent"): (Relation.S2I_STAT_DEP, Relation.S2I_STAT_STRONG_DEP),
}


class Label(NamedTuple):
    """A statistical-universe label; kind is ``intent`` or ``slot``."""

    kind: str
    name: str


def _stat_kind(label: Label) -> str:
    return "intent" if label.kind == INTENT else "B"


@dataclass(frozen=True)
class CooccurrenceStats:
    universe: tuple[Label, ...]
    count: dict[Label, int]
    joint: dict[tuple[Label, Label], int]

    def joint_count(self, i: Label, j: Label) -> int:
        if i == j:
            return self.count.get(i, 0)
        return self.joint.get((i, j), 0)


def sample_labels(sample, inv: LabelInventory) -> set[Label]:
    """Universe labels present in one sample, deduplicated."""
    labels = set()
    for x in sample.intents:
        inv.intent_index(x)
        labels.add(Label(INTENT, x))
    for tag in sample.slots:
        inv.slot_index(tag)
        if tag.startswith("B-"):
            labels.add(Label(SLOT, tag))
    return labels


def stat_universe(inv: LabelInventory) -> tuple[Label, ...]:
    return tuple(Label(INTENT, x) for x in inv.intent_labels) + tuple(
        Label(SLOT, t) for t in inv.slot_labels if t.startswith("B-")
    )


def compute_stats(train: Dataset, inv: LabelInventory) -> CooccurrenceStats:
    """Sample-level label counts over intents and B- slot labels."""
    count: dict[Label, int] = defaultdict(int)
    joint: dict[tuple[Label, Label], int] = defaultdict(int)
    for sample in train:
        present = sorted(sample_labels(sample, inv))
        for a in present:
            count[a] += 1
        for a, b in combinations(present, 2):
            joint[a, b] += 1
            joint[b, a] += 1
    universe = tuple(x for x in stat_universe(inv) if count.get(x, 0) > 0)
    return CooccurrenceStats(universe, dict(count), dict(joint))


def conditional_probability(stats: CooccurrenceStats, i: Label, j: Label) -> float:
    """P(j | i): fraction of samples containing ``i`` that also contain ``j``."""
    n = stats.count.get(i, 0)
    if n < 1:
        raise UnknownLabelError(f"label {i} was never counted")
    return stats.joint_count(i, j) / n


class Node(NamedTuple):
    id: int
    kind: str
    label: str


class Edge(NamedTuple):
    src: int
    dst: int
    relation: Relation


@dataclass(frozen=True, eq=False)
class HeterogeneousLabelGraph:
    nodes: tuple[Node, ...]
    edges: tuple[Edge, ...]
    metadata: dict = field(default_factory=dict)

    @cached_property
    def node_by_id(self) -> dict[int, Node]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def ids(self) -> dict[tuple[str, str], int]:
        return {(n.kind, n.label): n.id for n in self.nodes}

    @cached_property
    def in_neighbors(self) -> dict[int, dict[Relation, tuple[int, ...]]]:
        """node -> relation -> sorted ids of nodes sending to it over that relation."""
        acc: dict[int, dict[Relation, set[int]]] = {n.id: defaultdict(set) for n in self.nodes}
        for e in self.edges:
            acc[e.dst][e.relation].add(e.src)
        return {
            i: {r: tuple(sorted(srcs)) for r, srcs in rels.items()} for i, rels in acc.items()
        }

    @cached_property
    def undirected_neighbors(self) -> dict[int, set[int]]:
        acc: dict[int, set[int]] = {n.id: set() for n in self.nodes}
        for e in self.edges:
            acc[e.src].add(e.dst)
            acc[e.dst].add(e.src)
        return acc

    def node_id(self, kind: str, label: str) -> int:
        try:
            return self.ids[kind, label]
        except KeyError:
            raise UnknownLabelError(f"no {kind} node {label!r}") from None

    def degree(self, node_id: int) -> int:
        return sum(1 for e in self.edges if node_id in (e.src, e.dst))

    def kind_ids(self, kind: str) -> list[int]:
        return [n.id for n in self.nodes if n.kind == kind]

    def relation_counts(self) -> dict[str, int]:
        counts = {r.label: 0 for r in Relation}
        for e in self.edges:
            counts[e.relation.label] += 1
        return counts

    def num_kind(self, kind: str) -> int:
        return sum(1 for n in self.nodes if n.kind == kind)

    def __eq__(self, other):
        if not isinstance(other, HeterogeneousLabelGraph):
            return NotImplemented
        return set(self.nodes) == set(other.nodes) and set(self.edges) == set(other.edges)

    def __hash__(self):
        return hash((frozenset(self.nodes), frozenset(self.edges)))

    def subgraph(self, keep: Iterable[int]) -> "HeterogeneousLabelGraph":
        """Induced subgraph on ``keep``; node ids are preserved."""
        keep = set(keep)
        nodes = tuple(n for n in self.nodes if n.id in keep)
        edges = tuple(e for e in self.edges if e.src in keep and e.dst in keep)
        return HeterogeneousLabelGraph(nodes, edges, dict(self.metadata))


def graph_nodes(inv: LabelInventory) -> tuple[Node, ...]:
    """Intent nodes, then slot nodes, then pseudo nodes, each in inventory order."""
    labelled = (
        [(INTENT, x) for x in inv.intent_labels]
        + [(SLOT, x) for x in inv.slot_labels]
        + [(PSEUDO, x) for x in inv.pseudo_labels]
    )
    return tuple(Node(i, kind, label) for i, (kind, label) in enumerate(labelled))


def stat_relation(src: Label, dst: Label, p: float, lambda1: float, lambda2: float) -> Relation | None:
    if p >= lambda2:
        return _STAT_RELATION[_stat_kind(src), _stat_kind(dst)][1]
    if p >= lambda1:
        return _STAT_RELATION[_stat_kind(src), _stat_kind(dst)][0]
    return None


def build_hlg(
    stats: CooccurrenceStats,
    inv: LabelInventory,
    lambda1: float = 0.4,
    lambda2: float = 0.9,
    fingerprint: str | None = None,
) -> HeterogeneousLabelGraph:
    if not 0 < lambda1 < lambda2 <= 1:
        raise ValueError(f"need 0 < lambda1 < lambda2 <= 1, got {lambda1}, {lambda2}")
    nodes = graph_nodes(inv)
    ids = {(n.kind, n.label): n.id for n in nodes}
    edges: list[Edge] = []

    for i in stats.universe:
        for j in stats.universe:
            if i == j:
                continue
            rel = stat_relation(i, j, conditional_probability(stats, i, j), lambda1, lambda2)
            if rel is not None:
                edges.append(Edge(ids[i], ids[j], rel))

    for tag in inv.slot_labels:
        if not tag.startswith("I-"):
            continue
        b_id = ids.get((SLOT, "B-" + tag[2:]))
        if b_id is None:
            continue
        i_id = ids[SLOT, tag]
        edges.append(Edge(b_id, i_id, Relation.B2I_HIERARCHY))
        edges.append(Edge(i_id, b_id, Relation.I2B_HIERARCHY))

    for child, parent in sorted(inv.parent_of.items()):
        c_id, p_id = ids[SLOT, child], ids[PSEUDO, parent]
        edges.append(Edge(p_id, c_id, Relation.PARENT2CHILD_HIERARCHY))
        edges.append(Edge(c_id, p_id, Relation.CHILD2PARENT_HIERARCHY))

    metadata = {"lambda1": lambda1, "lambda2": lambda2, "corpus_fingerprint": fingerprint}
    return HeterogeneousLabelGraph(nodes, tuple(edges), metadata)


def dm_node_ids(hlg: HeterogeneousLabelGraph, seeds: Iterable[int]) -> set[int]:
    """Seed nodes plus their first-order neighbours in either edge direction."""
    keep = set()
    nbrs = hlg.undirected_neighbors
    for s in seeds:
        keep.add(s)
        keep.update(nbrs[s])
    return keep


def dm_subgraph(
    hlg: HeterogeneousLabelGraph,
    predicted_intents: Iterable[str],
    predicted_slots: Iterable[str],
) -> HeterogeneousLabelGraph:
    """Induced subgraph on the predicted labels and their first-order neighbours."""
    seeds = [hlg.node_id(INTENT, x) for x in predicted_intents]
    seeds += [hlg.node_id(SLOT, x) for x in predicted_slots]
    return hlg.subgraph(dm_node_ids(hlg, seeds))


def ablate_graph(hlg: HeterogeneousLabelGraph, mode: str = "none") -> HeterogeneousLabelGraph:
    meta = dict(hlg.metadata, ablation=mode)
    if mode == "none":
        return HeterogeneousLabelGraph(hlg.nodes, hlg.edges, meta)
    if mode == "no_stat_dep":
        edges = tuple(e for e in hlg.edges if not e.relation.is_statistical)
        return HeterogeneousLabelGraph(hlg.nodes, edges, meta)
    if mode == "no_hierarchy":
        nodes = tuple(n for n in hlg.nodes if n.kind != PSEUDO)
        edges = tuple(e for e in hlg.edges if e.relation.is_statistical)
        return HeterogeneousLabelGraph(nodes, edges, meta)
    if mode == "no_relation":
        shared = Relation.I2I_STAT_DEP
        edges = tuple(dict.fromkeys(Edge(e.src, e.dst, shared) for e in hlg.edges))
        return HeterogeneousLabelGraph(hlg.nodes, edges, meta)
    raise ValueError(f"unknown graph ablation {mode!r}; expected one of {ABLATION_MODES}")


def graph_to_dict(hlg: HeterogeneousLabelGraph) -> dict:
    return {
        "nodes": [{"id": n.id, "kind": n.kind, "label": n.label} for n in hlg.nodes],
        "edges": [{"src": e.src, "dst": e.dst, "relation": e.relation.value} for e in hlg.edges],
        "metadata": dict(hlg.metadata),
    }


class GraphSchemaError(ValueError):
    pass


def graph_from_dict(doc: dict) -> HeterogeneousLabelGraph:
    try:
        raw_nodes, raw_edges = doc["nodes"], doc["edges"]
        nodes = []
        for n in raw_nodes:
            if n["kind"] not in NODE_KINDS:
                raise GraphSchemaError(f"bad node kind {n['kind']!r}")
            nodes.append(Node(int(n["id"]), n["kind"], str(n["label"])))
        ids = {n.id for n in nodes}
        if len(ids) != len(nodes):
            raise GraphSchemaError("duplicate node ids")
        edges = []
        for e in raw_edges:
            src, dst = int(e["src"]), int(e["dst"])
            if src not in ids or dst not in ids:
                raise GraphSchemaError(f"edge {src}->{dst} references a missing node")
            edges.append(Edge(src, dst, Relation(e["relation"])))
    except (KeyError, TypeError) as err:
        raise GraphSchemaError(f"malformed graph document: {err!r}") from None
    except ValueError as err:
        if isinstance(err, GraphSchemaError):
            raise
        raise GraphSchemaError(str(err)) from None
    return HeterogeneousLabelGraph(tuple(nodes), tuple(edges), dict(doc.get("metadata", {})))


def export_graph(hlg: HeterogeneousLabelGraph) -> str:
    return json.dumps(graph_to_dict(hlg), indent=1)


def import_graph(doc: str | dict) -> HeterogeneousLabelGraph:
    if isinstance(doc, str):
        doc = json.loads(doc)
    return graph_from_dict(doc)


def check_graph_matches_inventory(hlg: HeterogeneousLabelGraph, inv: LabelInventory) -> None:
    """Model code assumes dense ids with intent then slot rows in inventory order."""
    ids = [n.id for n in hlg.nodes]
    if ids != list(range(len(ids))):
        raise GraphSchemaError("graph node ids must be dense and ordered")
    intents = tuple(n.label for n in hlg.nodes if n.kind == INTENT)
    slots = tuple(n.label for n in hlg.nodes if n.kind == SLOT)
    if intents != inv.intent_labels or slots != inv.slot_labels:
        raise GraphSchemaError("graph labels do not match the label inventory")
    head = [n.kind for n in hlg.nodes[: inv.num_intents + inv.num_slots]]
    if head != [INTENT] * inv.num_intents + [SLOT] * inv.num_slots:
        raise GraphSchemaError("graph must list intent nodes, then slot nodes")
    if hlg.degree(hlg.node_id(SLOT, OUTSIDE)) != 0:
        raise GraphSchemaError("the O slot node must be isolated")
