from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgenrich.graph import (
    CanonicalEntity,
    DanglingEdgeError,
    IncompatibilityTable,
    KnowledgeGraph,
    MissingEntityError,
    SchemaViolation,
    Triplet,
    normalize_relation,
)


def small_graph() -> KnowledgeGraph:
    g = KnowledgeGraph()
    g.upsert_entity(CanonicalEntity("D:1", ["DrugA"], "Drug"))
    g.upsert_entity(CanonicalEntity("C:1", ["ConditionB"], "Disease"))
    g.upsert_entity(CanonicalEntity("G:1", ["GENE1"], "Gene"))
    return g


@pytest.mark.parametrize("raw,expected", [
    ("interactsWith", "interacts_with"),
    ("interacts with", "interacts_with"),
    ("Treats", "treats"),
    ("up-regulates", "up_regulates"),
    ("  may_treat ", "may_treat"),
])
def test_normalize_relation(raw, expected):
    assert normalize_relation(raw) == expected


def test_insert_then_merge_keeps_channel_max():
    g = small_graph()
    assert g.integrate_triplet(Triplet("D:1", "treats", "C:1", 0.6, 0.9, 0.1)) == "inserted"
    assert g.integrate_triplet(Triplet("D:1", "treats", "C:1", 0.8, 0.2, 0.3)) == "merged"
    assert g.edges[("D:1", "treats", "C:1")].scores() == (0.8, 0.9, 0.3)
    assert g.degree("D:1") == 1


def test_integrated_duplicate_is_rejected():
    g = small_graph()
    t = Triplet("D:1", "treats", "C:1", 0.5, 0.5, 0.5)
    g.integrate_triplet(t)
    assert t.status == "integrated"
    assert g.integrate_triplet(t) == "rejected_duplicate"


def test_dangling_edge_rejected():
    g = small_graph()
    with pytest.raises(DanglingEdgeError):
        g.integrate_triplet(Triplet("D:1", "treats", "nobody"))


def test_schema_violation_for_unknown_type():
    g = small_graph()
    with pytest.raises(SchemaViolation):
        g.upsert_entity(CanonicalEntity("X:1", ["thing"], "Spaceship"))


def test_scores_validated_and_rounded():
    with pytest.raises(ValueError):
        Triplet("a", "treats", "b", confidence=1.2)
    assert Triplet("a", "treats", "b", confidence=0.1234567891).confidence == 0.123457


def test_entity_needs_a_surface_form():
    with pytest.raises(SchemaViolation):
        CanonicalEntity("X:1", [])


def test_upsert_unions_forms_and_upgrades_other():
    g = KnowledgeGraph()
    g.upsert_entity(CanonicalEntity("L:1", ["miR-21"], "Other"))
    g.upsert_entity(CanonicalEntity("L:1", ["microRNA-21", "miR-21"], "Gene"))
    e = g.entities["L:1"]
    assert e.surface_forms == ["miR-21", "microRNA-21"]
    assert e.entity_type == "Gene"


def test_find_conflicts_symmetric_pairs():
    g = small_graph()
    g.integrate_triplet(Triplet("D:1", "treats", "C:1", 0.9))
    clash = g.find_conflicts(Triplet("D:1", "causes", "C:1"))
    assert [c.relation for c in clash] == ["treats"]
    assert g.find_conflicts(Triplet("D:1", "associated_with", "C:1")) == []
    # direction matters: the reversed pair is a different (head, tail)
    assert g.find_conflicts(Triplet("C:1", "causes", "D:1")) == []


def test_incompatibility_table():
    table = IncompatibilityTable([("treats", "causes")])
    assert ("causes", "treats") in table
    assert not table.incompatible("treats", "treats")
    with pytest.raises(ValueError):
        table.add("inhibits", "inhibits")


def test_degree_of_missing_entity():
    with pytest.raises(MissingEntityError):
        small_graph().degree("nope")


def test_lookup_by_id_and_form():
    g = small_graph()
    assert g.lookup("D:1").id == "D:1"
    assert g.lookup("druga").id == "D:1"
    assert g.lookup("unknown") is None


def test_self_loop_allowed():
    g = small_graph()
    assert g.integrate_triplet(Triplet("G:1", "upregulates", "G:1", 0.5)) == "inserted"
    assert g.degree("G:1") == 2


def test_round_trip_preserves_everything(seed_graph):
    seed_graph.register_type("RNA")
    seed_graph.register_relation("overexpresses")
    again = KnowledgeGraph.loads(seed_graph.dumps())
    assert again == seed_graph
    assert again.dumps() == seed_graph.dumps()


def test_loads_without_schema_record_registers_edge_relations():
    text = (
        '{"kind":"entity","id":"a","surface_forms":["A"],"entity_type":"Drug"}\n'
        '{"kind":"entity","id":"b","surface_forms":["B"],"entity_type":"Disease"}\n'
        '{"kind":"edge","head":"a","relation":"mayTreat","tail":"b","confidence":0.4}\n'
    )
    g = KnowledgeGraph.loads(text)
    assert "may_treat" in g.relations
    assert g.edges[("a", "may_treat", "b")].confidence == 0.4


names = st.text(alphabet="abcdef", min_size=1, max_size=3)
score = st.floats(0, 1)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(names, st.sampled_from(["treats", "causes", "inhibits"]), names,
                          score, score, score), max_size=25))
def test_merge_is_order_independent(edges):
    def build(seq):
        g = KnowledgeGraph()
        for h, _, t, *_ in seq:
            for e in (h, t):
                g.upsert_entity(CanonicalEntity(e, [e]))
        for h, r, t, a, b, c in seq:
            g.integrate_triplet(Triplet(h, r, t, a, b, c))
        return g
    assert build(edges).dumps() == build(list(reversed(edges))).dumps()


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(names, st.sampled_from(["treats", "causes"]), names), max_size=25))
def test_degree_matches_edge_count(edges):
    g = KnowledgeGraph()
    for h, r, t in edges:
        for e in (h, t):
            g.upsert_entity(CanonicalEntity(e, [e]))
        g.integrate_triplet(Triplet(h, r, t))
    assert sum(g.degree(e) for e in g.entities) == 2 * len(g.edges)
