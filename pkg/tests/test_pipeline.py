from __future__ import annotations

import json

import pytest

from helpers import DATA, fixture_config, fixture_run, scripted
from kgenrich.agents.entities import EntityDictionary
from kgenrich.config import PipelineConfig
from kgenrich.graph import KnowledgeGraph, Triplet
from kgenrich.pipeline import (
    CorpusError,
    RunReport,
    export_review_queue,
    import_review_decisions,
    load_corpus,
    run,
)

TEXT = ("Aspirin relieved headache within two hours in most participants, and it also lowered "
        "prostaglandin levels measured in plasma samples taken at baseline and follow-up.")

SMALL_RULES = [
    {"tag": "RA", "match": "", "response": {"segments": [{"text": "x", "score": 0.9}]}},
    {"tag": "SA", "match": "", "response": {"summaries": [{"summary": "Aspirin treats headache and inhibits prostaglandin."}]}},
    {"tag": "EEA", "match": "", "response": {"entities": [
        {"mention": "Aspirin", "type": "Drug", "normalized_id": "MESH:D001241"},
        {"mention": "headache", "type": "Disease", "normalized_id": "UMLS:C0018681"},
        {"mention": "prostaglandin", "type": "Chemical", "normalized_id": "MESH:D011441"}]}},
    {"tag": "REA", "match": "", "response": {"relationships": [
        {"head": "Aspirin", "relation": "treats", "tail": "headache", "confidence": 0.9},
        {"head": "Aspirin", "relation": "inhibits", "tail": "prostaglandin", "confidence": 0.5}]}},
    {"tag": "EA_CLARITY", "match": '"relation": "treats"', "response": {"final_triplets": [
        {"head": "MESH:D001241", "relation": "treats", "tail": "UMLS:C0018681", "final_clarity": 0.9}]}},
    {"tag": "EA_CLARITY", "match": "", "response": {"final_triplets": [
        {"head": "MESH:D001241", "relation": "inhibits", "tail": "MESH:D011441", "final_clarity": 0.0}]}},
    {"tag": "EA_RELEVANCE", "match": '"relation": "treats"', "response": {"final_triplets": [
        {"head": "MESH:D001241", "relation": "treats", "tail": "UMLS:C0018681", "final_relevance": 0.9}]}},
    {"tag": "EA_RELEVANCE", "match": "", "response": {"final_triplets": [
        {"head": "MESH:D001241", "relation": "inhibits", "tail": "MESH:D011441", "final_relevance": 0.0}]}},
]


def small_run(seed_graph, dictionary, **cfg):
    config = PipelineConfig(integrate_threshold=0.7, **cfg)
    gw = scripted(SMALL_RULES)
    return run([{"doc_id": "d1", "text": TEXT}], seed_graph, config, gw, dictionary)


def test_empty_corpus(seed_graph):
    gw = scripted([])
    out, report = run([], seed_graph, PipelineConfig(), gw)
    assert out == seed_graph
    assert report.complete and report.counts["candidates"] == 0
    assert gw.calls == []


def test_one_document_two_candidates(seed_graph, dictionary):
    out, report = small_run(seed_graph, dictionary)
    c = report.counts
    assert (c["candidates"], c["integrated"], c["discarded"], c["discarded_by_evaluator"]) == (2, 1, 1, 1)
    assert ("MESH:D001241", "treats", "UMLS:C0018681") in out.edges
    assert ("MESH:D001241", "inhibits", "MESH:D011441") not in out.edges
    assert ("MESH:D001241", "treats", "UMLS:C0018681") not in seed_graph.edges  # input untouched
    stored = out.edges[("MESH:D001241", "treats", "UMLS:C0018681")]
    assert sum(stored.scores()) / 3 >= 0.7


def conflict_run(seed_graph, dictionary, use_cra=True):
    planted = seed_graph.copy()
    planted.integrate_triplet(Triplet("MESH:D001241", "causes", "UMLS:C0018681", 0.5, 0.8, 0.8, "seed"))
    rules = [r for r in SMALL_RULES if r["tag"] not in ("EA_CLARITY", "EA_RELEVANCE")] + [
        {"tag": "CRA", "match": "", "response": {"decision": "Contradict",
                                                 "resolution": {"action": "discard", "rationale": "r"}}},
        {"tag": "EA_CLARITY", "match": "", "response": {"final_triplets": [
            {"head": "h", "relation": "r", "tail": "t", "final_clarity": 0.9}]}},
        {"tag": "EA_RELEVANCE", "match": "", "response": {"final_triplets": [
            {"head": "h", "relation": "r", "tail": "t", "final_relevance": 0.9}]}},
    ]
    config = PipelineConfig(use_conflict_resolution=use_cra)
    return run([{"doc_id": "d1", "text": TEXT}], planted, config, scripted(rules), dictionary)


def test_planted_conflict_is_discarded(seed_graph, dictionary):
    out, report = conflict_run(seed_graph, dictionary)
    c = report.counts
    assert (c["candidates"], c["integrated"], c["discarded"], c["discarded_by_cra"]) == (2, 1, 1, 1)
    assert ("MESH:D001241", "treats", "UMLS:C0018681") not in out.edges
    assert all(not out.find_conflicts(e) for e in out.edges.values())


def test_planted_conflict_survives_without_cra(seed_graph, dictionary):
    out, report = conflict_run(seed_graph, dictionary, use_cra=False)
    assert report.counts["integrated"] == 2
    assert out.find_conflicts(out.edges[("MESH:D001241", "treats", "UMLS:C0018681")])


def test_empty_review_set_writes_empty_file(tmp_path):
    p = tmp_path / "q.jsonl"
    assert export_review_queue(RunReport({}), p) == 0
    assert p.read_text() == ""


def test_no_evaluator_stores_unevaluated_scores(seed_graph, dictionary):
    out, report = small_run(seed_graph, dictionary, use_evaluator=False)
    assert report.counts["integrated"] == 2
    e = out.edges[("MESH:D001241", "inhibits", "MESH:D011441")]
    assert e.scores() == (0.5, 0.5, 0.9)
    rec = [t for t in report.triplets if t["relation"] == "inhibits"][0]
    assert rec["evaluation"]["evaluated"] is False


def test_corpus_validation(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"doc_id": "a", "text": "x"}\n{"doc_id": "a", "text": "y"}\n')
    with pytest.raises(CorpusError, match="duplicate"):
        load_corpus(p)
    p.write_text('{"text": "x"}\n')
    with pytest.raises(CorpusError):
        load_corpus(p)
    p.write_text("not json\n")
    with pytest.raises(CorpusError):
        load_corpus(p)


def test_fixture_run_outcomes():
    graph, out, report, _ = fixture_run()
    c = report.counts
    assert report.complete and report.reconciles()
    assert (c["candidates"], c["integrated"], c["review"], c["discarded_by_cra"],
            c["discarded_by_evaluator"]) == (13, 5, 3, 3, 2)
    assert c["removed_by_cra"] == 6
    assert {r["head"] for r in report.review} == {"TOY:D001", "TOY:P001", "TOY:D004"}
    names = {(s["category"], s["name"]) for s in report.schema_candidates}
    assert names == {("relation", "modulates"), ("type", "RNA"), ("relation", "overexpresses"),
                     ("relation", "correlates_with")}
    assert "LOCAL:00001" in out.entities and out.entities["LOCAL:00001"].primary_form == "TNF-alpha"
    assert out.entities["LOCAL:00001"].entity_type == "Protein"
    error_docs = [d for d in report.documents if d["status"] == "error"]
    assert error_docs == []  # the garbled document still has readable paragraphs


def test_fixture_filters_and_negations_audited():
    _, out, report, _ = fixture_run()
    kinds = {a["kind"] for a in report.audit}
    assert {"filtered", "negated"} <= kinds
    assert not any("Paris" in f for e in out.entities.values() for f in e.surface_forms)


def conflict_pairs(graph: KnowledgeGraph) -> set:
    pairs = set()
    for (h, r, t) in graph.edges:
        for (h2, r2, t2) in graph.edges:
            if (h, t) == (h2, t2) and r < r2 and graph.incompatibility.incompatible(r, r2):
                pairs.add((h, r, r2, t))
    return pairs


def test_no_cra_leaves_conflicts():
    graph, full, _, _ = fixture_run()
    _, ablated, report, _ = fixture_run("no-cra")
    assert conflict_pairs(graph) == set() and conflict_pairs(full) == set()
    assert len(conflict_pairs(ablated)) >= 6
    assert report.counts["removed_by_cra"] == 0


def test_summarizer_ablation_same_counts():
    _, _, full, _ = fixture_run()
    _, _, ablated, gw = fixture_run("no-summarizer")
    assert ablated.counts == full.counts
    assert gw.calls_for("SA") == 0


def test_script_gap_stops_run_and_rolls_back(tmp_path):
    rules = [l for l in (DATA / "rules.jsonl").read_text().splitlines()
             if '"CRA"' not in l]
    path = tmp_path / "rules.jsonl"
    path.write_text("\n".join(rules) + "\n")
    graph, out, report, _ = fixture_run(rules=path)
    assert not report.complete
    assert "ScriptGapError" in report.error
    assert report.reconciles()
    committed = {d["doc_id"] for d in report.documents}
    assert all(e.source_doc in committed or e.source_doc == "seed" for e in out.edges.values())


def test_report_round_trip(tmp_path):
    _, _, report, _ = fixture_run()
    p = tmp_path / "r.json"
    report.save(p)
    assert RunReport.load(p).dumps() == report.dumps()


def test_review_export_then_import_is_noop(tmp_path):
    _, out, report, _ = fixture_run()
    p = tmp_path / "review.jsonl"
    n = export_review_queue(report, p)
    assert n == 7
    lines = [json.loads(l) for l in p.read_text().splitlines()]
    assert [l["kind"] for l in lines] == ["triplet"] * 3 + ["schema_candidate"] * 4
    before = out.dumps()
    s = import_review_decisions(out, p)
    assert (s.applied, s.undecided) == (0, 7)
    assert out.dumps() == before


def test_review_accept_is_idempotent(tmp_path):
    _, out, report, _ = fixture_run()
    p = tmp_path / "review.jsonl"
    export_review_queue(report, p)
    lines = [json.loads(l) for l in p.read_text().splitlines()]
    for l in lines:
        l["decision"] = "accept" if l["kind"] == "triplet" and l["head"] == "TOY:P001" else "reject"
    lines.append({"kind": "schema_candidate", "category": "type", "name": "RNA", "decision": "accept"})
    p.write_text("".join(json.dumps(l) + "\n" for l in lines) + "garbage\n")
    first = import_review_decisions(out, p)
    assert (first.applied, first.rejected, first.skipped) == (2, 6, 1)
    assert ("TOY:P001", "activates", "TOY:P002") in out.edges
    assert "RNA" not in out.candidate_types
    once = out.dumps()
    import_review_decisions(out, p)
    assert out.dumps() == once


def test_index_cache_reused(tmp_path, seed_graph, dictionary):
    cache = tmp_path / "idx.bin"
    cfg = fixture_config()
    corpus = load_corpus(DATA / "corpus.jsonl")
    from kgenrich.pipeline import make_gateway
    a = run(corpus, seed_graph, cfg, make_gateway(cfg, sleep=lambda s: None), dictionary, index_cache=cache)
    assert cache.exists()
    b = run(corpus, seed_graph, cfg, make_gateway(cfg, sleep=lambda s: None), dictionary, index_cache=cache)
    assert a[0].dumps() == b[0].dumps()
