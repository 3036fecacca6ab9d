from __future__ import annotations

import json

import pytest

from kgenrich.cli import FIXTURE_FILES, format_cost, main


@pytest.fixture
def fx(tmp_path):
    assert main(["fixture", "--out", str(tmp_path / "fx")]) == 0
    return tmp_path / "fx"


def enrich(fx, out, *extra):
    return main(["enrich", "--corpus", str(fx / "corpus.jsonl"), "--kg-in", str(fx / "seed_kg.jsonl"),
                 "--dictionary", str(fx / "dictionary.jsonl"), "--config", str(fx / "config.txt"),
                 "--kg-out", str(out / "kg.jsonl"), *extra])


def test_fixture_copies_everything(fx):
    assert sorted(p.name for p in fx.iterdir()) == sorted(FIXTURE_FILES)


def test_enrich_writes_graph_report_and_review(fx, tmp_path, capsys):
    assert enrich(fx, tmp_path) == 0
    assert "13 candidates: 5 integrated" in capsys.readouterr().out
    report = json.loads((tmp_path / "kg.report.json").read_text())
    assert report["complete"] and report["counts"]["integrated"] == 5
    assert len((tmp_path / "kg.review.jsonl").read_text().splitlines()) == 7


def test_enrich_usage_errors(fx, tmp_path, capsys):
    assert main(["enrich", "--corpus", str(tmp_path / "missing.jsonl"), "--kg-out", str(tmp_path / "o")]) == 1
    assert "corpus not found" in capsys.readouterr().err
    assert enrich(fx, tmp_path, "--ablation", "no-such") == 1
    assert main(["enrich"]) == 1
    assert main(["--help"]) == 0


def test_enrich_backend_failure_exits_2(fx, tmp_path):
    rules = [l for l in (fx / "rules.jsonl").read_text().splitlines() if '"CRA"' not in l]
    (tmp_path / "partial.jsonl").write_text("\n".join(rules) + "\n")
    assert enrich(fx, tmp_path, "--rules", str(tmp_path / "partial.jsonl")) == 2
    report = json.loads((tmp_path / "kg.report.json").read_text())
    assert report["complete"] is False


def test_metrics_without_judge(fx, tmp_path, capsys):
    enrich(fx, tmp_path)
    capsys.readouterr()
    assert main(["metrics", "--kg-before", str(fx / "seed_kg.jsonl"), "--kg-after", str(tmp_path / "kg.jsonl"),
                 "--report", str(tmp_path / "kg.report.json"), "--out", str(tmp_path / "m.json")]) == 0
    m = json.loads(capsys.readouterr().out)
    assert m["R_CR"] == pytest.approx(6 / 13)
    assert m["R_LC"] is None and m["defined"]["R_LC"] is False
    assert json.loads((tmp_path / "m.json").read_text()) == m


def test_metrics_with_scripted_judge(fx, tmp_path, capsys):
    enrich(fx, tmp_path)
    capsys.readouterr()
    assert main(["metrics", "--kg-before", str(fx / "seed_kg.jsonl"), "--kg-after", str(tmp_path / "kg.jsonl"),
                 "--qa", str(fx / "qa.jsonl"), "--judge", "scripted", "--judge-rules",
                 str(fx / "judge_rules.jsonl"), "--config", str(fx / "config.txt")]) == 0
    m = json.loads(capsys.readouterr().out)
    assert m["defined"]["R_LC"] and m["defined"]["C_QA"]


def test_review_round_trip(fx, tmp_path, capsys):
    enrich(fx, tmp_path)
    kg = tmp_path / "kg.jsonl"
    before = kg.read_text()
    assert main(["review", "export", "--report", str(tmp_path / "kg.report.json"),
                 "--out", str(tmp_path / "q.jsonl")]) == 0
    assert main(["review", "import", "--kg", str(kg), "--decisions", str(tmp_path / "q.jsonl")]) == 0
    assert kg.read_text() == before
    (tmp_path / "bad.jsonl").write_text("nope\n")
    assert main(["review", "import", "--kg", str(kg), "--decisions", str(tmp_path / "bad.jsonl")]) == 1


def test_cost_table_and_json(fx, tmp_path, capsys):
    enrich(fx, tmp_path)
    capsys.readouterr()
    assert main(["cost", "--report", str(tmp_path / "kg.report.json"), "--json"]) == 0
    cost = json.loads(capsys.readouterr().out)
    assert cost["total"]["calls"] == 65
    assert main(["cost", "--report", str(tmp_path / "kg.report.json")]) == 0
    table = capsys.readouterr().out
    last = table.strip().splitlines()[-1].split()
    assert last[:5] == ["TOTAL", "65", str(cost["total"]["attempts"]),
                        str(cost["total"]["prompt_tokens"]), str(cost["total"]["completion_tokens"])]


def test_format_cost_handles_empty_ledger():
    assert format_cost({}).splitlines()[-1].split()[:2] == ["TOTAL", "0"]
