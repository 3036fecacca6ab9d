from __future__ import annotations

from importlib import resources
from pathlib import Path

from kgenrich.agents.entities import EntityDictionary
from kgenrich.config import load_config
from kgenrich.gateway import Gateway, ScriptedBackend
from kgenrich.graph import KnowledgeGraph
from kgenrich.pipeline import load_corpus, make_gateway, run

DATA = Path(str(resources.files("kgenrich") / "data"))
TEST_DATA = Path(__file__).parent / "data"


def scripted(rules, default=None, **kw) -> Gateway:
    return Gateway(ScriptedBackend(rules, default), sleep=lambda s: None, **kw)


def fixture_config(**overrides):
    return load_config(DATA / "config.txt", rules=str(DATA / "rules.jsonl"), **overrides)


def fixture_run(ablation: str = "none", rules=None, **overrides):
    cfg = fixture_config(**overrides).with_ablation(ablation)
    gateway = make_gateway(cfg, rules=rules, sleep=lambda s: None)
    graph = KnowledgeGraph.load(DATA / "seed_kg.jsonl")
    out, report = run(load_corpus(DATA / "corpus.jsonl"), graph, cfg, gateway,
                      EntityDictionary.load(DATA / "dictionary.jsonl"))
    return graph, out, report, gateway
