"""Pipeline configuration and the plain-text ``key = value`` config file format.

Recognized keys (``#`` starts a comment)::

    delta = 0.5                 # reader relevance cut-off
    skip_threshold = 0.2        # summarizer emits [OMITTED] below this
    rho = 0.35                  # entity novelty distance
    theta = 0.5                 # default per-relation extraction threshold
    theta.<relation> = 0.7      # per-relation override
    integrate_threshold = 0.6   # mean-score gate of the evaluator
    escalation = 0.7            # both-high-confidence bound for Contradict -> review
    alpha = 1.0, 1.0            # evaluator weights (comma lists)
    beta = 1.0
    gamma = 1.0, 1.0
    use_summarizer = true
    use_conflict_resolution = true
    use_evaluator = true
    use_llm_ingest = false
    strict_filter = true
    worker_count = 1
    max_summary_words = 100
    embedding_dim = 64
    case_fold = true
    seed = 0
    backend = scripted          # scripted | live
    rules = path/to/rules.jsonl
    base_url = https://api.example.com/v1
    model = some-model
    model.<AGENT> = other-model
    api_key_env = KGENRICH_API_KEY
    max_in_flight = 4
    retries = 3
    incompatible = treats:causes, inhibits:activates
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


ABLATIONS = {
    "none": {},
    "no-summarizer": {"use_summarizer": False},
    "no-cra": {"use_conflict_resolution": False},
    "no-evaluator": {"use_evaluator": False},
}


@dataclass
class PipelineConfig:
    delta: float = 0.5
    skip_threshold: float = 0.2
    rho: float = 0.35
    theta: float = 0.5
    theta_by_relation: dict[str, float] = field(default_factory=dict)
    integrate_threshold: float = 0.6
    escalation: float = 0.7
    alpha: list[float] = field(default_factory=lambda: [1.0, 1.0])
    beta: list[float] = field(default_factory=lambda: [1.0])
    gamma: list[float] = field(default_factory=lambda: [1.0, 1.0])
    use_summarizer: bool = True
    use_conflict_resolution: bool = True
    use_evaluator: bool = True
    use_llm_ingest: bool = False
    strict_filter: bool = True
    worker_count: int = 1
    max_summary_words: int = 100
    embedding_dim: int = 64
    case_fold: bool = True
    seed: int = 0
    backend: str = "scripted"
    rules: str | None = None
    base_url: str = "http://localhost:8000/v1"
    model: str = "default"
    models: dict[str, str] = field(default_factory=dict)
    api_key_env: str = "KGENRICH_API_KEY"
    max_in_flight: int = 4
    retries: int = 3
    incompatible: list[tuple[str, str]] | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("delta", "skip_threshold", "theta", "integrate_threshold", "escalation"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} must lie in [0, 1]")
        for rel, v in self.theta_by_relation.items():
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"theta.{rel}={v} must lie in [0, 1]")
        if not 0.0 < self.rho <= 2.0:
            raise ConfigError(f"rho={self.rho} must lie in (0, 2]")
        if self.worker_count < 1:
            raise ConfigError("worker_count must be >= 1")
        if self.max_summary_words < 1:
            raise ConfigError("max_summary_words must be >= 1")
        for name, need in (("alpha", 2), ("beta", 1), ("gamma", 2)):
            if len(getattr(self, name)) < need:
                raise ConfigError(f"{name} needs at least {need} weights")
        if self.backend not in ("scripted", "live"):
            raise ConfigError(f"backend must be scripted or live, not {self.backend!r}")

    def theta_for(self, relation: str) -> float:
        return self.theta_by_relation.get(relation, self.theta)

    def with_ablation(self, name: str) -> "PipelineConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return replace(self, **ABLATIONS[name])

    def recorded(self) -> dict:
        """Deterministic view for run reports (no paths, no worker count)."""
        skip = {"rules", "worker_count", "api_key_env", "base_url", "max_in_flight"}
        out = {}
        for f in fields(self):
            if f.name in skip:
                continue
            v = getattr(self, f.name)
            if isinstance(v, list) and v and isinstance(v[0], tuple):
                v = [list(p) for p in v]
            out[f.name] = v
        return out


def _bool(s: str) -> bool:
    s = s.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.replace(";", ",").split(",") if x.strip()]


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    values: dict = {}
    theta_by = dict(base.theta_by_relation) if base else {}
    models = dict(base.models) if base else {}
    types = {f.name: f.type for f in fields(PipelineConfig)}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected key = value")
        key, val = key.strip(), val.strip()
        try:
            if key.startswith("theta."):
                theta_by[key[6:]] = float(val)
            elif key.startswith("model."):
                models[key[6:]] = val
            elif key in ("alpha", "beta", "gamma"):
                values[key] = _floats(val)
            elif key == "incompatible":
                pairs = []
                for item in val.split(","):
                    a, _, b = item.strip().partition(":")
                    if not b:
                        raise ConfigError(f"line {n}: incompatible pairs look like a:b")
                    pairs.append((a.strip(), b.strip()))
                values[key] = pairs
            elif key not in types or key in ("theta_by_relation", "models"):
                raise ConfigError(f"line {n}: unknown key {key!r}")
            elif types[key] == "bool":
                values[key] = _bool(val)
            elif types[key] == "int":
                values[key] = int(val)
            elif types[key] == "float":
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {n}: bad value for {key}: {val!r}") from exc
    values["theta_by_relation"] = theta_by
    values["models"] = models
    return replace(base or PipelineConfig(), **values)


def load_config(path: str | Path | None, **overrides) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        cfg = parse_config(Path(path).read_text(encoding="utf-8"), cfg)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **overrides) if overrides else cfg
