"""Multi-agent enrichment of biomedical knowledge graphs from literature."""

from .config import PipelineConfig, load_config
from .graph import CanonicalEntity, KnowledgeGraph, Triplet

__version__ = "0.1.0"

__all__ = ["CanonicalEntity", "KnowledgeGraph", "PipelineConfig", "Triplet", "load_config"]
