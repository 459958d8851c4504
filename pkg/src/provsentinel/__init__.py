"""Provenance-graph APT detection with per-type one-class RGCNs and staged LLM reporting."""

__version__ = "0.1.0"

from .evaluation import (
    DetectionOutcome,
    Scenario,
    ScenarioParams,
    generate_scenario,
    score_strict,
    score_two_hop,
)
from .features import BehaviorFeatureEncoder, encode_graph
from .graph_store import Event, GraphError, ProvenanceGraph, ingest_events, load, read_events_jsonl, snapshot
from .investigator import Investigator, InvestigationConfig, NothingToReport, run_investigation
from .llm_gateway import Backends, HashEmbedding, LLMError, LLMSettings, MockChat, VectorIndex
from .ocrgcn import OCRGCNDetector, TrainingConfig
from .serializer import serialize_subgraph
from .subgraphs import Level, SubgraphConfig, construct_anomalous_subgraphs

__all__ = [
    "Backends",
    "BehaviorFeatureEncoder",
    "DetectionOutcome",
    "Event",
    "GraphError",
    "HashEmbedding",
    "InvestigationConfig",
    "Investigator",
    "LLMError",
    "LLMSettings",
    "Level",
    "MockChat",
    "NothingToReport",
    "OCRGCNDetector",
    "ProvenanceGraph",
    "Scenario",
    "ScenarioParams",
    "SubgraphConfig",
    "TrainingConfig",
    "VectorIndex",
    "construct_anomalous_subgraphs",
    "encode_graph",
    "generate_scenario",
    "ingest_events",
    "load",
    "read_events_jsonl",
    "run_investigation",
    "score_strict",
    "score_two_hop",
    "serialize_subgraph",
    "snapshot",
]
