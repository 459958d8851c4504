"""Behavior-based node features and the relational encoding fed to the GNN.

Two feature families per node: the L2-normalized share of each action the
node performs as a subject, and min/max/mean idle gaps between the node's
events, min-max scaled against the training dataset's gap range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .graph_store import GraphError, ProvenanceGraph

N_IDLE = 3


@dataclass
class IdleScaler:
    """Dataset-level idle-gap range in microseconds."""

    dataset_min: float
    dataset_max: float

    def scale(self, values):
        span = self.dataset_max - self.dataset_min
        values = np.asarray(values, dtype=float)
        if span <= 0:
            return np.zeros_like(values)
        return np.clip((values - self.dataset_min) / span, 0.0, 1.0)

    def to_dict(self):
        return {"dataset_min": float(self.dataset_min), "dataset_max": float(self.dataset_max)}


@dataclass
class EncodedGraph:
    node_ids: list
    node_types: list
    type_index: dict  # node type -> array of global row positions
    features: np.ndarray  # (n_nodes, |edge_vocab| + 3)
    relations: list  # sparse row-normalized (n_nodes, n_nodes) matrices
    relation_names: list
    edge_vocab: list
    type_vocab: list
    scaler: IdleScaler

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def type_features(self, node_type) -> np.ndarray:
        return self.features[self.type_index[node_type]]

    def type_node_ids(self, node_type) -> list:
        return [self.node_ids[i] for i in self.type_index[node_type]]


def _node_timestamps(graph: ProvenanceGraph, i: int) -> np.ndarray:
    edges = set(graph._out[i]) | set(graph._in[i])
    return np.sort(np.fromiter((graph.edge_time[e] for e in edges), dtype=np.int64, count=len(edges)))


def _action_counts(graph: ProvenanceGraph, i: int, vocab_pos: dict) -> np.ndarray:
    counts = np.zeros(len(vocab_pos))
    for e in graph._out[i]:
        counts[vocab_pos[graph.edge_vocab[graph.edge_action[e]]]] += 1
    return counts


def _normalize_counts(counts: np.ndarray) -> np.ndarray:
    total = counts.sum()
    if total == 0:
        return np.zeros_like(counts, dtype=float)
    props = counts / total
    return props / np.linalg.norm(props)


def action_frequency(graph: ProvenanceGraph, node, edge_vocab=None) -> np.ndarray:
    """Per-action proportions of the node's subject-side events, L2-normalized."""
    vocab = list(edge_vocab) if edge_vocab is not None else graph.edge_vocab
    vocab_pos = {a: k for k, a in enumerate(vocab)}
    return _normalize_counts(_action_counts(graph, graph.index_of(node), vocab_pos))


def raw_idle_gaps(graph: ProvenanceGraph, node) -> np.ndarray:
    """Successive differences of the node's sorted event timestamps (microseconds)."""
    return np.diff(_node_timestamps(graph, graph.index_of(node)))


def _idle_triplet(gaps: np.ndarray) -> np.ndarray:
    if gaps.size == 0:
        return None
    return np.array([gaps.min(), gaps.max(), gaps.mean()], dtype=float)


def idle_stats(graph: ProvenanceGraph, node, dataset_min, dataset_max) -> np.ndarray:
    """Scaled (min, max, mean) idle gap; (0, 0, 0) for nodes with fewer than two events."""
    stats = _idle_triplet(raw_idle_gaps(graph, node))
    if stats is None:
        return np.zeros(N_IDLE)
    return IdleScaler(dataset_min, dataset_max).scale(stats)


def fit_idle_scaler(graph: ProvenanceGraph) -> IdleScaler:
    """One global (min, max) over every node's idle gaps."""
    lo, hi = np.inf, -np.inf
    for i in range(graph.n_nodes):
        gaps = np.diff(_node_timestamps(graph, i))
        if gaps.size:
            lo = min(lo, gaps.min())
            hi = max(hi, gaps.max())
    if not np.isfinite(lo):
        return IdleScaler(0.0, 0.0)
    return IdleScaler(float(lo), float(hi))


def relation_names(edge_vocab) -> list:
    return list(edge_vocab) + [f"{a}^-1" for a in edge_vocab] + ["self"]


def _mean_adjacency(rows, cols, n) -> sp.csr_matrix:
    """Row-normalized adjacency over distinct neighbors: A[v, u] = 1/|N(v)|."""
    if len(rows) == 0:
        return sp.csr_matrix((n, n))
    pairs = np.unique(np.stack([rows, cols], axis=1), axis=0)
    deg = np.bincount(pairs[:, 0], minlength=n).astype(float)
    vals = 1.0 / deg[pairs[:, 0]]
    return sp.csr_matrix((vals, (pairs[:, 0], pairs[:, 1])), shape=(n, n))


def encode_graph(graph: ProvenanceGraph, scaler: IdleScaler | None = None, edge_vocab=None, type_vocab=None) -> EncodedGraph:
    """Encode a graph into per-relation adjacency plus node feature rows.

    With ``scaler`` given (inference), the training gap range is reused and
    ``edge_vocab``/``type_vocab`` pin feature and relation positions to the
    training vocabulary.
    """
    if graph.n_nodes == 0:
        raise GraphError("cannot encode an empty graph")
    vocab = list(edge_vocab) if edge_vocab is not None else list(graph.edge_vocab)
    types = list(type_vocab) if type_vocab is not None else list(graph.type_vocab)
    vocab_pos = {a: k for k, a in enumerate(vocab)}
    unseen = [a for a in graph.edge_vocab if a not in vocab_pos]
    # only actions that actually occur matter
    used = {graph.edge_vocab[a] for a in set(graph.edge_action)}
    unseen = [a for a in unseen if a in used]
    if unseen:
        raise GraphError(
            f"actions {unseen} are not in the training vocabulary; "
            "re-encode the graph with the training edge vocabulary"
        )
    type_pos = set(types)
    absent = sorted({t for t in graph.node_types} - type_pos)
    if absent:
        raise GraphError(f"node type(s) {absent} absent from type vocabulary")
    if scaler is None:
        scaler = fit_idle_scaler(graph)

    n = graph.n_nodes
    n_act = len(vocab)
    features = np.zeros((n, n_act + N_IDLE))
    for i in range(n):
        features[i, :n_act] = _normalize_counts(_action_counts(graph, i, vocab_pos))
        stats = _idle_triplet(np.diff(_node_timestamps(graph, i)))
        if stats is not None:
            features[i, n_act:] = scaler.scale(stats)

    src = np.asarray(graph.edge_src, dtype=np.int64)
    dst = np.asarray(graph.edge_dst, dtype=np.int64)
    act = np.asarray([vocab_pos[graph.edge_vocab[a]] for a in graph.edge_action], dtype=np.int64)
    forward, inverse = [], []
    for r in range(n_act):
        mask = act == r
        # relation r: destination aggregates from source; inverse the reverse
        forward.append(_mean_adjacency(dst[mask], src[mask], n))
        inverse.append(_mean_adjacency(src[mask], dst[mask], n))
    relations = forward + inverse + [sp.identity(n, format="csr")]

    type_index = {t: np.flatnonzero(np.asarray(graph.node_types) == t) for t in types}
    return EncodedGraph(
        node_ids=list(graph.node_ids),
        node_types=list(graph.node_types),
        type_index=type_index,
        features=features,
        relations=relations,
        relation_names=relation_names(vocab),
        edge_vocab=vocab,
        type_vocab=types,
        scaler=scaler,
    )


class BehaviorFeatureEncoder(TransformerMixin, BaseEstimator):
    """Fits the idle-gap scaler and vocabularies on a benign graph, then encodes graphs.

    ``transform`` returns an :class:`EncodedGraph` rather than a bare array,
    since the GNN needs the typed adjacency alongside the feature rows.
    """

    def fit(self, graph, y=None):
        _check_graph(graph)
        self.scaler_ = fit_idle_scaler(graph)
        self.edge_vocab_ = list(graph.edge_vocab)
        self.type_vocab_ = list(graph.type_vocab)
        return self

    def transform(self, graph):
        check_is_fitted(self, "scaler_")
        _check_graph(graph)
        type_vocab = list(self.type_vocab_) + [t for t in graph.type_vocab if t not in self.type_vocab_]
        return encode_graph(graph, self.scaler_, self.edge_vocab_, type_vocab)


def _check_graph(graph):
    if not isinstance(graph, ProvenanceGraph):
        raise TypeError(f"expected a ProvenanceGraph, got {type(graph).__name__}")
    if graph.n_nodes == 0:
        raise GraphError("graph has no nodes")
