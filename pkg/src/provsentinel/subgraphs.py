"""Anomalous subgraph construction around detected nodes.

Anomalous nodes are joined through their direct edges and one-hop
neighborhoods, expanded from high-scoring seeds while keeping only paths
that reach further anomalous nodes, split with Louvain when too large,
then deduplicated, scored, leveled and filtered.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import IntEnum

import networkx as nx

from .graph_store import ProvenanceGraph, SubgraphView

logger = logging.getLogger(__name__)

ANOMALOUS = "anomalous"
BENIGN = "benign"


class Level(IntEnum):
    Minor = 0
    Moderate = 1
    Significant = 2
    Critical = 3

    @classmethod
    def parse(cls, value) -> "Level":
        if isinstance(value, Level):
            return value
        try:
            return cls[str(value).strip().capitalize()]
        except KeyError:
            raise ValueError(f"unknown abnormality level {value!r}") from None


@dataclass
class SubgraphConfig:
    n_seed: int = 15
    max_e: int = 5000
    level_thresholds: tuple = (10.0, 100.0, 1000.0)
    min_level: Level = Level.Moderate
    louvain_seed: int = 0

    def __post_init__(self):
        self.min_level = Level.parse(self.min_level)
        self.level_thresholds = tuple(float(t) for t in self.level_thresholds)
        t = self.level_thresholds
        if len(t) != 3 or not (t[0] < t[1] < t[2]):
            raise ValueError("level thresholds must be three strictly increasing values")
        if self.n_seed < 1:
            raise ValueError("n_seed must be >= 1")
        if self.max_e < 1:
            raise ValueError("max_e must be >= 1")


@dataclass
class AnomalousSubgraph:
    seed: str
    nodes: dict  # node id -> ANOMALOUS | BENIGN
    edge_ids: list
    score: float = 0.0
    level: Level = Level.Minor
    id: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def anomalous_nodes(self) -> set:
        return {n for n, tag in self.nodes.items() if tag == ANOMALOUS}

    @property
    def n_edges(self) -> int:
        return len(self.edge_ids)

    def to_dict(self, graph: ProvenanceGraph, node_scores: dict) -> dict:
        nodes = []
        for nid in sorted(self.nodes):
            nodes.append(
                {
                    "id": nid,
                    "type": graph.node_type(nid),
                    "attrs": dict(sorted(graph.attrs(nid).items())),
                    "score": float(node_scores.get(nid, 0.0)) if self.nodes[nid] == ANOMALOUS else 0.0,
                    "tag": self.nodes[nid],
                }
            )
        edges = []
        for e in self.edge_ids:
            edge = graph.edge(e)
            edges.append(
                {"src": edge.src, "action": edge.action, "dst": edge.dst, "timestamp_us": edge.timestamp_us}
            )
        return {
            "id": self.id,
            "nodes": nodes,
            "edges": edges,
            "summary": {
                "score": self.score,
                "level": self.level.name,
                "seed": self.seed,
                "n_nodes": len(self.nodes),
                "n_edges": len(self.edge_ids),
                "n_anomalous": len(self.anomalous_nodes),
            },
        }


def _adjacency(graph: ProvenanceGraph, view: SubgraphView) -> dict:
    """node -> list of (edge id, other endpoint) over the view's edges."""
    adj = defaultdict(list)
    for e in view.edge_ids:
        s, d = graph.node_ids[graph.edge_src[e]], graph.node_ids[graph.edge_dst[e]]
        adj[s].append((e, d))
        if d != s:
            adj[d].append((e, s))
    return adj


def build_initial_subgraph(graph: ProvenanceGraph, anomalous_set) -> SubgraphView:
    """Direct edges among anomalous nodes plus their one-hop neighbors and boundary edges."""
    anomalous = set(anomalous_set)
    direct = graph.query_direct_edges(anomalous)
    neighbors, boundary = graph.query_one_hop(anomalous)
    edge_ids = sorted({e.index for e in direct} | {e.index for e in boundary})
    return SubgraphView(graph, anomalous | neighbors, edge_ids)


def _type_of(node_types, node):
    if isinstance(node_types, ProvenanceGraph):
        return node_types.node_type(node)
    if callable(node_types):
        return node_types(node)
    return node_types[node]


def select_seeds(anomalous_scores: dict, n_seed: int, node_types) -> list:
    """Top ``n_seed`` anomalous nodes of each type, best first, ties by ascending id.

    ``node_types`` is a graph, a node->type mapping, or a callable. Types are
    concatenated in order of first appearance in the sorted score list.
    """
    ranked = sorted(anomalous_scores.items(), key=lambda kv: (-kv[1], kv[0]))
    per_type = {}
    for node, _ in ranked:
        bucket = per_type.setdefault(_type_of(node_types, node), [])
        if len(bucket) < n_seed:
            bucket.append(node)
    return [node for bucket in per_type.values() for node in bucket]


def expand_from_seed(init_sg: SubgraphView, seed, anomalous_set, visited: set, adjacency=None) -> AnomalousSubgraph:
    """One-hop expansion from ``seed`` keeping only neighbors that reach unvisited anomalies.

    A neighbor stays if it is an unvisited anomalous node, or a benign node
    with an edge to an unvisited anomalous node (a length-2 bridge). Kept
    anomalous nodes, and the seed itself, are added to ``visited``.
    """
    graph = init_sg.graph
    adj = adjacency if adjacency is not None else _adjacency(graph, init_sg)
    anomalous = anomalous_set if isinstance(anomalous_set, (set, frozenset)) else set(anomalous_set)
    seen = set(visited) | {seed}

    nodes = {seed: ANOMALOUS}
    edges = set()
    by_neighbor = defaultdict(list)
    for e, u in adj.get(seed, ()):
        if u != seed:
            by_neighbor[u].append(e)
    for u, seed_edges in by_neighbor.items():
        if u in anomalous:
            if u in seen:
                continue
            nodes[u] = ANOMALOUS
            edges.update(seed_edges)
            continue
        bridge = [(e, w) for e, w in adj.get(u, ()) if w in anomalous and w not in seen]
        if not bridge:
            continue
        nodes[u] = BENIGN
        edges.update(seed_edges)
        for e, w in bridge:
            nodes[w] = ANOMALOUS
            edges.add(e)
    visited.update(n for n, tag in nodes.items() if tag == ANOMALOUS)
    return AnomalousSubgraph(seed, nodes, sorted(edges))


def _prune_dangling(graph: ProvenanceGraph, sg: AnomalousSubgraph) -> AnomalousSubgraph:
    """Drop benign members that no longer touch two distinct anomalous members."""
    touch = defaultdict(set)
    for e in sg.edge_ids:
        s, d = graph.node_ids[graph.edge_src[e]], graph.node_ids[graph.edge_dst[e]]
        if sg.nodes.get(s) == ANOMALOUS:
            touch[d].add(s)
        if sg.nodes.get(d) == ANOMALOUS:
            touch[s].add(d)
    drop = {n for n, tag in sg.nodes.items() if tag == BENIGN and len(touch[n]) < 2}
    if not drop:
        return sg
    nodes = {n: t for n, t in sg.nodes.items() if n not in drop}
    edges = [
        e
        for e in sg.edge_ids
        if graph.node_ids[graph.edge_src[e]] not in drop and graph.node_ids[graph.edge_dst[e]] not in drop
    ]
    return AnomalousSubgraph(sg.seed, nodes, edges, extra=dict(sg.extra))


def _induced(graph, sg: AnomalousSubgraph, members: set, edge_ids=None) -> AnomalousSubgraph:
    if edge_ids is None:
        edge_ids = [
            e
            for e in sg.edge_ids
            if graph.node_ids[graph.edge_src[e]] in members and graph.node_ids[graph.edge_dst[e]] in members
        ]
    nodes = {n: sg.nodes[n] for n in members}
    seed = sg.seed if sg.seed in members else min(
        (n for n in members if nodes[n] == ANOMALOUS), default=min(members)
    )
    return AnomalousSubgraph(seed, nodes, list(edge_ids), extra=dict(sg.extra))


def _bfs_chunks(graph, sg: AnomalousSubgraph, max_e: int) -> list:
    """Contiguous chunks of at most ``max_e`` edges in breadth-first edge order."""
    adj = _adjacency(graph, SubgraphView(graph, sg.nodes, sg.edge_ids))
    order, taken, seen_nodes = [], set(), set()
    for start in sorted(sg.nodes):
        if start in seen_nodes:
            continue
        queue = deque([start])
        seen_nodes.add(start)
        while queue:
            node = queue.popleft()
            for e, other in sorted(adj.get(node, ()), key=lambda x: (x[1], x[0])):
                if e not in taken:
                    taken.add(e)
                    order.append(e)
                if other not in seen_nodes:
                    seen_nodes.add(other)
                    queue.append(other)
    chunks = []
    for i in range(0, len(order), max_e):
        part = order[i : i + max_e]
        members = set()
        for e in part:
            members.add(graph.node_ids[graph.edge_src[e]])
            members.add(graph.node_ids[graph.edge_dst[e]])
        chunks.append(_induced(graph, sg, members, part))
    return chunks


def partition_subgraph(graph: ProvenanceGraph, sg: AnomalousSubgraph, max_e: int, seed: int = 0) -> list:
    """Split ``sg`` into pieces of at most ``max_e`` edges.

    Louvain communities over the undirected, unit-weight projection become
    pieces (induced edges only); oversized communities are split again, and a
    community Louvain cannot split falls back to breadth-first edge chunks.
    """
    if sg.n_edges <= max_e:
        return [sg]
    und = nx.Graph()
    und.add_nodes_from(sorted(sg.nodes))
    pairs = set()
    for e in sg.edge_ids:
        s, d = graph.node_ids[graph.edge_src[e]], graph.node_ids[graph.edge_dst[e]]
        if s != d:
            pairs.add((min(s, d), max(s, d)))
    und.add_edges_from(sorted(pairs))
    communities = nx.community.louvain_communities(und, seed=seed)
    communities = sorted((set(c) for c in communities), key=lambda c: min(c))
    if len(communities) <= 1:
        return _bfs_chunks(graph, sg, max_e)
    out = []
    for members in communities:
        piece = _induced(graph, sg, members)
        if piece.n_edges > max_e:
            out.extend(partition_subgraph(graph, piece, max_e, seed))
        else:
            out.append(piece)
    return out


def level_for(score: float, thresholds=(10.0, 100.0, 1000.0)) -> Level:
    """Half-open, lower-inclusive buckets: [0,t1) Minor ... [t3, inf) Critical."""
    lo, mid, hi = thresholds
    if score >= hi:
        return Level.Critical
    if score >= mid:
        return Level.Significant
    if score >= lo:
        return Level.Moderate
    return Level.Minor


def score_and_level(sg: AnomalousSubgraph, node_scores: dict, config: SubgraphConfig | None = None):
    config = config or SubgraphConfig()
    score = float(sum(node_scores[n] for n in sorted(sg.anomalous_nodes)))
    return score, level_for(score, config.level_thresholds)


def construct_anomalous_subgraphs(graph: ProvenanceGraph, anomalous_scores: dict, config: SubgraphConfig | None = None, return_all=False):
    """Build, split, deduplicate, score, level and filter anomalous subgraphs.

    Returns the subgraphs at or above ``config.min_level`` sorted by score,
    highest first, with ids ``sg_001``, ``sg_002``... assigned in that order.
    With ``return_all`` the unfiltered, scored list is returned as well.
    """
    config = config or SubgraphConfig()
    if not anomalous_scores:
        return ([], []) if return_all else []
    anomalous = set(anomalous_scores)
    init_sg = build_initial_subgraph(graph, anomalous)
    adj = _adjacency(graph, init_sg)

    seeds = select_seeds(anomalous_scores, config.n_seed, graph)
    # one global visited set, consumed in descending score order across types
    seeds.sort(key=lambda n: (-anomalous_scores[n], n))
    visited = set()
    candidates = []
    for seed in seeds:
        absorbed = seed in visited
        sg = expand_from_seed(init_sg, seed, anomalous, visited, adj)
        if absorbed and len(sg.nodes) == 1:
            # already inside an earlier subgraph and reaches nothing new
            continue
        if sg.n_edges <= config.max_e:
            candidates.append(sg)
        else:
            parts = partition_subgraph(graph, sg, config.max_e, config.louvain_seed)
            candidates.extend(_prune_dangling(graph, p) for p in parts)

    unique, seen = [], set()
    for sg in candidates:
        key = frozenset(sg.nodes)
        if key in seen:
            continue
        seen.add(key)
        unique.append(sg)

    for sg in unique:
        sg.score, sg.level = score_and_level(sg, anomalous_scores, config)
    unique.sort(key=lambda s: (-s.score, s.seed, sorted(s.nodes)))
    for k, sg in enumerate(unique, start=1):
        sg.id = f"sg_{k:03d}"
    kept = [sg for sg in unique if sg.level >= config.min_level]
    return (kept, unique) if return_all else kept


def write_subgraph_json(sg: AnomalousSubgraph, graph: ProvenanceGraph, node_scores: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(sg.to_dict(graph, node_scores), fh, indent=2, sort_keys=False)
        fh.write("\n")


def read_subgraph_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
