"""Heterogeneous provenance graph: ingestion, neighborhood queries, snapshots."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

logger = logging.getLogger(__name__)

GRAPH_MAGIC = "PROVSENTINEL-GRAPH-v1"

EVENT_FIELDS = (
    "subject_id",
    "subject_type",
    "action",
    "object_id",
    "object_type",
    "timestamp_us",
    "subject_attrs",
    "object_attrs",
)


class GraphError(ValueError):
    pass


class UnknownNodeError(GraphError, KeyError):
    def __init__(self, node_id):
        super().__init__(f"unknown node id: {node_id!r}")
        self.node_id = node_id

    def __str__(self):
        return self.args[0]


class SnapshotError(GraphError):
    pass


@dataclass(frozen=True)
class Event:
    subject_id: str
    subject_type: str
    action: str
    object_id: str
    object_type: str
    timestamp_us: int
    subject_attrs: dict = field(default_factory=dict)
    object_attrs: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, record: dict) -> "Event":
        if not isinstance(record, dict):
            raise GraphError("event record must be a JSON object")
        missing = [f for f in EVENT_FIELDS[:6] if f not in record]
        if missing:
            raise GraphError(f"missing field(s): {', '.join(missing)}")
        for key in ("subject_id", "subject_type", "action", "object_id", "object_type"):
            value = record[key]
            if not isinstance(value, str) or not value:
                raise GraphError(f"field {key!r} must be a non-empty string")
        ts = record["timestamp_us"]
        if isinstance(ts, bool):
            raise GraphError(f"timestamp not parseable: {ts!r}")
        if isinstance(ts, str):
            try:
                ts = int(ts.strip())
            except ValueError:
                raise GraphError(f"timestamp not parseable: {ts!r}") from None
        elif isinstance(ts, float):
            if not ts.is_integer():
                raise GraphError(f"timestamp not parseable: {ts!r}")
            ts = int(ts)
        elif not isinstance(ts, int):
            raise GraphError(f"timestamp not parseable: {ts!r}")
        if ts < 0:
            raise GraphError(f"timestamp must be >= 0, got {ts}")
        attrs = {}
        for key in ("subject_attrs", "object_attrs"):
            value = record.get(key) or {}
            if not isinstance(value, dict):
                raise GraphError(f"field {key!r} must be an object")
            attrs[key] = {str(k): str(v) for k, v in value.items()}
        return cls(
            record["subject_id"],
            record["subject_type"],
            record["action"],
            record["object_id"],
            record["object_type"],
            ts,
            attrs["subject_attrs"],
            attrs["object_attrs"],
        )

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "subject_type": self.subject_type,
            "action": self.action,
            "object_id": self.object_id,
            "object_type": self.object_type,
            "timestamp_us": self.timestamp_us,
            "subject_attrs": dict(self.subject_attrs),
            "object_attrs": dict(self.object_attrs),
        }


@dataclass(frozen=True)
class Edge:
    src: str
    action: str
    dst: str
    timestamp_us: int
    index: int  # position in the graph's edge list


@dataclass
class Diagnostic:
    line: int
    message: str

    def __str__(self):
        return f"line {self.line}: {self.message}"


class ProvenanceGraph:
    """Typed, timestamped event graph with per-node incoming/outgoing adjacency.

    Node ids map to a (type, attrs) pair; edges are kept in event order as
    parallel lists. Vocabularies only ever grow, so positions stay stable
    across incremental ingestion and snapshots.
    """

    def __init__(self, type_vocab=None, edge_vocab=None, frozen_vocab=False):
        self.type_vocab: list[str] = list(type_vocab or [])
        self.edge_vocab: list[str] = list(edge_vocab or [])
        self.frozen_vocab = frozen_vocab
        self._type_pos = {t: i for i, t in enumerate(self.type_vocab)}
        self._edge_pos = {a: i for i, a in enumerate(self.edge_vocab)}
        self.node_ids: list[str] = []
        self._node_pos: dict[str, int] = {}
        self.node_types: list[str] = []
        self.node_attrs: list[dict] = []
        self.edge_src: list[int] = []
        self.edge_dst: list[int] = []
        self.edge_action: list[int] = []
        self.edge_time: list[int] = []
        self._out: list[list[int]] = []
        self._in: list[list[int]] = []

    # -- construction -----------------------------------------------------

    def _vocab_index(self, label, vocab, pos, kind):
        if label in pos:
            return pos[label]
        if self.frozen_vocab:
            raise GraphError(f"{kind} {label!r} not in declared vocabulary")
        pos[label] = len(vocab)
        vocab.append(label)
        return pos[label]

    def _check_vocab(self, event: Event):
        if not self.frozen_vocab:
            return
        for label in (event.subject_type, event.object_type):
            if label not in self._type_pos:
                raise GraphError(f"node type {label!r} not in declared vocabulary")
        if event.action not in self._edge_pos:
            raise GraphError(f"action {event.action!r} not in declared vocabulary")

    def _touch_node(self, node_id, node_type, attrs):
        idx = self._node_pos.get(node_id)
        if idx is None:
            self._vocab_index(node_type, self.type_vocab, self._type_pos, "node type")
            idx = len(self.node_ids)
            self._node_pos[node_id] = idx
            self.node_ids.append(node_id)
            self.node_types.append(node_type)
            self.node_attrs.append({})
            self._out.append([])
            self._in.append([])
        elif self.node_types[idx] != node_type:
            raise GraphError(
                f"node {node_id!r} already typed {self.node_types[idx]!r}, got {node_type!r}"
            )
        self.node_attrs[idx].update(attrs)
        return idx

    def add_event(self, event: Event) -> None:
        self._check_vocab(event)
        existing = self._node_pos.get(event.subject_id)
        if existing is not None and self.node_types[existing] != event.subject_type:
            raise GraphError(
                f"node {event.subject_id!r} already typed "
                f"{self.node_types[existing]!r}, got {event.subject_type!r}"
            )
        existing = self._node_pos.get(event.object_id)
        if existing is not None and self.node_types[existing] != event.object_type:
            raise GraphError(
                f"node {event.object_id!r} already typed "
                f"{self.node_types[existing]!r}, got {event.object_type!r}"
            )
        if event.subject_id == event.object_id and event.subject_type != event.object_type:
            raise GraphError(f"node {event.subject_id!r} given two types in one event")
        s = self._touch_node(event.subject_id, event.subject_type, event.subject_attrs)
        o = self._touch_node(event.object_id, event.object_type, event.object_attrs)
        a = self._vocab_index(event.action, self.edge_vocab, self._edge_pos, "action")
        e = len(self.edge_src)
        self.edge_src.append(s)
        self.edge_dst.append(o)
        self.edge_action.append(a)
        self.edge_time.append(event.timestamp_us)
        self._out[s].append(e)
        self._in[o].append(e)

    # -- basic accessors --------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_edges(self) -> int:
        return len(self.edge_src)

    def __contains__(self, node_id) -> bool:
        return node_id in self._node_pos

    def index_of(self, node_id) -> int:
        try:
            return self._node_pos[node_id]
        except KeyError:
            raise UnknownNodeError(node_id) from None

    def node_type(self, node_id) -> str:
        return self.node_types[self.index_of(node_id)]

    def attrs(self, node_id) -> dict:
        return self.node_attrs[self.index_of(node_id)]

    def edge(self, e: int) -> Edge:
        return Edge(
            self.node_ids[self.edge_src[e]],
            self.edge_vocab[self.edge_action[e]],
            self.node_ids[self.edge_dst[e]],
            self.edge_time[e],
            e,
        )

    def edges(self) -> Iterator[Edge]:
        for e in range(self.n_edges):
            yield self.edge(e)

    def out_edges(self, node_id) -> list[int]:
        return list(self._out[self.index_of(node_id)])

    def in_edges(self, node_id) -> list[int]:
        return list(self._in[self.index_of(node_id)])

    def incident_edges(self, node_id) -> list[int]:
        i = self.index_of(node_id)
        # a self-loop sits in both lists; report it once
        return sorted(set(self._out[i]) | set(self._in[i]))

    def out_degree(self, node_id) -> int:
        return len(self._out[self.index_of(node_id)])

    def in_degree(self, node_id) -> int:
        return len(self._in[self.index_of(node_id)])

    def nodes_of_type(self, node_type) -> list[str]:
        return [n for n, t in zip(self.node_ids, self.node_types) if t == node_type]

    def neighbors(self, node_id) -> set:
        i = self.index_of(node_id)
        out = {self.edge_dst[e] for e in self._out[i]}
        out |= {self.edge_src[e] for e in self._in[i]}
        out.discard(i)
        return {self.node_ids[j] for j in out}

    def _resolve(self, node_set) -> set[int]:
        return {self.index_of(n) for n in node_set}

    # -- the three query shapes used by subgraph construction -------------

    def query_direct_edges(self, node_set) -> list[Edge]:
        """Edges whose source and destination both lie in ``node_set``."""
        members = self._resolve(node_set)
        found = set()
        for i in members:
            for e in self._out[i]:
                if self.edge_dst[e] in members:
                    found.add(e)
        return [self.edge(e) for e in sorted(found)]

    def query_one_hop(self, node_set) -> tuple[set, list[Edge]]:
        """Neighbors outside ``node_set`` and the edges crossing its boundary."""
        members = self._resolve(node_set)
        neighbors = set()
        boundary = set()
        for i in members:
            for e in self._out[i]:
                j = self.edge_dst[e]
                if j not in members:
                    neighbors.add(j)
                    boundary.add(e)
            for e in self._in[i]:
                j = self.edge_src[e]
                if j not in members:
                    neighbors.add(j)
                    boundary.add(e)
        return {self.node_ids[j] for j in neighbors}, [self.edge(e) for e in sorted(boundary)]

    def query_ioc_context(self, ioc_node, anomalous_set) -> "SubgraphView":
        """Subgraph induced by the IOC node and its anomalous one-hop neighbors."""
        centre = self.index_of(ioc_node)
        anomalous = self._resolve(anomalous_set)
        keep = {centre}
        for e in self._out[centre]:
            if self.edge_dst[e] in anomalous:
                keep.add(self.edge_dst[e])
        for e in self._in[centre]:
            if self.edge_src[e] in anomalous:
                keep.add(self.edge_src[e])
        edges = set()
        for i in keep:
            for e in self._out[i]:
                if self.edge_dst[e] in keep:
                    edges.add(e)
        return SubgraphView(self, {self.node_ids[i] for i in keep}, sorted(edges))

    # -- structural comparison / serialization -----------------------------

    def to_dict(self) -> dict:
        return {
            "type_vocab": list(self.type_vocab),
            "edge_vocab": list(self.edge_vocab),
            "frozen_vocab": self.frozen_vocab,
            "nodes": [
                [nid, ntype, self.node_attrs[i]]
                for i, (nid, ntype) in enumerate(zip(self.node_ids, self.node_types))
            ],
            "edges": [
                [s, a, d, t]
                for s, a, d, t in zip(self.edge_src, self.edge_action, self.edge_dst, self.edge_time)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProvenanceGraph":
        g = cls(data["type_vocab"], data["edge_vocab"], bool(data.get("frozen_vocab", False)))
        for nid, ntype, attrs in data["nodes"]:
            if nid in g._node_pos:
                raise SnapshotError(f"duplicate node id {nid!r} in snapshot")
            if ntype not in g._type_pos:
                raise SnapshotError(f"node type {ntype!r} missing from vocabulary")
            g._node_pos[nid] = len(g.node_ids)
            g.node_ids.append(nid)
            g.node_types.append(ntype)
            g.node_attrs.append(dict(attrs))
            g._out.append([])
            g._in.append([])
        n, n_actions = len(g.node_ids), len(g.edge_vocab)
        for s, a, d, t in data["edges"]:
            if not (0 <= s < n and 0 <= d < n and 0 <= a < n_actions) or t < 0:
                raise SnapshotError("edge references out-of-range node or action")
            e = len(g.edge_src)
            g.edge_src.append(s)
            g.edge_dst.append(d)
            g.edge_action.append(a)
            g.edge_time.append(t)
            g._out[s].append(e)
            g._in[d].append(e)
        return g

    def __eq__(self, other):
        if not isinstance(other, ProvenanceGraph):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __repr__(self):
        return (
            f"ProvenanceGraph(nodes={self.n_nodes}, edges={self.n_edges}, "
            f"types={self.type_vocab}, actions={self.edge_vocab})"
        )


class SubgraphView:
    """A node subset of a provenance graph plus a chosen list of its edges."""

    def __init__(self, graph: ProvenanceGraph, nodes, edge_ids):
        self.graph = graph
        self.nodes = set(nodes)
        self.edge_ids = list(edge_ids)

    @property
    def n_edges(self) -> int:
        return len(self.edge_ids)

    def edges(self) -> list[Edge]:
        return [self.graph.edge(e) for e in self.edge_ids]


def ingest_events(events, existing: ProvenanceGraph | None = None, diagnostics=None):
    """Build or extend a provenance graph.

    ``events`` may hold ``Event`` objects, dicts, or raw JSON lines. Bad
    records are skipped and reported as line-numbered ``Diagnostic`` entries
    appended to ``diagnostics`` (when a list is supplied) and logged.
    """
    graph = existing if existing is not None else ProvenanceGraph()
    problems = diagnostics if diagnostics is not None else []
    for lineno, record in enumerate(events, start=1):
        try:
            if isinstance(record, Event):
                event = record
            else:
                if isinstance(record, (str, bytes)):
                    text = record.decode() if isinstance(record, bytes) else record
                    if not text.strip():
                        continue
                    try:
                        record = json.loads(text)
                    except json.JSONDecodeError as exc:
                        raise GraphError(f"invalid JSON: {exc.msg}") from None
                event = Event.from_dict(record)
            graph.add_event(event)
        except GraphError as exc:
            diag = Diagnostic(lineno, str(exc))
            problems.append(diag)
            logger.warning("rejected record: %s", diag)
    return graph


def read_events_jsonl(path, existing=None, diagnostics=None) -> ProvenanceGraph:
    with open(path, encoding="utf-8") as fh:
        return ingest_events(fh, existing=existing, diagnostics=diagnostics)


def write_events_jsonl(events: Iterable[Event], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(json.dumps(ev.to_dict(), separators=(",", ":")) + "\n")


def snapshot_bytes(graph: ProvenanceGraph) -> bytes:
    body = json.dumps(graph.to_dict(), separators=(",", ":"), ensure_ascii=False)
    return (GRAPH_MAGIC + "\n" + body + "\n").encode("utf-8")


def snapshot(graph: ProvenanceGraph, path) -> None:
    Path(path).write_bytes(snapshot_bytes(graph))


def load(path) -> ProvenanceGraph:
    raw = Path(path).read_bytes()
    header, sep, body = raw.partition(b"\n")
    if header.startswith(b"PROVSENTINEL-GRAPH-") and header != GRAPH_MAGIC.encode():
        raise SnapshotError(f"unsupported snapshot version {header.decode(errors='replace')!r}")
    if header != GRAPH_MAGIC.encode() or not sep:
        raise SnapshotError(f"{path}: not a graph snapshot (missing {GRAPH_MAGIC} header)")
    try:
        data = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotError(f"{path}: truncated or corrupted snapshot ({exc})") from None
    try:
        return ProvenanceGraph.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SnapshotError):
            raise
        raise SnapshotError(f"{path}: malformed snapshot ({exc})") from None
