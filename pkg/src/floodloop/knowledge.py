"""Dual-channel knowledge indexing.

One channel is a typed graph (regions, roads, flood spots) with
neighborhood-aggregation embeddings; the other is a text segment store
with top-K cosine retrieval. Both feed a canonical hybrid prompt.

Embeddings come from one pluggable interface whose default is
deterministic feature hashing: no training, no model downloads, yet
identical text always maps to the identical unit vector.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DanglingEdge,
    EmptyQuery,
    EmptySeed,
    MissingTask,
    NodeNotFound,
)

EMBED_DIM = 64
_TOKEN_RE = re.compile(r"[a-z0-9]+")


class HashingEmbedder:
    """Signed feature hashing of tokens into a fixed-dimension unit vector."""

    def __init__(self, dim: int = EMBED_DIM):
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        tokens = _TOKEN_RE.findall(text.lower())
        if not tokens:
            raise EmptyQuery("cannot embed empty text")
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in tokens:
            h = int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8).digest(), "big")
            sign = 1.0 if (h >> 63) & 1 else -1.0
            vec[h % self.dim] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            # pathological sign cancellation; pin a single deterministic axis
            h = int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "big")
            vec[h % self.dim] = 1.0
            norm = 1.0
        return vec / norm


def embed_state(summary_text: str, embedder: HashingEmbedder | None = None) -> np.ndarray:
    """Encode a state summary into the query vector used for retrieval."""
    if not summary_text or not summary_text.strip():
        raise EmptyQuery("state summary is empty")
    return (embedder or HashingEmbedder()).embed(summary_text)


class NodeType(str, Enum):
    REGION = "region"
    ROAD = "road"
    FLOOD_SPOT = "flood_spot"


class EdgeType(str, Enum):
    ADJACENT = "adjacent"
    CONTAINS = "contains"
    RISKS = "risks"


@dataclass(frozen=True)
class Node:
    id: str
    type: NodeType
    attrs: tuple[tuple[str, str], ...] = ()
    feature: tuple[float, ...] = ()

    def attr_map(self) -> dict[str, str]:
        return dict(self.attrs)


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    type: EdgeType


class KnowledgeGraph:
    """Typed directed graph; duplicate (src, dst, type) triples are ignored."""

    def __init__(self):
        self.nodes: dict[str, Node] = {}
        self.edges: list[Edge] = []
        self._edge_keys: set[tuple[str, str, str]] = set()
        self._neighbors: dict[str, set[str]] = {}

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.nodes

    def n_nodes(self) -> int:
        return len(self.nodes)

    def n_edges(self) -> int:
        return len(self.edges)

    def add_node(self, node: Node) -> None:
        if node.id in self.nodes:
            return
        self.nodes[node.id] = node
        self._neighbors.setdefault(node.id, set())

    def add_edge(self, edge: Edge) -> None:
        if edge.src not in self.nodes or edge.dst not in self.nodes:
            raise DanglingEdge(f"edge {edge.src}->{edge.dst} references a missing node")
        key = (edge.src, edge.dst, edge.type.value)
        if key in self._edge_keys:
            return
        self._edge_keys.add(key)
        self.edges.append(edge)
        self._neighbors[edge.src].add(edge.dst)
        self._neighbors[edge.dst].add(edge.src)

    def neighbors(self, node_id: str) -> set[str]:
        """Undirected neighbor view used by aggregation and extraction."""
        return self._neighbors.get(node_id, set())

    def copy(self) -> "KnowledgeGraph":
        g = KnowledgeGraph()
        g.nodes = dict(self.nodes)
        g.edges = list(self.edges)
        g._edge_keys = set(self._edge_keys)
        g._neighbors = {k: set(v) for k, v in self._neighbors.items()}
        return g


def update_graph(
    graph: KnowledgeGraph,
    new_nodes: Iterable[Node] = (),
    new_edges: Iterable[Edge] = (),
) -> KnowledgeGraph:
    """Union update: G' = G + new nodes + new edges. Idempotent; existing
    ids and duplicate edge triples are left untouched."""
    out = graph.copy()
    new_nodes = list(new_nodes)
    for node in new_nodes:
        out.add_node(node)
    for edge in new_edges:
        out.add_edge(edge)
    return out


def _normalized(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    return vec / norm if norm > 0 else vec


def neighborhood_embed(graph: KnowledgeGraph, node_id: str, depth: int) -> np.ndarray:
    """Depth-k structural embedding: at each hop, average the node's own
    previous-level vector (weight 0.5) with the mean of its neighbors'
    (weight 0.5), then renormalize. Depth 0 is the node's own feature."""
    if node_id not in graph.nodes:
        raise NodeNotFound(node_id)
    if depth < 0:
        raise ValueError(f"depth must be >= 0, got {depth}")
    level = {nid: _normalized(np.asarray(n.feature, dtype=np.float64)) for nid, n in graph.nodes.items()}
    for _ in range(depth):
        nxt = {}
        for nid in graph.nodes:
            nbrs = sorted(graph.neighbors(nid))
            if not nbrs:
                nxt[nid] = level[nid]
                continue
            neighbor_mean = np.mean([level[m] for m in nbrs], axis=0)
            nxt[nid] = _normalized(0.5 * level[nid] + 0.5 * neighbor_mean)
        level = nxt
    return level[node_id]


def extract_subgraph(graph: KnowledgeGraph, seed_ids: Sequence[str], hops: int) -> KnowledgeGraph:
    """Induced subgraph on every node within `hops` of the seed set."""
    if hops < 0:
        raise ValueError(f"hops must be >= 0, got {hops}")
    seeds = [s for s in seed_ids if s in graph.nodes]
    if not seeds:
        raise EmptySeed("no seed nodes present in the graph")
    retained = set(seeds)
    frontier = set(seeds)
    for _ in range(hops):
        nxt = set()
        for nid in frontier:
            nxt |= graph.neighbors(nid) - retained
        retained |= nxt
        frontier = nxt
        if not frontier:
            break
    sub = KnowledgeGraph()
    for nid in sorted(retained):
        sub.add_node(graph.nodes[nid])
    for edge in graph.edges:
        if edge.src in retained and edge.dst in retained:
            sub.add_edge(edge)
    return sub


@dataclass(frozen=True)
class Segment:
    id: str
    text: str
    embedding: tuple[float, ...]


class SegmentStore:
    """Flat store of text segments with their embeddings; ids are unique."""

    def __init__(self, embedder: HashingEmbedder | None = None):
        self.embedder = embedder or HashingEmbedder()
        self.segments: list[Segment] = []
        self._ids: set[str] = set()

    def __len__(self) -> int:
        return len(self.segments)

    def add(self, seg_id: str, text: str) -> Segment:
        if seg_id in self._ids:
            raise ValueError(f"duplicate segment id {seg_id!r}")
        seg = Segment(id=seg_id, text=text, embedding=tuple(self.embedder.embed(text)))
        self.segments.append(seg)
        self._ids.add(seg_id)
        return seg


def retrieve_topk(query: np.ndarray, store: SegmentStore, k: int) -> list[tuple[Segment, float]]:
    """Segments ranked by descending cosine similarity, ties by ascending id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = _normalized(np.asarray(query, dtype=np.float64))
    scored = []
    for seg in store.segments:
        e = _normalized(np.asarray(seg.embedding, dtype=np.float64))
        scored.append((seg, float(np.dot(q, e))))
    scored.sort(key=lambda pair: (-pair[1], pair[0].id))
    return scored[:k]


@dataclass(frozen=True)
class FeedbackNote:
    """Symbolic failure feedback carried into the next cycle's prompt."""

    deviation_rms: float
    metric_deltas: tuple[tuple[str, float], ...]
    degraded_metrics: tuple[str, ...]
    rejected_reasons: tuple[str, ...]


@dataclass(frozen=True)
class HybridPrompt:
    """Canonical fusion of state, subgraph, retrieved text, and task.

    `summary` keeps the structured state object so local backends can read
    it without parsing; `text` is the canonical serialization sent to
    external backends. Equal inputs yield byte-identical text.
    """

    state_text: str
    subgraph_text: str
    segments_text: str
    task: str
    feedback: FeedbackNote | None
    summary: object = field(compare=False, default=None)

    @property
    def text(self) -> str:
        parts = [
            "## STATE",
            self.state_text,
            "## SUBGRAPH",
            self.subgraph_text,
            "## SEGMENTS",
            self.segments_text,
            "## TASK",
            self.task,
            "## FEEDBACK",
            _render_feedback(self.feedback),
        ]
        return "\n".join(parts) + "\n"


def _render_feedback(note: FeedbackNote | None) -> str:
    if note is None:
        return "(none)"
    lines = [f"deviation_rms: {note.deviation_rms:.6f}"]
    deltas = " ".join(f"{k}={v:+.6f}" for k, v in note.metric_deltas)
    lines.append(f"metric_deltas: {deltas if deltas else '(none)'}")
    lines.append(f"degraded_metrics: {', '.join(note.degraded_metrics) if note.degraded_metrics else '(none)'}")
    if note.rejected_reasons:
        lines.append("rejected_instructions:")
        lines.extend(f"  - {r}" for r in note.rejected_reasons)
    else:
        lines.append("rejected_instructions: (none)")
    return "\n".join(lines)


def render_subgraph(sub: KnowledgeGraph | None) -> str:
    if sub is None or sub.n_nodes() == 0:
        return "(none)"
    lines = []
    for nid in sorted(sub.nodes):
        node = sub.nodes[nid]
        attrs = " ".join(f"{k}={v}" for k, v in node.attrs)
        lines.append(f"node {nid} type={node.type.value}" + (f" {attrs}" if attrs else ""))
    for edge in sorted(sub.edges, key=lambda e: (e.src, e.dst, e.type.value)):
        lines.append(f"edge {edge.src} -> {edge.dst} type={edge.type.value}")
    return "\n".join(lines)


def render_segments(segments: Sequence[tuple[Segment, float]]) -> str:
    if not segments:
        return "(none)"
    return "\n".join(f"[{seg.id}] (sim={sim:.4f}) {seg.text}" for seg, sim in segments)


def build_prompt(
    state_text: str,
    subgraph: KnowledgeGraph | None,
    segments: Sequence[tuple[Segment, float]],
    task: str,
    feedback: FeedbackNote | None = None,
    summary: object = None,
) -> HybridPrompt:
    """Assemble the hybrid prompt; every section is always present, with an
    explicit (none) marker when a channel is empty."""
    if not task or not task.strip():
        raise MissingTask("prompt requires a task directive")
    return HybridPrompt(
        state_text=state_text if state_text.strip() else "(none)",
        subgraph_text=render_subgraph(subgraph),
        segments_text=render_segments(segments),
        task=task,
        feedback=feedback,
        summary=summary,
    )


# --- snapshot files -------------------------------------------------------

def graph_to_json(graph: KnowledgeGraph) -> dict:
    return {
        "nodes": [
            {
                "id": n.id,
                "type": n.type.value,
                "attributes": dict(n.attrs),
                "feature": list(n.feature),
            }
            for n in (graph.nodes[i] for i in sorted(graph.nodes))
        ],
        "edges": [
            {"src": e.src, "dst": e.dst, "type": e.type.value}
            for e in sorted(graph.edges, key=lambda e: (e.src, e.dst, e.type.value))
        ],
    }


def graph_from_json(data: dict) -> KnowledgeGraph:
    g = KnowledgeGraph()
    for rec in data.get("nodes", []):
        g.add_node(
            Node(
                id=rec["id"],
                type=NodeType(rec["type"]),
                attrs=tuple(sorted((str(k), str(v)) for k, v in rec.get("attributes", {}).items())),
                feature=tuple(float(v) for v in rec.get("feature", [])),
            )
        )
    for rec in data.get("edges", []):
        g.add_edge(Edge(src=rec["src"], dst=rec["dst"], type=EdgeType(rec["type"])))
    return g


def save_graph(path: str | Path, graph: KnowledgeGraph) -> None:
    Path(path).write_text(json.dumps(graph_to_json(graph), indent=2))


def load_graph(path: str | Path) -> KnowledgeGraph:
    return graph_from_json(json.loads(Path(path).read_text()))


def save_segments(path: str | Path, store: SegmentStore) -> None:
    lines = [json.dumps({"id": s.id, "text": s.text}) for s in store.segments]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_segments(path: str | Path, embedder: HashingEmbedder | None = None) -> SegmentStore:
    store = SegmentStore(embedder)
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        store.add(rec["id"], rec["text"])
    return store
