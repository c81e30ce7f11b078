"""Text-attributed graph data model.

A graph here is an ordered collection of node records, each carrying a text
payload, an integer class label, a split mask, and a neighbor list. Graphs are
undirected and simple: construction symmetrizes neighbor lists, drops
self-loops, and deduplicates repeated mentions, counting every such fix.
"""
from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

log = logging.getLogger("tagforge.graph")

MASKS = ("Train", "Validation", "Test")


class GraphSchemaError(ValueError):
    """Raised when a graph file cannot be parsed into the expected shape."""


class GraphValidationError(ValueError):
    """Raised when parsed graph content violates a structural constraint."""


def node_sort_key(node_id: str) -> tuple[int, int, str]:
    """Canonical ordering key: numeric ids sort numerically, others follow."""
    if node_id.isdigit():
        return (0, int(node_id), "")
    return (1, 0, node_id)


def canonical_edge(u: str, v: str) -> tuple[str, str]:
    return (u, v) if node_sort_key(u) <= node_sort_key(v) else (v, u)


@dataclass(frozen=True)
class NodeRecord:
    """One node: identity, class label, text payload, neighbors, split mask."""

    node_id: str
    label: int
    text: str
    neighbors: tuple[str, ...]
    mask: str = "Train"


@dataclass(frozen=True)
class SynthesizedDelta:
    """A batch of accepted nodes plus the edges that attach them.

    ``bridge_edges`` are (new_id, original_id) pairs; ``new_internal_edges``
    connect two new nodes. Neighbor lists on the incoming records are ignored,
    the merged adjacency is derived from the two edge sets alone.
    """

    new_nodes: tuple[NodeRecord, ...]
    bridge_edges: tuple[tuple[str, str], ...] = ()
    new_internal_edges: tuple[tuple[str, str], ...] = ()


class TextAttributedGraph:
    """Immutable undirected simple graph over text-attributed nodes.

    Build instances through :meth:`from_records` or :func:`load_graph`; both
    normalize adjacency and validate labels, masks, and neighbor references.
    """

    __slots__ = (
        "nodes", "class_count", "normalization_fixes",
        "_pos", "_adj", "_num_edges", "_csr",
    )

    def __init__(self, nodes: tuple[NodeRecord, ...], class_count: int,
                 normalization_fixes: int = 0):
        self.nodes = nodes
        self.class_count = class_count
        self.normalization_fixes = normalization_fixes
        self._pos = {rec.node_id: i for i, rec in enumerate(nodes)}
        self._adj = {rec.node_id: rec.neighbors for rec in nodes}
        self._num_edges = sum(len(rec.neighbors) for rec in nodes) // 2
        self._csr = None

    @classmethod
    def from_records(cls, records: Sequence[NodeRecord], class_count: int) -> "TextAttributedGraph":
        if class_count < 0:
            raise GraphValidationError("class_count must be nonnegative")
        seen: dict[str, int] = {}
        for i, rec in enumerate(records):
            if rec.node_id in seen:
                raise GraphValidationError(
                    f"duplicate node_id {rec.node_id!r} at positions {seen[rec.node_id]} and {i}")
            seen[rec.node_id] = i
            if not isinstance(rec.label, int) or isinstance(rec.label, bool):
                raise GraphValidationError(f"node {rec.node_id!r}: label must be an integer")
            if not (0 <= rec.label < class_count):
                raise GraphValidationError(
                    f"node {rec.node_id!r}: label {rec.label} outside [0, {class_count})")
            if rec.mask not in MASKS:
                raise GraphValidationError(
                    f"node {rec.node_id!r}: mask {rec.mask!r} not in {MASKS}")

        # Normalize adjacency: union-symmetrize, drop self-loops and repeats.
        ids = set(seen)
        mention: dict[str, set[str]] = {rec.node_id: set() for rec in records}
        fixes = 0
        dangling: list[tuple[str, str]] = []
        for rec in records:
            for nb in rec.neighbors:
                if nb not in ids:
                    dangling.append((rec.node_id, nb))
                    continue
                if nb == rec.node_id:
                    fixes += 1
                    continue
                if nb in mention[rec.node_id]:
                    fixes += 1
                    continue
                mention[rec.node_id].add(nb)
        if dangling:
            shown = ", ".join(f"{a}->{b}" for a, b in dangling[:10])
            raise GraphValidationError(
                f"{len(dangling)} neighbor reference(s) to unknown nodes: {shown}")
        for u in list(mention):
            for v in mention[u]:
                if u not in mention[v]:
                    mention[v].add(u)
                    fixes += 1

        normalized = tuple(
            NodeRecord(
                node_id=rec.node_id,
                label=rec.label,
                text=rec.text,
                neighbors=tuple(sorted(mention[rec.node_id], key=node_sort_key)),
                mask=rec.mask,
            )
            for rec in records
        )
        if fixes:
            log.info("graph normalization applied %d fixes", fixes)
        return cls(normalized, class_count, fixes)

    # basic accessors -----------------------------------------------------

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return self._num_edges

    def ids(self) -> tuple[str, ...]:
        return tuple(rec.node_id for rec in self.nodes)

    def has_node(self, node_id: str) -> bool:
        return node_id in self._pos

    def node(self, node_id: str) -> NodeRecord:
        return self.nodes[self._pos[node_id]]

    def index_of(self, node_id: str) -> int:
        return self._pos[node_id]

    def neighbors(self, node_id: str) -> tuple[str, ...]:
        return self._adj[node_id]

    def degree(self, node_id: str) -> int:
        return len(self._adj[node_id])

    def degrees(self) -> np.ndarray:
        return np.array([len(rec.neighbors) for rec in self.nodes], dtype=np.int64)

    def edges(self) -> Iterator[tuple[str, str]]:
        """Each undirected edge exactly once, in canonical orientation."""
        for rec in self.nodes:
            for nb in rec.neighbors:
                if node_sort_key(rec.node_id) < node_sort_key(nb):
                    yield (rec.node_id, nb)

    def edge_set(self) -> frozenset[tuple[str, str]]:
        return frozenset(self.edges())

    def adjacency_csr(self) -> sp.csr_matrix:
        if self._csr is None:
            n = self.num_nodes
            rows, cols = [], []
            for i, rec in enumerate(self.nodes):
                for nb in rec.neighbors:
                    rows.append(i)
                    cols.append(self._pos[nb])
            data = np.ones(len(rows), dtype=np.float64)
            self._csr = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
        return self._csr

    def subgraph(self, keep_ids: Iterable[str]) -> "TextAttributedGraph":
        """Induced subgraph, preserving node order and all attributes."""
        keep = set(keep_ids)
        missing = keep - set(self._pos)
        if missing:
            raise GraphValidationError(f"subgraph ids not in graph: {sorted(missing)[:10]}")
        records = tuple(
            NodeRecord(
                node_id=rec.node_id,
                label=rec.label,
                text=rec.text,
                neighbors=tuple(nb for nb in rec.neighbors if nb in keep),
                mask=rec.mask,
            )
            for rec in self.nodes if rec.node_id in keep
        )
        return TextAttributedGraph(records, self.class_count)

    def to_json_obj(self) -> dict:
        return {
            "class_count": self.class_count,
            "nodes": [
                {
                    "node_id": rec.node_id,
                    "label": rec.label,
                    "text": rec.text,
                    "neighbors": list(rec.neighbors),
                    "mask": rec.mask,
                }
                for rec in self.nodes
            ],
        }


# serialization -----------------------------------------------------------

def _coerce_id(raw) -> str:
    if isinstance(raw, bool):
        raise GraphSchemaError("node ids may not be booleans")
    if isinstance(raw, int):
        return str(raw)
    if isinstance(raw, str) and raw:
        return raw
    raise GraphSchemaError(f"node id must be a nonempty string or integer, got {raw!r}")


def graph_from_json_obj(obj) -> TextAttributedGraph:
    if not isinstance(obj, dict):
        raise GraphSchemaError("top level must be a JSON object")
    if "class_count" not in obj or "nodes" not in obj:
        raise GraphSchemaError("top level requires 'class_count' and 'nodes'")
    class_count = obj["class_count"]
    if not isinstance(class_count, int) or isinstance(class_count, bool) or class_count < 0:
        raise GraphSchemaError("'class_count' must be a nonnegative integer")
    raw_nodes = obj["nodes"]
    if not isinstance(raw_nodes, list):
        raise GraphSchemaError("'nodes' must be a list")
    records = []
    for i, item in enumerate(raw_nodes):
        if not isinstance(item, dict):
            raise GraphSchemaError(f"nodes[{i}] must be an object")
        try:
            node_id = _coerce_id(item["node_id"])
            label = item["label"]
            text = item["text"]
            neighbors = item["neighbors"]
            mask = item.get("mask", "Train")
        except KeyError as exc:
            raise GraphSchemaError(f"nodes[{i}] missing field {exc.args[0]!r}") from exc
        if not isinstance(text, str):
            raise GraphSchemaError(f"nodes[{i}].text must be a string")
        if not isinstance(neighbors, list):
            raise GraphSchemaError(f"nodes[{i}].neighbors must be a list")
        if not isinstance(label, int) or isinstance(label, bool):
            raise GraphSchemaError(f"nodes[{i}].label must be an integer")
        if not isinstance(mask, str):
            raise GraphSchemaError(f"nodes[{i}].mask must be a string")
        records.append(NodeRecord(
            node_id=node_id,
            label=label,
            text=text,
            neighbors=tuple(_coerce_id(nb) for nb in neighbors),
            mask=mask,
        ))
    return TextAttributedGraph.from_records(records, class_count)


def load_graph(path: str) -> TextAttributedGraph:
    """Load a graph from a JSON file, normalizing and validating it."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise GraphSchemaError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return graph_from_json_obj(obj)


def atomic_write_text(path: str, content: str) -> None:
    """Write via a temp file and rename so readers never observe partials."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_graph(g: TextAttributedGraph, path: str) -> None:
    atomic_write_text(path, json.dumps(g.to_json_obj(), ensure_ascii=False, indent=2) + "\n")


# statistics --------------------------------------------------------------

@dataclass(frozen=True)
class GraphStats:
    num_nodes: int
    num_edges: int
    avg_degree: float
    density: float
    global_clustering_coefficient: float
    avg_path_length: float
    connected_components: int
    largest_component_size: int
    degree_histogram: dict
    label_distribution: dict

    def to_dict(self) -> dict:
        return {
            "num_nodes": self.num_nodes,
            "num_edges": self.num_edges,
            "avg_degree": self.avg_degree,
            "density": self.density,
            "clustering_coefficient": self.global_clustering_coefficient,
            "avg_path_length": self.avg_path_length,
            "connected_components": self.connected_components,
            "largest_component_size": self.largest_component_size,
            "degree_histogram": {str(k): v for k, v in sorted(self.degree_histogram.items())},
            "label_distribution": {str(k): v for k, v in sorted(self.label_distribution.items())},
        }


def component_labels(g: TextAttributedGraph) -> tuple[np.ndarray, np.ndarray]:
    """Connected component label per node position, plus component sizes."""
    n = g.num_nodes
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    count, labels = csgraph.connected_components(g.adjacency_csr(), directed=False)
    sizes = np.bincount(labels, minlength=count)
    return labels.astype(np.int64), sizes.astype(np.int64)


def local_clustering(g: TextAttributedGraph) -> np.ndarray:
    """Local clustering coefficient per node; zero for degree below two."""
    n = g.num_nodes
    if n == 0:
        return np.zeros(0)
    a = g.adjacency_csr()
    deg = g.degrees().astype(np.float64)
    tri = np.asarray((a @ a).multiply(a).sum(axis=1)).ravel() / 2.0
    out = np.zeros(n)
    mask = deg >= 2
    out[mask] = 2.0 * tri[mask] / (deg[mask] * (deg[mask] - 1.0))
    return out


def graph_stats(g: TextAttributedGraph) -> GraphStats:
    """Connectivity, degree, clustering, and distance summary of a graph.

    Average path length is the mean shortest-path distance over node pairs of
    the largest connected component; a graph with no pair yields zero.
    """
    n = g.num_nodes
    if n == 0:
        return GraphStats(0, 0, 0.0, 0.0, 0.0, 0.0, 0, 0, {}, {})
    deg = g.degrees()
    m = g.num_edges
    labels, sizes = component_labels(g)
    largest = int(sizes.max())
    avg_path = 0.0
    if largest >= 2:
        comp_idx = np.flatnonzero(labels == int(sizes.argmax()))
        sub = g.adjacency_csr()[comp_idx][:, comp_idx]
        dist = csgraph.shortest_path(sub, method="D", unweighted=True)
        s = largest
        avg_path = float(dist.sum() / (s * (s - 1)))
    hist: dict[int, int] = {}
    for d in deg.tolist():
        hist[d] = hist.get(d, 0) + 1
    label_dist: dict[int, int] = {}
    for rec in g.nodes:
        label_dist[rec.label] = label_dist.get(rec.label, 0) + 1
    return GraphStats(
        num_nodes=n,
        num_edges=m,
        avg_degree=float(2.0 * m / n),
        density=float(2.0 * m / (n * (n - 1))) if n > 1 else 0.0,
        global_clustering_coefficient=float(local_clustering(g).mean()),
        avg_path_length=avg_path,
        connected_components=int(sizes.size),
        largest_component_size=largest,
        degree_histogram=hist,
        label_distribution=label_dist,
    )


# merging -----------------------------------------------------------------

def merge_synthesis(g: TextAttributedGraph, delta: SynthesizedDelta) -> TextAttributedGraph:
    """Graft accepted nodes onto a base graph without mutating it.

    Original records survive byte for byte except for neighbor lists extended
    by bridge edges. New node adjacency comes solely from the delta edge sets.
    """
    new_ids = [rec.node_id for rec in delta.new_nodes]
    dup = [nid for nid in new_ids if g.has_node(nid)]
    if dup:
        raise GraphValidationError(f"new node ids collide with base graph: {dup[:10]}")
    if len(set(new_ids)) != len(new_ids):
        raise GraphValidationError("duplicate ids among new nodes")
    new_id_set = set(new_ids)

    extra: dict[str, set[str]] = {nid: set() for nid in new_ids}
    base_extra: dict[str, set[str]] = {}
    for new_id, orig_id in delta.bridge_edges:
        if new_id not in new_id_set:
            raise GraphValidationError(f"bridge edge references unknown new node {new_id!r}")
        if not g.has_node(orig_id):
            raise GraphValidationError(f"bridge edge references unknown base node {orig_id!r}")
        extra[new_id].add(orig_id)
        base_extra.setdefault(orig_id, set()).add(new_id)
    for a, b in delta.new_internal_edges:
        if a not in new_id_set or b not in new_id_set:
            raise GraphValidationError(f"internal edge ({a!r}, {b!r}) must join two new nodes")
        if a == b:
            raise GraphValidationError(f"internal self-loop on {a!r}")
        extra[a].add(b)
        extra[b].add(a)

    records: list[NodeRecord] = []
    for rec in g.nodes:
        added = base_extra.get(rec.node_id)
        if added:
            merged = tuple(sorted(set(rec.neighbors) | added, key=node_sort_key))
            records.append(NodeRecord(rec.node_id, rec.label, rec.text, merged, rec.mask))
        else:
            records.append(rec)
    for rec in delta.new_nodes:
        records.append(NodeRecord(
            node_id=rec.node_id,
            label=rec.label,
            text=rec.text,
            neighbors=tuple(sorted(extra[rec.node_id], key=node_sort_key)),
            mask=rec.mask,
        ))
    merged = TextAttributedGraph.from_records(tuple(records), g.class_count)
    if merged.normalization_fixes:
        raise GraphValidationError(
            f"merge produced {merged.normalization_fixes} unexpected adjacency fixes")
    return merged
