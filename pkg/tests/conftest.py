import numpy as np
import pytest

from tagforge.graph import NodeRecord, TextAttributedGraph


def make_graph(adjacency, labels=None, class_count=None, masks=None, texts=None):
    """Build a graph from an adjacency dict; neighbor lists may be one-sided."""
    ids = sorted(adjacency)
    labels = labels or {}
    masks = masks or {}
    texts = texts or {}
    recs = [
        NodeRecord(
            node_id=i,
            label=labels.get(i, 0),
            text=texts.get(i, f"document text for node {i} with enough words"),
            neighbors=tuple(adjacency[i]),
            mask=masks.get(i, "Train"),
        )
        for i in ids
    ]
    if class_count is None:
        class_count = max(labels.values(), default=0) + 1 if labels else 1
    return TextAttributedGraph.from_records(recs, class_count)


def path_graph(n):
    return make_graph({str(i): [str(i + 1)] if i + 1 < n else [] for i in range(n)})


def triangle():
    return make_graph({"0": ["1", "2"], "1": ["2"], "2": []})


def two_k3():
    adj = {"0": ["1", "2"], "1": ["2"], "2": [], "3": ["4", "5"], "4": ["5"], "5": []}
    return make_graph(adj, labels={i: (0 if int(i) < 3 else 1) for i in adj},
                      class_count=2)


def complete_graph(n):
    return make_graph({str(i): [str(j) for j in range(i + 1, n)] for i in range(n)})


def random_graph(n, p, seed, class_count=3):
    rng = np.random.default_rng(seed)
    adj = {str(i): [] for i in range(n)}
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                adj[str(i)].append(str(j))
    labels = {str(i): int(rng.integers(class_count)) for i in range(n)}
    masks = {str(i): ("Train", "Validation", "Test")[int(rng.integers(3))]
             for i in range(n)}
    return make_graph(adj, labels=labels, class_count=class_count, masks=masks)


def random_embeddings(g, dim=8, seed=0):
    from tagforge.community import EmbeddingTable
    rng = np.random.default_rng(seed)
    table = {}
    for nid in g.ids():
        v = rng.normal(size=dim)
        while np.linalg.norm(v) < 1e-9:
            v = rng.normal(size=dim)
        table[nid] = v
    return EmbeddingTable(table)


@pytest.fixture
def tmp_graph_file(tmp_path):
    from tagforge.graph import save_graph

    def _write(g, name="graph.json"):
        path = tmp_path / name
        save_graph(g, str(path))
        return str(path)

    return _write
