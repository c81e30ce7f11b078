import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_graph, path_graph, random_graph, triangle, two_k3
from tagforge.graph import (
    GraphSchemaError,
    GraphValidationError,
    NodeRecord,
    SynthesizedDelta,
    TextAttributedGraph,
    graph_stats,
    load_graph,
    merge_synthesis,
    node_sort_key,
    save_graph,
)

# oracles ----------------------------------------------------------------------

def oracle_clustering(g):
    """Mean local clustering by adjacency-matrix triple loop."""
    n = g.num_nodes
    ids = g.ids()
    pos = {v: i for i, v in enumerate(ids)}
    a = np.zeros((n, n))
    for u, v in g.edges():
        a[pos[u], pos[v]] = a[pos[v], pos[u]] = 1.0
    total = 0.0
    for i in range(n):
        nbrs = [j for j in range(n) if a[i, j] > 0]
        k = len(nbrs)
        if k < 2:
            continue
        links = sum(
            a[u, v] for ui, u in enumerate(nbrs) for v in nbrs[ui + 1:])
        total += 2.0 * links / (k * (k - 1))
    return total / n if n else 0.0


def oracle_path_length(g):
    """Mean shortest-path length over ordered pairs of the largest component,
    by Floyd-Warshall."""
    n = g.num_nodes
    if n == 0:
        return 0.0
    ids = g.ids()
    pos = {v: i for i, v in enumerate(ids)}
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    for u, v in g.edges():
        dist[pos[u], pos[v]] = dist[pos[v], pos[u]] = 1.0
    for k in range(n):
        dist = np.minimum(dist, dist[:, k:k + 1] + dist[k:k + 1, :])
    comp = {}
    for i in range(n):
        comp.setdefault(frozenset(j for j in range(n) if np.isfinite(dist[i, j])), []).append(i)
    largest = max(comp, key=len)
    members = sorted(largest)
    if len(members) < 2:
        return 0.0
    vals = [dist[i, j] for i in members for j in members if i != j]
    return float(np.mean(vals))


def oracle_components(g):
    parent = {v: v for v in g.ids()}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v in g.edges():
        parent[find(u)] = find(v)
    roots = {}
    for v in g.ids():
        roots.setdefault(find(v), 0)
        roots[find(v)] += 1
    return len(roots), max(roots.values(), default=0)


# construction and normalization ------------------------------------------------

def test_one_sided_neighbor_lists_are_symmetrized():
    g = make_graph({"a": ["b"], "b": []})
    assert g.neighbors("b") == ("a",)
    assert g.num_edges == 1
    assert g.normalization_fixes == 1


def test_self_loops_and_duplicates_are_dropped_and_counted():
    recs = [
        NodeRecord("x", 0, "text body of node x here", ("x", "y", "y")),
        NodeRecord("y", 0, "text body of node y here", ("x",)),
    ]
    g = TextAttributedGraph.from_records(recs, 1)
    assert g.num_edges == 1
    assert g.neighbors("x") == ("y",)
    assert g.normalization_fixes == 2


def test_dangling_neighbor_rejected_with_offender_listed():
    recs = [NodeRecord("a", 0, "text body of node a here", ("ghost",))]
    with pytest.raises(GraphValidationError, match="ghost"):
        TextAttributedGraph.from_records(recs, 1)


def test_duplicate_node_id_rejected():
    recs = [
        NodeRecord("a", 0, "text body one of node a", ()),
        NodeRecord("a", 0, "text body two of node a", ()),
    ]
    with pytest.raises(GraphValidationError, match="duplicate"):
        TextAttributedGraph.from_records(recs, 1)


def test_label_out_of_range_rejected():
    recs = [NodeRecord("a", 3, "text body of node a here", ())]
    with pytest.raises(GraphValidationError, match="label"):
        TextAttributedGraph.from_records(recs, 2)


def test_bad_mask_rejected():
    recs = [NodeRecord("a", 0, "text body of node a here", (), mask="train")]
    with pytest.raises(GraphValidationError, match="mask"):
        TextAttributedGraph.from_records(recs, 1)


def test_handshake_lemma_after_load():
    for seed in range(5):
        g = random_graph(25, 0.15, seed)
        assert int(g.degrees().sum()) == 2 * g.num_edges


def test_node_sort_key_orders_numerics_before_text():
    ids = ["10", "2", "new_node 1", "1", "alpha"]
    assert sorted(ids, key=node_sort_key) == ["1", "2", "10", "alpha", "new_node 1"]


# serialization ------------------------------------------------------------------

def test_round_trip_preserves_everything(tmp_path):
    g = random_graph(30, 0.1, seed=7)
    path = tmp_path / "g.json"
    save_graph(g, str(path))
    g2 = load_graph(str(path))
    assert g2.ids() == g.ids()
    assert g2.edge_set() == g.edge_set()
    assert g2.class_count == g.class_count
    for nid in g.ids():
        assert g2.node(nid) == g.node(nid)


def test_unicode_text_survives_round_trip(tmp_path):
    g = make_graph({"a": []}, texts={"a": "analyse sémantique — graphen 日本語"})
    path = tmp_path / "u.json"
    save_graph(g, str(path))
    assert load_graph(str(path)).node("a").text == "analyse sémantique — graphen 日本語"


def test_integer_ids_canonicalized_to_strings(tmp_path):
    obj = {"class_count": 1, "nodes": [
        {"node_id": 536, "label": 0, "text": "record with numeric id and text",
         "neighbors": [639], "mask": "Train"},
        {"node_id": 639, "label": 0, "text": "neighbor record with numeric id",
         "neighbors": [], "mask": "Train"},
    ]}
    path = tmp_path / "n.json"
    path.write_text(json.dumps(obj))
    g = load_graph(str(path))
    assert g.has_node("536")
    assert g.neighbors("536") == ("639",)
    assert g.neighbors("639") == ("536",)


def test_empty_node_list_loads(tmp_path):
    path = tmp_path / "e.json"
    path.write_text(json.dumps({"class_count": 0, "nodes": []}))
    g = load_graph(str(path))
    assert g.num_nodes == 0 and g.num_edges == 0


def test_parse_failure_reports_position(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"class_count": 1, "nodes": [')
    with pytest.raises(GraphSchemaError, match="line"):
        load_graph(str(path))


def test_boolean_id_rejected(tmp_path):
    obj = {"class_count": 1, "nodes": [
        {"node_id": True, "label": 0, "text": "bool id should be rejected",
         "neighbors": [], "mask": "Train"}]}
    path = tmp_path / "b.json"
    path.write_text(json.dumps(obj))
    with pytest.raises(GraphSchemaError):
        load_graph(str(path))


def test_non_integer_label_rejected(tmp_path):
    obj = {"class_count": 1, "nodes": [
        {"node_id": "a", "label": 0.5, "text": "float label should be rejected",
         "neighbors": [], "mask": "Train"}]}
    path = tmp_path / "f.json"
    path.write_text(json.dumps(obj))
    with pytest.raises(GraphSchemaError):
        load_graph(str(path))


def test_save_is_atomic_no_partial_file(tmp_path):
    g = random_graph(10, 0.2, seed=1)
    target = tmp_path / "out.json"
    save_graph(g, str(target))
    first = target.read_bytes()
    save_graph(g, str(target))
    assert target.read_bytes() == first
    assert not [p for p in tmp_path.iterdir() if p.name != "out.json"]


# statistics ---------------------------------------------------------------------

def test_triangle_stats():
    s = graph_stats(triangle())
    assert s.avg_degree == 2.0
    assert s.global_clustering_coefficient == 1.0
    assert s.avg_path_length == 1.0
    assert s.connected_components == 1


def test_single_isolated_node_stats():
    s = graph_stats(make_graph({"a": []}))
    assert s.num_nodes == 1
    assert s.avg_degree == 0.0
    assert s.density == 0.0
    assert s.global_clustering_coefficient == 0.0
    assert s.connected_components == 1
    assert s.largest_component_size == 1


def test_empty_graph_stats():
    s = graph_stats(TextAttributedGraph.from_records([], 0))
    assert s.num_nodes == 0 and s.num_edges == 0
    assert s.avg_path_length == 0.0


def test_stats_match_oracles_on_random_graphs():
    for seed in range(12):
        g = random_graph(20 + seed, 0.12, seed)
        s = graph_stats(g)
        assert abs(s.global_clustering_coefficient - oracle_clustering(g)) < 1e-9
        assert abs(s.avg_path_length - oracle_path_length(g)) < 1e-9
        comps, largest = oracle_components(g)
        assert s.connected_components == comps
        assert s.largest_component_size == largest
        assert sum(s.degree_histogram.values()) == g.num_nodes
        assert sum(s.label_distribution.values()) == g.num_nodes


def test_density_and_avg_degree_identities():
    g = random_graph(24, 0.2, seed=3)
    s = graph_stats(g)
    n, m = g.num_nodes, g.num_edges
    assert abs(s.avg_degree - 2 * m / n) < 1e-12
    assert abs(s.density - 2 * m / (n * (n - 1))) < 1e-12


# merging ------------------------------------------------------------------------

def test_merge_empty_delta_is_identity():
    g = random_graph(8, 0.3, seed=2)
    merged = merge_synthesis(g, SynthesizedDelta(new_nodes=()))
    assert merged.ids() == g.ids()
    assert merged.edge_set() == g.edge_set()


def test_merge_adds_node_and_back_edge():
    g = make_graph({"A": ["B"], "B": []})
    delta = SynthesizedDelta(
        new_nodes=(NodeRecord("S", 0, "synthesized node text body", ()),),
        bridge_edges=(("S", "A"),),
    )
    merged = merge_synthesis(g, delta)
    assert merged.num_nodes == 3
    assert "S" in merged.neighbors("A")
    assert merged.neighbors("B") == ("A",)
    # purity: the input graph is untouched
    assert g.num_nodes == 2
    assert "S" not in g.neighbors("A")


def test_merge_rejects_id_collision():
    g = make_graph({"A": []})
    delta = SynthesizedDelta(
        new_nodes=(NodeRecord("A", 0, "colliding identifier text", ()),),
    )
    with pytest.raises(GraphValidationError, match="A"):
        merge_synthesis(g, delta)


def test_merge_rejects_dangling_bridge():
    g = make_graph({"A": []})
    delta = SynthesizedDelta(
        new_nodes=(NodeRecord("S", 0, "synthesized node text body", ()),),
        bridge_edges=(("S", "ghost"),),
    )
    with pytest.raises(GraphValidationError):
        merge_synthesis(g, delta)


def test_merge_supports_new_internal_edges():
    g = make_graph({"A": []})
    delta = SynthesizedDelta(
        new_nodes=(
            NodeRecord("S1", 0, "first synthesized node text", ()),
            NodeRecord("S2", 0, "second synthesized node text", ()),
        ),
        bridge_edges=(("S1", "A"),),
        new_internal_edges=(("S1", "S2"),),
    )
    merged = merge_synthesis(g, delta)
    assert merged.num_edges == 2
    assert "S2" in merged.neighbors("S1")


def test_merge_monotone_in_nodes_and_edges():
    g = random_graph(10, 0.25, seed=5)
    delta = SynthesizedDelta(
        new_nodes=(NodeRecord("zz", 0, "appended node body text here", ()),),
        bridge_edges=(("zz", g.ids()[0]),),
    )
    merged = merge_synthesis(g, delta)
    assert merged.num_nodes == g.num_nodes + 1
    assert merged.num_edges == g.num_edges + 1


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 18), st.integers(0, 10_000))
def test_subgraph_edges_are_induced(n, seed):
    g = random_graph(n, 0.3, seed)
    rng = np.random.default_rng(seed + 1)
    keep = [v for v in g.ids() if rng.random() < 0.6] or [g.ids()[0]]
    sub = g.subgraph(keep)
    kept = set(keep)
    expected = {(u, v) for u, v in g.edges() if u in kept and v in kept}
    assert sub.edge_set() == expected
    for nid in sub.ids():
        assert sub.node(nid).text == g.node(nid).text
        assert sub.node(nid).label == g.node(nid).label
