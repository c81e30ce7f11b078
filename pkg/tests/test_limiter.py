import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_graph, random_graph
from tagforge.community import ModularityParams, Partition, detect_communities
from tagforge.limiter import (
    LimiterParams,
    connectivity_repair,
    node_weights,
    property_tensor,
    sample_limited,
    sample_limited_detailed,
)


def _distortion(g_sub, g_full):
    def profile(g):
        from tagforge.graph import graph_stats
        s = graph_stats(g)
        return (s.connected_components / s.num_nodes,
                s.largest_component_size / s.num_nodes)
    a, b = profile(g_sub), profile(g_full)
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


# node weights ----------------------------------------------------------------------

def test_isolated_node_weight_is_one_third():
    g = make_graph({"iso": [], "x": ["y"], "y": []})
    part = Partition.from_assignment({"iso": 0, "x": 1, "y": 1})
    w = node_weights(g, ["iso"], [], part, (1 / 3, 1 / 3, 1 / 3))
    assert w["iso"] == pytest.approx(1 / 3)


def test_max_degree_internal_node_with_community_selected():
    # hub has max degree, all neighbors in its own community, community fully selected
    g = make_graph({"h": ["a", "b", "c"], "a": [], "b": [], "c": []})
    part = Partition.from_assignment({nid: 0 for nid in g.ids()})
    lam = (0.5, 0.3, 0.2)
    w = node_weights(g, ["h"], ["h", "a", "b", "c"], part, lam)
    assert w["h"] == pytest.approx(0.5)


def test_pure_bridge_node_with_lambda3_only():
    g = make_graph({"bridge": ["out1", "out2"], "out1": [], "out2": []})
    part = Partition.from_assignment({"bridge": 0, "out1": 1, "out2": 1})
    w = node_weights(g, ["bridge"], ["bridge"], part, (0.0, 0.0, 1.0))
    assert w["bridge"] == pytest.approx(1.0)


def test_weights_bounded():
    g = random_graph(30, 0.15, seed=3)
    part = detect_communities(g, None, ModularityParams(gamma=1.0), 0)
    w = node_weights(g, list(g.ids()), list(g.ids())[:10], part)
    assert all(0.0 <= val <= 1.0 + 1e-12 for val in w.values())


# property tensor -------------------------------------------------------------------

def test_property_tensor_shapes_and_ranges():
    g = random_graph(40, 0.1, seed=7)
    pt = property_tensor(g)
    assert sum(pt.degree_histogram.values()) == g.num_nodes
    assert sum(pt.label_distribution.values()) == g.num_nodes
    assert len(pt.top_spectral) <= 10
    assert all(0.0 - 1e-9 <= ev <= 2.0 + 1e-9 for ev in pt.top_spectral)
    assert list(pt.top_spectral) == sorted(pt.top_spectral)


def test_property_tensor_spectrum_oracle_on_path():
    # normalized Laplacian eigenvalues of P3: 0, 1, 2
    g = make_graph({"0": ["1"], "1": ["2"], "2": []})
    pt = property_tensor(g)
    assert np.allclose(pt.top_spectral, [0.0, 1.0, 2.0], atol=1e-9)


# sampling ---------------------------------------------------------------------------

def test_alpha_one_returns_everything():
    g = random_graph(20, 0.2, seed=11)
    part = detect_communities(g, None, ModularityParams(gamma=1.0), 0)
    sampled = sample_limited(g, part, LimiterParams(alpha=1.0))
    assert sorted(sampled.ids()) == sorted(g.ids())
    assert sampled.edge_set() == g.edge_set()


def test_two_cell_targets_six_four():
    adj = {str(i): [] for i in range(10)}
    adj["0"] = ["1"]
    adj["6"] = ["7"]
    labels = {str(i): (0 if i < 6 else 1) for i in range(10)}
    g = make_graph(adj, labels=labels, class_count=2)
    part = Partition.from_assignment({nid: 0 for nid in g.ids()})
    result = sample_limited_detailed(g, part, LimiterParams(alpha=0.5))
    assert result.cell_targets == {(0, 0): 3, (1, 0): 2}
    assert result.graph.num_nodes == 5


def test_sample_size_and_class_deviation_invariants():
    for seed in range(10):
        g = random_graph(30 + 7 * seed, 0.08, seed=seed + 50)
        part = detect_communities(g, None, ModularityParams(gamma=1.0), 0)
        alpha = (0.3, 0.5, 0.62)[seed % 3]
        sampled = sample_limited(g, part, LimiterParams(alpha=alpha))
        assert sampled.num_nodes == math.floor(alpha * g.num_nodes)
        full_counts, kept_counts = {}, {}
        for rec in g.nodes:
            full_counts[rec.label] = full_counts.get(rec.label, 0) + 1
        for rec in sampled.nodes:
            kept_counts[rec.label] = kept_counts.get(rec.label, 0) + 1
        for lbl, count in full_counts.items():
            assert abs(kept_counts.get(lbl, 0) - math.floor(alpha * count)) <= 1


def test_cell_counts_invariant_under_repair():
    for seed in range(6):
        g = random_graph(60, 0.05, seed=seed + 70)
        part = detect_communities(g, None, ModularityParams(gamma=1.0), 0)
        result = sample_limited_detailed(g, part, LimiterParams(alpha=0.5))
        got: dict = {}
        for rec in result.graph.nodes:
            key = (rec.label, part.assignment[rec.node_id])
            got[key] = got.get(key, 0) + 1
        assert got == {k: v for k, v in result.cell_targets.items() if v > 0}


def test_sampling_error_when_alpha_selects_nothing():
    g = make_graph({"a": []})
    part = Partition.from_assignment({"a": 0})
    with pytest.raises(ValueError):
        sample_limited(g, part, LimiterParams(alpha=0.4))


# repair ------------------------------------------------------------------------------

def test_repair_noop_when_within_epsilon():
    g = random_graph(16, 0.4, seed=5)
    part = Partition.from_assignment({nid: 0 for nid in g.ids()})
    sub = g.subgraph(list(g.ids()))
    repaired, report = connectivity_repair(g, sub, part, LimiterParams())
    assert report.swaps == 0
    assert repaired.edge_set() == sub.edge_set()


def test_repair_single_swap_fixture():
    """A hub component plus satellites; the sample keeps an isolated satellite
    and drops the hub mate that would keep things connected. One same-cell
    swap repairs it."""
    adj = {
        "h": ["a", "b", "c"],
        "a": [], "b": [], "c": [],
        "far": [],
    }
    g = make_graph(adj, labels={nid: 0 for nid in adj}, class_count=1)
    part = Partition.from_assignment({nid: 0 for nid in adj})
    # sample: h, a, far (far isolated; swapping far for b merges it away)
    sub = g.subgraph(["h", "a", "far"])
    before = _distortion(sub, g)
    repaired, report = connectivity_repair(g, sub, part, LimiterParams(repair_epsilon=0.01))
    after = _distortion(repaired, g)
    assert report.swaps >= 1
    assert after < before
    assert repaired.num_nodes == sub.num_nodes
    assert report.distortion_trace[0] == pytest.approx(before)
    for prev, nxt in zip(report.distortion_trace, report.distortion_trace[1:]):
        assert nxt < prev


def test_repair_no_candidates_warns():
    # two labels; the only outside node has a label with no replaceable twin
    adj = {"a": ["b"], "b": [], "c": [], "d": []}
    labels = {"a": 0, "b": 0, "c": 0, "d": 1}
    g = make_graph(adj, labels=labels, class_count=2)
    part = Partition.from_assignment({nid: 0 for nid in adj})
    sub = g.subgraph(["a", "b", "c"])   # d (label 1) outside: no same-cell swap
    repaired, report = connectivity_repair(
        g, sub, part, LimiterParams(repair_epsilon=1e-9))
    assert report.swaps == 0
    assert report.warning is not None


def test_repair_preserves_node_count_and_cells():
    g = random_graph(50, 0.06, seed=91)
    part = detect_communities(g, None, ModularityParams(gamma=1.0), 0)
    result = sample_limited_detailed(g, part, LimiterParams(alpha=0.4))
    assert result.graph.num_nodes == math.floor(0.4 * g.num_nodes)
    assert result.repair.final_distortion <= result.repair.initial_distortion + 1e-12


@settings(max_examples=15, deadline=None)
@given(st.integers(12, 60), st.integers(0, 10_000))
def test_property_sample_invariants(n, seed):
    g = random_graph(n, 0.12, seed)
    part = detect_communities(g, None, ModularityParams(gamma=1.0), 0)
    result = sample_limited_detailed(g, part, LimiterParams(alpha=0.5))
    assert result.graph.num_nodes == math.floor(0.5 * n)
    # selected ids must come from the original graph, induced edges only
    kept = set(result.graph.ids())
    assert kept <= set(g.ids())
    assert result.graph.edge_set() <= g.edge_set()
