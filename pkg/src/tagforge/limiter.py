"""Distribution-preserving graph downsampling.

Given a target fraction alpha, nodes are apportioned across (label,
community) cells by largest-remainder rounding, applied first across classes
and then across each class's cells so per-class totals never drift more than
one node from their rounding targets. Within a cell the highest-utility nodes
win, where utility blends degree, coverage of not-yet-selected community
mass, and bridge potential. A greedy swap repair then nudges the sample's
component profile toward the source graph without ever touching cell counts.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .community import Partition
from .graph import TextAttributedGraph, node_sort_key

log = logging.getLogger("tagforge.limiter")

# candidate caps per repair round
_BRIDGE_CAP = 12
_ISOLATE_CAP = 4
_REPLACE_CAP = 8
_GAIN_EPS = 1e-12


@dataclass(frozen=True)
class LimiterParams:
    alpha: float = 0.5
    lambda_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    repair_epsilon: float = 0.05
    max_repair_swaps: int | None = None
    eigen_count: int = 10

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError("alpha must lie in (0, 1]")
        if len(self.lambda_weights) != 3 or any(w < 0 for w in self.lambda_weights):
            raise ValueError("lambda_weights must be three nonnegative values")
        if self.repair_epsilon < 0.0:
            raise ValueError("repair_epsilon must be nonnegative")
        if self.eigen_count < 1:
            raise ValueError("eigen_count must be positive")


@dataclass(frozen=True)
class PropertyTensor:
    """Compact structural fingerprint used to compare graph versions."""

    degree_histogram: dict
    label_distribution: dict
    top_spectral: tuple[float, ...]
    component_profile: tuple[float, float]

    def to_dict(self) -> dict:
        return {
            "degree_histogram": {str(k): v for k, v in sorted(self.degree_histogram.items())},
            "label_distribution": {str(k): v for k, v in sorted(self.label_distribution.items())},
            "top_spectral": list(self.top_spectral),
            "component_profile": list(self.component_profile),
        }


@dataclass(frozen=True)
class RepairReport:
    swaps: int
    initial_distortion: float
    final_distortion: float
    distortion_trace: tuple[float, ...]
    warning: str | None = None


@dataclass(frozen=True)
class LimitResult:
    graph: TextAttributedGraph
    cell_targets: dict
    repair: RepairReport


def _induced_components(g: TextAttributedGraph, selected: set) -> tuple[dict, list[int]]:
    """Component id per selected node and component sizes, by BFS."""
    comp: dict[str, int] = {}
    sizes: list[int] = []
    for start in sorted(selected, key=node_sort_key):
        if start in comp:
            continue
        cid = len(sizes)
        stack = [start]
        comp[start] = cid
        count = 0
        while stack:
            u = stack.pop()
            count += 1
            for w in g.neighbors(u):
                if w in selected and w not in comp:
                    comp[w] = cid
                    stack.append(w)
        sizes.append(count)
    return comp, sizes


def _component_profile(g: TextAttributedGraph) -> tuple[float, float]:
    n = g.num_nodes
    if n == 0:
        return (0.0, 0.0)
    _, sizes = _induced_components(g, set(g.ids()))
    return (len(sizes) / n, max(sizes) / n)


def property_tensor(g: TextAttributedGraph, eigen_count: int = 10) -> PropertyTensor:
    """Degree and label histograms, leading normalized-Laplacian spectrum of
    the largest component, and the component profile (count/n, largest/n)."""
    n = g.num_nodes
    hist: dict[int, int] = {}
    labels: dict[int, int] = {}
    for rec in g.nodes:
        d = len(rec.neighbors)
        hist[d] = hist.get(d, 0) + 1
        labels[rec.label] = labels.get(rec.label, 0) + 1
    spectral: tuple[float, ...] = ()
    if n > 0:
        comp, sizes = _induced_components(g, set(g.ids()))
        big = max(range(len(sizes)), key=lambda c: (sizes[c], -c))
        members = sorted((v for v, c in comp.items() if c == big), key=node_sort_key)
        s = len(members)
        if s == 1:
            spectral = (0.0,)
        else:
            pos = {v: i for i, v in enumerate(members)}
            a = np.zeros((s, s))
            for v in members:
                for w in g.neighbors(v):
                    if w in pos:
                        a[pos[v], pos[w]] = 1.0
            deg = a.sum(axis=1)
            inv_sqrt = 1.0 / np.sqrt(deg)
            lap = np.eye(s) - (a * inv_sqrt[None, :]) * inv_sqrt[:, None]
            vals = np.clip(np.linalg.eigvalsh(lap), 0.0, 2.0)
            spectral = tuple(float(x) for x in vals[:eigen_count])
    return PropertyTensor(
        degree_histogram=hist,
        label_distribution=labels,
        top_spectral=spectral,
        component_profile=_component_profile(g),
    )


def node_weights(
    g: TextAttributedGraph,
    candidates: Iterable[str],
    selected: Iterable[str],
    partition: Partition,
    lambda_weights: Sequence[float] = (1 / 3, 1 / 3, 1 / 3),
) -> dict[str, float]:
    """Utility of adding each candidate given what is already selected.

    Blends normalized degree, the unselected fraction of the candidate's
    community, and the fraction of its neighbors outside its own community
    (zero for isolated nodes).
    """
    l1, l2, l3 = lambda_weights
    selected_set = set(selected)
    members = partition.members_by_community()
    max_deg = max((len(rec.neighbors) for rec in g.nodes), default=0)
    out: dict[str, float] = {}
    for v in candidates:
        deg = g.degree(v)
        c = partition.assignment[v]
        community = members[c]
        covered = sum(1 for u in community if u in selected_set)
        coverage_gap = 1.0 - covered / len(community)
        if deg > 0:
            outside = sum(1 for u in g.neighbors(v) if partition.assignment[u] != c)
            bridge = outside / deg
        else:
            bridge = 0.0
        degree_term = deg / max_deg if max_deg > 0 else 0.0
        out[v] = l1 * degree_term + l2 * coverage_gap + l3 * bridge
    return out


def _largest_remainder(
    quotas: Sequence[tuple], total: int) -> dict:
    """Apportion ``total`` across items given (key, exact_quota, capacity).

    Base share is floor(quota); leftovers go to the largest fractional
    remainders, ties resolved by key order, skipping items at capacity.
    """
    base: dict = {}
    fracs: list[tuple[float, tuple, object]] = []
    for key, quota, capacity in quotas:
        b = min(int(math.floor(quota + 1e-12)), capacity)
        base[key] = b
        fracs.append((quota - b, key, capacity))
    leftover = total - sum(base.values())
    if leftover < 0:
        raise RuntimeError("largest-remainder apportionment overflow")
    fracs.sort(key=lambda item: (-item[0], item[1]))
    idx = 0
    while leftover > 0:
        if idx >= len(fracs):
            raise RuntimeError("largest-remainder apportionment ran out of capacity")
        _, key, capacity = fracs[idx]
        if base[key] < capacity:
            base[key] += 1
            leftover -= 1
        idx += 1
    return base


def _distortion(profile: tuple[float, float], ref: tuple[float, float]) -> float:
    return abs(profile[0] - ref[0]) + abs(profile[1] - ref[1])


def connectivity_repair(
    g: TextAttributedGraph,
    sub: TextAttributedGraph,
    partition: Partition,
    params: LimiterParams = LimiterParams(),
) -> tuple[TextAttributedGraph, RepairReport]:
    """Swap sampled nodes for outside nodes of the same (label, community)
    cell while the swap strictly reduces the component-profile distortion.

    Stops once distortion falls within ``repair_epsilon``, no improving
    same-cell swap remains, or the swap budget (default twice the sample
    size) is exhausted. Cell counts are invariant by construction.
    """
    n_g = g.num_nodes
    ref_comp, ref_sizes = _induced_components(g, set(g.ids()))
    kappa_ref = (len(ref_sizes) / n_g, max(ref_sizes) / n_g)

    selected = set(sub.ids())
    n_s = len(selected)
    if n_s == 0:
        raise ValueError("sample must be nonempty")
    max_swaps = params.max_repair_swaps if params.max_repair_swaps is not None else 2 * n_s

    cell_of = {
        rec.node_id: (rec.label, partition.assignment[rec.node_id]) for rec in g.nodes}

    comp, sizes = _induced_components(g, selected)
    cur = _distortion((len(sizes) / n_s, max(sizes) / n_s), kappa_ref)
    trace = [cur]
    swaps = 0
    warning: str | None = None

    while swaps < max_swaps and cur > params.repair_epsilon:
        by_cell_out: dict[tuple, list[str]] = {}
        for v in g.ids():
            if v not in selected:
                by_cell_out.setdefault(cell_of[v], []).append(v)
        # replaceable nodes: induced degree at most 1, grouped by cell
        by_cell_repl: dict[tuple, list[tuple[int, str]]] = {}
        induced_deg: dict[str, int] = {}
        for v in selected:
            d = sum(1 for w in g.neighbors(v) if w in selected)
            induced_deg[v] = d
            if d <= 1:
                by_cell_repl.setdefault(cell_of[v], []).append((d, v))

        size_arr = list(sizes)
        # component sizes sorted descending for fast "largest untouched" scans
        size_order = sorted(range(len(size_arr)), key=lambda c: -size_arr[c])

        best = None  # (gain, b_key, r_key, b, r)
        any_pair = False
        for cell, outs in sorted(by_cell_out.items()):
            repls = sorted(by_cell_repl.get(cell, ()))[:_REPLACE_CAP]
            if not repls:
                continue
            scored_out = []
            for b in outs:
                comps_b: dict[int, int] = {}
                for w in g.neighbors(b):
                    if w in selected:
                        comps_b[comp[w]] = comps_b.get(comp[w], 0) + 1
                scored_out.append((len(comps_b), b, comps_b))
            scored_out.sort(key=lambda item: (-item[0], node_sort_key(item[1])))
            pool = scored_out[:_BRIDGE_CAP] + sorted(
                scored_out, key=lambda item: (item[0], node_sort_key(item[1])))[:_ISOLATE_CAP]
            seen_b = set()
            for _, b, comps_b in pool:
                if b in seen_b:
                    continue
                seen_b.add(b)
                for d_r, r in repls:
                    any_pair = True
                    c_r = comp[r]
                    # stage 1: remove r (induced degree 0 or 1)
                    removed_comp = None
                    shrunk = {}
                    if d_r == 0:
                        removed_comp = c_r
                        count_after = len(size_arr) - 1
                    else:
                        shrunk[c_r] = size_arr[c_r] - 1
                        count_after = len(size_arr)
                    # stage 2: add b, merging the components its remaining
                    # selected neighbors belong to
                    merged = set(comps_b)
                    if r in set(g.neighbors(b)):
                        # b loses r as an attachment point
                        cnt = comps_b.get(c_r, 0)
                        if cnt == 1:
                            merged.discard(c_r)
                    if removed_comp is not None:
                        merged.discard(removed_comp)
                    merged_size = 1
                    for c in merged:
                        merged_size += shrunk.get(c, size_arr[c])
                    new_count = count_after - len(merged) + 1
                    # largest component: the merge result, the one possibly
                    # shrunk component, or the biggest untouched component
                    untouched_best = 0
                    for c in size_order:
                        if c in merged or c == removed_comp or c in shrunk:
                            continue
                        untouched_best = size_arr[c]
                        break
                    for c, s in shrunk.items():
                        if c not in merged and s > untouched_best:
                            untouched_best = s
                    new_largest = max(merged_size, untouched_best)
                    cand = _distortion((new_count / n_s, new_largest / n_s), kappa_ref)
                    gain = cur - cand
                    if gain > _GAIN_EPS:
                        entry = (gain, node_sort_key(b), node_sort_key(r), b, r)
                        if best is None or (entry[0] > best[0] + _GAIN_EPS) or (
                                abs(entry[0] - best[0]) <= _GAIN_EPS
                                and (entry[1], entry[2]) < (best[1], best[2])):
                            best = entry
        if best is None:
            if cur > params.repair_epsilon:
                warning = ("no same-cell swap could reduce component distortion; "
                           f"stopping at {cur:.4f}" if any_pair else
                           "no same-cell swap candidates exist; "
                           f"distortion stays at {cur:.4f}")
                log.warning(warning)
            break
        _, _, _, b, r = best
        selected.discard(r)
        selected.add(b)
        swaps += 1
        comp, sizes = _induced_components(g, selected)
        new_cur = _distortion((len(sizes) / n_s, max(sizes) / n_s), kappa_ref)
        if new_cur >= cur - _GAIN_EPS:
            raise RuntimeError("repair swap failed to decrease distortion")
        cur = new_cur
        trace.append(cur)

    report = RepairReport(
        swaps=swaps,
        initial_distortion=trace[0],
        final_distortion=cur,
        distortion_trace=tuple(trace),
        warning=warning,
    )
    return g.subgraph(selected), report


def sample_limited_detailed(
    g: TextAttributedGraph,
    partition: Partition,
    params: LimiterParams = LimiterParams(),
    rng_seed: int = 0,
) -> LimitResult:
    """Produce the alpha-fraction sample with repair, plus bookkeeping.

    ``rng_seed`` is accepted for interface stability; selection itself is
    deterministic (ranking ties break on node id).
    """
    del rng_seed
    n = g.num_nodes
    partition.validate(g)
    total = int(math.floor(params.alpha * n))
    if total < 1:
        raise ValueError(
            f"alpha * n = {params.alpha * n:.3f} selects no nodes; raise alpha")

    cells: dict[tuple, list[str]] = {}
    class_counts: dict[int, int] = {}
    for rec in g.nodes:
        key = (rec.label, partition.assignment[rec.node_id])
        cells.setdefault(key, []).append(rec.node_id)
        class_counts[rec.label] = class_counts.get(rec.label, 0) + 1

    class_targets = _largest_remainder(
        [(lbl, params.alpha * count, count) for lbl, count in sorted(class_counts.items())],
        total,
    )
    cell_targets: dict[tuple, int] = {}
    for lbl in sorted(class_counts):
        lbl_cells = sorted(key for key in cells if key[0] == lbl)
        shares = _largest_remainder(
            [(key, params.alpha * len(cells[key]), len(cells[key])) for key in lbl_cells],
            class_targets[lbl],
        )
        cell_targets.update(shares)

    selected: list[str] = []
    for key in sorted(cell_targets):
        members = cells[key]
        want = cell_targets[key]
        if want >= len(members):
            chosen = sorted(members, key=node_sort_key)
        else:
            weights = node_weights(g, members, selected, partition, params.lambda_weights)
            chosen = sorted(
                members, key=lambda v: (-weights[v], node_sort_key(v)))[:want]
        selected.extend(chosen)

    sub = g.subgraph(selected)
    repaired, report = connectivity_repair(g, sub, partition, params)
    return LimitResult(graph=repaired, cell_targets=dict(cell_targets), repair=report)


def sample_limited(
    g: TextAttributedGraph,
    partition: Partition,
    params: LimiterParams = LimiterParams(),
    rng_seed: int = 0,
) -> TextAttributedGraph:
    return sample_limited_detailed(g, partition, params, rng_seed).graph
