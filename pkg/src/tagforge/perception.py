"""Retrieval stage: where to look in the graph and what to hand the generator.

Covers mode-conditional seed selection, personalized PageRank smoothing,
stochastic knowledge-capsule sampling, and the environment report that
summarizes graph state for the coordinating agents.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .community import EmbeddingTable, Partition
from .graph import GraphStats, TextAttributedGraph, NodeRecord, graph_stats, node_sort_key

log = logging.getLogger("tagforge.perception")


class EnhancementMode(str, Enum):
    SEMANTIC = "semantic"
    TOPOLOGICAL = "topological"


class PprConvergenceError(RuntimeError):
    """Power iteration failed to reach tolerance; carries the last residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class PerceptionParams:
    """Knobs for seed scoring, PageRank, and capsule sampling."""

    seed_variance_mu: float = 0.5
    teleport_alpha: float = 0.15
    ppr_tolerance: float = 1e-10
    ppr_max_iters: int = 200
    top_k_percent: float = 20.0
    retention_beta: float = 2.0
    capsule_size: int = 30

    def __post_init__(self):
        if not (0.0 < self.teleport_alpha <= 1.0):
            raise ValueError("teleport_alpha must lie in (0, 1]")
        if not (0.0 < self.top_k_percent <= 100.0):
            raise ValueError("top_k_percent must lie in (0, 100]")
        if self.retention_beta <= 0.0:
            raise ValueError("retention_beta must be positive")
        if self.capsule_size < 1:
            raise ValueError("capsule_size must be at least 1")
        if self.seed_variance_mu < 0.0:
            raise ValueError("seed_variance_mu must be nonnegative")


class SeedSelection(NamedTuple):
    nodes: frozenset
    descriptor: str


def class_imbalance(label_counts: Mapping[int, int]) -> dict[int, float]:
    """Imbalance factor per class: largest class count over this class count."""
    if not label_counts:
        raise ValueError("label_counts must be nonempty")
    if any(c <= 0 for c in label_counts.values()):
        raise ValueError("every class count must be positive")
    peak = max(label_counts.values())
    return {label: peak / count for label, count in label_counts.items()}


def select_seed(
    g: TextAttributedGraph,
    partition: Partition,
    emb: EmbeddingTable | None,
    mode: EnhancementMode,
    params: PerceptionParams = PerceptionParams(),
) -> SeedSelection:
    """Pick the region the retrieval walk should favor.

    Semantic mode scores each community by size * (1 + mu * Var) with Var the
    mean per-dimension variance of member embeddings, and takes the minimizer:
    small, semantically tight communities are the cheapest to enrich. The
    topological mode returns every training node of the most underrepresented
    training label.
    """
    mode = EnhancementMode(mode)
    if mode is EnhancementMode.SEMANTIC:
        partition.validate(g)
        members = partition.members_by_community()
        best_idx, best_score = None, None
        for idx, group in enumerate(members):
            if emb is not None and emb.covers(group) and len(group) > 0:
                x = emb.matrix(group)
                var = float(x.var(axis=0).mean()) if len(group) > 1 else 0.0
            else:
                if emb is not None:
                    raise ValueError(
                        f"semantic seed selection needs embeddings for community {idx}")
                var = 0.0
            score = len(group) * (1.0 + params.seed_variance_mu * var)
            if best_score is None or score < best_score - 1e-15:
                best_idx, best_score = idx, score
        return SeedSelection(frozenset(members[best_idx]), f"community:{best_idx}")

    train_counts: dict[int, int] = {}
    for rec in g.nodes:
        if rec.mask == "Train":
            train_counts[rec.label] = train_counts.get(rec.label, 0) + 1
    if not train_counts:
        raise ValueError("topological seed selection requires training nodes")
    imbalance = class_imbalance(train_counts)
    target = min(sorted(imbalance), key=lambda lbl: (-imbalance[lbl], lbl))
    nodes = frozenset(
        rec.node_id for rec in g.nodes if rec.mask == "Train" and rec.label == target)
    return SeedSelection(nodes, f"label:{target}")


def personalized_pagerank(
    g: TextAttributedGraph,
    seed_nodes: Iterable[str],
    mode: EnhancementMode = EnhancementMode.SEMANTIC,
    params: PerceptionParams = PerceptionParams(),
) -> dict[str, float]:
    """Random-walk-with-restart scores restarting uniformly over the seeds.

    Dangling nodes hand their probability mass back to the teleport vector.
    Iterates until the L1 change drops below tolerance, else raises
    PprConvergenceError carrying the final residual.
    """
    EnhancementMode(mode)
    seeds = sorted(set(seed_nodes), key=node_sort_key)
    if not seeds:
        raise ValueError("seed set must be nonempty")
    unknown = [s for s in seeds if not g.has_node(s)]
    if unknown:
        raise ValueError(f"seed nodes not in graph: {unknown[:10]}")

    n = g.num_nodes
    ids = g.ids()
    pos = {nid: i for i, nid in enumerate(ids)}
    v = np.zeros(n)
    for s in seeds:
        v[pos[s]] = 1.0 / len(seeds)
    deg = g.degrees().astype(np.float64)
    dangling = deg == 0.0
    safe_deg = np.where(dangling, 1.0, deg)
    a = g.adjacency_csr()
    alpha = params.teleport_alpha

    pi = v.copy()
    residual = math.inf
    for _ in range(params.ppr_max_iters):
        weighted = pi / safe_deg
        weighted[dangling] = 0.0
        spread = a @ weighted
        loose_mass = float(pi[dangling].sum())
        nxt = alpha * v + (1.0 - alpha) * (spread + loose_mass * v)
        residual = float(np.abs(nxt - pi).sum())
        pi = nxt
        if residual < params.ppr_tolerance:
            return {ids[i]: float(pi[i]) for i in range(n)}
    raise PprConvergenceError(
        f"personalized pagerank did not converge within {params.ppr_max_iters} "
        f"iterations (residual {residual:.3e})", residual)


@dataclass(frozen=True)
class KnowledgeCapsule:
    """The retrieved node set handed to the generation role.

    ``records`` keep full-graph neighbor lists so generated nodes can cite
    real attachment points; ``induced_edges`` cover capsule-internal pairs.
    """

    node_ids: tuple[str, ...]
    records: tuple[NodeRecord, ...]
    induced_edges: tuple[tuple[str, str], ...]
    ppr_scores: dict[str, float]
    seed_descriptor: str

    def __len__(self) -> int:
        return len(self.node_ids)

    def to_json_obj(self) -> list[dict]:
        return [
            {
                "node_id": rec.node_id,
                "label": rec.label,
                "text": rec.text,
                "neighbors": list(rec.neighbors),
                "mask": rec.mask,
                "relevance": self.ppr_scores[rec.node_id],
            }
            for rec in self.records
        ]


def sample_knowledge(
    g: TextAttributedGraph,
    ppr: Mapping[str, float],
    params: PerceptionParams = PerceptionParams(),
    rng_seed: int = 0,
    partition: Partition | None = None,
    seed_descriptor: str = "",
) -> KnowledgeCapsule:
    """Draw the knowledge capsule from PageRank scores.

    The top ``top_k_percent`` of nodes by score pass a stochastic retention
    filter (node i survives when r_i < min(1, beta * pi_i / max pi)); the
    survivors are unioned with one top-score delegate from each of the largest
    communities, then cut back or padded by descending score to
    min(capsule_size, candidate pool). The pad pool is the top slice itself,
    so capsule membership always stays inside top-slice plus delegates. If
    every retention draw fails, the deterministic top slice is used outright.
    """
    if not ppr:
        raise ValueError("ppr scores must be nonempty")
    missing = [nid for nid in ppr if not g.has_node(nid)]
    if missing:
        raise ValueError(f"ppr scores reference unknown nodes: {missing[:10]}")

    ranked = sorted(ppr, key=lambda nid: (-ppr[nid], node_sort_key(nid)))
    n = len(ranked)
    k_count = max(1, math.ceil(n * params.top_k_percent / 100.0))
    top_slice = ranked[:k_count]
    peak = ppr[ranked[0]]
    if peak <= 0.0:
        raise ValueError("ppr scores must contain a positive maximum")

    rng = np.random.default_rng(rng_seed)
    draws = rng.random(len(top_slice))
    retained = [
        nid for nid, r in zip(top_slice, draws)
        if r < min(1.0, params.retention_beta * ppr[nid] / peak)
    ]

    delegates: list[str] = []
    if partition is not None:
        partition.validate(g)
        members = partition.members_by_community()
        quota = min(len(members), math.ceil(params.capsule_size / 5))
        ordered = sorted(
            range(len(members)),
            key=lambda c: (-len(members[c]), min(node_sort_key(v) for v in members[c])))
        for c in ordered[:quota]:
            scored = [v for v in members[c] if v in ppr]
            if scored:
                delegates.append(
                    min(scored, key=lambda nid: (-ppr[nid], node_sort_key(nid))))

    target = min(params.capsule_size, n)
    if not retained:
        log.info("capsule retention emptied the pool; falling back to top slice")
        chosen = top_slice[:target]
    else:
        pool = dict.fromkeys(retained)
        for d in delegates:
            pool.setdefault(d)
        ordered_pool = sorted(pool, key=lambda nid: (-ppr[nid], node_sort_key(nid)))
        chosen = ordered_pool[:target]
        if len(chosen) < target:
            seen = set(chosen)
            for nid in top_slice:
                if len(chosen) >= target:
                    break
                if nid not in seen:
                    chosen.append(nid)
                    seen.add(nid)
            chosen.sort(key=lambda nid: (-ppr[nid], node_sort_key(nid)))

    member_set = set(chosen)
    records = tuple(g.node(nid) for nid in chosen)
    induced = tuple(
        (u, v) for u, v in g.edges() if u in member_set and v in member_set)
    return KnowledgeCapsule(
        node_ids=tuple(chosen),
        records=records,
        induced_edges=induced,
        ppr_scores={nid: float(ppr[nid]) for nid in chosen},
        seed_descriptor=seed_descriptor,
    )


# environment report -------------------------------------------------------

@dataclass(frozen=True)
class ClassStat:
    count: int
    fraction: float
    internal_edges: int
    avg_degree: float
    community_distribution: dict


@dataclass(frozen=True)
class CommunityStat:
    size: int
    internal_edges: int
    fraction_of_graph: float
    modularity_contribution: float


@dataclass(frozen=True)
class EnvironmentReport:
    global_stats: GraphStats
    class_stats: dict
    community_stats: dict
    structural_distribution: dict
    semantic_distribution: dict
    narrative: str | None = None

    def to_json_obj(self) -> dict:
        comm_order = sorted(
            self.community_stats,
            key=lambda c: (-self.community_stats[c].size, c))
        graph_block = dict(self.global_stats.to_dict())
        graph_block.pop("degree_histogram", None)
        graph_block.pop("label_distribution", None)
        graph_block["indices"] = [str(c) for c in comm_order]
        graph_block["sizes"] = [self.community_stats[c].size for c in comm_order]
        graph_block["distribution"] = {
            str(c): self.community_stats[c].size for c in comm_order}
        graph_block["statistics"] = {
            str(c): {
                "size": cs.size,
                "internal_edges": cs.internal_edges,
                "fraction_of_graph": cs.fraction_of_graph,
                "modularity_contribution": cs.modularity_contribution,
            }
            for c, cs in self.community_stats.items()
        }
        obj = {
            "Graph": graph_block,
            "StructuralDistribution": {
                "degree_distribution": {
                    str(k): v for k, v in sorted(self.structural_distribution.items())},
            },
            "SemanticDistribution": self.semantic_distribution,
            "LabelDistribution": {
                str(k): v for k, v in sorted(self.global_stats.label_distribution.items())},
            "ClassStatistics": {
                str(lbl): {
                    "count": cs.count,
                    "fraction": cs.fraction,
                    "internal_edges": cs.internal_edges,
                    "avg_degree": cs.avg_degree,
                    "community_distribution": cs.community_distribution,
                }
                for lbl, cs in self.class_stats.items()
            },
        }
        if self.narrative is not None:
            obj["Narrative"] = self.narrative
        return obj


def report_to_json(report: EnvironmentReport) -> str:
    return json.dumps(report.to_json_obj(), sort_keys=True, ensure_ascii=False, indent=2) + "\n"


def build_report(
    g: TextAttributedGraph,
    partition: Partition,
    emb: EmbeddingTable | None = None,
    narrative: str | None = None,
) -> EnvironmentReport:
    """Assemble the structured state summary consumed by the agent roles."""
    if g.num_nodes == 0:
        raise ValueError("cannot report on an empty graph")
    partition.validate(g)
    stats = graph_stats(g)
    n = g.num_nodes
    m = g.num_edges
    assign = partition.assignment

    class_internal: dict[int, int] = {}
    comm_internal: dict[int, int] = {}
    for u, v in g.edges():
        lu, lv = g.node(u).label, g.node(v).label
        if lu == lv:
            class_internal[lu] = class_internal.get(lu, 0) + 1
        if assign[u] == assign[v]:
            comm_internal[assign[u]] = comm_internal.get(assign[u], 0) + 1

    class_members: dict[int, list[str]] = {}
    for rec in g.nodes:
        class_members.setdefault(rec.label, []).append(rec.node_id)
    class_stats: dict[int, ClassStat] = {}
    for lbl in sorted(class_members):
        members = class_members[lbl]
        count = len(members)
        internal = class_internal.get(lbl, 0)
        comm_dist: dict[str, int] = {}
        for nid in members:
            key = str(assign[nid])
            comm_dist[key] = comm_dist.get(key, 0) + 1
        class_stats[lbl] = ClassStat(
            count=count,
            fraction=count / n,
            internal_edges=internal,
            avg_degree=2.0 * internal / count if count else 0.0,
            community_distribution=dict(sorted(
                comm_dist.items(), key=lambda kv: (-kv[1], kv[0]))),
        )

    comm_stats: dict[int, CommunityStat] = {}
    sizes = partition.community_sizes()
    deg_sum = [0] * partition.community_count
    for rec in g.nodes:
        deg_sum[assign[rec.node_id]] += len(rec.neighbors)
    for c in range(partition.community_count):
        internal = comm_internal.get(c, 0)
        if m > 0:
            contribution = internal / m - (deg_sum[c] / (2.0 * m)) ** 2
        else:
            contribution = 0.0
        comm_stats[c] = CommunityStat(
            size=sizes[c],
            internal_edges=internal,
            fraction_of_graph=sizes[c] / n,
            modularity_contribution=contribution,
        )

    if emb is not None and emb.covers(g.ids()):
        centroids: dict[int, np.ndarray] = {}
        for lbl, members in class_members.items():
            centroid = emb.unit_matrix(members).mean(axis=0)
            norm = float(np.linalg.norm(centroid))
            centroids[lbl] = centroid / norm if norm > 0 else centroid
        labels = sorted(centroids)
        sem_dist: dict = {"label_centroid_similarity": {
            str(a): {
                str(b): float(np.dot(centroids[a], centroids[b])) for b in labels}
            for a in labels}}
    else:
        sem_dist = {"placeholder": "semantic distribution not computed (embeddings unavailable)"}

    return EnvironmentReport(
        global_stats=stats,
        class_stats=class_stats,
        community_stats=comm_stats,
        structural_distribution=dict(stats.degree_histogram),
        semantic_distribution=sem_dist,
        narrative=narrative,
    )
