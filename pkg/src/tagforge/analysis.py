"""Quality measurement for synthesized graphs.

Three families of checks live here: distribution comparisons between a
source graph and a grown or sampled variant (two-sample KS on degrees,
degree-binned clustering similarity, label homogeneity overlap), subspace
coherence of embedding clouds scored against an iteratively reweighted
principal direction, and the summary statistics used when human ratings are
available.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .graph import TextAttributedGraph, local_clustering

log = logging.getLogger("tagforge.analysis")

SMALL_SAMPLE_FLOOR = 25


# two-sample Kolmogorov-Smirnov ---------------------------------------------

@dataclass(frozen=True)
class KSResult:
    statistic: float
    p_value: float
    n_a: int
    n_b: int
    small_sample: bool

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "n_a": self.n_a,
            "n_b": self.n_b,
            "small_sample": self.small_sample,
        }


def ks_p_value(statistic: float, n: int, m: int) -> float:
    """Asymptotic two-sided p-value via the alternating exponential series.

    Terms are accumulated until they fall below 1e-12; the result is clamped
    into [0, 1].
    """
    if statistic <= 0.0:
        return 1.0
    lam = statistic * math.sqrt(n * m / (n + m))
    total = 0.0
    for k in range(1, 100_001):
        term = 2.0 * (-1.0) ** (k - 1) * math.exp(-2.0 * k * k * lam * lam)
        total += term
        if abs(term) < 1e-12:
            break
    return min(1.0, max(0.0, total))


def ks_two_sample(a: Sequence[float], b: Sequence[float]) -> KSResult:
    """Exact sup-distance between the two empirical CDFs, with p-value.

    Sets ``small_sample`` when either sample has fewer than 25 points, since
    the asymptotic p-value is unreliable there.
    """
    xa = np.sort(np.asarray(a, dtype=np.float64))
    xb = np.sort(np.asarray(b, dtype=np.float64))
    if xa.size == 0 or xb.size == 0:
        raise ValueError("both samples must be nonempty")
    grid = np.concatenate([xa, xb])
    fa = np.searchsorted(xa, grid, side="right") / xa.size
    fb = np.searchsorted(xb, grid, side="right") / xb.size
    d = float(np.max(np.abs(fa - fb)))
    return KSResult(
        statistic=d,
        p_value=ks_p_value(d, xa.size, xb.size),
        n_a=int(xa.size),
        n_b=int(xb.size),
        small_sample=min(xa.size, xb.size) < SMALL_SAMPLE_FLOOR,
    )


# graph feature similarity ---------------------------------------------------

def degree_sequence(g: TextAttributedGraph) -> np.ndarray:
    return g.degrees().astype(np.float64)


def _degree_bin(d: int) -> int:
    # log-spaced bins shared across graphs; isolated nodes get their own bin
    return -1 if d == 0 else int(math.floor(math.log2(d)))


def clustering_similarity(g1: TextAttributedGraph, g2: TextAttributedGraph) -> float:
    """One minus the pooled-weight L1 gap between degree-binned mean local
    clustering curves. Bins observed in only one graph contribute no gap.
    """
    if g1.num_nodes == 0 or g2.num_nodes == 0:
        raise ValueError("both graphs must be nonempty")
    stats: list[dict[int, tuple[int, float]]] = []
    for g in (g1, g2):
        local = local_clustering(g)
        acc: dict[int, tuple[int, float]] = {}
        for rec, c in zip(g.nodes, local):
            b = _degree_bin(len(rec.neighbors))
            count, tot = acc.get(b, (0, 0.0))
            acc[b] = (count + 1, tot + float(c))
        stats.append(acc)
    pooled = g1.num_nodes + g2.num_nodes
    gap = 0.0
    for b in sorted(set(stats[0]) | set(stats[1])):
        in1 = stats[0].get(b)
        in2 = stats[1].get(b)
        weight = ((in1[0] if in1 else 0) + (in2[0] if in2 else 0)) / pooled
        if in1 and in2:
            gap += weight * abs(in1[1] / in1[0] - in2[1] / in2[0])
    return 1.0 - gap


def label_homogeneity_matrix(g: TextAttributedGraph) -> np.ndarray:
    """Symmetric label pair incidence: entry (a, b) is the fraction of edge
    mass joining labels a and b; all entries sum to one."""
    if g.num_edges == 0:
        raise ValueError("label homogeneity undefined for an edgeless graph")
    c = g.class_count
    h = np.zeros((c, c))
    m = g.num_edges
    for u, v in g.edges():
        a, b = g.node(u).label, g.node(v).label
        if a == b:
            h[a, a] += 1.0 / m
        else:
            h[a, b] += 0.5 / m
            h[b, a] += 0.5 / m
    return h


def label_homogeneity_similarity(g1: TextAttributedGraph, g2: TextAttributedGraph) -> float:
    """Total-variation overlap between the two label-pair distributions."""
    if g1.class_count != g2.class_count:
        raise ValueError("graphs must share a class count")
    h1 = label_homogeneity_matrix(g1)
    h2 = label_homogeneity_matrix(g2)
    return float(1.0 - 0.5 * np.abs(h1 - h2).sum())


@dataclass(frozen=True)
class FeatureSimilarityReport:
    degree_ks: KSResult
    clustering_similarity: float
    label_homogeneity: float

    def to_dict(self) -> dict:
        return {
            "degree_ks": self.degree_ks.to_dict(),
            "clustering_similarity": self.clustering_similarity,
            "label_homogeneity": self.label_homogeneity,
        }


def feature_similarity_report(
    g1: TextAttributedGraph, g2: TextAttributedGraph) -> FeatureSimilarityReport:
    return FeatureSimilarityReport(
        degree_ks=ks_two_sample(degree_sequence(g1), degree_sequence(g2)),
        clustering_similarity=clustering_similarity(g1, g2),
        label_homogeneity=label_homogeneity_similarity(g1, g2),
    )


# subspace coherence ---------------------------------------------------------

@dataclass(frozen=True)
class PrincipalDirection:
    direction: np.ndarray
    objective: float
    iterations: int
    converged: bool


def _unit_rows(vectors) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("need a nonempty 2-d array of row vectors")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise ValueError("rows must have positive finite norm")
    return x / norms[:, None]


def _canonical_sign(u: np.ndarray) -> np.ndarray:
    for val in u:
        if abs(val) > 1e-12:
            return u if val > 0 else -u
    return u


def grassmann_objective(u: np.ndarray, vectors) -> float:
    """Sum of squared principal angles between u and each row vector."""
    x = _unit_rows(vectors)
    u = np.asarray(u, dtype=np.float64)
    u = u / np.linalg.norm(u)
    cosines = np.clip(np.abs(x @ u), 0.0, 1.0)
    return float((np.arccos(cosines) ** 2).sum())


def principal_direction(
    vectors,
    tol_radians: float = 1e-8,
    max_outer: int = 100,
    power_tol: float = 1e-10,
    power_max: int = 5000,
) -> PrincipalDirection:
    """Direction minimizing the sum of squared angles to the given vectors.

    Iteratively reweighted scheme: each round weights every vector by
    arccos(|u.x|) / sqrt(1 - (u.x)^2) (limit 1 as the angle vanishes), builds
    the weighted second-moment matrix, and power-iterates to its dominant
    eigenvector. Starts from the normalized mean. The objective is monitored
    and must never increase; a numerical increase beyond 1e-9 raises.
    """
    x = _unit_rows(vectors)
    n, dim = x.shape
    mean = x.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-12:
        u = np.zeros(dim)
        u[0] = 1.0
    else:
        u = mean / norm
    u = _canonical_sign(u)
    f_prev = grassmann_objective(u, x)
    converged = False
    outer_done = 0
    for outer in range(1, max_outer + 1):
        outer_done = outer
        t = x @ u
        a = np.clip(np.abs(t), 0.0, 1.0)
        near_aligned = a > 1.0 - 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(near_aligned, 1.0, np.arccos(a) / np.sqrt(1.0 - a ** 2))
        m = x.T @ (x * w[:, None])
        v = u.copy()
        for _ in range(power_max):
            nxt = m @ v
            nxt_norm = float(np.linalg.norm(nxt))
            if nxt_norm < 1e-300:
                nxt = np.zeros(dim)
                nxt[0] = 1.0
                nxt_norm = 1.0
            nxt = nxt / nxt_norm
            if nxt @ v < 0:
                nxt = -nxt
            if float(np.abs(nxt - v).max()) < power_tol:
                v = nxt
                break
            v = nxt
        v = _canonical_sign(v)
        f_new = grassmann_objective(v, x)
        # the reweighted eigen-step can overshoot on spread-out clouds;
        # halve the move back toward the previous direction until the
        # objective stops increasing, preserving the monotone guarantee
        halved = 0
        while f_new > f_prev and halved < 50:
            blend = u + v if float(v @ u) >= 0.0 else u - v
            bn = float(np.linalg.norm(blend))
            if bn < 1e-300:
                v = u
                f_new = f_prev
                break
            v = _canonical_sign(blend / bn)
            f_new = grassmann_objective(v, x)
            halved += 1
        if f_new > f_prev + 1e-9:
            raise RuntimeError(
                f"coherence objective increased from {f_prev:.12f} to {f_new:.12f}")
        step = float(np.arccos(np.clip(abs(v @ u), 0.0, 1.0)))
        u = v
        f_prev = min(f_prev, f_new)
        if step < tol_radians:
            converged = True
            break
    return PrincipalDirection(direction=u, objective=f_prev,
                              iterations=outer_done, converged=converged)


def coherence_score(x, direction) -> float:
    """Closeness of one vector to the principal direction, in [0, 1]."""
    xv = np.asarray(x, dtype=np.float64)
    nx = float(np.linalg.norm(xv))
    if nx == 0.0:
        raise ValueError("cannot score a zero vector")
    u = np.asarray(direction, dtype=np.float64)
    u = u / np.linalg.norm(u)
    cos = float(np.clip(abs(xv @ u) / nx, 0.0, 1.0))
    return 1.0 - (2.0 / math.pi) * math.acos(cos)


@dataclass(frozen=True)
class CoherenceReport:
    scores: dict
    mean: float
    sample_std: float
    t_statistic: float | None
    degenerate: bool
    sample_size: int

    def to_dict(self) -> dict:
        return {
            "scores": dict(self.scores),
            "mean": self.mean,
            "sample_std": self.sample_std,
            "t_statistic": self.t_statistic,
            "degenerate": self.degenerate,
            "sample_size": self.sample_size,
        }


def coherence_statistics(scores: Mapping[str, float]) -> CoherenceReport:
    """One-sample t statistic of the scores against the 0.5 chance level.

    A zero-variance sample is flagged degenerate with no t value rather than
    dividing by zero.
    """
    if len(scores) < 2:
        raise ValueError("need at least two scores for a t statistic")
    vals = np.array([scores[k] for k in sorted(scores)], dtype=np.float64)
    mean = float(vals.mean())
    std = float(vals.std(ddof=1))
    if std == 0.0:
        return CoherenceReport(dict(scores), mean, 0.0, None, True, int(vals.size))
    t = (mean - 0.5) / (std / math.sqrt(vals.size))
    return CoherenceReport(dict(scores), mean, std, float(t), False, int(vals.size))


# human and algorithmic agreement --------------------------------------------

def pearson_correlation(x: Sequence[float], y: Sequence[float]) -> float:
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1 or xa.size < 2:
        raise ValueError("need two equal-length samples of at least two points")
    dx = xa - xa.mean()
    dy = ya - ya.mean()
    denom = math.sqrt(float((dx ** 2).sum()) * float((dy ** 2).sum()))
    if denom == 0.0:
        raise ValueError("correlation undefined under zero variance")
    return float((dx * dy).sum() / denom)


@dataclass(frozen=True)
class AgreementReport:
    t_score: float
    pearson_r: float | None
    degenerate: bool
    reviewers: int
    instances: int

    def to_dict(self) -> dict:
        return {
            "t_score": self.t_score,
            "pearson_r": self.pearson_r,
            "degenerate": self.degenerate,
            "reviewers": self.reviewers,
            "instances": self.instances,
        }


def human_algorithm_agreement(
    ratings: np.ndarray, algorithm_scores: Sequence[float]) -> AgreementReport:
    """Grand mean of reviewer ratings plus their correlation with the
    algorithmic scores; correlation is withheld when either side is constant.
    """
    r = np.asarray(ratings, dtype=np.float64)
    if r.ndim != 2 or r.size == 0:
        raise ValueError("ratings must be a nonempty reviewers-by-instances array")
    if np.any(r < 0.0) or np.any(r > 1.0):
        raise ValueError("ratings must lie in [0, 1]")
    scores = np.asarray(algorithm_scores, dtype=np.float64)
    if scores.shape != (r.shape[1],):
        raise ValueError("need one algorithmic score per rated instance")
    t_score = float(r.mean())
    per_instance = r.mean(axis=0)
    try:
        rho: float | None = pearson_correlation(per_instance, scores)
        degenerate = False
    except ValueError:
        rho = None
        degenerate = True
    return AgreementReport(
        t_score=t_score, pearson_r=rho, degenerate=degenerate,
        reviewers=int(r.shape[0]), instances=int(r.shape[1]))


def load_ratings_csv(path: str, sub_dimensions: int = 1) -> np.ndarray:
    """Read a reviewers-by-instances ratings table.

    With ``sub_dimensions`` above one, each instance occupies that many
    consecutive columns, which are averaged into the instance rating.
    """
    if sub_dimensions < 1:
        raise ValueError("sub_dimensions must be at least 1")
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or all(cell.strip() == "" for cell in row):
                continue
            try:
                vals = [float(cell) for cell in row]
            except ValueError:
                if line_no == 1:
                    continue  # header row
                raise ValueError(f"{path}:{line_no}: non-numeric rating")
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no rating rows found")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError(f"{path}: ragged rows")
    if width % sub_dimensions != 0:
        raise ValueError(
            f"{path}: {width} columns not divisible by {sub_dimensions} sub-dimensions")
    arr = np.array(rows, dtype=np.float64)
    if sub_dimensions > 1:
        arr = arr.reshape(arr.shape[0], width // sub_dimensions, sub_dimensions).mean(axis=2)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"{path}: ratings must lie in [0, 1]")
    return arr
