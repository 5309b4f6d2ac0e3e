"""One-hop clustering, silhouette-tuned k-means subclustering, and MMR picks.

The low-quality set is partitioned by visiting samples in a seeded-shuffle
order: each still-unassigned sample becomes a centroid and absorbs every
unassigned sample with cosine similarity >= threshold. Clusters large
enough are subclustered with k-means (k chosen by maximum mean silhouette)
and two representatives per subcluster are picked with an MMR score that
trades relevance to the subcluster mean against redundancy.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

ROLE_CENTROID = "centroid"
ROLE_SUBCLUSTER_CENTER = "subcluster_center"
ROLE_MMR_PICK = "mmr_pick"
ROLE_PASSTHROUGH = "passthrough"


class ClusterError(ValueError):
    """Raised for infeasible clustering inputs."""


@dataclass(frozen=True)
class OneHopCluster:
    centroid_id: str
    member_ids: tuple[str, ...]  # includes the centroid

    def __post_init__(self) -> None:
        if self.centroid_id not in self.member_ids:
            raise ClusterError(f"centroid {self.centroid_id!r} missing from members")


@dataclass(frozen=True)
class SubClustering:
    k: int
    labels: Mapping[str, int]
    mean_silhouette: float


@dataclass(frozen=True)
class ClusterRepresentatives:
    centroid_id: str
    picks: tuple[tuple[str, str], ...]  # (sample_id, role)


@dataclass(frozen=True)
class RepresentativeSet:
    clusters: tuple[ClusterRepresentatives, ...]

    def all_ids(self) -> list[str]:
        return [sid for cluster in self.clusters for sid, _ in cluster.picks]


def _derive_seed(seed: int, *parts) -> int:
    digest = hashlib.sha256(":".join([str(seed), *map(str, parts)]).encode()).digest()
    return int.from_bytes(digest[:8], "big")


def one_hop_cluster(
    embedded: Sequence,
    threshold: float = 0.9,
    seed: int = 0,
) -> list[OneHopCluster]:
    """Partition unit-norm embedded samples into one-hop clusters.

    Samples are visited in a seeded-shuffle order; each unassigned sample
    becomes a centroid and absorbs all still-unassigned samples whose
    cosine similarity to it is at least ``threshold``.
    """
    items = sorted(embedded, key=lambda e: e.sample_id)
    if not items:
        return []
    ids = [e.sample_id for e in items]
    X = np.stack([e.embedding for e in items])
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(items))
    assigned = np.zeros(len(items), dtype=bool)
    clusters: list[OneHopCluster] = []
    for idx in order:
        if assigned[idx]:
            continue
        sims = X @ X[idx]
        member_mask = (~assigned) & (sims >= threshold)
        member_mask[idx] = True
        members = np.flatnonzero(member_mask)
        assigned[members] = True
        clusters.append(
            OneHopCluster(
                centroid_id=ids[idx],
                member_ids=tuple(sorted(ids[i] for i in members)),
            )
        )
    return clusters


def silhouette(points: np.ndarray, labels: Sequence[int]) -> tuple[np.ndarray, float]:
    """Per-point silhouette coefficients and their arithmetic mean.

    Cohesion a(i) averages Euclidean distance to the point's own cluster
    (excluding itself); separation b(i) is the smallest mean distance to
    any other cluster; s(i) = (b - a) / max(a, b). Points in singleton
    clusters get s(i) = 0 by convention, as does the degenerate a = b = 0
    case.
    """
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    unique = np.unique(labels)
    if unique.size < 2:
        raise ClusterError("silhouette requires at least 2 clusters")
    n = points.shape[0]
    diff = points[:, None, :] - points[None, :, :]
    dists = np.sqrt((diff * diff).sum(axis=2))
    sums = np.stack([dists[:, labels == c].sum(axis=1) for c in unique], axis=1)
    sizes = np.array([(labels == c).sum() for c in unique])
    own = np.searchsorted(unique, labels)
    s = np.zeros(n)
    for i in range(n):
        size_own = sizes[own[i]]
        if size_own == 1:
            continue  # singleton convention: s = 0
        a = sums[i, own[i]] / (size_own - 1)
        other = [sums[i, c] / sizes[c] for c in range(unique.size) if c != own[i]]
        b = min(other)
        denom = max(a, b)
        s[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return s, float(s.mean())


def _kmeans_plus_plus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    first = int(rng.integers(n))
    centers[0] = X[first]
    closest = ((X - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[c] = X[idx]
        closest = np.minimum(closest, ((X - centers[c]) ** 2).sum(axis=1))
    return centers


def _assign(X: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return labels, d2


def _repair_empty(labels: np.ndarray, d2: np.ndarray, k: int) -> np.ndarray:
    """Give each empty cluster the farthest point of the largest cluster."""
    labels = labels.copy()
    for c in range(k):
        if (labels == c).any():
            continue
        sizes = np.bincount(labels, minlength=k)
        donor = int(sizes.argmax())
        candidates = np.flatnonzero(labels == donor)
        far = candidates[int(d2[candidates, donor].argmax())]
        labels[far] = c
    return labels


def _kmeans(
    X: np.ndarray,
    k: int,
    rng: np.random.Generator,
    n_init: int = 5,
    max_iter: int = 300,
) -> tuple[np.ndarray, float]:
    """Deterministic Lloyd k-means with k-means++ seeding and empty-cluster repair."""
    best_labels, best_inertia = None, np.inf
    for _ in range(n_init):
        centers = _kmeans_plus_plus(X, k, rng)
        labels = np.full(X.shape[0], -1)
        for _ in range(max_iter):
            new_labels, d2 = _assign(X, centers)
            new_labels = _repair_empty(new_labels, d2, k)
            if (new_labels == labels).all():
                break
            labels = new_labels
            centers = np.stack([X[labels == c].mean(axis=0) for c in range(k)])
        _, d2 = _assign(X, centers)
        inertia = float(d2[np.arange(X.shape[0]), labels].sum())
        if inertia < best_inertia:
            best_labels, best_inertia = labels, inertia
    return best_labels, best_inertia


def best_k_subcluster(
    member_ids: Sequence[str],
    vectors: np.ndarray,
    k_range: Sequence[int] | None = None,
    seed: int = 0,
) -> SubClustering:
    """Sweep k over [2, min(10, n-1)] and keep the maximum-mean-silhouette split."""
    n = len(member_ids)
    if n < 3:
        raise ClusterError(f"subclustering needs at least 3 members, got {n}")
    X = np.asarray(vectors, dtype=np.float64)
    if k_range is None:
        k_range = range(2, min(10, n - 1) + 1)
    best: tuple[float, int, np.ndarray] | None = None
    for k in k_range:
        if not 2 <= k <= n - 1:
            raise ClusterError(f"k={k} infeasible for {n} members")
        rng = np.random.default_rng(_derive_seed(seed, "kmeans", k))
        labels, _ = _kmeans(X, k, rng)
        _, mean_s = silhouette(X, labels)
        if best is None or mean_s > best[0]:
            best = (mean_s, k, labels)
    mean_s, k, labels = best
    return SubClustering(
        k=k,
        labels={member_ids[i]: int(labels[i]) for i in range(n)},
        mean_silhouette=mean_s,
    )


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def mmr_select(
    member_ids: Sequence[str],
    vectors: np.ndarray,
    alpha: float = 0.2,
    num_reps: int = 2,
) -> list[str]:
    """Pick ``num_reps`` representatives by MMR scoring.

    The first pick maximizes cosine similarity to the componentwise mean;
    each later pick maximizes alpha * Sim(c, mean) - (1 - alpha) *
    max_{s selected} Sim(c, s). Ties break toward the ascending id.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ClusterError(f"alpha must lie in [0, 1]: {alpha}")
    n = len(member_ids)
    if n < 3:
        raise ClusterError(f"MMR selection needs at least 3 members, got {n}")
    X = np.asarray(vectors, dtype=np.float64)
    r_avg = X.mean(axis=0)
    order = sorted(range(n), key=lambda i: member_ids[i])
    relevance = np.array([_cosine(X[i], r_avg) for i in range(n)])

    def argbest(scores: Mapping[int, float]) -> int:
        return max(
            scores,
            key=lambda i: (scores[i], -order.index(i)),
        )

    remaining = set(range(n))
    first = argbest({i: relevance[i] for i in remaining})
    selected = [first]
    remaining.discard(first)
    while len(selected) < min(num_reps, n) and remaining:
        scores = {}
        for i in remaining:
            redundancy = max(_cosine(X[i], X[j]) for j in selected)
            scores[i] = alpha * relevance[i] - (1.0 - alpha) * redundancy
        pick = argbest(scores)
        selected.append(pick)
        remaining.discard(pick)
    return [member_ids[i] for i in selected]


def select_representatives(
    clusters: Sequence[OneHopCluster],
    embeddings: Mapping[str, np.ndarray],
    alpha: float = 0.2,
    seed: int = 0,
    num_reps: int = 2,
) -> RepresentativeSet:
    """Choose representative corpora per one-hop cluster.

    The cluster centroid is always kept and removed from the pool. With
    three or more remaining members the pool is subclustered; when the
    split yields at least two subclusters all of size >= 3, each
    subcluster contributes ``num_reps`` MMR picks. Any other shape passes
    all remaining members through unchanged.
    """
    out: list[ClusterRepresentatives] = []
    for cluster_index, cluster in enumerate(clusters):
        picks: list[tuple[str, str]] = [(cluster.centroid_id, ROLE_CENTROID)]
        rest = [m for m in cluster.member_ids if m != cluster.centroid_id]
        if len(rest) < 3:
            picks.extend((m, ROLE_PASSTHROUGH) for m in rest)
            out.append(ClusterRepresentatives(cluster.centroid_id, tuple(picks)))
            continue
        vectors = np.stack([embeddings[m] for m in rest])
        sub = best_k_subcluster(rest, vectors, seed=_derive_seed(seed, "sub", cluster_index))
        by_label: dict[int, list[str]] = {}
        for member, label in sub.labels.items():
            by_label.setdefault(label, []).append(member)
        n_subclusters = len(by_label)
        min_size = min(len(v) for v in by_label.values())
        if n_subclusters >= 2 and min_size >= 3:
            for label in sorted(by_label):
                members = sorted(by_label[label])
                sub_vectors = np.stack([embeddings[m] for m in members])
                chosen = mmr_select(members, sub_vectors, alpha=alpha, num_reps=num_reps)
                roles = [ROLE_SUBCLUSTER_CENTER] + [ROLE_MMR_PICK] * (len(chosen) - 1)
                picks.extend(zip(chosen, roles))
        else:
            picks.extend((m, ROLE_PASSTHROUGH) for m in rest)
        out.append(ClusterRepresentatives(cluster.centroid_id, tuple(picks)))
    rep_ids = [sid for c in out for sid, _ in c.picks]
    if len(rep_ids) != len(set(rep_ids)):
        raise ClusterError("duplicate representative ids across clusters")
    return RepresentativeSet(clusters=tuple(out))
