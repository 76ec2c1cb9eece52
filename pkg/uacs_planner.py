from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Mapping, Sequence

import numpy as np
from loguru import logger
from sklearn.cluster import KMeans

from metrics import normalized_edit_distance

DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 2.0
DEFAULT_SAMPLES_PER_CLUSTER = 8
DEFAULT_UNSTABLE_DELTA = 5


class PlanningError(ValueError):
    """Raised for sampling inputs the planner cannot work with"""


@dataclass(frozen=True)
class EmbeddingSet:
    vectors: np.ndarray
    ids: List[str]

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise PlanningError(f"embeddings must be a 2-D matrix, got shape {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise PlanningError("embeddings contain non-finite entries")
        if len(self.ids) != vectors.shape[0]:
            raise PlanningError(f"{len(self.ids)} ids for {vectors.shape[0]} embedding rows")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "ids", list(self.ids))

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def subset(self, ids: Sequence[str]) -> "EmbeddingSet":
        index = {sample_id: row for row, sample_id in enumerate(self.ids)}
        missing = [sample_id for sample_id in ids if sample_id not in index]
        if missing:
            raise PlanningError(f"no embedding for {missing[:5]}")
        return EmbeddingSet(self.vectors[[index[sample_id] for sample_id in ids]], list(ids))


@dataclass(frozen=True)
class ClusterAssignment:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    ids: List[str]

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def sizes(self) -> List[int]:
        return np.bincount(self.labels, minlength=self.k).tolist()

    def members(self, cluster: int) -> List[str]:
        return [sample_id for sample_id, label in zip(self.ids, self.labels) if label == cluster]


@dataclass(frozen=True)
class UncertaintyScore:
    scores: List[float]
    rollout_count: int
    sampled: List[List[str]] = field(default_factory=list)


@dataclass(frozen=True)
class SamplingPlan:
    allocations: List[int]
    budget: int
    alpha: float
    beta: float
    sizes: List[int]
    uncertainties: List[float]

    def to_json(self) -> dict:
        return {
            "clusters": [
                {"size": size, "uncertainty": score, "allocated": allocated}
                for size, score, allocated in zip(self.sizes, self.uncertainties, self.allocations)
            ],
            "budget": self.budget,
            "alpha": self.alpha,
            "beta": self.beta,
        }


def _inertia(vectors: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(np.sum((vectors - centroids[labels]) ** 2))


def _repair_empty_clusters(vectors: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> None:
    """Reseed each empty cluster with the point farthest from its centroid"""
    k = centroids.shape[0]
    for cluster in range(k):
        if np.any(labels == cluster):
            continue
        counts = np.bincount(labels, minlength=k)
        distances = np.sum((vectors - centroids[labels]) ** 2, axis=1)
        distances[counts[labels] <= 1] = -1.0
        farthest = int(np.argmax(distances))
        logger.debug(f"cluster {cluster} empty, reseeded from sample {farthest}")
        labels[farthest] = cluster
        centroids[cluster] = vectors[farthest]


def kmeans(embeddings: EmbeddingSet, k: int, seed: int = 0, max_iter: int = 300) -> ClusterAssignment:
    """
    Partition embeddings into k visual clusters

    k-means++ seeding from a seeded generator followed by Lloyd iterations
    until the assignment stops changing or max_iter is reached.

    Args:
        embeddings: M sample vectors with ids
        k: Number of clusters, 1 <= k <= M
        seed: Seed for the k-means++ initialization
        max_iter: Upper bound on Lloyd iterations

    Returns:
        ClusterAssignment with no empty cluster
    """
    m = len(embeddings)
    if k <= 0:
        raise PlanningError(f"k must be positive, got {k}")
    if k > m:
        raise PlanningError(f"k = {k} exceeds the number of samples ({m})")

    model = KMeans(
        n_clusters=k,
        init="k-means++",
        n_init=1,
        max_iter=max_iter,
        tol=0.0,
        random_state=seed,
        algorithm="lloyd",
    )
    labels = model.fit_predict(embeddings.vectors).astype(np.int64)
    centroids = np.array(model.cluster_centers_, dtype=np.float64)
    _repair_empty_clusters(embeddings.vectors, centroids, labels)
    inertia = _inertia(embeddings.vectors, centroids, labels)
    logger.info(f"k-means: k={k}, M={m}, iterations={model.n_iter_}, inertia={inertia:.6g}")
    return ClusterAssignment(centroids, labels, inertia, embeddings.ids)


def rollout_divergence(outputs: Sequence[str]) -> float:
    """Mean pairwise normalized edit distance between stochastic rollouts"""
    if len(outputs) < 2:
        raise PlanningError(f"need at least 2 rollouts to measure divergence, got {len(outputs)}")
    distances = [normalized_edit_distance(a, b) for a, b in combinations(outputs, 2)]
    return float(np.mean(distances))


def uncertainty(
    rollouts: Mapping[str, Sequence[str]],
    cluster: ClusterAssignment,
    samples_per_cluster: int = DEFAULT_SAMPLES_PER_CLUSTER,
    seed: int = 0,
) -> UncertaintyScore:
    """
    Per-cluster uncertainty from rollout divergence

    Up to samples_per_cluster members with rollouts are drawn uniformly
    without replacement from each cluster; S_i is the mean divergence of the
    drawn members.
    """
    rng = np.random.default_rng(seed)
    scores: List[float] = []
    sampled: List[List[str]] = []
    rollout_count = 0
    for index in range(cluster.k):
        candidates = [sample_id for sample_id in cluster.members(index) if sample_id in rollouts]
        if not candidates:
            logger.warning(f"cluster {index} has no rollouts; uncertainty set to 0")
            scores.append(0.0)
            sampled.append([])
            continue
        take = min(samples_per_cluster, len(candidates))
        picks = sorted(rng.choice(len(candidates), size=take, replace=False).tolist())
        chosen = [candidates[i] for i in picks]
        divergences = [rollout_divergence(rollouts[sample_id]) for sample_id in chosen]
        rollout_count += sum(len(rollouts[sample_id]) for sample_id in chosen)
        scores.append(float(np.mean(divergences)))
        sampled.append(chosen)
    return UncertaintyScore(scores, rollout_count, sampled)


def allocate(
    scores: Sequence[float],
    sizes: Sequence[int],
    budget: int,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
    redistribute: bool = False,
) -> SamplingPlan:
    """
    Split a sampling budget across clusters by polynomial uncertainty weight

    N_i = min(floor((S_i + alpha)^beta / sum_j (S_j + alpha)^beta * N_total), |C_i|)

    Args:
        scores: Per-cluster uncertainty S_i
        sizes: Per-cluster sample counts |C_i|
        budget: N_total
        alpha: Smoothing factor
        beta: Power factor
        redistribute: Hand out the budget left by floors and caps, heaviest clusters first

    Returns:
        SamplingPlan with sum(N_i) <= budget and N_i <= |C_i|
    """
    if isinstance(scores, UncertaintyScore):
        scores = scores.scores
    if len(scores) != len(sizes):
        raise PlanningError(f"{len(scores)} scores for {len(sizes)} clusters")
    if alpha < 0 or beta < 0 or budget < 0:
        raise PlanningError(f"alpha, beta and budget must be non-negative (got {alpha}, {beta}, {budget})")

    s = np.asarray(scores, dtype=np.float64)
    caps = np.asarray(sizes, dtype=np.int64)
    if s.size == 0:
        return SamplingPlan([], budget, alpha, beta, [], [])

    base = s + alpha
    if beta > 0 and np.all(base == 0):
        raise PlanningError("all (S_i + alpha) are zero; allocation weights are undefined")
    weights = base ** beta
    total = float(weights.sum())
    if not (total > 0 and np.isfinite(total)):
        raise PlanningError(f"allocation weights sum to {total}; cannot normalize")
    allocations = np.minimum(np.floor(weights * budget / total), caps).astype(np.int64)

    if redistribute:
        surplus = budget - int(allocations.sum())
        for index in np.argsort(-weights, kind="stable"):
            if surplus <= 0:
                break
            extra = min(surplus, int(caps[index] - allocations[index]))
            allocations[index] += extra
            surplus -= extra

    return SamplingPlan(
        allocations=allocations.tolist(),
        budget=budget,
        alpha=alpha,
        beta=beta,
        sizes=caps.tolist(),
        uncertainties=s.tolist(),
    )


def build_plan(
    embeddings: EmbeddingSet,
    rollouts: Mapping[str, Sequence[str]],
    k: int,
    budget: int,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
    seed: int = 0,
    samples_per_cluster: int = DEFAULT_SAMPLES_PER_CLUSTER,
    redistribute: bool = False,
) -> SamplingPlan:
    """kmeans -> uncertainty -> allocate with one seed for every random step"""
    assignment = kmeans(embeddings, k, seed=seed)
    score = uncertainty(rollouts, assignment, samples_per_cluster=samples_per_cluster, seed=seed)
    return allocate(score.scores, assignment.sizes(), budget, alpha, beta, redistribute)


def build_task_plans(
    embeddings: EmbeddingSet,
    rollouts: Mapping[str, Sequence[str]],
    tasks: Mapping[str, str],
    k: int,
    budget: int,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
    seed: int = 0,
    samples_per_cluster: int = DEFAULT_SAMPLES_PER_CLUSTER,
    redistribute: bool = False,
) -> Dict[str, SamplingPlan]:
    """
    One plan per task, each clustered and budgeted on its own

    Args:
        embeddings: Embeddings of every sample
        rollouts: Decoded rollouts per sample id
        tasks: Task name per sample id; samples without a task are skipped
        k: Clusters per task, reduced to the task size for small tasks
        budget: Samples to draw for each task

    Returns:
        Plans keyed by task name, in sorted task order
    """
    grouped: Dict[str, List[str]] = {}
    for sample_id in embeddings.ids:
        task = tasks.get(sample_id)
        if task is None:
            logger.warning(f"sample {sample_id} has no task; left out of planning")
            continue
        grouped.setdefault(task, []).append(sample_id)

    plans: Dict[str, SamplingPlan] = {}
    for task in sorted(grouped):
        members = grouped[task]
        task_k = min(k, len(members))
        if task_k < k:
            logger.warning(f"task {task} has {len(members)} samples; clustering with k={task_k}")
        plans[task] = build_plan(
            embeddings.subset(members), rollouts, task_k, budget, alpha, beta, seed, samples_per_cluster, redistribute
        )
    return plans


def flag_unstable(
    detections_low: Mapping[str, int],
    detections_high: Mapping[str, int],
    delta: int = DEFAULT_UNSTABLE_DELTA,
) -> List[str]:
    """
    Samples whose detection count drops sharply between the low and high threshold

    Args:
        detections_low: Detection count per sample at the low confidence threshold
        detections_high: Detection count per sample at the high confidence threshold
        delta: Minimum discrepancy (low - high) that marks a sample unstable

    Returns:
        Flagged sample ids in the order of detections_low
    """
    if delta <= 0:
        raise PlanningError(f"delta must be a positive integer, got {delta}")
    if set(detections_low) != set(detections_high):
        missing = sorted(set(detections_low) ^ set(detections_high))
        raise PlanningError(f"low/high detection counts cover different samples: {missing}")

    flagged = []
    for sample_id, low in detections_low.items():
        discrepancy = low - detections_high[sample_id]
        if discrepancy < 0:
            logger.warning(f"{sample_id}: more detections at the high threshold than the low one ({low} < {detections_high[sample_id]})")
            continue
        if discrepancy >= delta:
            flagged.append(sample_id)
    return flagged


def count_detections(confidences: Sequence[float], threshold: float) -> int:
    return int(np.count_nonzero(np.asarray(confidences, dtype=np.float64) >= threshold))


def flag_unstable_from_confidences(
    confidences: Mapping[str, Sequence[float]],
    low_threshold: float,
    high_threshold: float,
    delta: int = DEFAULT_UNSTABLE_DELTA,
) -> List[str]:
    """Dual-threshold mining over one detector's raw confidence scores per sample"""
    if low_threshold > high_threshold:
        raise PlanningError(f"low threshold {low_threshold} exceeds high threshold {high_threshold}")
    low: Dict[str, int] = {k: count_detections(v, low_threshold) for k, v in confidences.items()}
    high: Dict[str, int] = {k: count_detections(v, high_threshold) for k, v in confidences.items()}
    return flag_unstable(low, high, delta)
