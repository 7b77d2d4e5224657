"""
Clustering primitives used by the detectors and the GeoMed baseline.

DBSCAN and K-means run on scikit-learn; the geometric median is a plain
Weiszfeld iteration. Every function is a deterministic function of its inputs
(and seed, where one is taken).
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.cluster import DBSCAN, KMeans

from .exceptions import EmptyInput, TooFewPoints
from .rng import STREAM_TIEBREAK, rng_for
from .vecspace import GradientVector, count_distances, stack

logger = logging.getLogger(__name__)

NOISE = -1


@dataclass(frozen=True)
class ClusterAssignment:
    """Cluster id per input point (NOISE for unclustered points) and cluster count."""
    labels: Tuple[int, ...]
    k: int

    def members(self, label: int) -> List[int]:
        return [index for index, value in enumerate(self.labels) if value == label]

    def sizes(self) -> List[int]:
        return [len(self.members(label)) for label in range(self.k)]

    @property
    def noise(self) -> List[int]:
        return self.members(NOISE)


def _renumber(raw_labels) -> ClusterAssignment:
    """Renumber clusters in order of their lowest member index, keeping NOISE."""
    mapping = {}
    labels = []
    for value in (int(v) for v in raw_labels):
        if value == NOISE:
            labels.append(NOISE)
            continue
        if value not in mapping:
            mapping[value] = len(mapping)
        labels.append(mapping[value])
    return ClusterAssignment(labels=tuple(labels), k=len(mapping))


def pairwise_distances(points: Sequence[GradientVector]) -> np.ndarray:
    """Full Euclidean distance matrix; metered as n(n-1)/2 evaluations."""
    matrix = stack(points)
    count_distances(len(matrix) * (len(matrix) - 1) // 2)
    return cdist(matrix, matrix, metric='euclidean')


def dbscan(points: Sequence[GradientVector], eps: float, min_pts: int) -> ClusterAssignment:
    """
    Density-based clustering with Euclidean distance.

    A point is core when at least min_pts points (itself included) lie within
    eps. Cluster ids follow the lowest point index in each cluster.
    """
    if len(points) == 0:
        raise EmptyInput('DBSCAN needs at least one point')
    distances = pairwise_distances(points)
    model = DBSCAN(eps=eps, min_samples=min_pts, metric='precomputed')
    model.fit(distances)
    return _renumber(model.labels_)


def auto_eps(points: Sequence[GradientVector], min_pts: int, factor: float = 1.0) -> float:
    """
    k-distance heuristic: median distance from each point to its min_pts-th
    nearest neighbour (the point itself counts as the first), scaled by factor.
    """
    if len(points) < 2:
        raise TooFewPoints('auto_eps needs at least two points')
    distances = np.sort(pairwise_distances(points), axis=1)
    column = min(max(min_pts, 1) - 1, distances.shape[1] - 1)
    if column == 0:
        # min_pts=1 would always pick the point itself
        column = 1
    eps = float(np.median(distances[:, column])) * factor
    # sklearn rejects eps <= 0; identical points still cluster at distance 0
    return max(eps, np.finfo(np.float64).eps)


def _farthest_pair(distances: np.ndarray, seed: int) -> Tuple[int, int]:
    upper = np.triu(distances, k=1)
    widest = upper.max()
    candidates = np.argwhere(upper == widest)
    if len(candidates) > 1:
        pick = rng_for(seed, STREAM_TIEBREAK).integers(len(candidates))
    else:
        pick = 0
    first, second = candidates[pick]
    return int(first), int(second)


def kmeans2(points: Sequence[GradientVector], seed: int = 0) -> ClusterAssignment:
    """
    Lloyd's K-means with K=2, initialised at the farthest pair of points.

    The seed only breaks exact ties between equally distant pairs. When all
    points coincide a single cluster is returned.
    """
    if len(points) < 2:
        raise TooFewPoints('kmeans2 needs at least two points')
    matrix = stack(points)
    distances = pairwise_distances(points)
    if distances.max() == 0.0:
        return ClusterAssignment(labels=tuple(0 for _ in points), k=1)

    first, second = _farthest_pair(distances, seed)
    model = KMeans(
        n_clusters=2,
        init=matrix[[first, second]],
        n_init=1,
        max_iter=100,
        tol=0.0,
        algorithm='lloyd',
        random_state=seed,
    )
    model.fit(matrix)
    return _renumber(model.labels_)


def median_objective(candidate: GradientVector, points: Sequence[GradientVector]) -> float:
    """Sum of Euclidean distances from candidate to every point."""
    return float(np.linalg.norm(stack(points) - candidate, axis=1).sum())


def geometric_median(points: Sequence[GradientVector], tol: float = 1e-6,
                     max_iter: int = 200) -> GradientVector:
    """
    Weiszfeld iteration towards the point minimising the sum of distances.

    Starts at the mean; stops when an iterate moves less than tol or after
    max_iter steps. If an iterate lands on an input point that point is
    returned. The result never has a worse objective than the best input point.
    """
    if len(points) == 0:
        raise EmptyInput('Geometric median of an empty set')
    matrix = stack(points)
    if len(matrix) == 1:
        return matrix[0].copy()

    estimate = matrix.mean(axis=0)
    for _ in range(max_iter):
        distances = np.linalg.norm(matrix - estimate, axis=1)
        closest = int(np.argmin(distances))
        if distances[closest] < tol:
            return matrix[closest].copy()
        weights = 1.0 / distances
        updated = weights @ matrix / weights.sum()
        moved = np.linalg.norm(updated - estimate)
        estimate = updated
        if moved < tol:
            break

    objective = median_objective(estimate, matrix)
    input_objectives = [median_objective(row, matrix) for row in matrix]
    best = int(np.argmin(input_objectives))
    if input_objectives[best] <= objective:
        return matrix[best].copy()
    return estimate
