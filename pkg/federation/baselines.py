"""
Benchmark aggregation rules and the aggregator registry

Functions here are stateless rules over one round's gradients. The
Aggregator classes wrap them behind one interface so the experiment driver
can swap rules by name; MUD-HoG and FoolsGold carry state across rounds.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.metrics.pairwise import cosine_similarity

from core.clustering import geometric_median
from core.exceptions import AggregationError, EmptyInput, TooFewClients
from core.vecspace import GradientVector, coordinate_median, stack

from .defense import DefenseConfig, MudHog, RoundVerdict, weighted_aggregate
from .hog import HistoryStore

logger = logging.getLogger(__name__)

FEDAVG = 'fedavg'
MEDIAN = 'median'
GEOMED = 'geomed'
KRUM = 'krum'
MULTI_KRUM = 'multi_krum'
FOOLSGOLD = 'foolsgold'
MUDHOG = 'mudhog'

AGGREGATOR_KINDS = (FEDAVG, MEDIAN, GEOMED, KRUM, MULTI_KRUM, FOOLSGOLD, MUDHOG)


# Aggregation rules

def fedavg(grads: Sequence[GradientVector], data_sizes: Sequence[int]) -> GradientVector:
    """sum_i (|D_i| / |D|) g_i"""
    matrix = stack(grads)
    sizes = np.asarray(data_sizes, dtype=np.float64)
    if sizes.shape != (matrix.shape[0],):
        raise AggregationError(f'{len(sizes)} data sizes for {matrix.shape[0]} gradients')
    return (sizes / sizes.sum()) @ matrix


def median_agg(grads: Sequence[GradientVector]) -> GradientVector:
    return coordinate_median(grads)


def geomed_agg(grads: Sequence[GradientVector], tol: float = 1e-6) -> GradientVector:
    if len(grads) == 0:
        raise EmptyInput('GeoMed of no gradients')
    return geometric_median(grads, tol=tol)


def krum_scores(grads: Sequence[GradientVector], f: int) -> np.ndarray:
    """Sum of squared distances from each gradient to its N - f - 2 nearest others."""
    n = len(grads)
    if f < 0:
        raise ValueError('f must be non-negative')
    if n < f + 3:
        raise TooFewClients(f'Krum with f={f} needs at least {f + 3} clients, got {n}')
    matrix = stack(grads)
    squared = cdist(matrix, matrix, metric='sqeuclidean')
    closest = n - f - 2
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(squared[i], i))
        scores[i] = others[:closest].sum()
    return scores


def krum(grads: Sequence[GradientVector], f: int) -> GradientVector:
    # argmin returns the lowest index on ties
    return np.array(grads[int(np.argmin(krum_scores(grads, f)))], dtype=np.float64)


def multi_krum(grads: Sequence[GradientVector], f: int, m_select: Optional[int] = None) -> GradientVector:
    n = len(grads)
    m_select = n - f - 2 if m_select is None else m_select
    if not 1 <= m_select <= n:
        raise ValueError(f'm_select must lie in [1, {n}], got {m_select}')
    order = np.argsort(krum_scores(grads, f), kind='stable')[:m_select]
    return stack([grads[i] for i in order]).mean(axis=0)


def foolsgold(long_histories: Sequence[GradientVector], epsilon: float = 1e-5,
              confidence: float = 1.0) -> np.ndarray:
    """
    Per-client weights in [0, 1] from pairwise cosine similarity of the
    clients' accumulated updates: max-similarity, pardoning, logit.
    """
    n = len(long_histories)
    if n < 2:
        raise TooFewClients('FoolsGold needs at least two clients')
    similarity = cosine_similarity(stack(long_histories)) - np.eye(n)
    max_similarity = np.max(similarity, axis=1) + epsilon

    for i in range(n):
        for j in range(n):
            if i != j and max_similarity[i] < max_similarity[j]:
                similarity[i, j] *= max_similarity[i] / max_similarity[j]

    weights = 1.0 - np.max(similarity, axis=1)
    weights = np.clip(weights, 0.0, 1.0)
    weights = weights / np.max(weights) if np.max(weights) > 0 else weights
    weights[weights == 1.0] = 0.99

    with np.errstate(divide='ignore'):
        weights = confidence * (np.log(weights / (1.0 - weights)) + 0.5)
    weights[np.isinf(weights) & (weights > 0)] = 1.0
    weights[np.isinf(weights) | (weights < 0)] = 0.0
    weights[weights > 1.0] = 1.0
    return weights


# Aggregators

@dataclass(frozen=True)
class AggregationResult:
    aggregate: GradientVector
    weights: Mapping[int, float]
    verdict: Optional[RoundVerdict] = None
    no_participants: bool = False


@dataclass(frozen=True)
class AggregatorSettings:
    kind: str = MUDHOG
    krum_f: Optional[int] = None
    multi_krum_m: Optional[int] = None
    foolsgold_confidence: float = 1.0
    geomed_tol: float = 1e-6

    def resolved_f(self, n_clients: int) -> int:
        return int(0.2 * n_clients) if self.krum_f is None else self.krum_f


class Aggregator:
    kind = ''
    excluded = frozenset()

    def aggregate(self, round_number: int, updates: Mapping[int, GradientVector],
                  data_sizes: Mapping[int, int]) -> AggregationResult:
        raise NotImplementedError


def _uniform(client_ids, chosen=None) -> Dict[int, float]:
    chosen = client_ids if chosen is None else chosen
    return {c: (1.0 / len(chosen) if c in chosen else 0.0) for c in client_ids}


class FedAvgAggregator(Aggregator):
    kind = FEDAVG

    def aggregate(self, round_number, updates, data_sizes):
        clients = sorted(updates)
        aggregate, weights = weighted_aggregate(updates, data_sizes, clients, (), alpha=1.0)
        return AggregationResult(aggregate=aggregate, weights=weights)


class MedianAggregator(Aggregator):
    kind = MEDIAN

    def aggregate(self, round_number, updates, data_sizes):
        clients = sorted(updates)
        return AggregationResult(aggregate=median_agg([updates[c] for c in clients]), weights={})


class GeoMedAggregator(Aggregator):
    kind = GEOMED

    def __init__(self, tol: float = 1e-6):
        self.tol = tol

    def aggregate(self, round_number, updates, data_sizes):
        clients = sorted(updates)
        return AggregationResult(aggregate=geomed_agg([updates[c] for c in clients], self.tol), weights={})


class KrumAggregator(Aggregator):
    kind = KRUM

    def __init__(self, f: int):
        self.f = f

    def aggregate(self, round_number, updates, data_sizes):
        clients = sorted(updates)
        grads = [updates[c] for c in clients]
        chosen = clients[int(np.argmin(krum_scores(grads, self.f)))]
        return AggregationResult(aggregate=np.array(updates[chosen], dtype=np.float64),
                                 weights=_uniform(clients, {chosen}))


class MultiKrumAggregator(Aggregator):
    kind = MULTI_KRUM

    def __init__(self, f: int, m_select: Optional[int] = None):
        self.f = f
        self.m_select = m_select

    def aggregate(self, round_number, updates, data_sizes):
        clients = sorted(updates)
        grads = [updates[c] for c in clients]
        m_select = len(clients) - self.f - 2 if self.m_select is None else self.m_select
        order = np.argsort(krum_scores(grads, self.f), kind='stable')[:m_select]
        chosen = {clients[i] for i in order}
        return AggregationResult(aggregate=multi_krum(grads, self.f, m_select),
                                 weights=_uniform(clients, chosen))


class FoolsGoldAggregator(Aggregator):
    kind = FOOLSGOLD

    def __init__(self, confidence: float = 1.0):
        self.confidence = confidence
        self.histories = HistoryStore(window=1)

    def aggregate(self, round_number, updates, data_sizes):
        clients = sorted(updates)
        for client_id in clients:
            update = np.asarray(updates[client_id], dtype=np.float64)
            norm = np.linalg.norm(update)
            self.histories.record(client_id, update / norm if norm > 1 else update)
        long_histories = self.histories.long_hogs(clients)
        weights = foolsgold([long_histories[c] for c in clients], confidence=self.confidence)
        total = float(weights.sum())
        if total == 0.0:
            logger.warning('Round %d: FoolsGold gave every client zero weight', round_number)
            return AggregationResult(aggregate=np.zeros_like(updates[clients[0]], dtype=np.float64),
                                     weights={c: 0.0 for c in clients}, no_participants=True)
        aggregate = sum(w * np.asarray(updates[c], dtype=np.float64) for c, w in zip(clients, weights)) / total
        return AggregationResult(aggregate=aggregate,
                                 weights={c: float(w) / total for c, w in zip(clients, weights)})


class MudHogAggregator(Aggregator):
    kind = MUDHOG

    def __init__(self, cfg: DefenseConfig, seed: int = 0):
        self.server = MudHog(cfg, seed=seed)

    @property
    def excluded(self):
        return self.server.excluded

    def aggregate(self, round_number, updates, data_sizes):
        verdict, aggregate = self.server.round(round_number, updates, data_sizes)
        return AggregationResult(aggregate=aggregate, weights=dict(verdict.weights), verdict=verdict,
                                 no_participants=verdict.no_participants)


def build_aggregator(settings: AggregatorSettings, n_clients: int,
                     defense: Optional[DefenseConfig] = None, seed: int = 0) -> Aggregator:
    kind = settings.kind
    if kind == FEDAVG:
        return FedAvgAggregator()
    if kind == MEDIAN:
        return MedianAggregator()
    if kind == GEOMED:
        return GeoMedAggregator(tol=settings.geomed_tol)
    if kind == KRUM:
        return KrumAggregator(settings.resolved_f(n_clients))
    if kind == MULTI_KRUM:
        return MultiKrumAggregator(settings.resolved_f(n_clients), settings.multi_krum_m)
    if kind == FOOLSGOLD:
        return FoolsGoldAggregator(confidence=settings.foolsgold_confidence)
    if kind == MUDHOG:
        return MudHogAggregator(defense or DefenseConfig(), seed=seed)
    raise ValueError(f'Unknown aggregator {kind!r}; choose one of {", ".join(AGGREGATOR_KINDS)}')
