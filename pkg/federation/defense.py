"""
MUD-HoG: multi-type attacker and unreliable-client detection from gradient history

After a warm-up of tau0 rounds the server runs four detectors in a fixed
order, each on the survivors of the previous one:

    sign flip (short HoG, cosine to median)
    additive noise (DBSCAN on short HoG, Euclidean gap to the big group)
    targeted (2-means on long HoG, validity-gated)
    unreliable (short HoG, cosine gap to median)

Malicious labels held for confirm_rounds consecutive rounds become firm and
the client is dropped for the rest of the run. Unreliable clients stay in the
aggregate at weight alpha.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from django.db import models

from core.clustering import auto_eps, dbscan, kmeans2
from core.exceptions import DimensionMismatch
from core.vecspace import (
    GradientVector, coordinate_median, cosine, euclidean, gap_boundary, metered_stage,
    minority_gap_boundary,
)
from learning.network import ModelParams

from .hog import HistoryStore

logger = logging.getLogger(__name__)


class Label(models.TextChoices):
    NORMAL = 'normal', 'Normal'
    UNRELIABLE = 'unreliable', 'Unreliable'
    SIGN_FLIP = 'sign_flip', 'Sign flip'
    ADDITIVE_NOISE = 'additive_noise', 'Additive noise'
    TARGETED = 'targeted', 'Targeted'


MALICIOUS_LABELS = frozenset({Label.SIGN_FLIP, Label.ADDITIVE_NOISE, Label.TARGETED})


def super_class(label: Label) -> Optional[str]:
    if label in (Label.SIGN_FLIP, Label.ADDITIVE_NOISE):
        return 'untargeted'
    if label == Label.TARGETED:
        return 'targeted'
    return None


@dataclass(frozen=True)
class DefenseConfig:
    window: int = 3
    tau0: int = 3
    alpha: float = 0.5
    min_gap_unreliable: float = 0.1
    kmeans_validity_kappa: float = 2.0
    kmeans_min_cluster: int = 2
    noise_margin: float = 2.0
    dbscan_min_pts: int = 2
    dbscan_eps_factor: float = 1.0
    confirm_rounds: int = 2
    literal_eq3_weights: bool = False

    def __post_init__(self):
        if self.window < 1:
            raise ValueError('window (l) must be at least 1')
        if self.tau0 < self.window:
            raise ValueError('tau0 must be at least the window size l')
        if not 0 < self.alpha < 1:
            raise ValueError('alpha must lie strictly between 0 and 1')
        if self.confirm_rounds < 1:
            raise ValueError('confirm_rounds must be at least 1')
        if self.min_gap_unreliable < 0 or self.kmeans_validity_kappa < 0:
            raise ValueError('min_gap_unreliable and kmeans_validity_kappa must be non-negative')
        if self.dbscan_min_pts < 1 or self.dbscan_eps_factor <= 0:
            raise ValueError('dbscan_min_pts must be >= 1 and dbscan_eps_factor > 0')
        if self.kmeans_min_cluster < 1 or self.noise_margin < 0:
            raise ValueError('kmeans_min_cluster must be >= 1 and noise_margin non-negative')


@dataclass(frozen=True)
class RoundVerdict:
    """
    Outcome of one MUD-HoG round.

    `labels` covers every client: tentative labels for clients still under
    observation, the confirming label for firm ones. `scores` keeps the
    per-client quantities the detectors thresholded on, for the verdict log.
    """
    round_number: int
    labels: Mapping[int, Label]
    firm_malicious: frozenset
    first_detection: Mapping[int, int]
    firm_round: Mapping[int, int]
    weights: Mapping[int, float] = field(default_factory=dict)
    scores: Mapping[int, Mapping[str, float]] = field(default_factory=dict)
    warmup: bool = False
    no_participants: bool = False

    def clients_with(self, label: Label) -> Set[int]:
        return {c for c, value in self.labels.items() if value == label}


Scores = Dict[int, Dict[str, float]]


def _note(scores: Optional[Scores], client_id: int, key: str, value: float):
    if scores is not None:
        scores.setdefault(client_id, {})[key] = float(value)


def _is_zero(vector: GradientVector) -> bool:
    return not np.any(vector)


# Detectors

def detect_sign_flip(short_hogs: Mapping[int, GradientVector], active: Sequence[int],
                     scores: Optional[Scores] = None) -> Set[int]:
    """Clients whose short HoG points away from the coordinate median (cos < 0)."""
    active = list(active)
    if not active:
        return set()
    with metered_stage('sign_flip'):
        median = coordinate_median([short_hogs[c] for c in active])
        zero_norm = {c for c in active if _is_zero(short_hogs[c])}
        if _is_zero(median):
            logger.warning('Median short HoG is zero; flagging only zero-norm updates')
            return zero_norm
        flagged = set(zero_norm)
        for client_id in active:
            if client_id in zero_norm:
                continue
            similarity = cosine(median, short_hogs[client_id])
            _note(scores, client_id, 'sign_flip_cos', similarity)
            if similarity < 0:
                flagged.add(client_id)
    return flagged


def split_groups(short_hogs: Mapping[int, GradientVector], active: Sequence[int],
                 cfg: DefenseConfig) -> Tuple[list, list]:
    """
    DBSCAN the short HoGs into (g_h, g_l): the largest cluster, and every
    other cluster plus noise. Both are empty when DBSCAN finds no cluster.
    """
    active = list(active)
    if len(active) < 2:
        return active, []
    points = [short_hogs[c] for c in active]
    # Grouping is the one pairwise step; it is metered apart from the detectors
    with metered_stage('grouping'):
        eps = auto_eps(points, cfg.dbscan_min_pts, cfg.dbscan_eps_factor)
        assignment = dbscan(points, eps=eps, min_pts=cfg.dbscan_min_pts)
    if assignment.k == 0:
        logger.debug('DBSCAN found only noise among %d clients', len(active))
        return [], []
    sizes = assignment.sizes()
    largest = int(np.argmax(sizes))
    high = [active[i] for i in assignment.members(largest)]
    low = [c for c in active if c not in set(high)]
    logger.debug('DBSCAN eps=%.4g: %d clusters, g_h=%d, g_l=%d', eps, assignment.k, len(high), len(low))
    return high, low


def detect_additive_noise(short_hogs: Mapping[int, GradientVector], active: Sequence[int],
                          cfg: DefenseConfig, scores: Optional[Scores] = None) -> Tuple[Set[int], Set[int]]:
    """
    Returns (flagged, residual): g_l members beyond the largest-gap boundary
    of their distances to the g_h median are flagged; the rest of g_l is
    residual and goes on to the later detectors.

    A flagged member must also lie farther out than noise_margin times the
    g_h radius (the largest g_h distance to that median). An honest client
    that DBSCAN leaves out sits just past the benign group's edge; injected
    noise puts the client well beyond it.
    """
    high, low = split_groups(short_hogs, active, cfg)
    if not high or not low:
        return set(), set()
    with metered_stage('additive_noise'):
        median = coordinate_median([short_hogs[c] for c in high])
        radius = max(euclidean(median, short_hogs[c]) for c in high)
        distances = {c: euclidean(median, short_hogs[c]) for c in low}
    for client_id, distance in distances.items():
        _note(scores, client_id, 'noise_distance', distance)
    boundary = gap_boundary(distances.values(), 0.0)
    if boundary is None:
        return set(), set(low)
    floor = cfg.noise_margin * radius
    beyond = {c for c, d in distances.items() if d > boundary}
    flagged = {c for c in beyond if distances[c] > floor}
    if beyond - flagged:
        logger.debug('Additive noise: %s past the gap but within %.4g of the g_h median',
                     sorted(beyond - flagged), floor)
    return flagged, set(low) - flagged


def detect_targeted(long_hogs: Mapping[int, GradientVector], active: Sequence[int],
                    cfg: DefenseConfig, seed: int = 0) -> Set[int]:
    """
    2-means on long HoGs; the strictly smaller cluster is flagged when it has
    at least kmeans_min_cluster members and the centroids are at least kappa
    times the wider of the two clusters' mean spreads apart.

    A single non-IID honest client easily forms a far-off cluster of one;
    targeted attackers collude, so a lone outlier is never flagged by default.
    """
    active = list(active)
    if len(active) < 2:
        return set()
    points = [long_hogs[c] for c in active]
    with metered_stage('grouping'):
        assignment = kmeans2(points, seed=seed)
    if assignment.k < 2:
        return set()
    first, second = assignment.members(0), assignment.members(1)
    if len(first) == len(second):
        return set()
    small, large = (first, second) if len(first) < len(second) else (second, first)
    if len(small) < cfg.kmeans_min_cluster:
        logger.debug('2-means split off %d client(s), fewer than %d', len(small), cfg.kmeans_min_cluster)
        return set()

    small_centroid = np.mean([points[i] for i in small], axis=0)
    large_centroid = np.mean([points[i] for i in large], axis=0)
    with metered_stage('targeted'):
        separation = euclidean(small_centroid, large_centroid)
        spread = max(
            float(np.mean([euclidean(points[i], large_centroid) for i in large])),
            float(np.mean([euclidean(points[i], small_centroid) for i in small])),
        )
    valid = separation > 0 and separation >= cfg.kmeans_validity_kappa * spread
    logger.debug('2-means split %d/%d, separation %.4g vs spread %.4g (%s)',
                 len(small), len(large), separation, spread, 'valid' if valid else 'rejected')
    if not valid:
        return set()
    return {active[i] for i in small}


def flag_below_boundary(values: Mapping[int, float], min_gap: float) -> Set[int]:
    """Clients below the widest gap that leaves a strict minority underneath."""
    boundary = minority_gap_boundary(values.values(), min_gap)
    if boundary is None:
        return set()
    return {c for c, value in values.items() if value < boundary}


def detect_unreliable(short_hogs: Mapping[int, GradientVector], active: Sequence[int],
                      cfg: DefenseConfig, scores: Optional[Scores] = None) -> Set[int]:
    """
    Clients on the low-cosine side of the largest gap wider than min_gap,
    among the cuts that leave a strict minority below. The majority that
    defines the median is never labelled unreliable.
    """
    active = list(active)
    if len(active) < 2:
        return set()
    with metered_stage('unreliable'):
        median = coordinate_median([short_hogs[c] for c in active])
        if _is_zero(median):
            return set()
        similarities = {}
        for client_id in active:
            vector = short_hogs[client_id]
            similarities[client_id] = -1.0 if _is_zero(vector) else cosine(median, vector)
            _note(scores, client_id, 'unreliable_cos', similarities[client_id])
    return flag_below_boundary(similarities, cfg.min_gap_unreliable)


# Firm decisions

class VerdictTracker:
    """
    Consecutive-round bookkeeping of malicious labels. Streaks are kept per
    super-class, so a sign-flip label followed by an additive-noise label
    still counts as two consecutive untargeted rounds.
    """

    def __init__(self, confirm_rounds: int):
        self.confirm_rounds = confirm_rounds
        self.firm: Dict[int, Label] = {}
        self.first_detection: Dict[int, int] = {}
        self.firm_round: Dict[int, int] = {}
        self._streaks: Dict[int, Tuple[str, int, int, int]] = {}

    @property
    def firm_malicious(self) -> frozenset:
        return frozenset(self.firm)

    def observe(self, round_number: int, labels: Mapping[int, Label]) -> Set[int]:
        """Update streaks with this round's tentative labels; return newly firm clients."""
        newly_firm = set()
        for client_id, label in labels.items():
            if client_id in self.firm:
                continue
            group = super_class(label)
            if group is None:
                self._streaks.pop(client_id, None)
                continue
            previous = self._streaks.get(client_id)
            if previous and previous[0] == group and previous[3] == round_number - 1:
                streak = (group, previous[1], previous[2] + 1, round_number)
            else:
                streak = (group, round_number, 1, round_number)
            self._streaks[client_id] = streak
            if streak[2] >= self.confirm_rounds:
                self.firm[client_id] = label
                self.first_detection[client_id] = streak[1]
                self.firm_round[client_id] = round_number
                del self._streaks[client_id]
                newly_firm.add(client_id)
        return newly_firm


# Aggregation

def weighted_aggregate(updates: Mapping[int, GradientVector], data_sizes: Mapping[int, int],
                       participants: Iterable[int], unreliable: Iterable[int], alpha: float,
                       denominator: Optional[float] = None) -> Tuple[GradientVector, Dict[int, float]]:
    """
    sum_i w_i g_i with w_i = |D_i| / denominator, scaled by alpha for
    unreliable clients. The denominator defaults to the participants' total
    data size.
    """
    participants = sorted(participants)
    unreliable = set(unreliable)
    dim = len(next(iter(updates.values())))
    if not participants:
        return np.zeros(dim), {}
    if denominator is None:
        denominator = float(sum(data_sizes[c] for c in participants))
    aggregate = np.zeros(dim)
    weights = {}
    for client_id in participants:
        weight = data_sizes[client_id] / denominator
        if client_id in unreliable:
            weight *= alpha
        weights[client_id] = weight
        aggregate += weight * updates[client_id]
    return aggregate, weights


def global_update(params: ModelParams, aggregate, eta_server: float = 1.0) -> ModelParams:
    """w <- w - eta * aggregate."""
    aggregate = np.asarray(aggregate, dtype=np.float64)
    if aggregate.shape != (params.spec.param_count,):
        raise DimensionMismatch(f'Aggregate of shape {aggregate.shape} for {params.spec.param_count} parameters')
    return ModelParams.unflatten(params.spec, params.flatten() - eta_server * aggregate)


def mudhog_round(histories: HistoryStore, tracker: VerdictTracker, updates: Mapping[int, GradientVector],
                 data_sizes: Mapping[int, int], round_number: int, cfg: DefenseConfig,
                 seed: int = 0) -> Tuple[RoundVerdict, GradientVector]:
    """
    Record this round's updates, run the detector pipeline and aggregate.

    Firm-malicious clients are neither recorded nor examined. A client that
    turns firm this round is already left out of this round's aggregate.
    """
    if round_number < 1:
        raise ValueError('Rounds are numbered from 1')
    clients = sorted(updates)
    active = [c for c in clients if c not in tracker.firm]
    for client_id in active:
        histories.record(client_id, updates[client_id])

    total_size = float(sum(data_sizes[c] for c in clients))
    scores: Scores = {}

    if round_number <= cfg.tau0:
        labels = {c: Label.NORMAL for c in active}
        labels.update(tracker.firm)
        participants, unreliable = active, set()
        warmup = True
    else:
        warmup = False
        short_hogs = histories.short_hogs(active)
        long_hogs = histories.long_hogs(active)

        sign_flip = detect_sign_flip(short_hogs, active, scores)
        survivors = [c for c in active if c not in sign_flip]
        noise, residual = detect_additive_noise(short_hogs, survivors, cfg, scores)
        survivors = [c for c in survivors if c not in noise]
        targeted = detect_targeted(long_hogs, survivors, cfg, seed=seed + round_number)
        survivors = [c for c in survivors if c not in targeted]
        unreliable = detect_unreliable(short_hogs, survivors, cfg, scores)

        labels = {}
        for client_id in active:
            if client_id in sign_flip:
                labels[client_id] = Label.SIGN_FLIP
            elif client_id in noise:
                labels[client_id] = Label.ADDITIVE_NOISE
            elif client_id in targeted:
                labels[client_id] = Label.TARGETED
            elif client_id in unreliable:
                labels[client_id] = Label.UNRELIABLE
            else:
                labels[client_id] = Label.NORMAL
        logger.debug('Round %d tentative: SF=%s AN=%s (residual %s) TAR=%s UR=%s', round_number,
                      sorted(sign_flip), sorted(noise), sorted(residual), sorted(targeted), sorted(unreliable))

        for client_id in sorted(tracker.observe(round_number, labels)):
            logger.info('Round %d: client %d is firmly %s (first flagged in round %d)', round_number,
                        client_id, labels[client_id].value, tracker.first_detection[client_id])
        labels.update(tracker.firm)
        participants = [c for c in active if labels[c] in (Label.NORMAL, Label.UNRELIABLE)]

    aggregate, weights = weighted_aggregate(
        updates, data_sizes, participants, unreliable, cfg.alpha,
        denominator=total_size if cfg.literal_eq3_weights else None,
    )
    if not participants:
        logger.warning('Round %d: every client is excluded, the model is not updated', round_number)

    verdict = RoundVerdict(
        round_number=round_number,
        labels=labels,
        firm_malicious=tracker.firm_malicious,
        first_detection=dict(tracker.first_detection),
        firm_round=dict(tracker.firm_round),
        weights=weights,
        scores=scores,
        warmup=warmup,
        no_participants=not participants,
    )
    return verdict, aggregate


class MudHog:
    """Stateful MUD-HoG server: owns the history store and the verdict tracker."""

    def __init__(self, cfg: DefenseConfig = None, seed: int = 0):
        self.cfg = cfg or DefenseConfig()
        self.seed = seed
        self.histories = HistoryStore(self.cfg.window)
        self.tracker = VerdictTracker(self.cfg.confirm_rounds)

    @property
    def excluded(self) -> frozenset:
        return self.tracker.firm_malicious

    def round(self, round_number: int, updates, data_sizes) -> Tuple[RoundVerdict, GradientVector]:
        return mudhog_round(self.histories, self.tracker, updates, data_sizes, round_number, self.cfg, self.seed)
