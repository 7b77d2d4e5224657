"""
Dense vector primitives for gradient analysis

Gradient vectors are flat float64 numpy arrays over all model parameters.
This module holds the distance, similarity, median and boundary helpers that
every detector and aggregator is built from, plus an opt-in meter that counts
distance evaluations per named stage.
"""

import threading
from collections import Counter
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Iterable, Optional, Sequence

import numpy as np
import numpy.typing as npt

from .exceptions import DimensionMismatch, EmptyInput, NonFiniteVector, ZeroVector

GradientVector = npt.NDArray[np.float64]


def as_gradient(values) -> GradientVector:
    """Coerce values to a flat float64 vector, rejecting NaN/inf entries."""
    vector = np.asarray(values, dtype=np.float64).reshape(-1)
    if vector.size == 0:
        raise EmptyInput('A gradient vector needs at least one entry')
    if not np.all(np.isfinite(vector)):
        raise NonFiniteVector('Gradient vector contains NaN or infinite entries')
    return vector


def stack(vectors: Sequence[GradientVector]) -> np.ndarray:
    """Stack vectors into an (n, dim) matrix after checking they share dim."""
    if len(vectors) == 0:
        raise EmptyInput('Cannot stack an empty collection of vectors')
    dim = np.shape(vectors[0])[-1]
    for vector in vectors:
        if np.shape(vector)[-1] != dim:
            raise DimensionMismatch(f'Expected dim {dim}, got {np.shape(vector)[-1]}')
    return np.vstack([np.asarray(v, dtype=np.float64).reshape(1, -1) for v in vectors])


# Distance metering

class DistanceMeter:
    """Counts distance evaluations, keyed by the stage that performed them."""

    def __init__(self):
        self.counts = Counter()
        self._lock = threading.Lock()

    def add(self, stage: str, amount: int = 1):
        with self._lock:
            self.counts[stage] += amount

    @property
    def total(self) -> int:
        return sum(self.counts.values())


_active_meter: ContextVar[Optional[DistanceMeter]] = ContextVar('distance_meter', default=None)
_active_stage: ContextVar[str] = ContextVar('distance_stage', default='unstaged')


@contextmanager
def distance_meter():
    """Count every metered distance evaluation made inside the block."""
    meter = DistanceMeter()
    token = _active_meter.set(meter)
    try:
        yield meter
    finally:
        _active_meter.reset(token)


@contextmanager
def metered_stage(name: str):
    token = _active_stage.set(name)
    try:
        yield
    finally:
        _active_stage.reset(token)


def count_distances(amount: int = 1):
    """Charge amount distance evaluations to the current stage, if metering."""
    meter = _active_meter.get()
    if meter is not None:
        meter.add(_active_stage.get(), amount)


# Distances

def _check_dims(a: GradientVector, b: GradientVector):
    if a.shape != b.shape:
        raise DimensionMismatch(f'Vector shapes differ: {a.shape} vs {b.shape}')


def cosine(a: GradientVector, b: GradientVector) -> float:
    """
    Cosine similarity <a,b>/(|a||b|), clamped to [-1, 1].

    Negative for obtuse angles; this is the quantity the sign-flip and
    unreliable-client tests threshold on.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_dims(a, b)
    count_distances()
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector('Cosine similarity is undefined for a zero vector')
    value = float(np.dot(a, b) / (norm_a * norm_b))
    return min(1.0, max(-1.0, value))


def euclidean(a: GradientVector, b: GradientVector) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_dims(a, b)
    count_distances()
    return float(np.linalg.norm(a - b))


def coordinate_median(vectors: Sequence[GradientVector]) -> GradientVector:
    """
    Coordinate-wise median; even counts take the mean of the two middle values.
    """
    if len(vectors) == 0:
        raise EmptyInput('Median of an empty set of vectors')
    return np.median(stack(vectors), axis=0)


def gap_boundary(values: Iterable[float], min_gap: float = 0.0) -> Optional[float]:
    """
    Midpoint of the largest gap between consecutive sorted values.

    Returns None when there are fewer than two values or when the largest gap
    does not exceed min_gap, i.e. there is no separation to speak of.
    """
    ordered = np.sort(np.asarray(list(values), dtype=np.float64))
    if ordered.size == 0:
        raise EmptyInput('gap_boundary needs at least one value')
    if ordered.size < 2:
        return None
    gaps = np.diff(ordered)
    widest = int(np.argmax(gaps))
    if gaps[widest] <= min_gap:
        return None
    return float((ordered[widest] + ordered[widest + 1]) / 2.0)


def minority_gap_boundary(values: Iterable[float], min_gap: float = 0.0) -> Optional[float]:
    """
    Like gap_boundary, but only cuts that leave strictly fewer than half of
    the values below the boundary are considered. The median-defining
    majority therefore always sits above the result.
    """
    ordered = np.sort(np.asarray(list(values), dtype=np.float64))
    if ordered.size == 0:
        raise EmptyInput('minority_gap_boundary needs at least one value')
    # a cut after position i leaves i + 1 values below it
    admissible = (ordered.size - 1) // 2
    if admissible < 1:
        return None
    gaps = np.diff(ordered)[:admissible]
    widest = int(np.argmax(gaps))
    if gaps[widest] <= min_gap:
        return None
    return float((ordered[widest] + ordered[widest + 1]) / 2.0)
