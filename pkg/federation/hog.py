"""
Per-client history of gradients (HoG)

Each client keeps at most `window` recent vectors plus one running sum, so
memory per client is bounded by window + 1 vectors however long the run is.
"""

from collections import deque
from typing import Dict, Iterable, Optional

import numpy as np

from core.exceptions import DimensionMismatch, EmptyHistory
from core.vecspace import GradientVector, as_gradient


class ClientHistory:
    def __init__(self, window: int):
        if window < 1:
            raise ValueError('History window must be at least 1')
        self.window_size = window
        self.window = deque(maxlen=window)
        self.cum_sum: Optional[GradientVector] = None
        self.count = 0

    @property
    def dim(self) -> Optional[int]:
        return None if self.cum_sum is None else self.cum_sum.shape[0]

    @property
    def vectors_held(self) -> int:
        return len(self.window) + (0 if self.cum_sum is None else 1)

    def record(self, gradient) -> None:
        gradient = as_gradient(gradient)
        if self.cum_sum is None:
            self.cum_sum = np.zeros_like(gradient)
        elif gradient.shape[0] != self.cum_sum.shape[0]:
            raise DimensionMismatch(f'History holds dim {self.cum_sum.shape[0]}, got {gradient.shape[0]}')
        self.window.append(gradient.copy())
        self.cum_sum += gradient
        self.count += 1

    def short_hog(self) -> GradientVector:
        """Mean of the vectors in the window (fewer than `window` early on)."""
        if self.count == 0:
            raise EmptyHistory('short HoG of a client with no recorded rounds')
        return np.mean(np.vstack(self.window), axis=0)

    def long_hog(self) -> GradientVector:
        """Sum of every vector ever recorded."""
        if self.count == 0:
            raise EmptyHistory('long HoG of a client with no recorded rounds')
        return self.cum_sum.copy()


class HistoryStore:
    """ClientHistory per client id, created on first record."""

    def __init__(self, window: int):
        self.window = window
        self._histories: Dict[int, ClientHistory] = {}

    def __contains__(self, client_id) -> bool:
        return client_id in self._histories

    def __getitem__(self, client_id) -> ClientHistory:
        return self._histories[client_id]

    def record(self, client_id: int, gradient) -> None:
        history = self._histories.get(client_id)
        if history is None:
            history = self._histories[client_id] = ClientHistory(self.window)
        history.record(gradient)

    def short_hogs(self, client_ids: Iterable[int]) -> Dict[int, GradientVector]:
        return {c: self._histories[c].short_hog() for c in client_ids}

    def long_hogs(self, client_ids: Iterable[int]) -> Dict[int, GradientVector]:
        return {c: self._histories[c].long_hog() for c in client_ids}

    def max_vectors_held(self) -> int:
        return max((h.vectors_held for h in self._histories.values()), default=0)
