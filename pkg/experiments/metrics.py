"""
Detection ratio and class-level metrics
"""

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from federation.defense import Label, RoundVerdict
from federation.roles import ROSTER_ORDER, ClientRole, RoleKind


@dataclass(frozen=True)
class ClientDetection:
    client_id: int
    kind: str
    detected_rounds: int
    first_detection: Optional[int]

    @property
    def detected(self) -> bool:
        return self.detected_rounds > 0


@dataclass(frozen=True)
class DetectionSummary:
    rounds: int
    by_type: Mapping[str, Mapping[str, object]]
    overall_ratio: Optional[float]
    clients: Sequence[ClientDetection] = field(default_factory=tuple)
    false_positives: Sequence[int] = field(default_factory=tuple)

    def as_dict(self) -> dict:
        return {
            'rounds': self.rounds,
            'overall_ratio': self.overall_ratio,
            'by_type': {kind: dict(values) for kind, values in self.by_type.items()},
            'false_positives': list(self.false_positives),
        }


def detection_ratio(verdicts: Sequence[RoundVerdict], roles: Sequence[ClientRole], rounds: int) -> DetectionSummary:
    """
    Share of client-rounds in which each non-normal client was caught.

    A malicious client counts from the round its decision turned firm through
    the last round; an unreliable client counts in every round it is labelled
    unreliable. The denominator always uses the full number of rounds.
    """
    if rounds < 1:
        raise ValueError('rounds must be at least 1')
    by_round = {v.round_number: v for v in verdicts}
    last = by_round[max(by_round)] if by_round else None
    firm_round = dict(last.firm_round) if last else {}
    first_firm = dict(last.first_detection) if last else {}

    clients = []
    for client_id, role in enumerate(roles):
        if role.kind == RoleKind.NORMAL:
            continue
        if role.is_malicious:
            became_firm = firm_round.get(client_id)
            detected = 0 if became_firm is None else max(0, rounds - became_firm + 1)
            first = first_firm.get(client_id)
        else:
            flagged = [r for r in range(1, rounds + 1)
                       if r in by_round and by_round[r].labels.get(client_id) == Label.UNRELIABLE]
            detected = len(flagged)
            first = flagged[0] if flagged else None
        clients.append(ClientDetection(client_id, role.kind.value, detected, first))

    by_type = {}
    for kind in ROSTER_ORDER:
        members = [c for c in clients if c.kind == kind.value]
        if not members:
            continue
        firsts = [c.first_detection for c in members if c.first_detection is not None]
        by_type[kind.value] = {
            'clients': len(members),
            'ratio': sum(c.detected_rounds for c in members) / (rounds * len(members)),
            'first_detection': min(firsts) if firsts else None,
        }

    overall = None
    if clients:
        overall = sum(c.detected_rounds for c in clients) / (rounds * len(clients))

    honest = {c for c, role in enumerate(roles) if not role.is_malicious}
    false_positives = sorted(c for c in firm_round if c in honest)
    return DetectionSummary(rounds=rounds, by_type=by_type, overall_ratio=overall,
                            clients=tuple(clients), false_positives=tuple(false_positives))


@dataclass(frozen=True)
class ClassMetrics:
    precision_target: float
    recall_source: float
    per_class: List[Dict[str, object]]
    degenerate: bool = False


def _ratio(numerator: float, denominator: float):
    if denominator == 0:
        return 1.0, True
    return numerator / denominator, False


def per_class_table(confusion) -> List[Dict[str, object]]:
    """Precision, recall and support per class; 0/0 is reported as 1.0 and flagged."""
    matrix = np.asarray(confusion, dtype=np.int64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError('confusion matrix must be square')
    table = []
    for c in range(matrix.shape[0]):
        precision, p_degenerate = _ratio(matrix[c, c], matrix[:, c].sum())
        recall, r_degenerate = _ratio(matrix[c, c], matrix[c, :].sum())
        table.append({
            'class': c,
            'precision': float(precision),
            'recall': float(recall),
            'support': int(matrix[c, :].sum()),
            'precision_degenerate': p_degenerate,
            'recall_degenerate': r_degenerate,
        })
    return table


def classification_metrics(confusion, source: int, target: int) -> ClassMetrics:
    """Precision of the target class, recall of the source class (rows = truth)."""
    table = per_class_table(confusion)
    n_classes = len(table)
    if not (0 <= source < n_classes and 0 <= target < n_classes):
        raise ValueError(f'classes must lie in [0, {n_classes})')
    return ClassMetrics(
        precision_target=table[target]['precision'],
        recall_source=table[source]['recall'],
        per_class=table,
        degenerate=bool(table[target]['precision_degenerate'] or table[source]['recall_degenerate']),
    )
