"""
Client roles and per-round update production

A role is fixed for the whole run. Data poisoning (label flips) and
low-quality data (blur) are applied once when the client is built; gradient
poisoning (sign flip, additive noise) is applied to each round's update.
"""

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Tuple

import numpy as np
from django.db import models

from core.exceptions import DimensionMismatch, EmptyDataset
from core.rng import STREAM_NOISE, STREAM_TRAIN, rng_for
from core.vecspace import GradientVector
from learning.datasets import DatasetView, flip_labels, gaussian_blur, subsample
from learning.network import ModelParams, ModelSpec, TrainerConfig, local_train

logger = logging.getLogger(__name__)


class RoleKind(models.TextChoices):
    NORMAL = 'normal', 'Normal'
    UNRELIABLE = 'unreliable', 'Unreliable'
    SIGN_FLIP = 'sign_flip', 'Sign-flipping attacker'
    ADDITIVE_NOISE = 'additive_noise', 'Additive-noise attacker'
    LABEL_FLIP = 'label_flip', 'Label-flipping attacker'
    MULTI_LABEL_FLIP = 'multi_label_flip', 'Multi-label-flipping attacker'


UNTARGETED_KINDS = frozenset({RoleKind.SIGN_FLIP, RoleKind.ADDITIVE_NOISE})
TARGETED_KINDS = frozenset({RoleKind.LABEL_FLIP, RoleKind.MULTI_LABEL_FLIP})
MALICIOUS_KINDS = UNTARGETED_KINDS | TARGETED_KINDS

# Order in which roster counts are handed out to client ids.
ROSTER_ORDER = (
    RoleKind.UNRELIABLE,
    RoleKind.ADDITIVE_NOISE,
    RoleKind.SIGN_FLIP,
    RoleKind.LABEL_FLIP,
    RoleKind.MULTI_LABEL_FLIP,
)

LABEL_FLIP_MAPPING = ((1, 7),)
MULTI_LABEL_FLIP_MAPPING = ((1, 7), (2, 7), (3, 7))


@dataclass(frozen=True)
class ClientRole:
    kind: RoleKind = RoleKind.NORMAL
    sigma: float = 0.01
    mapping: Tuple[Tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'kind', RoleKind(self.kind))
        object.__setattr__(self, 'mapping', tuple((int(s), int(t)) for s, t in self.mapping))
        if self.kind in TARGETED_KINDS and not self.mapping:
            raise ValueError(f'{self.kind.label} needs a source -> target mapping')
        if self.kind == RoleKind.ADDITIVE_NOISE and self.sigma <= 0:
            raise ValueError('Additive-noise sigma must be positive')

    @property
    def is_malicious(self) -> bool:
        return self.kind in MALICIOUS_KINDS

    @property
    def is_targeted(self) -> bool:
        return self.kind in TARGETED_KINDS

    @classmethod
    def for_kind(cls, kind, sigma: float = 0.01, mapping=None) -> 'ClientRole':
        kind = RoleKind(kind)
        if mapping is None:
            mapping = {
                RoleKind.LABEL_FLIP: LABEL_FLIP_MAPPING,
                RoleKind.MULTI_LABEL_FLIP: MULTI_LABEL_FLIP_MAPPING,
            }.get(kind, ())
        if kind not in TARGETED_KINDS:
            mapping = ()
        return cls(kind=kind, sigma=sigma, mapping=tuple(mapping))


@dataclass(frozen=True)
class UnreliableSettings:
    """Low-quality data simulation: blurred images plus a reduced training share."""
    blur_fraction: float = 0.5
    kernel_size: int = 7
    sigma: float = 50.0
    train_fraction: float = 0.3
    fresh_subsample: bool = True


@dataclass(frozen=True)
class ClientState:
    client_id: int
    role: ClientRole
    data: DatasetView
    trainer: TrainerConfig
    unreliable: Optional[UnreliableSettings] = None
    fixed_train: Optional[DatasetView] = None

    @property
    def data_size(self) -> int:
        return len(self.data)


def build_client(client_id: int, role: ClientRole, view: DatasetView, trainer: TrainerConfig,
                 seed: int, unreliable: Optional[UnreliableSettings] = None) -> ClientState:
    """Apply the role's data transform to the client's partition, exactly once."""
    if len(view) == 0:
        raise EmptyDataset(f'client {client_id} has no data')

    fixed_train = None
    if role.is_targeted:
        view = flip_labels(view, dict(role.mapping))
    elif role.kind == RoleKind.UNRELIABLE:
        unreliable = unreliable or UnreliableSettings()
        view = gaussian_blur(view, unreliable.blur_fraction, unreliable.kernel_size, unreliable.sigma,
                             seed=(seed, client_id))
        if not unreliable.fresh_subsample:
            fixed_train = subsample(view, unreliable.train_fraction, seed=(seed, client_id))

    return ClientState(
        client_id=client_id,
        role=role,
        data=view,
        trainer=trainer,
        unreliable=unreliable if role.kind == RoleKind.UNRELIABLE else None,
        fixed_train=fixed_train,
    )


def training_view(client: ClientState, round_number: int, seed: int) -> DatasetView:
    if client.role.kind != RoleKind.UNRELIABLE:
        return client.data
    if client.fixed_train is not None:
        return client.fixed_train
    return subsample(client.data, client.unreliable.train_fraction,
                     seed=(seed, client.client_id, round_number))


def produce_update(client: ClientState, broadcast: ModelParams, round_number: int,
                   seed: int, spec: Optional[ModelSpec] = None) -> GradientVector:
    """
    One round of local work. The training stream depends only on
    (seed, client_id, round), so an attacker and an honest client holding the
    same data produce the same honest update before poisoning.
    """
    if spec is not None and broadcast.spec != spec:
        raise DimensionMismatch(f'Broadcast model {broadcast.spec.layer_sizes} does not match {spec.layer_sizes}')

    data = training_view(client, round_number, seed)
    update = local_train(broadcast, data, client.trainer,
                         seed=rng_for(seed, STREAM_TRAIN, client.client_id, round_number))

    if client.role.kind == RoleKind.SIGN_FLIP:
        return -update
    if client.role.kind == RoleKind.ADDITIVE_NOISE:
        noise = rng_for(seed, STREAM_NOISE, client.client_id, round_number)
        return update + noise.normal(0.0, client.role.sigma, size=update.shape)
    return update


def assign_roles(n_clients: int, counts: Mapping[str, int], sigma: float = 0.01,
                 mappings: Optional[Mapping[str, tuple]] = None) -> Tuple[ClientRole, ...]:
    """
    Hand out roles to client ids 0..n-1 in ROSTER_ORDER; everyone left over
    is normal.
    """
    mappings = mappings or {}
    roles = []
    for kind in ROSTER_ORDER:
        count = int(counts.get(kind.value, 0))
        if count < 0:
            raise ValueError(f'Negative count for {kind.value}')
        role = ClientRole.for_kind(kind, sigma=sigma, mapping=mappings.get(kind.value))
        roles.extend([role] * count)
    if len(roles) > n_clients:
        raise ValueError(f'Roster needs {len(roles)} special clients but only {n_clients} exist')
    roles.extend([ClientRole()] * (n_clients - len(roles)))
    return tuple(roles)
