"""
Experiment configuration: schema, presets and the Exp1/Exp2 roster series

A config is a JSON document with nested sections. `load_config` merges an
optional preset underneath it, validates and normalises it with cerberus and
returns a frozen ExperimentConfig; `dump_config` gives the normalised
document back.
"""

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

from cerberus import Validator
from django.conf import settings

from core.exceptions import BadIndex, ConfigurationError
from federation.baselines import AGGREGATOR_KINDS, KRUM, MULTI_KRUM, AggregatorSettings
from federation.defense import DefenseConfig
from federation.roles import (
    LABEL_FLIP_MAPPING, MULTI_LABEL_FLIP_MAPPING, ROSTER_ORDER, RoleKind, UnreliableSettings,
)
from learning.datasets import DATASET_NAMES
from learning.network import TrainerConfig

logger = logging.getLogger(__name__)

SERIES = ('exp1', 'exp2')
SERIES_INDICES = range(1, 7)

# Per-dataset SGD defaults, applied when the trainer section leaves them out
TRAINER_DEFAULTS = {
    'mnist': {'momentum': 0.5, 'weight_decay': 0.0},
    'fashion-mnist': {'momentum': 0.9, 'weight_decay': 1e-4},
    'synthetic': {'momentum': 0.5, 'weight_decay': 0.0},
}

ROLE_KEYS = [kind.value for kind in ROSTER_ORDER]

_PAIR = {'type': 'list', 'minlength': 2, 'maxlength': 2, 'schema': {'type': 'integer', 'min': 0}}


def _fresh(value):
    return lambda _document: copy.deepcopy(value)


def _section(schema):
    return {'type': 'dict', 'default_setter': _fresh({}), 'schema': schema}


def _nullable_int(minimum):
    return {'type': 'integer', 'min': minimum, 'nullable': True, 'default': None}


def _positive(field_name, value, error):
    if value <= 0:
        error(field_name, 'must be greater than 0')


CONFIG_SCHEMA = {
    'name': {'type': 'string', 'empty': False, 'default': 'experiment'},
    'n_clients': {'type': 'integer', 'min': 1, 'default': 40},
    'rounds': {'type': 'integer', 'min': 1, 'default': 40},
    'eta_server': {'type': 'float', 'coerce': float, 'min': 0.0, 'default': 1.0},
    'output_dir': {'type': 'string', 'nullable': True, 'default': None},
    'workers': _nullable_int(1),
    'dataset': _section({
        'name': {'type': 'string', 'allowed': list(DATASET_NAMES), 'default': 'synthetic'},
        'data_dir': {'type': 'string', 'nullable': True, 'default': None},
        'train_subsample': _nullable_int(1),
        'test_cap': _nullable_int(1),
        'synthetic_classes': {'type': 'integer', 'min': 2, 'default': 10},
        'synthetic_dim': {'type': 'integer', 'min': 2, 'default': 64},
        'synthetic_train_per_class': {'type': 'integer', 'min': 1, 'default': 200},
        'synthetic_test_per_class': {'type': 'integer', 'min': 1, 'default': 50},
        'synthetic_spread': {'type': 'float', 'coerce': float, 'min': 0.0, 'default': 0.35},
    }),
    'partition': _section({
        'beta': {'type': 'float', 'coerce': float, 'check_with': _positive, 'default': 0.9},
    }),
    'roster': _section({
        'series': {'type': 'string', 'allowed': list(SERIES), 'nullable': True, 'default': None},
        'index': _nullable_int(1),
        'counts': _section({key: {'type': 'integer', 'min': 0, 'default': 0} for key in ROLE_KEYS}),
        'sigma': {'type': 'float', 'coerce': float, 'min': 0.0, 'default': 0.01},
        'label_flip_mapping': {'type': 'list', 'schema': _PAIR,
                               'default_setter': _fresh([list(p) for p in LABEL_FLIP_MAPPING])},
        'multi_label_flip_mapping': {'type': 'list', 'schema': _PAIR,
                                     'default_setter': _fresh([list(p) for p in MULTI_LABEL_FLIP_MAPPING])},
    }),
    'model': _section({
        'hidden_layers': {'type': 'list', 'schema': {'type': 'integer', 'min': 1},
                          'default_setter': _fresh([128, 64])},
    }),
    'trainer': _section({
        'learning_rate': {'type': 'float', 'coerce': float, 'min': 0.0, 'default': 1e-2},
        'momentum': {'type': 'float', 'coerce': float, 'min': 0.0, 'max': 0.999999},
        'weight_decay': {'type': 'float', 'coerce': float, 'min': 0.0},
        'local_epochs': {'type': 'integer', 'min': 1, 'default': 4},
        'batch_size': {'type': 'integer', 'min': 1, 'default': 64},
    }),
    'unreliable': _section({
        'blur_fraction': {'type': 'float', 'coerce': float, 'min': 0.0, 'max': 1.0, 'default': 0.5},
        'kernel_size': {'type': 'integer', 'min': 1, 'default': 7},
        'sigma': {'type': 'float', 'coerce': float, 'min': 0.0, 'default': 50.0},
        'train_fraction': {'type': 'float', 'coerce': float, 'check_with': _positive, 'max': 1.0, 'default': 0.3},
        'fresh_subsample': {'type': 'boolean', 'default': True},
    }),
    'defense': _section({
        'window': {'type': 'integer', 'min': 1, 'default': 3},
        'tau0': {'type': 'integer', 'min': 1, 'default': 3},
        'alpha': {'type': 'float', 'coerce': float, 'default': 0.5},
        'min_gap_unreliable': {'type': 'float', 'coerce': float, 'min': 0.0, 'default': 0.1},
        'kmeans_validity_kappa': {'type': 'float', 'coerce': float, 'min': 0.0, 'default': 2.0},
        'kmeans_min_cluster': {'type': 'integer', 'min': 1, 'default': 2},
        'noise_margin': {'type': 'float', 'coerce': float, 'min': 0.0, 'default': 2.0},
        'dbscan_min_pts': {'type': 'integer', 'min': 1, 'default': 2},
        'dbscan_eps_factor': {'type': 'float', 'coerce': float, 'default': 1.0},
        'confirm_rounds': {'type': 'integer', 'min': 1, 'default': 2},
        'literal_eq3_weights': {'type': 'boolean', 'default': False},
    }),
    'aggregator': _section({
        'kind': {'type': 'string', 'allowed': list(AGGREGATOR_KINDS), 'default': 'mudhog'},
        'krum_f': _nullable_int(0),
        'multi_krum_m': _nullable_int(1),
        'foolsgold_confidence': {'type': 'float', 'coerce': float, 'min': 0.0, 'default': 1.0},
        'geomed_tol': {'type': 'float', 'coerce': float, 'min': 0.0, 'default': 1e-6},
    }),
    'seeds': _section({
        'data': {'type': 'integer', 'min': 0, 'default': 0},
        'init': {'type': 'integer', 'min': 0, 'default': 0},
        'training': {'type': 'integer', 'min': 0, 'default': 0},
    }),
}

# Both presets widen the DBSCAN radius: with the bare k-distance median about
# half of an honest population falls out as noise.
PRESETS = {
    'desk': {
        'n_clients': 20,
        'rounds': 20,
        'dataset': {'train_subsample': 12000, 'test_cap': 2000},
        'model': {'hidden_layers': [64]},
        'trainer': {'local_epochs': 2, 'batch_size': 32},
        'defense': {'dbscan_eps_factor': 2.0},
    },
    'paper': {
        'n_clients': 40,
        'rounds': 40,
        'dataset': {'name': 'mnist'},
        'model': {'hidden_layers': [128, 64]},
        'trainer': {'local_epochs': 4, 'batch_size': 64},
        'defense': {'dbscan_eps_factor': 2.0},
    },
}


@dataclass(frozen=True)
class DatasetSettings:
    name: str = 'synthetic'
    data_dir: Optional[str] = None
    train_subsample: Optional[int] = None
    test_cap: Optional[int] = None
    synthetic_classes: int = 10
    synthetic_dim: int = 64
    synthetic_train_per_class: int = 200
    synthetic_test_per_class: int = 50
    synthetic_spread: float = 0.35

    def resolved_dir(self) -> Path:
        if self.data_dir:
            return Path(self.data_dir)
        app_settings = getattr(settings, 'HOGWATCH_SETTINGS', {})
        return Path(app_settings.get('DATA_DIR', 'data')) / self.name


@dataclass(frozen=True)
class PartitionSettings:
    beta: float = 0.9


@dataclass(frozen=True)
class RosterSettings:
    series: Optional[str] = None
    index: Optional[int] = None
    counts: Mapping[str, int] = field(default_factory=dict)
    sigma: float = 0.01
    label_flip_mapping: Tuple[Tuple[int, int], ...] = LABEL_FLIP_MAPPING
    multi_label_flip_mapping: Tuple[Tuple[int, int], ...] = MULTI_LABEL_FLIP_MAPPING

    def mappings(self) -> Dict[str, tuple]:
        return {
            RoleKind.LABEL_FLIP.value: self.label_flip_mapping,
            RoleKind.MULTI_LABEL_FLIP.value: self.multi_label_flip_mapping,
        }


@dataclass(frozen=True)
class ModelSettings:
    hidden_layers: Tuple[int, ...] = (128, 64)


@dataclass(frozen=True)
class SeedSettings:
    data: int = 0
    init: int = 0
    training: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = 'experiment'
    n_clients: int = 40
    rounds: int = 40
    eta_server: float = 1.0
    output_dir: Optional[str] = None
    workers: Optional[int] = None
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    partition: PartitionSettings = field(default_factory=PartitionSettings)
    roster: RosterSettings = field(default_factory=RosterSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    unreliable: UnreliableSettings = field(default_factory=UnreliableSettings)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    aggregator: AggregatorSettings = field(default_factory=AggregatorSettings)
    seeds: SeedSettings = field(default_factory=SeedSettings)

    def role_counts(self) -> Dict[str, int]:
        """Counts per role kind, normal included, after resolving a series index."""
        if self.roster.series:
            return build_exp_series(self.roster.series, self.roster.index, self.n_clients)
        counts = {key: int(self.roster.counts.get(key, 0)) for key in ROLE_KEYS}
        counts[RoleKind.NORMAL.value] = self.n_clients - sum(counts.values())
        return counts

    def malicious_fraction(self) -> float:
        counts = self.role_counts()
        malicious = sum(counts[kind.value] for kind in ROSTER_ORDER if kind != RoleKind.UNRELIABLE)
        return malicious / self.n_clients


def build_exp_series(series: str, index: int, n_clients: int = 40) -> Dict[str, int]:
    """
    Role counts of the two attack series: min(i, 4) unreliable, min(i, 6)
    additive-noise, min(i, 5) sign-flip and i + 2 label-flip (exp1) or
    multi-label-flip (exp2) clients; the rest are normal.
    """
    if series not in SERIES:
        raise ConfigurationError(f'Unknown series {series!r}; choose one of {", ".join(SERIES)}')
    if index not in SERIES_INDICES:
        raise BadIndex(f'Series index must lie in 1..6, got {index}')
    targeted = RoleKind.LABEL_FLIP if series == 'exp1' else RoleKind.MULTI_LABEL_FLIP
    counts = {key: 0 for key in ROLE_KEYS}
    counts[RoleKind.UNRELIABLE.value] = min(index, 4)
    counts[RoleKind.ADDITIVE_NOISE.value] = min(index, 6)
    counts[RoleKind.SIGN_FLIP.value] = min(index, 5)
    counts[targeted.value] = index + 2
    special = sum(counts.values())
    if special > n_clients:
        raise ConfigurationError(f'{series} index {index} needs {special} clients, only {n_clients} configured')
    counts[RoleKind.NORMAL.value] = n_clients - special
    return counts


def _merge(base: dict, override: Mapping) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_preset(document: Mapping, preset: Optional[str]) -> dict:
    if preset is None:
        return copy.deepcopy(dict(document))
    if preset not in PRESETS:
        raise ConfigurationError(f'Unknown preset {preset!r}; choose one of {", ".join(PRESETS)}')
    return _merge(PRESETS[preset], document)


def normalize_document(document: Mapping, preset: Optional[str] = None) -> dict:
    merged = apply_preset(document, preset)
    validator = Validator(CONFIG_SCHEMA)
    if not validator.validate(merged):
        raise ConfigurationError('Invalid experiment configuration', errors=validator.errors)
    normalized = validator.document

    trainer = normalized['trainer']
    for key, value in TRAINER_DEFAULTS[normalized['dataset']['name']].items():
        trainer.setdefault(key, value)
    return normalized


def _tuples(pairs) -> tuple:
    return tuple(tuple(pair) for pair in pairs)


def _build(normalized: dict) -> ExperimentConfig:
    roster = dict(normalized['roster'])
    roster['label_flip_mapping'] = _tuples(roster['label_flip_mapping'])
    roster['multi_label_flip_mapping'] = _tuples(roster['multi_label_flip_mapping'])
    return ExperimentConfig(
        name=normalized['name'],
        n_clients=normalized['n_clients'],
        rounds=normalized['rounds'],
        eta_server=normalized['eta_server'],
        output_dir=normalized['output_dir'],
        workers=normalized['workers'],
        dataset=DatasetSettings(**normalized['dataset']),
        partition=PartitionSettings(**normalized['partition']),
        roster=RosterSettings(**roster),
        model=ModelSettings(hidden_layers=tuple(normalized['model']['hidden_layers'])),
        trainer=TrainerConfig(**normalized['trainer']),
        unreliable=UnreliableSettings(**normalized['unreliable']),
        defense=DefenseConfig(**normalized['defense']),
        aggregator=AggregatorSettings(**normalized['aggregator']),
        seeds=SeedSettings(**normalized['seeds']),
    )


def check_invariants(cfg: ExperimentConfig):
    counts = cfg.role_counts()
    if counts[RoleKind.NORMAL.value] < 0:
        raise ConfigurationError(
            f'Roster needs {cfg.n_clients - counts[RoleKind.NORMAL.value]} special clients '
            f'but n_clients is {cfg.n_clients}'
        )
    honest = counts[RoleKind.NORMAL.value] + counts[RoleKind.UNRELIABLE.value]
    malicious = cfg.n_clients - honest
    if malicious >= honest:
        raise ConfigurationError(f'{malicious} malicious clients must be fewer than the {honest} honest ones')

    if cfg.aggregator.kind in (KRUM, MULTI_KRUM):
        f = cfg.aggregator.resolved_f(cfg.n_clients)
        if not f < cfg.n_clients / 2 - 1:
            raise ConfigurationError(f'Krum needs f < N/2 - 1, got f={f} with N={cfg.n_clients}')
        if cfg.n_clients < f + 3:
            raise ConfigurationError(f'Krum with f={f} needs at least {f + 3} clients')

    n_classes = cfg.dataset.synthetic_classes if cfg.dataset.name == 'synthetic' else 10
    for mapping in (cfg.roster.label_flip_mapping, cfg.roster.multi_label_flip_mapping):
        if not mapping or any(c >= n_classes for pair in mapping for c in pair):
            raise ConfigurationError(f'Label-flip mappings need classes below {n_classes}, got {mapping}')

    if cfg.dataset.name == 'synthetic':
        if cfg.dataset.synthetic_dim < cfg.dataset.synthetic_classes:
            raise ConfigurationError('synthetic_dim must be at least synthetic_classes')
        side = int(round(cfg.dataset.synthetic_dim ** 0.5))
        if counts[RoleKind.UNRELIABLE.value] and side * side != cfg.dataset.synthetic_dim:
            raise ConfigurationError('Blurring unreliable clients needs a square synthetic_dim')
    if cfg.unreliable.kernel_size % 2 != 1:
        raise ConfigurationError('unreliable.kernel_size must be odd')


def load_config(document: Union[Mapping, str, Path], preset: Optional[str] = None) -> ExperimentConfig:
    """Build an ExperimentConfig from a mapping, or from a JSON file path."""
    if isinstance(document, (str, Path)):
        try:
            document = json.loads(Path(document).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigurationError(f'Cannot read config {document}: {exc}') from exc
    normalized = normalize_document(document, preset)
    try:
        cfg = _build(normalized)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc
    check_invariants(cfg)
    logger.debug('Loaded config %s (%s, %d clients, %d rounds)', cfg.name, cfg.aggregator.kind,
                 cfg.n_clients, cfg.rounds)
    return cfg


def _plain(value):
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, Mapping):
        return {key: _plain(item) for key, item in value.items()}
    return value


def dump_config(cfg: ExperimentConfig) -> dict:
    """The normalised document for cfg; load_config(dump_config(cfg)) == cfg."""
    document = _plain(asdict(cfg))
    document['roster']['counts'] = {key: int(cfg.roster.counts.get(key, 0)) for key in ROLE_KEYS}
    return document
