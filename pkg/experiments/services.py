"""
Experiment orchestration: build the federation, drive the rounds, compare
aggregators and store finished runs
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from django.conf import settings
from django.db import transaction
from django.utils import timezone

from core.exceptions import DatasetError, ExperimentError, HogwatchError
from core.rng import STREAM_SUBSAMPLE, rng_for
from federation.baselines import AGGREGATOR_KINDS, MUDHOG, build_aggregator
from federation.defense import Label, RoundVerdict, global_update
from federation.roles import ClientRole, ClientState, RoleKind, assign_roles, build_client, produce_update
from learning.datasets import Dataset, dirichlet_partition, load_idx, synthetic_blobs
from learning.network import ModelParams, ModelSpec, evaluate

from .config import DatasetSettings, ExperimentConfig, check_invariants, dump_config
from .metrics import detection_ratio, per_class_table

logger = logging.getLogger(__name__)

IDX_TRAIN = ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte')
IDX_TEST = ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte')
IMAGE_CLASSES = 10


@dataclass(frozen=True)
class RoundReport:
    round_number: int
    accuracy: float
    loss: float
    confusion: np.ndarray = field(repr=False)
    per_class: List[Dict[str, object]] = field(repr=False)
    target_precision: float
    source_recall: Mapping[int, float]
    verdict: Optional[RoundVerdict] = None
    weights: Mapping[int, float] = field(default_factory=dict)
    no_participants: bool = False
    wall_time: float = 0.0


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    roles: Tuple[ClientRole, ...]
    reports: List[RoundReport]
    summary: dict
    params: ModelParams
    class_names: List[str]
    output_dir: Optional[Path] = None


def _finite(value):
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def _idx_path(directory: Path, stem: str) -> Path:
    for candidate in (directory / f'{stem}.gz', directory / stem):
        if candidate.exists():
            return candidate
    raise DatasetError(f'{stem} not found in {directory}; run `manage.py fetch_mnist` first')


def _cap(dataset: Dataset, size: Optional[int], seed: int, key: int) -> Dataset:
    if size is None or size >= len(dataset):
        return dataset
    chosen = rng_for(seed, STREAM_SUBSAMPLE, key).choice(len(dataset), size=size, replace=False)
    return dataset.subset(np.sort(chosen))


def load_datasets(ds: DatasetSettings, seed: int) -> Tuple[Dataset, Dataset]:
    """Train and test sets for the configured dataset, subsampled and capped."""
    if ds.name == 'synthetic':
        blob = partial(synthetic_blobs, n_classes=ds.synthetic_classes, dim=ds.synthetic_dim,
                       spread=ds.synthetic_spread)
        train = blob(per_class=ds.synthetic_train_per_class, seed=2 * seed)
        test = blob(per_class=ds.synthetic_test_per_class, seed=2 * seed + 1)
    else:
        directory = ds.resolved_dir()
        train = load_idx(*(_idx_path(directory, stem) for stem in IDX_TRAIN), name=ds.name)
        test = load_idx(*(_idx_path(directory, stem) for stem in IDX_TEST), name=ds.name)
    return _cap(train, ds.train_subsample, seed, 0), _cap(test, ds.test_cap, seed, 1)


def model_spec(cfg: ExperimentConfig, train: Dataset) -> ModelSpec:
    n_classes = cfg.dataset.synthetic_classes if cfg.dataset.name == 'synthetic' else IMAGE_CLASSES
    return ModelSpec(layer_sizes=(train.images.shape[1], *cfg.model.hidden_layers, n_classes))


def watched_classes(cfg: ExperimentConfig) -> Tuple[Tuple[int, ...], int]:
    """Source classes and the target class the targeted-attack metrics follow."""
    counts = cfg.role_counts()
    if counts[RoleKind.MULTI_LABEL_FLIP.value]:
        mapping = cfg.roster.multi_label_flip_mapping
    else:
        mapping = cfg.roster.label_flip_mapping
    return tuple(sorted({source for source, _ in mapping})), mapping[0][1]


def build_clients(cfg: ExperimentConfig, train: Dataset) -> Tuple[Tuple[ClientRole, ...], List[ClientState]]:
    counts = cfg.role_counts()
    roles = assign_roles(cfg.n_clients, counts, sigma=cfg.roster.sigma, mappings=cfg.roster.mappings())
    partition = dirichlet_partition(train, cfg.n_clients, cfg.partition.beta, cfg.seeds.data)
    clients = [
        build_client(client_id, roles[client_id], train.view(partition.client_indices[client_id]),
                     cfg.trainer, cfg.seeds.training, cfg.unreliable)
        for client_id in range(cfg.n_clients)
    ]
    return roles, clients


def summarize(cfg: ExperimentConfig, roles: Sequence[ClientRole], reports: Sequence[RoundReport]) -> dict:
    """Final metrics, detection table and the config echo (no wall times)."""
    final = reports[-1]
    detection = None
    if cfg.aggregator.kind == MUDHOG:
        summary = detection_ratio([r.verdict for r in reports], roles, cfg.rounds)
        detection = summary.as_dict()
        detection['clients'] = {
            str(c.client_id): {'kind': c.kind, 'detected_rounds': c.detected_rounds,
                               'first_detection': c.first_detection}
            for c in summary.clients
        }
    return {
        'name': cfg.name,
        'aggregator': cfg.aggregator.kind,
        'n_clients': cfg.n_clients,
        'rounds': cfg.rounds,
        'roster': cfg.role_counts(),
        'malicious_fraction': cfg.malicious_fraction(),
        'final': {
            'accuracy': _finite(final.accuracy),
            'loss': _finite(final.loss),
            'target_precision': _finite(final.target_precision),
            'source_recall': {str(s): _finite(v) for s, v in final.source_recall.items()},
        },
        'detection': detection,
        'config': dump_config(cfg),
    }


class ExperimentService:
    """
    Service class for running and recording experiments
    """

    @staticmethod
    def output_dir_for(cfg: ExperimentConfig, override=None) -> Path:
        if override:
            return Path(override)
        if cfg.output_dir:
            return Path(cfg.output_dir)
        app_settings = getattr(settings, 'HOGWATCH_SETTINGS', {})
        return Path(app_settings.get('RESULTS_DIR', 'results')) / cfg.name / cfg.aggregator.kind

    @staticmethod
    def run_experiment(cfg: ExperimentConfig,
                       on_round: Optional[Callable[[RoundReport], None]] = None) -> ExperimentResult:
        """
        Run cfg.rounds rounds of broadcast, local training, aggregation,
        global update and evaluation. Client updates of one round are computed
        concurrently; every random stream is keyed by (seed, client, round) so
        scheduling order never shows in the results.
        """
        logger.info('Starting %s: %s, %d clients, %d rounds', cfg.name, cfg.aggregator.kind,
                    cfg.n_clients, cfg.rounds)
        try:
            check_invariants(cfg)
            train, test = load_datasets(cfg.dataset, cfg.seeds.data)
            spec = model_spec(cfg, train)
            roles, clients = build_clients(cfg, train)
            aggregator = build_aggregator(cfg.aggregator, cfg.n_clients, cfg.defense, seed=cfg.seeds.training)
        except (HogwatchError, ValueError, OSError) as exc:
            raise ExperimentError(f'setup failed: {exc}') from exc

        params = ModelParams.initialize(spec, cfg.seeds.init)
        sizes = {client.client_id: client.data_size for client in clients}
        sources, target = watched_classes(cfg)
        app_settings = getattr(settings, 'HOGWATCH_SETTINGS', {})
        workers = cfg.workers or app_settings.get('CLIENT_WORKERS', 4)
        reports: List[RoundReport] = []

        with ThreadPoolExecutor(max_workers=workers) as pool:
            for round_number in range(1, cfg.rounds + 1):
                started = time.perf_counter()
                try:
                    work = partial(produce_update, broadcast=params, round_number=round_number,
                                   seed=cfg.seeds.training)
                    updates = dict(zip(sizes, pool.map(work, clients)))
                    result = aggregator.aggregate(round_number, updates, sizes)
                    params = global_update(params, result.aggregate, cfg.eta_server)
                    evaluation = evaluate(params, test.images, test.labels)
                except ExperimentError:
                    raise
                except Exception as exc:
                    raise ExperimentError(str(exc), round_number=round_number) from exc

                table = per_class_table(evaluation.confusion)
                report = RoundReport(
                    round_number=round_number,
                    accuracy=evaluation.accuracy,
                    loss=evaluation.loss,
                    confusion=evaluation.confusion,
                    per_class=table,
                    target_precision=table[target]['precision'],
                    source_recall={s: table[s]['recall'] for s in sources},
                    verdict=result.verdict,
                    weights=dict(result.weights),
                    no_participants=result.no_participants,
                    wall_time=time.perf_counter() - started,
                )
                reports.append(report)
                logger.info('Round %d/%d: accuracy %.4f, loss %.4f', round_number, cfg.rounds,
                            report.accuracy, report.loss)
                logger.debug('Round %d took %.2fs', round_number, report.wall_time)
                if on_round is not None:
                    on_round(report)

        summary = summarize(cfg, roles, reports)
        logger.info('Finished %s: final accuracy %s', cfg.name, summary['final']['accuracy'])
        return ExperimentResult(config=cfg, roles=roles, reports=reports, summary=summary, params=params,
                                class_names=train.class_names())

    @staticmethod
    def compare(cfg: ExperimentConfig, aggregators: Sequence[str] = AGGREGATOR_KINDS,
                indices: Optional[Sequence[int]] = None,
                out_dir: Optional[Path] = None) -> List[dict]:
        """
        Run cfg once per aggregator, and per series index when indices are
        given. Returns one comparison row per run; with out_dir each run's
        reports land in out_dir/<index>/<aggregator>/.
        """
        from .reports import emit_reports

        variants = [(None, cfg)]
        if indices:
            series = cfg.roster.series or 'exp1'
            variants = [(i, replace(cfg, roster=replace(cfg.roster, series=series, index=i))) for i in indices]

        rows = []
        for index, variant in variants:
            for kind in aggregators:
                run_cfg = replace(variant, aggregator=replace(variant.aggregator, kind=kind))
                result = ExperimentService.run_experiment(run_cfg)
                if out_dir is not None:
                    emit_reports(result, Path(out_dir) / (f'index-{index}' if index else 'roster') / kind)
                rows.append(comparison_row(result, index))
        return rows

    @staticmethod
    def record(result: ExperimentResult, run=None, user=None):
        """Store a finished result as a COMPLETED ExperimentRun with its round snapshots."""
        from .models import ExperimentRun, RoundSnapshot

        cfg = result.config
        with transaction.atomic():
            if run is None:
                run = ExperimentRun(name=cfg.name, aggregator=cfg.aggregator.kind, config=dump_config(cfg),
                                    created_by=user, started_at=timezone.now())
            run.status = ExperimentRun.Status.COMPLETED
            run.summary = result.summary
            run.output_dir = str(result.output_dir or '')
            run.error_message = ''
            run.finished_at = timezone.now()
            run.updated_by = user or run.updated_by
            run.save()

            run.rounds.all().delete()
            RoundSnapshot.objects.bulk_create([
                RoundSnapshot(
                    run=run,
                    round_number=report.round_number,
                    accuracy=_finite(report.accuracy),
                    loss=_finite(report.loss),
                    firm_malicious=len(report.verdict.firm_malicious) if report.verdict else 0,
                    unreliable=len(report.verdict.clients_with(Label.UNRELIABLE)) if report.verdict else 0,
                    no_participants=report.no_participants,
                )
                for report in result.reports
            ])
        logger.info('Recorded run %s (%s)', run.id, run.name)
        return run


def comparison_row(result: ExperimentResult, index: Optional[int] = None) -> dict:
    summary = result.summary
    final = summary['final']
    recalls = [v for v in final['source_recall'].values() if v is not None]
    detection = summary['detection']
    return {
        'aggregator': summary['aggregator'],
        'series': result.config.roster.series or '',
        'index': index if index is not None else (result.config.roster.index or ''),
        'malicious_fraction': summary['malicious_fraction'],
        'final_accuracy': final['accuracy'],
        'final_loss': final['loss'],
        'target_precision': final['target_precision'],
        'source_recall': sum(recalls) / len(recalls) if recalls else None,
        'detection_ratio': detection['overall_ratio'] if detection else None,
    }
