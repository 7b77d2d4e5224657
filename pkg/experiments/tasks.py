"""
Background execution of queued experiment runs through django-q
"""

import logging

from django.utils import timezone
from django_q.tasks import async_task

from core.exceptions import HogwatchError

from .config import load_config
from .models import ExperimentRun
from .reports import emit_reports
from .services import ExperimentService

logger = logging.getLogger(__name__)


def enqueue_run(run: ExperimentRun) -> str:
    """Hand a QUEUED run to the cluster; returns the django-q task id."""
    task_id = async_task('experiments.tasks.execute_run', str(run.id), task_name=f'experiment-{run.id}')
    logger.info('Queued run %s as task %s', run.id, task_id)
    return task_id


def execute_run(run_id: str) -> str:
    run = ExperimentRun.objects.get(pk=run_id)
    run.status = ExperimentRun.Status.RUNNING
    run.started_at = timezone.now()
    run.save(update_fields=['status', 'started_at', 'updated_at'])

    try:
        cfg = load_config(run.config)
        result = ExperimentService.run_experiment(cfg)
        emit_reports(result, run.output_dir or ExperimentService.output_dir_for(cfg))
        ExperimentService.record(result, run=run)
    except HogwatchError as exc:
        logger.error('Run %s failed: %s', run_id, exc)
        _mark_failed(run, str(exc))
    except Exception as exc:
        # Unwritable results directory, database trouble and the like
        logger.exception('Run %s crashed', run_id)
        _mark_failed(run, f'{type(exc).__name__}: {exc}')
    return run.status


def _mark_failed(run: ExperimentRun, message: str):
    run.status = ExperimentRun.Status.FAILED
    run.error_message = message
    run.finished_at = timezone.now()
    run.save(update_fields=['status', 'error_message', 'finished_at', 'updated_at'])
