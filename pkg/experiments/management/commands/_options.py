"""
Shared command-line handling for the run and compare commands
"""

import json
from pathlib import Path

from django.conf import settings
from django.core.management.base import CommandError

from core.exceptions import HogwatchError
from experiments.config import PRESETS, SERIES, load_config


def add_config_arguments(parser):
    parser.add_argument('--config', help='Path to a JSON experiment config')
    parser.add_argument('--preset', choices=sorted(PRESETS),
                        help='Preset merged underneath the config (default from HOGWATCH_SETTINGS)')
    parser.add_argument('--series', choices=SERIES, help='Use the exp1/exp2 roster series')
    parser.add_argument('--index', type=int, help='Series index 1..6')
    parser.add_argument('--seed', type=int, help='Use this seed for data, init and training')
    parser.add_argument('--out', help='Output directory')
    parser.add_argument('--workers', type=int, help='Threads for client training')


def config_from_options(options, aggregator=None):
    document = {}
    if options.get('config'):
        try:
            document = json.loads(Path(options['config']).read_text())
        except (OSError, ValueError) as exc:
            raise CommandError(f'Cannot read {options["config"]}: {exc}')

    if options.get('series') or options.get('index') is not None:
        roster = document.setdefault('roster', {})
        roster['series'] = options.get('series') or roster.get('series') or 'exp1'
        if options.get('index') is not None:
            roster['index'] = options['index']
    if options.get('seed') is not None:
        document['seeds'] = {key: options['seed'] for key in ('data', 'init', 'training')}
    if options.get('workers'):
        document['workers'] = options['workers']
    if aggregator:
        document.setdefault('aggregator', {})['kind'] = aggregator

    preset = options.get('preset')
    if preset is None and not options.get('config'):
        preset = getattr(settings, 'HOGWATCH_SETTINGS', {}).get('DEFAULT_PRESET')
    try:
        return load_config(document, preset=preset)
    except HogwatchError as exc:
        errors = getattr(exc, 'errors', None)
        raise CommandError(f'{exc}: {errors}' if errors else str(exc))
