"""
Management command to run one config under several aggregators
"""

from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from core.exceptions import HogwatchError
from experiments.reports import write_comparison
from experiments.services import ExperimentService
from federation.baselines import AGGREGATOR_KINDS

from ._options import add_config_arguments, config_from_options


def parse_indices(text):
    """'1-6' -> [1, ..., 6]; '2,4' -> [2, 4]"""
    indices = []
    for part in text.split(','):
        part = part.strip()
        if '-' in part:
            low, high = (int(v) for v in part.split('-', 1))
            indices.extend(range(low, high + 1))
        elif part:
            indices.append(int(part))
    return indices


class Command(BaseCommand):
    help = 'Run a config across aggregators (and series indices) and write a comparison table'

    def add_arguments(self, parser):
        add_config_arguments(parser)
        parser.add_argument('--aggregators', default=','.join(AGGREGATOR_KINDS),
                            help='Comma-separated aggregators (default: all seven)')
        parser.add_argument('--indices', help="Series indices, e.g. '1-6' or '2,4'")

    def handle(self, *args, **options):
        aggregators = [a.strip() for a in options['aggregators'].split(',') if a.strip()]
        unknown = sorted(set(aggregators) - set(AGGREGATOR_KINDS))
        if unknown:
            raise CommandError(f'Unknown aggregators: {", ".join(unknown)}')
        try:
            indices = parse_indices(options['indices']) if options.get('indices') else None
        except ValueError:
            raise CommandError(f'Bad --indices value {options["indices"]!r}')
        if indices:
            options['series'] = options.get('series') or 'exp1'
            options['index'] = indices[0]

        cfg = config_from_options(options, aggregator=aggregators[0])
        default_dir = ExperimentService.output_dir_for(cfg).parent / 'compare'
        out_dir = Path(options.get('out') or cfg.output_dir or default_dir)
        try:
            rows = ExperimentService.compare(cfg, aggregators, indices=indices, out_dir=out_dir)
            paths = write_comparison(rows, out_dir)
        except (HogwatchError, OSError) as exc:
            raise CommandError(str(exc))

        for row in rows:
            self.stdout.write(f'{row["aggregator"]:>10} index {row["index"] or "-"}: '
                              f'accuracy {row["final_accuracy"]}')
        self.stdout.write(self.style.SUCCESS(f'Comparison written to {paths[0]}'))
