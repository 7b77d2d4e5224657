"""
Management command to run one experiment and write its reports
"""

from django.core.management.base import BaseCommand, CommandError

from core.exceptions import HogwatchError
from experiments.reports import emit_reports
from experiments.services import ExperimentService
from federation.baselines import AGGREGATOR_KINDS

from ._options import add_config_arguments, config_from_options


class Command(BaseCommand):
    help = 'Run a federated-learning experiment and write its report files'

    def add_arguments(self, parser):
        add_config_arguments(parser)
        parser.add_argument('--aggregator', choices=AGGREGATOR_KINDS, help='Aggregation rule')
        parser.add_argument('--record', action='store_true', help='Store the finished run in the database')

    def handle(self, *args, **options):
        cfg = config_from_options(options, aggregator=options.get('aggregator'))
        out_dir = ExperimentService.output_dir_for(cfg, options.get('out'))
        self.stdout.write(f'Running {cfg.name}: {cfg.aggregator.kind}, {cfg.n_clients} clients, '
                          f'{cfg.rounds} rounds -> {out_dir}')
        try:
            result = ExperimentService.run_experiment(cfg)
            emit_reports(result, out_dir)
            if options['record']:
                run = ExperimentService.record(result)
                self.stdout.write(f'Recorded as run {run.id}')
        except (HogwatchError, OSError) as exc:
            raise CommandError(str(exc))

        final = result.summary['final']
        self.stdout.write(self.style.SUCCESS(f'Final accuracy {final["accuracy"]}; reports in {out_dir}'))
        detection = result.summary['detection']
        if detection:
            for kind, values in detection['by_type'].items():
                self.stdout.write(f'  {kind}: detection ratio {values["ratio"]:.3f}, '
                                  f'first detected in round {values["first_detection"]}')
