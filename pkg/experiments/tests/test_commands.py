import csv
import json
import tempfile
from io import StringIO
from pathlib import Path

from django.core.management import CommandError, call_command
from django.test import SimpleTestCase, TestCase

from experiments.management.commands.compare import parse_indices
from experiments.models import ExperimentRun

from .factories import tiny_document


class CommandTestMixin:
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.config_path = self.tmp / 'tiny.json'
        self.config_path.write_text(json.dumps(tiny_document(rounds=2)))

    def tearDown(self):
        self._tmp.cleanup()


class RunCommandTests(CommandTestMixin, SimpleTestCase):
    def test_writes_reports(self):
        out = StringIO()
        call_command('run', '--config', str(self.config_path), '--out', str(self.tmp / 'run'), stdout=out)
        self.assertTrue((self.tmp / 'run' / 'summary.json').exists())
        self.assertTrue((self.tmp / 'run' / 'model.bin').exists())
        self.assertIn('Final accuracy', out.getvalue())
        self.assertIn('sign_flip: detection ratio', out.getvalue())

    def test_aggregator_and_seed_override(self):
        call_command('run', '--config', str(self.config_path), '--aggregator', 'geomed', '--seed', '7',
                     '--out', str(self.tmp / 'run'), stdout=StringIO())
        summary = json.loads((self.tmp / 'run' / 'summary.json').read_text())
        self.assertEqual(summary['aggregator'], 'geomed')
        self.assertEqual(summary['config']['seeds'], {'data': 7, 'init': 7, 'training': 7})

    def test_missing_config_file(self):
        with self.assertRaises(CommandError):
            call_command('run', '--config', str(self.tmp / 'absent.json'), stdout=StringIO())

    def test_invalid_config(self):
        self.config_path.write_text(json.dumps({'n_clients': 0}))
        with self.assertRaises(CommandError):
            call_command('run', '--config', str(self.config_path), stdout=StringIO())


class RunCommandRecordTests(CommandTestMixin, TestCase):
    def test_record_flag_stores_run(self):
        call_command('run', '--config', str(self.config_path), '--out', str(self.tmp / 'run'), '--record',
                     stdout=StringIO())
        run = ExperimentRun.objects.get()
        self.assertEqual(run.status, ExperimentRun.Status.COMPLETED)
        self.assertEqual(run.output_dir, str(self.tmp / 'run'))
        self.assertEqual(run.rounds.count(), 2)


class CompareCommandTests(CommandTestMixin, SimpleTestCase):
    def test_writes_comparison_table(self):
        call_command('compare', '--config', str(self.config_path), '--aggregators', 'fedavg,median,mudhog',
                     '--out', str(self.tmp / 'cmp'), stdout=StringIO())
        with (self.tmp / 'cmp' / 'comparison.csv').open(newline='') as handle:
            rows = list(csv.reader(handle))
        self.assertEqual([row[0] for row in rows[1:]], ['fedavg', 'median', 'mudhog'])
        self.assertTrue((self.tmp / 'cmp' / 'comparison.xlsx').exists())
        self.assertTrue((self.tmp / 'cmp' / 'roster' / 'median' / 'metrics.csv').exists())

    def test_unknown_aggregator(self):
        with self.assertRaises(CommandError):
            call_command('compare', '--config', str(self.config_path), '--aggregators', 'fedavg,bulyan',
                         stdout=StringIO())

    def test_bad_indices(self):
        with self.assertRaises(CommandError):
            call_command('compare', '--config', str(self.config_path), '--indices', 'one-two', stdout=StringIO())


class ParseIndicesTests(SimpleTestCase):
    def test_ranges_and_lists(self):
        self.assertEqual(parse_indices('1-6'), [1, 2, 3, 4, 5, 6])
        self.assertEqual(parse_indices('2,4'), [2, 4])
        self.assertEqual(parse_indices('1, 3-4'), [1, 3, 4])
