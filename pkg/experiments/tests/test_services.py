import tempfile

import numpy as np
from django.test import SimpleTestCase, TestCase

from core.exceptions import ExperimentError
from experiments.config import load_config
from experiments.models import ExperimentRun
from experiments.services import ExperimentService, comparison_row, load_datasets, watched_classes

from .factories import UserFactory, tiny_document


class LoadDatasetsTests(SimpleTestCase):
    def test_synthetic_train_and_test_differ(self):
        cfg = load_config(tiny_document())
        train, test = load_datasets(cfg.dataset, seed=0)
        self.assertEqual(len(train), 4 * 30)
        self.assertEqual(len(test), 4 * 10)
        self.assertFalse(np.array_equal(train.images[:10], test.images[:10]))

    def test_caps_are_deterministic(self):
        cfg = load_config(tiny_document(dataset={'train_subsample': 50, 'test_cap': 12}))
        first = load_datasets(cfg.dataset, seed=3)
        second = load_datasets(cfg.dataset, seed=3)
        self.assertEqual((len(first[0]), len(first[1])), (50, 12))
        np.testing.assert_array_equal(first[0].labels, second[0].labels)

    def test_watched_classes(self):
        self.assertEqual(watched_classes(load_config(tiny_document())), ((1,), 3))
        multi = load_config(tiny_document(roster={'counts': {'multi_label_flip': 1}}))
        self.assertEqual(watched_classes(multi), ((1, 2), 3))


class RunExperimentTests(SimpleTestCase):
    def test_runs_every_round(self):
        seen = []
        result = ExperimentService.run_experiment(load_config(tiny_document()), on_round=seen.append)
        self.assertEqual([r.round_number for r in result.reports], [1, 2, 3, 4])
        self.assertEqual(len(seen), 4)
        self.assertEqual(len(result.roles), 6)
        self.assertEqual(result.roles[0].kind, 'sign_flip')
        for report in result.reports:
            self.assertTrue(0.0 <= report.accuracy <= 1.0)
            self.assertEqual(report.confusion.sum(), 40)
        self.assertIsNotNone(result.summary['detection'])
        self.assertEqual(result.summary['roster']['normal'], 5)

    def test_same_seeds_same_results(self):
        cfg = load_config(tiny_document())
        first = ExperimentService.run_experiment(cfg)
        second = ExperimentService.run_experiment(cfg)
        self.assertEqual(first.summary, second.summary)
        np.testing.assert_array_equal(first.params.flatten(), second.params.flatten())

    def test_thread_count_does_not_change_results(self):
        single = ExperimentService.run_experiment(load_config(tiny_document(workers=1)))
        pooled = ExperimentService.run_experiment(load_config(tiny_document(workers=4)))
        np.testing.assert_array_equal(single.params.flatten(), pooled.params.flatten())

    def test_fedavg_and_mudhog_agree_on_all_normal_roster(self):
        document = tiny_document(roster={'counts': {'sign_flip': 0}}, rounds=6)
        fedavg = ExperimentService.run_experiment(load_config(dict(document, aggregator={'kind': 'fedavg'})))
        mudhog = ExperimentService.run_experiment(load_config(document))
        self.assertEqual(mudhog.reports[-1].verdict.firm_malicious, frozenset())
        np.testing.assert_allclose(mudhog.params.flatten(), fedavg.params.flatten(), atol=1e-10)
        np.testing.assert_allclose([r.loss for r in mudhog.reports], [r.loss for r in fedavg.reports], atol=1e-8)

    def test_baselines_report_no_detection(self):
        result = ExperimentService.run_experiment(load_config(tiny_document(aggregator={'kind': 'median'})))
        self.assertIsNone(result.summary['detection'])
        self.assertIsNone(result.reports[0].verdict)

    def test_missing_image_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            cfg = load_config(tiny_document(dataset={'name': 'mnist', 'data_dir': tmp}))
            with self.assertRaises(ExperimentError):
                ExperimentService.run_experiment(cfg)

    def test_comparison_row(self):
        result = ExperimentService.run_experiment(load_config(tiny_document(aggregator={'kind': 'fedavg'})))
        row = comparison_row(result)
        self.assertEqual(row['aggregator'], 'fedavg')
        self.assertAlmostEqual(row['malicious_fraction'], 1 / 6)
        self.assertIsNone(row['detection_ratio'])
        self.assertEqual(row['final_accuracy'], result.summary['final']['accuracy'])

    def test_output_dir_for(self):
        cfg = load_config(tiny_document())
        self.assertEqual(str(ExperimentService.output_dir_for(cfg, '/tmp/x')), '/tmp/x')
        self.assertEqual(ExperimentService.output_dir_for(cfg).parts[-2:], ('tiny', 'mudhog'))


class CompareTests(SimpleTestCase):
    def test_one_row_per_aggregator(self):
        cfg = load_config(tiny_document(rounds=2))
        rows = ExperimentService.compare(cfg, ['fedavg', 'krum'])
        self.assertEqual([row['aggregator'] for row in rows], ['fedavg', 'krum'])

    def test_series_indices(self):
        document = tiny_document(n_clients=18, rounds=2, roster={'series': 'exp1', 'index': 1})
        rows = ExperimentService.compare(load_config(document), ['fedavg'], indices=[1, 2])
        self.assertEqual([row['index'] for row in rows], [1, 2])
        self.assertAlmostEqual(rows[0]['malicious_fraction'], 5 / 18)
        self.assertAlmostEqual(rows[1]['malicious_fraction'], 8 / 18)


class RecordTests(TestCase):
    def test_record_stores_run_and_snapshots(self):
        user = UserFactory()
        result = ExperimentService.run_experiment(load_config(tiny_document()))
        run = ExperimentService.record(result, user=user)
        run.refresh_from_db()
        self.assertEqual(run.status, ExperimentRun.Status.COMPLETED)
        self.assertEqual(run.created_by, user)
        self.assertEqual(run.rounds.count(), 4)
        self.assertEqual(run.final_accuracy, result.summary['final']['accuracy'])
        self.assertEqual(list(run.rounds.values_list('round_number', flat=True)), [1, 2, 3, 4])

    def test_record_replaces_snapshots(self):
        result = ExperimentService.run_experiment(load_config(tiny_document(rounds=2)))
        run = ExperimentService.record(result)
        ExperimentService.record(result, run=run)
        self.assertEqual(run.rounds.count(), 2)
