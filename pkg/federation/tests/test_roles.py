import numpy as np
from django.test import SimpleTestCase

from core.exceptions import EmptyDataset
from core.vecspace import cosine
from federation.roles import (
    ClientRole, RoleKind, UnreliableSettings, assign_roles, build_client, produce_update, training_view,
)
from learning.datasets import class_histogram, synthetic_blobs
from learning.network import ModelParams, ModelSpec, TrainerConfig

TRAINER = TrainerConfig(learning_rate=0.05, momentum=0.5, local_epochs=1, batch_size=8)


class RoleTests(SimpleTestCase):
    def test_for_kind_fills_default_mappings(self):
        self.assertEqual(ClientRole.for_kind('label_flip').mapping, ((1, 7),))
        self.assertEqual(ClientRole.for_kind('multi_label_flip').mapping, ((1, 7), (2, 7), (3, 7)))
        self.assertEqual(ClientRole.for_kind('sign_flip').mapping, ())

    def test_targeted_role_needs_mapping(self):
        with self.assertRaises(ValueError):
            ClientRole(kind=RoleKind.LABEL_FLIP)

    def test_flags(self):
        self.assertTrue(ClientRole.for_kind('additive_noise').is_malicious)
        self.assertFalse(ClientRole.for_kind('additive_noise').is_targeted)
        self.assertTrue(ClientRole.for_kind('label_flip').is_targeted)
        self.assertFalse(ClientRole.for_kind('unreliable').is_malicious)

    def test_assign_roles_in_roster_order(self):
        roles = assign_roles(8, {'sign_flip': 1, 'unreliable': 2, 'label_flip': 1, 'additive_noise': 1})
        self.assertEqual([r.kind.value for r in roles], [
            'unreliable', 'unreliable', 'additive_noise', 'sign_flip', 'label_flip',
            'normal', 'normal', 'normal',
        ])

    def test_assign_roles_overflow(self):
        with self.assertRaises(ValueError):
            assign_roles(2, {'sign_flip': 3})


class ProduceUpdateTests(SimpleTestCase):
    def setUp(self):
        self.blobs = synthetic_blobs(n_classes=4, dim=16, per_class=10, spread=0.1, seed=0)
        self.view = self.blobs.view()
        self.params = ModelParams.initialize(ModelSpec(layer_sizes=(16, 8, 4)), seed=1)

    def make_client(self, kind, client_id=3, **kwargs):
        return build_client(client_id, ClientRole.for_kind(kind, **kwargs), self.view, TRAINER, seed=7)

    def test_sign_flip_negates_honest_update(self):
        honest = produce_update(self.make_client('normal'), self.params, round_number=2, seed=7)
        flipped = produce_update(self.make_client('sign_flip'), self.params, round_number=2, seed=7)
        np.testing.assert_array_equal(flipped, -honest)
        self.assertEqual(cosine(flipped, honest), -1.0)

    def test_additive_noise_scale(self):
        blobs = synthetic_blobs(n_classes=10, dim=100, per_class=3, spread=0.1, seed=2)
        params = ModelParams.initialize(ModelSpec(layer_sizes=(100, 100, 10)), seed=3)
        self.assertGreaterEqual(params.spec.param_count, 10_000)
        honest_client = build_client(0, ClientRole(), blobs.view(), TRAINER, seed=5)
        noisy_client = build_client(0, ClientRole.for_kind('additive_noise', sigma=0.01), blobs.view(), TRAINER, seed=5)
        honest = produce_update(honest_client, params, round_number=1, seed=5)
        noisy = produce_update(noisy_client, params, round_number=1, seed=5)
        per_coordinate = np.linalg.norm(noisy - honest) / np.sqrt(params.spec.param_count)
        self.assertAlmostEqual(per_coordinate, 0.01, delta=0.002)

    def test_additive_noise_is_fresh_each_round(self):
        client = self.make_client('additive_noise')
        honest = self.make_client('normal')
        first = produce_update(client, self.params, 4, seed=7) - produce_update(honest, self.params, 4, seed=7)
        second = produce_update(client, self.params, 5, seed=7) - produce_update(honest, self.params, 5, seed=7)
        self.assertFalse(np.allclose(first, second))

    def test_label_flip_view(self):
        counts = class_histogram(self.make_client('label_flip').data.labels, 10)
        self.assertEqual(counts[1], 0)
        self.assertEqual(counts[3], 10)

    def test_multi_label_flip_view(self):
        counts = class_histogram(self.make_client('multi_label_flip').data.labels, 10)
        self.assertEqual([counts[1], counts[2], counts[3]], [0, 0, 0])
        self.assertEqual(counts[7], 30)

    def test_unreliable_view_counts(self):
        client = self.make_client('unreliable')
        changed = np.any(client.data.images != self.view.images, axis=1)
        self.assertEqual(int(changed.sum()), 20)
        self.assertEqual(client.data_size, 40)
        self.assertEqual(len(training_view(client, 4, seed=7)), 12)

    def test_unreliable_subsample_fresh_or_fixed(self):
        fresh = self.make_client('unreliable')
        self.assertFalse(np.array_equal(training_view(fresh, 4, seed=7).indices,
                                        training_view(fresh, 5, seed=7).indices))
        fixed = build_client(3, ClientRole.for_kind('unreliable'), self.view, TRAINER, seed=7,
                             unreliable=UnreliableSettings(fresh_subsample=False))
        np.testing.assert_array_equal(training_view(fixed, 4, seed=7).indices,
                                      training_view(fixed, 5, seed=7).indices)

    def test_transform_applied_once(self):
        client = self.make_client('unreliable')
        before = client.data.images.copy()
        for round_number in (1, 2, 3):
            produce_update(client, self.params, round_number, seed=7)
        np.testing.assert_array_equal(client.data.images, before)
        again = self.make_client('unreliable')
        np.testing.assert_array_equal(again.data.images, before)

    def test_deterministic(self):
        client = self.make_client('additive_noise')
        first = produce_update(client, self.params, 6, seed=7)
        second = produce_update(client, self.params, 6, seed=7)
        self.assertEqual(first.tobytes(), second.tobytes())

    def test_empty_partition(self):
        with self.assertRaises(EmptyDataset):
            build_client(0, ClientRole(), self.blobs.view([]), TRAINER, seed=0)
