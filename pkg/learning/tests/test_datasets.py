import gzip
import hashlib
import struct
import tempfile
from pathlib import Path

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase

from core.exceptions import BadMagic, CountMismatch, EmptyDataset, TruncatedFile
from learning.datasets import (
    Dataset, class_histogram, dirichlet_partition, flip_labels, gaussian_blur, gaussian_kernel,
    load_idx, subsample, synthetic_blobs, write_idx,
)
from learning.network import ModelParams, ModelSpec, TrainerConfig, evaluate, local_train


def mnist_dir() -> Path:
    data_dir = getattr(settings, 'HOGWATCH_SETTINGS', {}).get('DATA_DIR', 'data')
    return Path(data_dir) / 'mnist'


def checksum(dataset: Dataset) -> str:
    digest = hashlib.sha256()
    digest.update(dataset.images.tobytes())
    digest.update(dataset.labels.tobytes())
    return digest.hexdigest()


class IdxCodecTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.pixels = np.arange(2 * 28 * 28, dtype=np.uint8).reshape(2, 28, 28)
        self.labels = np.array([5, 0], dtype=np.uint8)

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip_plain(self):
        images = write_idx(self.root / 'img', self.pixels)
        labels = write_idx(self.root / 'lbl', self.labels)
        dataset = load_idx(images, labels)
        self.assertEqual(len(dataset), 2)
        self.assertEqual(dataset.images.shape, (2, 784))
        np.testing.assert_array_equal(np.rint(dataset.images * 255).astype(np.uint8),
                                      self.pixels.reshape(2, -1))
        np.testing.assert_array_equal(dataset.labels, [5, 0])

    def test_round_trip_gzip(self):
        images = write_idx(self.root / 'img.gz', self.pixels, compress=True)
        labels = write_idx(self.root / 'lbl.gz', self.labels, compress=True)
        self.assertEqual(images.read_bytes()[:2], b'\x1f\x8b')
        dataset = load_idx(images, labels, name='fashion-mnist')
        self.assertEqual(dataset.name, 'fashion-mnist')
        self.assertEqual(dataset.class_names()[1], 'Trouser')
        self.assertAlmostEqual(float(dataset.images.max()), 1.0)

    def test_single_image_fixture_is_exact(self):
        pixels = np.zeros((1, 28, 28), dtype=np.uint8)
        pixels[0, 3, 4] = 255
        pixels[0, 10, 11] = 51
        dataset = load_idx(write_idx(self.root / 'one', pixels), write_idx(self.root / 'lab', np.array([3])))
        self.assertEqual(dataset.images[0, 3 * 28 + 4], 1.0)
        self.assertAlmostEqual(float(dataset.images[0, 10 * 28 + 11]), 0.2, places=6)
        self.assertEqual(float(dataset.images.sum()), float(np.float32(1.0) + np.float32(51 / 255)))

    def test_images_file_with_label_magic(self):
        labels = write_idx(self.root / 'lbl', self.labels)
        with self.assertRaises(BadMagic):
            load_idx(labels, labels)

    def test_truncated_payload(self):
        raw = write_idx(self.root / 'img', self.pixels).read_bytes()
        (self.root / 'short').write_bytes(raw[:-10])
        with self.assertRaises(TruncatedFile):
            load_idx(self.root / 'short', write_idx(self.root / 'lbl', self.labels))

    def test_truncated_header(self):
        (self.root / 'tiny').write_bytes(struct.pack('>I', 0x803))
        with self.assertRaises(TruncatedFile):
            load_idx(self.root / 'tiny', write_idx(self.root / 'lbl', self.labels))

    def test_corrupt_gzip(self):
        (self.root / 'bad.gz').write_bytes(gzip.compress(b'x' * 100)[:12])
        with self.assertRaises(TruncatedFile):
            load_idx(self.root / 'bad.gz', write_idx(self.root / 'lbl', self.labels))

    def test_count_mismatch(self):
        images = write_idx(self.root / 'img', self.pixels)
        labels = write_idx(self.root / 'lbl', np.array([1, 2, 3], dtype=np.uint8))
        with self.assertRaises(CountMismatch):
            load_idx(images, labels)

    def test_loaded_arrays_are_read_only(self):
        dataset = load_idx(write_idx(self.root / 'img', self.pixels), write_idx(self.root / 'lbl', self.labels))
        with self.assertRaises(ValueError):
            dataset.images[0, 0] = 0.5

    def test_official_mnist_train_files(self):
        images = mnist_dir() / 'train-images-idx3-ubyte.gz'
        labels = mnist_dir() / 'train-labels-idx1-ubyte.gz'
        if not (images.exists() and labels.exists()):
            self.skipTest('MNIST files not downloaded (run manage.py fetch_mnist)')
        dataset = load_idx(images, labels)
        self.assertEqual(len(dataset), 60000)
        self.assertEqual(int(dataset.labels[0]), 5)


class DirichletPartitionTests(SimpleTestCase):
    def setUp(self):
        self.blobs = synthetic_blobs(n_classes=10, dim=20, per_class=40, spread=0.1, seed=1)

    def assert_disjoint_cover(self, partition, size):
        flat = np.concatenate(partition.client_indices)
        self.assertEqual(len(flat), size)
        self.assertEqual(len(np.unique(flat)), size)
        self.assertTrue(all(n > 0 for n in partition.sizes()))

    def test_single_client_gets_everything(self):
        partition = dirichlet_partition(self.blobs, n_clients=1, beta=0.9, seed=0)
        np.testing.assert_array_equal(partition.client_indices[0], np.arange(len(self.blobs)))

    def test_disjoint_cover_for_random_settings(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            n_clients = int(rng.integers(1, 30))
            beta = float(rng.choice([0.05, 0.5, 0.9, 5.0, 100.0]))
            partition = dirichlet_partition(self.blobs, n_clients, beta, seed=int(rng.integers(0, 10_000)))
            self.assertEqual(len(partition), n_clients)
            self.assert_disjoint_cover(partition, len(self.blobs))

    def test_tiny_beta_still_leaves_no_client_empty(self):
        partition = dirichlet_partition(self.blobs, n_clients=40, beta=0.01, seed=5)
        self.assert_disjoint_cover(partition, len(self.blobs))

    def test_large_beta_is_near_uniform(self):
        blobs = synthetic_blobs(n_classes=4, dim=8, per_class=400, spread=0.1, seed=2)
        for seed in range(5):
            partition = dirichlet_partition(blobs, n_clients=4, beta=1e6, seed=seed)
            for indices in partition.client_indices:
                counts = np.bincount(blobs.labels[indices], minlength=4)
                np.testing.assert_array_less(np.abs(counts - 100), 5.0 + 1e-9)

    def test_deterministic(self):
        first = dirichlet_partition(self.blobs, 7, 0.9, seed=11)
        second = dirichlet_partition(self.blobs, 7, 0.9, seed=11)
        for a, b in zip(first.client_indices, second.client_indices):
            np.testing.assert_array_equal(a, b)

    def test_too_few_samples(self):
        with self.assertRaises(EmptyDataset):
            dirichlet_partition(self.blobs.subset([0, 1]), n_clients=3, beta=0.9, seed=0)


class TransformTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        labels = np.repeat(np.arange(10), 10)
        images = rng.uniform(0, 1, size=(100, 49)).astype(np.float32)
        self.dataset = Dataset(images=images, labels=labels, name='mnist')
        self.view = self.dataset.view()
        self.digest = checksum(self.dataset)

    def tearDown(self):
        self.assertEqual(checksum(self.dataset), self.digest)

    def test_single_flip(self):
        flipped = flip_labels(self.view, {1: 7})
        counts = class_histogram(flipped.labels, 10)
        self.assertEqual(counts[1], 0)
        self.assertEqual(counts[7], 20)
        self.assertEqual(counts[2], 10)

    def test_multi_flip_empties_sources(self):
        counts = class_histogram(flip_labels(self.view, {1: 7, 2: 7, 3: 7}).labels, 10)
        self.assertEqual([counts[1], counts[2], counts[3]], [0, 0, 0])
        self.assertEqual(counts[7], 40)

    def test_empty_mapping_is_identity(self):
        np.testing.assert_array_equal(flip_labels(self.view, {}).labels, self.view.labels)

    def test_kernel_normalised(self):
        for size, sigma in [(3, 0.5), (7, 50.0), (5, 1.2)]:
            self.assertAlmostEqual(float(gaussian_kernel(size, sigma).sum()), 1.0, delta=1e-9)

    def test_kernel_needs_odd_size(self):
        with self.assertRaises(ValueError):
            gaussian_kernel(4, 1.0)

    def test_zero_fraction_blur_is_identity(self):
        blurred = gaussian_blur(self.view, 0.0, 7, 50.0, seed=1)
        np.testing.assert_array_equal(blurred.images, self.view.images)

    def test_constant_image_unchanged(self):
        constant = Dataset(images=np.full((4, 49), 0.4, dtype=np.float32), labels=np.zeros(4, dtype=int))
        blurred = gaussian_blur(constant.view(), 1.0, 7, 50.0, seed=1)
        np.testing.assert_allclose(blurred.images, 0.4, atol=1e-6)

    def test_half_blurred(self):
        blurred = gaussian_blur(self.view, 0.5, 7, 50.0, seed=2)
        changed = np.any(blurred.images != self.view.images, axis=1)
        self.assertEqual(int(changed.sum()), 50)
        self.assertGreaterEqual(float(blurred.images.min()), 0.0)
        self.assertLessEqual(float(blurred.images.max()), 1.0)

    def test_subsample_thirty_percent(self):
        sample = subsample(self.view, 0.3, seed=4)
        self.assertEqual(len(sample), 30)
        self.assertEqual(len(np.unique(sample.indices)), 30)

    def test_subsample_full_fraction_is_identity_up_to_order(self):
        sample = subsample(self.view, 1.0, seed=4)
        self.assertEqual(sorted(sample.indices.tolist()), list(range(100)))

    def test_subsample_deterministic(self):
        np.testing.assert_array_equal(subsample(self.view, 0.3, seed=(4, 2)).indices,
                                      subsample(self.view, 0.3, seed=(4, 2)).indices)

    def test_subsample_keeps_overrides_aligned(self):
        flipped = flip_labels(self.view, {1: 7})
        sample = subsample(flipped, 0.5, seed=9)
        expected = np.where(self.dataset.labels[sample.indices] == 1, 7, self.dataset.labels[sample.indices])
        np.testing.assert_array_equal(sample.labels, expected)

    def test_subsample_to_nothing(self):
        with self.assertRaises(EmptyDataset):
            subsample(self.dataset.view([0]), 0.3, seed=0)


class SyntheticBlobTests(SimpleTestCase):
    def test_size_and_histogram(self):
        blobs = synthetic_blobs(n_classes=10, dim=30, per_class=10, spread=0.2, seed=0)
        self.assertEqual(len(blobs), 100)
        self.assertEqual(set(class_histogram(blobs.labels, 10).values()), {10})
        self.assertGreaterEqual(float(blobs.images.min()), 0.0)
        self.assertLessEqual(float(blobs.images.max()), 1.0)

    def test_zero_spread_is_linearly_separable(self):
        blobs = synthetic_blobs(n_classes=5, dim=20, per_class=8, spread=0.0, seed=0)
        spec = ModelSpec(layer_sizes=(20, 5))
        params = ModelParams.zeros(spec)
        cfg = TrainerConfig(learning_rate=0.5, momentum=0.0, local_epochs=30, batch_size=8)
        update = local_train(params, blobs, cfg, seed=0)
        trained = ModelParams.unflatten(spec, params.flatten() - update)
        self.assertEqual(evaluate(trained, blobs.images, blobs.labels).accuracy, 1.0)
