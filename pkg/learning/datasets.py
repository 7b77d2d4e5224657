"""
Dataset ingestion, non-IID partitioning and client-side data transforms

Datasets are immutable after construction (their arrays are flagged
read-only). Everything a client trains on is a DatasetView: a set of indices
into a base Dataset plus, optionally, locally materialised relabelled or
blurred copies. Transforms return new views and never touch the base.
"""

import gzip
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from core.exceptions import BadMagic, CountMismatch, EmptyDataset, TruncatedFile
from core.rng import STREAM_BLUR, STREAM_PARTITION, STREAM_SUBSAMPLE, STREAM_SYNTHETIC, rng_for

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
GZIP_MAGIC = b'\x1f\x8b'

DATASET_NAMES = ('mnist', 'fashion-mnist', 'synthetic')

CLASS_NAMES = {
    'mnist': [str(digit) for digit in range(10)],
    'fashion-mnist': [
        'T-shirt/top', 'Trouser', 'Pullover', 'Dress', 'Coat',
        'Sandal', 'Shirt', 'Sneaker', 'Bag', 'Ankle boot',
    ],
}


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Dataset:
    """N x D image matrix scaled to [0, 1] with integer labels."""
    images: np.ndarray
    labels: np.ndarray
    name: str = 'synthetic'

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatch(f'{len(self.images)} images but {len(self.labels)} labels')

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def class_names(self) -> List[str]:
        return CLASS_NAMES.get(self.name, [str(c) for c in range(max(self.n_classes, 10))])

    def subset(self, indices) -> 'Dataset':
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            images=_frozen(self.images[indices].copy()),
            labels=_frozen(self.labels[indices].copy()),
            name=self.name,
        )

    def view(self, indices=None) -> 'DatasetView':
        if indices is None:
            indices = np.arange(len(self))
        return DatasetView(base=self, indices=_frozen(np.asarray(indices, dtype=np.int64).copy()))


@dataclass(frozen=True)
class DatasetView:
    """
    Read-only window onto a Dataset.

    `image_overrides` / `label_overrides`, when present, are aligned with
    `indices` and replace the base values for this view only.
    """
    base: Dataset
    indices: np.ndarray
    image_overrides: Optional[np.ndarray] = None
    label_overrides: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.indices)

    @property
    def images(self) -> np.ndarray:
        if self.image_overrides is not None:
            return self.image_overrides
        return self.base.images[self.indices]

    @property
    def labels(self) -> np.ndarray:
        if self.label_overrides is not None:
            return self.label_overrides
        return self.base.labels[self.indices]

    def take(self, positions) -> 'DatasetView':
        """Restrict the view to the given positions (not base indices)."""
        positions = np.asarray(positions, dtype=np.int64)
        return DatasetView(
            base=self.base,
            indices=_frozen(self.indices[positions].copy()),
            image_overrides=None if self.image_overrides is None
            else _frozen(self.image_overrides[positions].copy()),
            label_overrides=None if self.label_overrides is None
            else _frozen(self.label_overrides[positions].copy()),
        )


@dataclass(frozen=True)
class Partition:
    client_indices: tuple

    def __len__(self):
        return len(self.client_indices)

    def sizes(self) -> List[int]:
        return [len(indices) for indices in self.client_indices]


# IDX codec

def _read_maybe_gzip(path: Union[str, Path]) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == GZIP_MAGIC:
        try:
            return gzip.decompress(raw)
        except (EOFError, OSError) as exc:
            raise TruncatedFile(f'{path}: corrupt gzip stream ({exc})') from exc
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 8:
        raise TruncatedFile(f'{path}: header too short')
    magic, = struct.unpack_from('>I', raw, 0)
    if magic != expected_magic:
        raise BadMagic(f'{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}')
    n_dims = magic & 0xFF
    header_size = 4 + 4 * n_dims
    if len(raw) < header_size:
        raise TruncatedFile(f'{path}: header too short for {n_dims} dimensions')
    dims = struct.unpack_from(f'>{n_dims}I', raw, 4)
    expected = int(np.prod(dims))
    if len(raw) - header_size < expected:
        raise TruncatedFile(f'{path}: expected {expected} bytes of data, got {len(raw) - header_size}')
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header_size).reshape(dims)


def load_idx(images_path, labels_path, name: str = 'mnist') -> Dataset:
    """
    Parse an IDX image file (magic 0x803, dims N x 28 x 28, unsigned bytes) and
    its label file (magic 0x801, dim N). Either may be gzip-compressed.
    """
    images = _parse_idx(_read_maybe_gzip(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_maybe_gzip(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f'{images.shape[0]} images but {labels.shape[0]} labels')
    pixels = images.reshape(images.shape[0], -1).astype(np.float32) / 255.0
    logger.info('Loaded %d samples from %s', len(labels), images_path)
    return Dataset(
        images=_frozen(pixels),
        labels=_frozen(labels.astype(np.int64)),
        name=name,
    )


def write_idx(path, array: np.ndarray, compress: bool = False) -> Path:
    """Write a uint8 array as IDX (3-D -> image magic, 1-D -> label magic)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = IDX_IMAGES_MAGIC if array.ndim == 3 else IDX_LABELS_MAGIC
    if array.ndim not in (1, 3):
        raise ValueError('IDX fixtures are either N x rows x cols images or N labels')
    payload = struct.pack('>I', magic) + struct.pack(f'>{array.ndim}I', *array.shape) + array.tobytes()
    if compress:
        payload = gzip.compress(payload, mtime=0)
    path = Path(path)
    path.write_bytes(payload)
    return path


# Partitioning

def dirichlet_partition(dataset: Dataset, n_clients: int, beta: float, seed: int) -> Partition:
    """
    Per class, draw client proportions from Dirichlet(beta) and split that
    class's shuffled indices by cumulative proportion. Clients left empty are
    topped up with one sample taken from the currently largest client.
    """
    if n_clients < 1:
        raise ValueError('n_clients must be at least 1')
    if len(dataset) < n_clients:
        raise EmptyDataset(f'{len(dataset)} samples cannot cover {n_clients} clients')
    rng = rng_for(seed, STREAM_PARTITION)
    buckets: List[List[int]] = [[] for _ in range(n_clients)]

    for label in np.unique(dataset.labels):
        members = rng.permutation(np.flatnonzero(dataset.labels == label))
        proportions = rng.dirichlet(np.full(n_clients, float(beta)))
        cuts = (np.cumsum(proportions) * len(members)).astype(int)[:-1]
        for client, chunk in enumerate(np.split(members, cuts)):
            buckets[client].extend(int(i) for i in chunk)

    for client in range(n_clients):
        if not buckets[client]:
            donor = max(range(n_clients), key=lambda c: (len(buckets[c]), -c))
            buckets[client].append(buckets[donor].pop())

    empty = [c for c, bucket in enumerate(buckets) if not bucket]
    if empty:
        raise EmptyDataset(f'clients {empty} received no samples')
    return Partition(client_indices=tuple(_frozen(np.array(sorted(b), dtype=np.int64)) for b in buckets))


# Transforms

def _stream(seed: Union[int, Sequence[int]], tag: int) -> np.random.Generator:
    """seed may be a bare int or (seed, *keys), e.g. (seed, client_id, round)."""
    keys = tuple(seed) if isinstance(seed, (list, tuple)) else (seed,)
    return rng_for(keys[0], tag, *keys[1:])


def flip_labels(view: DatasetView, mapping: Mapping[int, int]) -> DatasetView:
    """Relabel every sample whose label is a mapping key to its target."""
    if not mapping:
        return view
    labels = np.array(view.labels, copy=True)
    original = np.asarray(view.labels)
    for source, target in mapping.items():
        labels[original == int(source)] = int(target)
    return replace(view, label_overrides=_frozen(labels))


def gaussian_kernel(kernel_size: int, sigma: float) -> np.ndarray:
    if kernel_size % 2 != 1:
        raise ValueError('kernel_size must be odd')
    if sigma <= 0:
        raise ValueError('sigma must be positive')
    offsets = np.arange(kernel_size) - kernel_size // 2
    profile = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    kernel = np.outer(profile, profile)
    return kernel / kernel.sum()


def _image_side(width: int) -> int:
    side = int(round(np.sqrt(width)))
    if side * side != width:
        raise ValueError(f'Cannot blur {width}-pixel rows: not a square image')
    return side


def gaussian_blur(view: DatasetView, fraction: float, kernel_size: int, sigma: float,
                  seed: Union[int, Sequence[int]]) -> DatasetView:
    """Blur a seed-chosen fraction of the view's images (reflect padding)."""
    if not 0 <= fraction <= 1:
        raise ValueError('fraction must lie in [0, 1]')
    kernel = gaussian_kernel(kernel_size, sigma)
    count = int(round(fraction * len(view)))
    if count == 0:
        return view
    images = np.array(view.images, copy=True)
    side = _image_side(images.shape[1])
    chosen = _stream(seed, STREAM_BLUR).choice(len(view), size=count, replace=False)
    for position in chosen:
        picture = images[position].reshape(side, side).astype(np.float64)
        blurred = ndimage.convolve(picture, kernel, mode='reflect')
        images[position] = np.clip(blurred, 0.0, 1.0).reshape(-1)
    return replace(view, image_overrides=_frozen(images))


def subsample(view: DatasetView, fraction: float, seed: Union[int, Sequence[int]]) -> DatasetView:
    """Uniform sample without replacement of round(fraction * len) items."""
    if not 0 < fraction <= 1:
        raise ValueError('fraction must lie in (0, 1]')
    count = int(round(fraction * len(view)))
    if count < 1:
        raise EmptyDataset(f'Subsampling {len(view)} samples at {fraction} leaves nothing')
    positions = np.sort(_stream(seed, STREAM_SUBSAMPLE).choice(len(view), size=count, replace=False))
    return view.take(positions)


def synthetic_blobs(n_classes: int, dim: int, per_class: int, spread: float, seed: int) -> Dataset:
    """
    Gaussian clusters, one per class. Class c's mean lights up its own block of
    dim // n_classes coordinates at intensity 1; samples are clipped to [0, 1].
    """
    if min(n_classes, dim, per_class) <= 0 or spread < 0:
        raise ValueError('synthetic_blobs needs positive sizes and non-negative spread')
    if dim < n_classes:
        raise ValueError('dim must be at least n_classes')
    rng = rng_for(seed, STREAM_SYNTHETIC)
    block = dim // n_classes
    means = np.zeros((n_classes, dim))
    for label in range(n_classes):
        means[label, label * block:(label + 1) * block] = 1.0

    labels = np.repeat(np.arange(n_classes), per_class)
    noise = rng.normal(0.0, spread, size=(len(labels), dim)) if spread > 0 else 0.0
    images = np.clip(means[labels] + noise, 0.0, 1.0).astype(np.float32)
    order = rng.permutation(len(labels))
    return Dataset(images=_frozen(images[order]), labels=_frozen(labels[order].astype(np.int64)), name='synthetic')


def class_histogram(labels, n_classes: int) -> Dict[int, int]:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)
    return {label: int(count) for label, count in enumerate(counts)}
