"""
Multi-layer perceptron used by every simulated client

ReLU hidden layers with a softmax output, trained with mini-batch SGD
(momentum + weight decay) on mean cross-entropy. Gradients are derived by
hand; parameters flatten to a single GradientVector so the server can treat
client updates as plain vectors.

Flatten order is fixed: layer by layer, each layer's weight matrix
(row-major, shape in x out) followed by its bias vector.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from core.exceptions import DimensionMismatch, EmptyDataset
from core.rng import STREAM_INIT, STREAM_TRAIN, rng_for
from core.vecspace import GradientVector

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'HOGW'
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: Tuple[int, ...] = (784, 128, 64, 10)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError('A model needs at least an input and an output layer')
        if any(s <= 0 for s in sizes):
            raise ValueError(f'Layer sizes must be positive, got {sizes}')
        object.__setattr__(self, 'layer_sizes', sizes)

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def shapes(self):
        return list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def param_count(self) -> int:
        return sum(n_in * n_out + n_out for n_in, n_out in self.shapes)


@dataclass(frozen=True)
class ModelParams:
    """Weights (in x out) and biases per layer. Treated as immutable once built."""
    spec: ModelSpec
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    def flatten(self) -> GradientVector:
        parts = []
        for weight, bias in zip(self.weights, self.biases):
            parts.append(weight.ravel())
            parts.append(bias.ravel())
        return np.concatenate(parts).astype(np.float64, copy=False)

    @classmethod
    def unflatten(cls, spec: ModelSpec, vector) -> 'ModelParams':
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (spec.param_count,):
            raise DimensionMismatch(
                f'Expected {spec.param_count} parameters for {spec.layer_sizes}, got {vector.shape}'
            )
        weights, biases, offset = [], [], 0
        for n_in, n_out in spec.shapes:
            weights.append(vector[offset:offset + n_in * n_out].reshape(n_in, n_out).copy())
            offset += n_in * n_out
            biases.append(vector[offset:offset + n_out].copy())
            offset += n_out
        return cls(spec=spec, weights=tuple(weights), biases=tuple(biases))

    @classmethod
    def zeros(cls, spec: ModelSpec) -> 'ModelParams':
        return cls.unflatten(spec, np.zeros(spec.param_count))

    @classmethod
    def initialize(cls, spec: ModelSpec, seed: int) -> 'ModelParams':
        """He-normal weights, zero biases."""
        rng = rng_for(seed, STREAM_INIT)
        weights = tuple(
            rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)) for n_in, n_out in spec.shapes
        )
        biases = tuple(np.zeros(n_out) for _, n_out in spec.shapes)
        return cls(spec=spec, weights=weights, biases=biases)


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 1e-2
    momentum: float = 0.5
    weight_decay: float = 0.0
    local_epochs: int = 4
    batch_size: int = 64

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError('learning_rate must be non-negative')
        if not 0 <= self.momentum < 1:
            raise ValueError('momentum must lie in [0, 1)')
        if self.weight_decay < 0:
            raise ValueError('weight_decay must be non-negative')
        if self.local_epochs < 1:
            raise ValueError('local_epochs must be at least 1')
        if self.batch_size < 1:
            raise ValueError('batch_size must be at least 1')


@dataclass(frozen=True)
class Evaluation:
    accuracy: float
    loss: float
    confusion: np.ndarray = field(repr=False)


def _check_batch(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] != params.spec.input_dim:
        raise DimensionMismatch(
            f'Batch of shape {batch.shape} does not match input dim {params.spec.input_dim}'
        )
    return batch


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _forward_pass(params: ModelParams, batch: np.ndarray):
    """Return (activations per layer input, pre-activations, output logits)."""
    activations = [batch]
    pre_activations = []
    current = batch
    last = len(params.weights) - 1
    for index, (weight, bias) in enumerate(zip(params.weights, params.biases)):
        z = current @ weight + bias
        pre_activations.append(z)
        if index < last:
            current = np.maximum(z, 0.0)
            activations.append(current)
        else:
            current = z
    return activations, pre_activations, current


def forward(params: ModelParams, batch) -> np.ndarray:
    """Class-probability matrix for a batch of feature rows."""
    batch = _check_batch(params, batch)
    _, _, logits = _forward_pass(params, batch)
    return np.exp(_log_softmax(logits))


def backward(params: ModelParams, batch, labels) -> Tuple[float, GradientVector]:
    """Mean cross-entropy over the batch and its exact gradient w.r.t. flatten(params)."""
    batch = _check_batch(params, batch)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch.shape[0],):
        raise DimensionMismatch(f'{labels.shape[0]} labels for {batch.shape[0]} samples')
    n = batch.shape[0]

    activations, pre_activations, logits = _forward_pass(params, batch)
    log_probs = _log_softmax(logits)
    loss = float(-log_probs[np.arange(n), labels].mean())

    delta = np.exp(log_probs)
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    weight_grads = [None] * len(params.weights)
    bias_grads = [None] * len(params.weights)
    for layer in range(len(params.weights) - 1, -1, -1):
        weight_grads[layer] = activations[layer].T @ delta
        bias_grads[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ params.weights[layer].T) * (pre_activations[layer - 1] > 0)

    parts = []
    for weight_grad, bias_grad in zip(weight_grads, bias_grads):
        parts.append(weight_grad.ravel())
        parts.append(bias_grad)
    return loss, np.concatenate(parts)


def local_train(params: ModelParams, data, cfg: TrainerConfig,
                seed: Union[int, np.random.Generator]) -> GradientVector:
    """
    Run cfg.local_epochs of mini-batch SGD from params on data and return the
    pseudo-gradient flatten(params) - flatten(trained).

    data is anything exposing `images` and `labels` arrays. Momentum buffers
    start at zero; weight decay follows the coupled (L2-in-gradient) form.
    """
    images = np.asarray(data.images)
    labels = np.asarray(data.labels)
    if len(labels) == 0:
        raise EmptyDataset('local_train received an empty dataset')
    rng = seed if isinstance(seed, np.random.Generator) else rng_for(seed, STREAM_TRAIN)

    start = params.flatten()
    current = start.copy()
    velocity = np.zeros_like(current)
    spec = params.spec

    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(labels))
        for offset in range(0, len(order), cfg.batch_size):
            batch_index = order[offset:offset + cfg.batch_size]
            model = ModelParams.unflatten(spec, current)
            _, grad = backward(model, images[batch_index], labels[batch_index])
            if cfg.weight_decay:
                grad = grad + cfg.weight_decay * current
            velocity = cfg.momentum * velocity + grad
            current = current - cfg.learning_rate * velocity

    return start - current


def evaluate(params: ModelParams, images, labels, chunk_size: int = 4096) -> Evaluation:
    """Accuracy, mean cross-entropy and the C x C confusion matrix (rows = truth)."""
    images = _check_batch(params, images)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = params.spec.n_classes
    total_loss = 0.0
    predictions = np.empty(len(labels), dtype=np.int64)
    for offset in range(0, len(labels), chunk_size):
        chunk = slice(offset, offset + chunk_size)
        _, _, logits = _forward_pass(params, images[chunk])
        log_probs = _log_softmax(logits)
        chunk_labels = labels[chunk]
        total_loss -= float(log_probs[np.arange(len(chunk_labels)), chunk_labels].sum())
        predictions[chunk] = np.argmax(log_probs, axis=1)

    confusion = np.bincount(
        labels * n_classes + predictions, minlength=n_classes * n_classes
    ).reshape(n_classes, n_classes)
    total = int(confusion.sum())
    return Evaluation(
        accuracy=float(np.trace(confusion)) / total,
        loss=total_loss / total,
        confusion=confusion,
    )


def save_checkpoint(params: ModelParams, path: Union[str, Path]) -> Path:
    """
    Write params in the little-endian checkpoint format:
    b'HOGW', uint32 version, uint32 layer count, uint32 sizes..., float64 params.
    """
    path = Path(path)
    sizes = params.spec.layer_sizes
    header = CHECKPOINT_MAGIC + struct.pack('<II', CHECKPOINT_VERSION, len(sizes))
    header += struct.pack(f'<{len(sizes)}I', *sizes)
    path.write_bytes(header + params.flatten().astype('<f8').tobytes())
    return path


def load_checkpoint(path: Union[str, Path]) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f'{path} is not a model checkpoint')
    version, n_layers = struct.unpack_from('<II', raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f'Unsupported checkpoint version {version}')
    sizes = struct.unpack_from(f'<{n_layers}I', raw, 12)
    spec = ModelSpec(layer_sizes=sizes)
    offset = 12 + 4 * n_layers
    vector = np.frombuffer(raw, dtype='<f8', offset=offset)
    return ModelParams.unflatten(spec, vector)
