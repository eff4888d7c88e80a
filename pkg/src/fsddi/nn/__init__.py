"""Segmentation/classification networks with exact per-sample gradients.

Public layout follows the usual image convention: an image is ``(H, W)``
(single grey channel) and segmentation logits are ``(C, H, W)``.
Internally everything runs channels-last; see :mod:`fsddi.nn.layers`.
"""
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from ..errors import (ConfigurationError, DegenerateGradientError, InvalidLabelError,
                      NotInClassError)
from .network import (CHECKPOINT_MAGIC, ClassifierConfig, ModelParams, Network, SegNetConfig,
                      Tape, load_checkpoint, network_for, save_checkpoint)

__all__ = [
    "CHECKPOINT_MAGIC", "ClassifierConfig", "GradVector", "ModelParams", "Network",
    "SegNetConfig", "Tape", "backward", "backward_from_tape", "class_masked_gradient",
    "cross_entropy", "forward", "init_params", "load_checkpoint", "network_for",
    "pixel_loss", "predict", "prune_view", "save_checkpoint", "sgd_step",
]


@dataclass
class GradVector:
    values: np.ndarray
    sample_id: Optional[int] = None
    class_id: Union[int, str] = "all"
    normalized: bool = False
    raw: Optional[np.ndarray] = None

    @property
    def norm(self):
        return float(np.linalg.norm(self.values))


def init_params(config, seed=0):
    """Seeded Kaiming-uniform initialization for a network config."""
    from ..rng import stream
    return network_for(config.arch()).init(stream(seed, "init"))


def forward(params, image, mode="eval"):
    """Logits ``(C, H, W)`` for one image (or ``(B, C, H, W)`` for a batch)."""
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == 2
    batch = image[None] if single else image
    out = params.network.forward(params.values, batch, mode=mode).output
    if out.ndim == 4:
        out = out.transpose(0, 3, 1, 2)
    return out[0] if single else out


def cross_entropy(logits, targets, weights):
    """Weighted softmax cross-entropy over the last axis.

    ``logits`` has shape ``targets.shape + (C,)``. Returns the scalar
    ``sum(weights * ce)`` and its gradient with respect to ``logits``.
    """
    targets = np.asarray(targets)
    C = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= C):
        raise InvalidLabelError(f"labels must lie in [0, {C}); got max {targets.max()}")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != targets.shape:
        weights = np.broadcast_to(weights, targets.shape)
    if not np.isfinite(weights).all() or (weights < 0).any():
        raise ConfigurationError("pixel weights must be finite and non-negative")
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    sumexp = np.exp(shifted).sum(axis=-1, keepdims=True)
    log_probs = shifted - np.log(sumexp)
    picked = np.take_along_axis(log_probs, targets[..., None].astype(np.intp), axis=-1)[..., 0]
    loss = float(-(weights * picked).sum())
    grad = np.exp(log_probs)
    np.put_along_axis(grad, targets[..., None].astype(np.intp),
                      np.take_along_axis(grad, targets[..., None].astype(np.intp), axis=-1) - 1.0,
                      axis=-1)
    grad *= weights[..., None]
    return loss, grad


def pixel_loss(logits, mask, pixel_weights):
    """Weighted pixel-wise cross-entropy for logits laid out ``(C, H, W)``."""
    logits = np.asarray(logits, dtype=np.float64)
    return cross_entropy(np.moveaxis(logits, 0, -1), mask, pixel_weights)[0]


def backward_from_tape(tape, mask, pixel_weights):
    """Gradient of the weighted pixel loss for a batch already run through ``tape``."""
    _, dlogits = cross_entropy(tape.output, mask, pixel_weights)
    return tape.backward(dlogits)


def backward(params, image, mask, pixel_weights, mode="train"):
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == 2
    batch = image[None] if single else image
    mask = np.asarray(mask)[None] if single else np.asarray(mask)
    w = np.asarray(pixel_weights, dtype=np.float64)
    w = w[None] if single else w
    tape = params.network.forward(params.values, batch, mode=mode)
    return GradVector(backward_from_tape(tape, mask, w))


def class_mask_weights(mask, c):
    ind = (np.asarray(mask) == c)
    count = int(ind.sum())
    if count == 0:
        raise NotInClassError(f"sample has no pixel of class {c}")
    return ind / count


def class_masked_gradient(params, sample, c, tape=None):
    """Unit-norm gradient of the loss restricted to the pixels of class ``c``.

    ``sample`` needs ``image``, ``mask`` and ``id`` attributes. Passing a
    ``tape`` from a previous forward pass of the same image skips the
    forward computation.
    """
    weights = class_mask_weights(sample.mask, c)
    if tape is None:
        tape = params.network.forward(params.values, np.asarray(sample.image)[None], mode="eval")
    raw = backward_from_tape(tape, np.asarray(sample.mask)[None], weights[None])
    norm = np.linalg.norm(raw)
    if norm == 0.0:
        raise DegenerateGradientError(
            f"zero gradient for class {c} of sample {getattr(sample, 'id', None)}")
    return GradVector(raw / norm, getattr(sample, "id", None), int(c), True, raw)


def sgd_step(params, grad, lr, weight_decay=0.0, correction=None):
    """In-place step ``w -= lr * (grad + weight_decay * w)`` on trainable entries.

    ``correction`` (SCAFFOLD's ``c - c_k``) is added to the gradient when given.
    """
    if lr < 0 or weight_decay < 0:
        raise ConfigurationError("lr and weight_decay must be non-negative")
    g = grad.values if isinstance(grad, GradVector) else np.asarray(grad)
    step = g + weight_decay * params.values if weight_decay else g.copy()
    if correction is not None:
        step += correction
    step[~params.network.trainable] = 0.0
    params.values -= lr * step
    return params


def validate_indices(indices, p):
    idx = np.asarray(indices)
    if idx.ndim != 1 or idx.size == 0:
        raise ConfigurationError("indices must be a non-empty 1-D list")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ConfigurationError("indices must be integers")
    if idx[0] < 0 or idx[-1] >= p:
        raise ConfigurationError(f"indices out of range [0, {p})")
    if (np.diff(idx) <= 0).any():
        raise ConfigurationError("indices must be strictly increasing (no duplicates)")
    return idx


def prune_view(grad, indices):
    """Restrict a class gradient to ``indices`` and renormalize to unit length.

    The slice is taken from the unnormalized gradient when it is available.
    """
    base = grad.raw if grad.raw is not None else grad.values
    idx = validate_indices(indices, base.size)
    sub = base[idx]
    norm = np.linalg.norm(sub)
    if norm == 0.0:
        raise DegenerateGradientError("pruned gradient is exactly zero")
    return GradVector(sub / norm, grad.sample_id, grad.class_id, True, sub)


def predict(params, images, batch_size=64, mode="eval"):
    """Arg-max labels: ``(B, H, W)`` masks for a segnet, ``(B,)`` for a classifier."""
    images = np.asarray(images, dtype=np.float64)
    net = params.network
    out = []
    for start in range(0, len(images), batch_size):
        logits = net.forward(params.values, images[start:start + batch_size], mode=mode).output
        out.append(logits.argmax(axis=-1))
    if not out:
        shape = (0,) + (images.shape[1:] if net.arch["kind"] == "segnet" else ())
        return np.zeros(shape, dtype=np.int64)
    return np.concatenate(out)
