"""Unit descriptor maps, the correspondence contrastive loss and a 1x1 descriptor head.

Descriptor maps and feature grids are plain ``(h, w, d)`` float arrays indexed
``[y, x, channel]``. Pixel coordinates are ``(x, y)`` pairs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .skeleton import CorrespondencePairBatch

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-6


class SampleRangeError(ValueError):
    """A sample location falls outside the descriptor map."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss


def normalize(raw: np.ndarray) -> np.ndarray:
    """Divide every spatial vector by its L2 norm.

    Zero vectors become ``e0 = (1, 0, ..., 0)``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    zero = norms == 0
    out = raw / np.where(zero, 1.0, norms)
    if np.any(zero):
        e0 = np.zeros(raw.shape[-1])
        e0[0] = 1.0
        out = np.where(zero, e0, out)
    return out


def normalize_backward(raw: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of ``normalize``: ``(g - u (u.g)) / |v|``."""
    raw = np.asarray(raw, dtype=np.float64)
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    safe = np.where(norms == 0, 1.0, norms)
    unit = raw / safe
    proj = np.sum(unit * grad_out, axis=-1, keepdims=True)
    grad = (grad_out - unit * proj) / safe
    return np.where(norms == 0, 0.0, grad)


def check_descriptor_map(dmap: np.ndarray, tol: float = UNIT_TOL) -> np.ndarray:
    dmap = np.asarray(dmap)
    if dmap.ndim != 3:
        raise ValueError(f"descriptor map must be (h, w, d), got shape {dmap.shape}")
    if not np.all(np.isfinite(dmap)):
        raise ValueError("descriptor map has non-finite values")
    err = np.max(np.abs(np.linalg.norm(dmap, axis=-1) - 1.0))
    if err > tol:
        raise ValueError(f"descriptor map is not unit-normalised (max norm error {err:.3g})")
    return dmap


def _bilinear_support(xy: np.ndarray, h: int, w: int):
    """Flat indices (n, 4) and weights (n, 4) of the bilinear stencil."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    x, y = xy[:, 0], xy[:, 1]
    bad = ~((x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1))
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise SampleRangeError(f"location {tuple(xy[i])} outside a {h}x{w} map")
    x0 = np.clip(np.floor(x), 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(y), 0, max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    idx = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return idx, wts


def bilinear(grid: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of an (h, w) or (h, w, d) grid at (n, 2) locations."""
    h, w = grid.shape[:2]
    idx, wts = _bilinear_support(xy, h, w)
    flat = grid.reshape(h * w, -1)
    out = np.einsum("nk,nkd->nd", wts, flat[idx])
    return out if grid.ndim == 3 else out[:, 0]


def sample_many(dmap: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinearly interpolated, re-normalised descriptors at (n, 2) locations."""
    return normalize(bilinear(dmap, xy))


def sample(dmap: np.ndarray, xy) -> np.ndarray:
    return sample_many(dmap, np.asarray(xy, dtype=np.float64).reshape(1, 2))[0]


def _sample_backward(shape, xy, interp, grad_vec):
    """Scatter gradients w.r.t. sampled unit vectors back onto the map."""
    h, w, d = shape
    g = normalize_backward(interp, grad_vec)
    idx, wts = _bilinear_support(xy, h, w)
    out = np.zeros((h * w, d))
    np.add.at(out, idx.ravel(), (wts[:, :, None] * g[:, None, :]).reshape(-1, d))
    return out.reshape(h, w, d)


@dataclass
class LossReport:
    loss: float
    grad1: np.ndarray
    grad2: np.ndarray
    n_positive: int
    n_negative_active: int
    grad_map1: np.ndarray | None = field(default=None, repr=False)
    grad_map2: np.ndarray | None = field(default=None, repr=False)


def contrastive_loss_vectors(v1: np.ndarray, v2: np.ndarray, labels: np.ndarray,
                             margin: float = 1.0) -> LossReport:
    """Correspondence contrastive loss on already-sampled descriptor pairs.

    The hinge acts on the squared distance. At the hinge boundary the
    subgradient is taken as zero.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise ValueError("empty correspondence batch")
    diff = v1 - v2
    d2 = np.sum(diff * diff, axis=1)
    pos = labels == 1
    active = (~pos) & (margin - d2 > 0)
    terms = np.where(pos, d2, np.maximum(0.0, margin - d2))
    loss = float(np.sum(terms) / (2 * n))
    coef = np.where(pos, 1.0, np.where(active, -1.0, 0.0)) / n
    grad1 = coef[:, None] * diff
    return LossReport(loss, grad1, -grad1, int(pos.sum()), int(active.sum()))


def contrastive_loss(L1: np.ndarray, L2: np.ndarray, batch: CorrespondencePairBatch,
                     margin: float = 1.0) -> LossReport:
    """Loss over a pair batch; gradients are also scattered onto both maps."""
    if len(batch) == 0:
        raise ValueError("empty correspondence batch")
    u1 = bilinear(L1, batch.xy1)
    u2 = bilinear(L2, batch.xy2)
    rep = contrastive_loss_vectors(normalize(u1), normalize(u2), batch.labels, margin)
    rep.grad_map1 = _sample_backward(L1.shape, batch.xy1, u1, rep.grad1)
    rep.grad_map2 = _sample_backward(L2.shape, batch.xy2, u2, rep.grad2)
    return rep


@dataclass
class LinearDescriptorHead:
    """Per-location affine map ``features @ weight + bias`` then normalisation."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError("weight must be (c, d) and bias (d,)")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("head parameters must be finite")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def copy(self) -> LinearDescriptorHead:
        return LinearDescriptorHead(self.weight.copy(), self.bias.copy())

    @classmethod
    def random(cls, in_channels: int, dim: int, seed: int, scale: float = 0.1):
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, (in_channels, dim)), np.zeros(dim))


def _head_raw(head: LinearDescriptorHead, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[2] != head.in_channels:
        raise ValueError(
            f"feature grid shape {features.shape} does not match head input size {head.in_channels}"
        )
    return features @ head.weight + head.bias


def apply_head(head: LinearDescriptorHead, features: np.ndarray) -> np.ndarray:
    return normalize(_head_raw(head, features))


def head_loss_and_grad(head: LinearDescriptorHead, f1: np.ndarray, f2: np.ndarray,
                       batch: CorrespondencePairBatch, margin: float = 1.0):
    """Loss of one image pair through the shared head, with parameter gradients."""
    raw1 = _head_raw(head, f1)
    raw2 = _head_raw(head, f2)
    rep = contrastive_loss(normalize(raw1), normalize(raw2), batch, margin)
    g1 = normalize_backward(raw1, rep.grad_map1)
    g2 = normalize_backward(raw2, rep.grad_map2)
    c = head.in_channels
    grad_w = f1.reshape(-1, c).T @ g1.reshape(-1, head.dim) + f2.reshape(-1, c).T @ g2.reshape(-1, head.dim)
    grad_b = g1.reshape(-1, head.dim).sum(0) + g2.reshape(-1, head.dim).sum(0)
    return rep.loss, grad_w, grad_b


@dataclass
class TrainingExample:
    features1: np.ndarray
    features2: np.ndarray
    batch: CorrespondencePairBatch


def dataset_loss(head: LinearDescriptorHead, dataset: Sequence[TrainingExample],
                 margin: float = 1.0) -> float:
    losses = [head_loss_and_grad(head, ex.features1, ex.features2, ex.batch, margin)[0]
              for ex in dataset]
    return float(np.mean(losses))


def train_head(
    head: LinearDescriptorHead,
    dataset: Sequence[TrainingExample],
    steps: int,
    learning_rate: float = 0.001,
    margin: float = 1.0,
    rng_seed: int = 0,
    batch_size: int | None = None,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[LinearDescriptorHead, list[float]]:
    """Adam on the mean per-example contrastive loss.

    Each step draws ``batch_size`` examples without replacement (all of them
    when ``None``) and records that minibatch's loss in the trace.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if not dataset:
        raise ValueError("empty training set")
    head = head.copy()
    rng = np.random.default_rng(rng_seed)
    k = len(dataset) if batch_size is None else min(batch_size, len(dataset))
    b1, b2 = betas
    m_w = np.zeros_like(head.weight)
    v_w = np.zeros_like(head.weight)
    m_b = np.zeros_like(head.bias)
    v_b = np.zeros_like(head.bias)
    trace = []
    for step in range(1, steps + 1):
        chosen = np.arange(len(dataset)) if k == len(dataset) else rng.choice(len(dataset), k, replace=False)
        loss = 0.0
        gw = np.zeros_like(head.weight)
        gb = np.zeros_like(head.bias)
        for i in chosen:
            ex = dataset[i]
            li, gwi, gbi = head_loss_and_grad(head, ex.features1, ex.features2, ex.batch, margin)
            loss += li / k
            gw += gwi / k
            gb += gbi / k
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        trace.append(float(loss))
        m_w = b1 * m_w + (1 - b1) * gw
        v_w = b2 * v_w + (1 - b2) * gw * gw
        m_b = b1 * m_b + (1 - b1) * gb
        v_b = b2 * v_b + (1 - b2) * gb * gb
        corr1 = 1 - b1 ** step
        corr2 = 1 - b2 ** step
        head.weight = head.weight - learning_rate * (m_w / corr1) / (np.sqrt(v_w / corr2) + eps)
        head.bias = head.bias - learning_rate * (m_b / corr1) / (np.sqrt(v_b / corr2) + eps)
        if step % 100 == 0:
            logger.debug("step %d loss %.6f", step, loss)
    return head, trace
