"""Synthetic data generation by optimizing Gaussian noise against a frozen model.

Each batch starts as N(0, 1) noise in normalized image space with uniformly
drawn labels and is optimized with Adam to minimize the inception loss (mean
cross-entropy toward the assigned labels) plus ``alpha`` times the
batch-norm statistics loss.  The model runs in eval mode: BN layers
normalize with their stored statistics while the batch statistics of every
BN input are collected for the BNS term, so the frozen model's buffers are
never touched.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .data import normalize, normalized_range, to_uint8
from .errors import ContractError, ParameterError, StateError, TrainingError
from .model import ModelGraph, predict_logits
from .optim import Adam, ReduceOnPlateau
from .spectral import lowpass_filter
from .tensor import Tensor, backward, no_grad, reset_tape

log = logging.getLogger(__name__)


@dataclass
class SynthesisConfig:
    n: int = 512
    batch: int = 256
    alpha: float = 1.0
    iters: int = 200
    lr: float = 0.5
    plateau_patience: int = 50
    lr_decay: float = 0.1
    seed: int = 0

    def validate(self) -> "SynthesisConfig":
        if self.n < 1 or self.batch < 1:
            raise ParameterError(f"n and batch must be positive, got n={self.n}, batch={self.batch}")
        if self.n % self.batch:
            raise ParameterError(f"n={self.n} is not a multiple of batch={self.batch}")
        if self.alpha < 0:
            raise ParameterError(f"alpha must be >= 0, got {self.alpha}")
        if self.iters < 1:
            raise ParameterError(f"iters must be >= 1, got {self.iters}")
        if not self.lr > 0 or not 0 < self.lr_decay <= 1 or self.plateau_patience < 1:
            raise ParameterError("lr > 0, 0 < lr_decay <= 1 and plateau_patience >= 1 are required")
        return self


@dataclass
class SyntheticDataset:
    """Synthetic images in normalized space with labels and difficulties.

    ``filtered`` holds the low-pass images once :meth:`with_filter` has run;
    ``d0`` records the cut-off that produced them.
    """

    images: np.ndarray  # float32, N x C x H x W
    labels: np.ndarray  # int64, N
    difficulties: np.ndarray | None = None
    filtered: np.ndarray | None = None
    d0: float | None = None
    history: list[dict] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.difficulties is not None and len(self.difficulties) != len(self.labels):
            raise ContractError("difficulties must align with labels")
        if self.filtered is not None and self.filtered.shape != self.images.shape:
            raise ContractError("filtered images must correspond 1:1 with images")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def is_filtered(self) -> bool:
        return self.filtered is not None

    def training_images(self) -> np.ndarray:
        return self.filtered if self.filtered is not None else self.images

    def with_filter(self, d0: float, value_range=None) -> "SyntheticDataset":
        lo_hi = None
        if value_range is not None:
            lo, hi = value_range
            lo_hi = (np.reshape(lo, (1, -1, 1, 1)), np.reshape(hi, (1, -1, 1, 1)))
        return replace(self, filtered=lowpass_filter(self.images, d0, lo_hi), d0=float(d0))

    def subset(self, n: int) -> "SyntheticDataset":
        return SyntheticDataset(
            self.images[:n], self.labels[:n],
            None if self.difficulties is None else self.difficulties[:n],
            None if self.filtered is None else self.filtered[:n], self.d0)


def init_noise_and_labels(config: SynthesisConfig, num_classes: int,
                          image_shape: tuple[int, int, int]) -> SyntheticDataset:
    """Standard-normal images and uniformly drawn labels, fully determined by the seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    labels = rng.integers(0, num_classes, size=config.n).astype(np.int64)
    images = rng.standard_normal((config.n, *image_shape)).astype(np.float32)
    return SyntheticDataset(images, labels)


def bns_loss(model: ModelGraph, batch_stats) -> Tensor:
    """Mean over BN layers of squared distances between stored and batch mean/std."""
    if batch_stats is None:
        raise StateError("BNS loss needs batch statistics; run the forward with collect_bn_stats")
    if len(batch_stats) != model.num_bn_layers or not batch_stats:
        raise StateError(f"expected {model.num_bn_layers} BN statistics, got {len(batch_stats)}")
    total = None
    for stored, (bm, bv) in zip(model.bn_stats(), batch_stats):
        sigma_b = ops.sqrt(bv + model.eps)
        term = ops.mse_frobenius(bm, Tensor(stored.mu)) + ops.mse_frobenius(sigma_b, Tensor(stored.sigma))
        total = term if total is None else total + term
    return total * (1.0 / len(batch_stats))


def inception_loss(logits: Tensor, labels) -> Tensor:
    return ops.cross_entropy(logits, labels, reduction="mean")


def difficulty(model: ModelGraph, images: np.ndarray, labels, batch_size: int = 256) -> np.ndarray:
    """``1 - softmax(model(x))[y]`` per sample, eval mode."""
    logits = predict_logits(model, np.asarray(images, np.float32), batch_size)
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise ParameterError("label outside the model's class range")
    p = np.exp(ops._log_softmax64(logits))
    q = p[np.arange(len(labels)), labels]
    return np.clip(1.0 - q, 0.0, 1.0).astype(np.float32)


def _optimize_batch(model: ModelGraph, x0: np.ndarray, y: np.ndarray, config: SynthesisConfig,
                    tag: str) -> tuple[np.ndarray, dict]:
    x = Tensor(x0.copy(), requires_grad=True)
    opt = Adam([x], lr=config.lr, betas=(0.9, 0.999))
    plateau = ReduceOnPlateau(opt, factor=config.lr_decay, patience=config.plateau_patience)
    has_bn = model.num_bn_layers > 0
    objective, il_hist, bns_hist = [], [], []
    for it in range(config.iters):
        reset_tape()
        res = model.forward(x, "eval", collect_bn_stats=has_bn)
        il = inception_loss(res.logits, y)
        bns = bns_loss(model, res.bn_stats) if has_bn else None
        loss = il + bns * config.alpha if config.alpha else il
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"synthesis diverged at iteration {it} of {tag}")
        objective.append(value)
        il_hist.append(il.item())
        bns_hist.append(bns.item() if has_bn else 0.0)
        opt.zero_grad()
        backward(loss)
        opt.step()
        plateau.step(value)
    # objective of the returned images, evaluated after the last update
    reset_tape()
    with no_grad():
        res = model.forward(x, "eval", collect_bn_stats=has_bn)
        final = inception_loss(res.logits, y).item()
        if config.alpha:
            final += config.alpha * bns_loss(model, res.bn_stats).item()
    return x.data, {"batch": tag, "initial": objective[0], "final": final,
                    "objective": objective, "inception": il_hist, "bns": bns_hist}


def optimize_samples(model: ModelGraph, config: SynthesisConfig) -> SyntheticDataset:
    """Generate ``config.n`` images for a frozen model; reads no real data.

    Images are optimized unconstrained, then clamped to the valid normalized
    range and snapped to the 8-bit pixel grid so that the in-memory dataset
    equals what the record format stores.  Difficulties are scored on the
    snapped images.
    """
    config.validate()
    if model.num_bn_layers < 1 and config.alpha > 0:
        raise StateError("BNS loss needs at least one BN layer")
    before = {k: v.copy() for k, v in model.buffers.items()}
    saved_flags = {k: p.requires_grad for k, p in model.params.items()}
    model.freeze()
    try:
        ds = init_noise_and_labels(config, model.num_classes, model.input_shape)
        images = np.empty_like(ds.images)
        history = []
        for b, s in enumerate(range(0, config.n, config.batch)):
            sl = slice(s, s + config.batch)
            images[sl], rec = _optimize_batch(model, ds.images[sl], ds.labels[sl], config, f"batch {b}")
            log.info("synthesis batch %d: objective %.4f -> %.4f", b, rec["initial"], rec["final"])
            history.append(rec)
    finally:
        for k, flag in saved_flags.items():
            model.params[k].requires_grad = flag
    for k, v in before.items():
        if not np.array_equal(v, model.buffers[k]):
            raise StateError(f"synthesis modified BN buffer {k}")
    snapped = snap_to_pixels(images, model.norm_mean, model.norm_std)
    return SyntheticDataset(snapped, ds.labels, difficulty(model, snapped, ds.labels), history=history)


def snap_to_pixels(images: np.ndarray, mean, std) -> np.ndarray:
    """Clamp to the normalized range and round-trip through 8-bit pixels."""
    return normalize(to_uint8(images, mean, std), mean, std)


def value_range(model: ModelGraph):
    """Per-channel (low, high) of normalized pixels for ``model``'s dataset."""
    return normalized_range(model.norm_mean, model.norm_std)
