"""Grad-CAM saliency, distillation objectives and quantized fine-tuning.

Saliency follows Grad-CAM on the model's tap (the last spatial activation):
channel weights are the spatially averaged gradients of the target class
score with respect to the tap, and the map is the ReLU of the
weight-summed activations.  The channel weights are treated as constants
when the map itself is differentiated (no second-order terms), so the CAM
loss reaches the quantized model's parameters through the activations.

Objectives:

* baseline: ``mean_i KL(q(x_i; teacher) || q(x_i; student)) + lam_ce * CE``
* full: ``mean_i KL + [delta_i <= tau] * lam_ce * CE_i + lam_cam * ||S_t - S_s||_F^2``
  on low-pass filtered samples, with ``delta_i = 1 - q_{y_i}(x_i; teacher)``.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import ops
from .errors import ConfigError, ContractError, ParameterError, TrainingError
from .model import ModelGraph, predict_logits, top1
from .optim import SGD, exp_decay_lr
from .quant import QuantizedModel, calibrate_activation_ranges
from .synthesis import SyntheticDataset, difficulty, value_range
from .tensor import Tensor, backward, grad, no_grad, reset_tape, scoped_tape

log = logging.getLogger(__name__)


# -- saliency ---------------------------------------------------------------------

@dataclass
class SaliencyMap:
    """Grad-CAM maps for a batch, shape (N, H_k, W_k), all entries >= 0."""

    values: np.ndarray

    @property
    def height(self) -> int:
        return self.values.shape[-2]

    @property
    def width(self) -> int:
        return self.values.shape[-1]


def _check_tap(model) -> None:
    if not hasattr(model, "features") or not hasattr(model, "head"):
        raise ConfigError(f"{type(model).__name__} exposes no Grad-CAM tap")


def cam_weights(tap: Tensor, logits: Tensor, class_ids) -> np.ndarray:
    """Spatial mean of d(score of class_ids[i]) / d(tap[i]); shape (N, K)."""
    score = ops.sum(ops.pick(logits, class_ids))
    g = grad(score, [tap])[0]
    return g.astype(np.float64).mean(axis=(2, 3))


def saliency_from_tap(tap: Tensor, logits: Tensor, class_ids) -> Tensor:
    """Differentiable Grad-CAM map built from a recorded tap and its logits.

    Samples must be independent through the head (eval-mode forward), so
    the gradient of the summed scores separates per sample.
    """
    w = cam_weights(tap, logits, class_ids)
    weighted = ops.mul(tap, Tensor(w[:, :, None, None].astype(tap.dtype)))
    return ops.relu(ops.sum(weighted, axis=1))


def grad_cam(model, x, class_ids, batch_size: int = 256) -> SaliencyMap:
    """Grad-CAM maps for ``model`` (a ModelGraph or QuantizedModel) on ``x``.

    Runs on a private tape so any graph the caller is recording survives.
    """
    _check_tap(model)
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    class_ids = np.asarray(class_ids, dtype=np.int64)
    out = []
    for s in range(0, len(x), batch_size):
        with no_grad():
            tap, _ = model.features(Tensor(x[s:s + batch_size]), "eval")
        leaf = Tensor(tap.data, requires_grad=True)
        with scoped_tape():
            logits = model.head(leaf)
            w = cam_weights(leaf, logits, class_ids[s:s + batch_size])
        cam = np.einsum("nk,nkhw->nhw", w, leaf.data.astype(np.float64))
        out.append(np.maximum(cam, 0.0).astype(np.float32))
    return SaliencyMap(np.concatenate(out) if out else np.zeros((0,) * 3, np.float32))


def cam_alignment_loss(teacher_map, student_map: Tensor, per_sample: bool = False) -> Tensor:
    """Squared Frobenius distance between maps; the teacher side is a constant."""
    t = teacher_map.values if isinstance(teacher_map, SaliencyMap) else np.asarray(teacher_map)
    if tuple(t.shape) != tuple(student_map.shape):
        raise ContractError(f"saliency shapes differ: {t.shape} vs {student_map.shape}")
    return ops.mse_frobenius(student_map, Tensor(t), per_sample=per_sample)


# -- objectives -------------------------------------------------------------------

@dataclass
class LossBreakdown:
    kl: float
    ce: float  # mean over the batch of the gated CE
    cam: float
    total: float
    ce_active_fraction: float

    def check(self, lambda_ce: float, lambda_cam: float, tol: float = 1e-5) -> None:
        recon = self.kl + lambda_ce * self.ce + lambda_cam * self.cam
        if abs(recon - self.total) > tol * max(1.0, abs(self.total)):
            raise ContractError(f"loss total {self.total} != components {recon}")


@dataclass
class Batch:
    """Training samples with labels, teacher difficulties and a filter provenance bit."""

    images: np.ndarray
    labels: np.ndarray
    difficulties: np.ndarray | None = None
    filtered: bool = False
    teacher_logits: np.ndarray | None = None
    teacher_maps: np.ndarray | None = None


@dataclass
class FinetuneConfig:
    tau: float = 0.5
    d0: float = 8.0
    lambda_ce: float = 0.5
    lambda_cam: float = 0.5
    lr: float = 1e-3
    epochs: int = 30
    batch: int = 64
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_final_factor: float = 0.1
    use_filter: bool = True    # train on low-pass filtered images
    use_cam: bool = True       # saliency alignment term
    use_gating: bool = True    # difficulty-gated CE
    recalibrate_each_epoch: bool = True
    cache_teacher: bool = True

    def validate(self) -> "FinetuneConfig":
        if not 0.0 <= self.tau <= 1.0:
            raise ParameterError(f"tau must lie in [0, 1], got {self.tau}")
        if self.lambda_ce < 0 or self.lambda_cam < 0:
            raise ParameterError("loss weights must be >= 0")
        if not self.d0 > 0:
            raise ParameterError(f"D0 must be > 0, got {self.d0}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch < 1 or not self.lr > 0:
            raise ParameterError("batch >= 1 and lr > 0 are required")
        return self

    @property
    def effective_tau(self) -> float:
        return self.tau if self.use_gating else 1.0

    @property
    def effective_lambda_cam(self) -> float:
        return self.lambda_cam if self.use_cam else 0.0


def _teacher_logits(teacher: ModelGraph, batch: Batch) -> np.ndarray:
    if batch.teacher_logits is not None:
        return batch.teacher_logits
    return predict_logits(teacher, batch.images)


def _objective(batch: Batch, teacher: ModelGraph, student, lambda_ce: float, lambda_cam: float,
               tau: float | None) -> tuple[Tensor, LossBreakdown]:
    n = len(batch.labels)
    tap, _ = student.features(Tensor(batch.images), "eval")
    logits = student.head(tap)
    kl = ops.kl_div_logits(Tensor(_teacher_logits(teacher, batch)), logits, reduction="none")
    ce = ops.cross_entropy(logits, batch.labels, reduction="none")
    if tau is None:
        mask = np.ones(n, dtype=np.float32)
    else:
        if batch.difficulties is None:
            raise ContractError("gated CE needs teacher difficulties for the batch")
        mask = (np.asarray(batch.difficulties) <= tau).astype(np.float32)
    ce_g = ops.mul(ce, Tensor(mask))
    per = kl + ce_g * lambda_ce if lambda_ce else kl
    cam_val = 0.0
    if lambda_cam:
        s_map = saliency_from_tap(tap, logits, batch.labels)
        t_map = batch.teacher_maps if batch.teacher_maps is not None else \
            grad_cam(teacher, batch.images, batch.labels).values
        cam = cam_alignment_loss(t_map, s_map, per_sample=True)
        per = per + cam * lambda_cam
        cam_val = float(cam.data.astype(np.float64).mean())
    total = ops.mean(per)
    bd = LossBreakdown(
        kl=float(kl.data.astype(np.float64).mean()),
        ce=float(ce_g.data.astype(np.float64).mean()),
        cam=cam_val,
        total=total.item(),
        ce_active_fraction=float(mask.mean()) if n else 0.0,
    )
    return total, bd


def zsq_loss(batch: Batch, teacher: ModelGraph, student, lambda_ce: float) -> tuple[Tensor, LossBreakdown]:
    """Baseline distillation objective: KL plus ungated CE, no CAM term."""
    return _objective(batch, teacher, student, lambda_ce, 0.0, None)


def synq_loss(batch: Batch, teacher: ModelGraph, student, config: FinetuneConfig) -> tuple[Tensor, LossBreakdown]:
    """Difficulty-gated objective with CAM alignment on filtered samples."""
    if config.use_filter and not batch.filtered:
        raise ContractError("batch is not low-pass filtered but the filter stage is enabled")
    return _objective(batch, teacher, student, config.lambda_ce, config.effective_lambda_cam,
                      config.effective_tau)


# -- fine-tuning loop ---------------------------------------------------------------

LOG_FIELDS = ("epoch", "kl", "ce", "cam", "total", "ce_active_fraction", "heldout_top1")


@dataclass
class FinetuneResult:
    model: QuantizedModel
    log: list[dict] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)

    def csv_text(self) -> str:
        return loss_log_csv(self.log)


def loss_log_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in rows:
        w.writerow([r["epoch"]] + [f"{r[k]:.8g}" for k in LOG_FIELDS[1:]])
    return buf.getvalue()


def prepare_training_set(teacher: ModelGraph, dataset: SyntheticDataset, config: FinetuneConfig) -> Batch:
    """Filter once, then score difficulties and cache teacher outputs on the training images."""
    ds = dataset
    if config.use_filter and (ds.filtered is None or ds.d0 != config.d0):
        ds = ds.with_filter(config.d0, value_range(teacher))
    images = ds.filtered if config.use_filter else ds.images
    b = Batch(images.astype(np.float32), np.asarray(ds.labels, np.int64), filtered=config.use_filter)
    b.difficulties = difficulty(teacher, b.images, b.labels)
    if config.cache_teacher:
        b.teacher_logits = predict_logits(teacher, b.images)
        if config.use_cam and config.lambda_cam:
            b.teacher_maps = grad_cam(teacher, b.images, b.labels).values
    return b


def _slice(b: Batch, idx: np.ndarray) -> Batch:
    pick = lambda a: None if a is None else a[idx]  # noqa: E731
    return Batch(b.images[idx], b.labels[idx], pick(b.difficulties), b.filtered,
                 pick(b.teacher_logits), pick(b.teacher_maps))


def _calibration_batches(images: np.ndarray, size: int):
    for s in range(0, len(images), size):
        yield images[s:s + size]


def evaluate_top1(qmodel, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    out = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            out.append(qmodel.forward(Tensor(images[s:s + batch_size]), "eval").logits.data)
    return top1(np.concatenate(out), labels)


def finetune(teacher: ModelGraph, qmodel: QuantizedModel, dataset: SyntheticDataset,
             config: FinetuneConfig, heldout: tuple[np.ndarray, np.ndarray] | None = None,
             objective: str = "synq",
             on_epoch: Callable[[dict], None] | None = None) -> FinetuneResult:
    """Fine-tune ``qmodel`` against the frozen ``teacher`` on synthetic data.

    ``objective`` selects ``"synq"`` (gated CE + CAM on filtered data, each
    idea switchable through the config) or ``"zsq"`` (the baseline).
    BN layers stay in eval mode with frozen running statistics; their affine
    parameters train with the rest of the shadow weights.
    """
    config.validate()
    if objective not in ("synq", "zsq"):
        raise ParameterError(f"unknown objective {objective!r}")
    if len(dataset) == 0:
        raise ParameterError("fine-tuning needs a nonempty dataset")
    if objective == "zsq":
        config = FinetuneConfig(**{**asdict(config), "use_filter": False, "use_cam": False, "use_gating": False})
    teacher.freeze()
    train = prepare_training_set(teacher, dataset, config)
    calib = max(config.batch, 256)
    calibrate_activation_ranges(qmodel, _calibration_batches(train.images, calib))
    opt = SGD(qmodel.parameters(), config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    result = FinetuneResult(qmodel)
    lam_cam = config.effective_lambda_cam
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        if epoch and config.recalibrate_each_epoch:
            calibrate_activation_ranges(qmodel, _calibration_batches(train.images, calib))
        opt.lr = exp_decay_lr(config.lr, epoch, config.epochs, config.lr_final_factor)
        order = rng.permutation(len(train.labels))
        sums = dict(kl=0.0, ce=0.0, cam=0.0, total=0.0, ce_active_fraction=0.0)
        for step, s in enumerate(range(0, len(order), config.batch)):
            idx = order[s:s + config.batch]
            reset_tape()
            b = _slice(train, idx)
            if objective == "zsq":
                loss, bd = zsq_loss(b, teacher, qmodel, config.lambda_ce)
            else:
                loss, bd = synq_loss(b, teacher, qmodel, config)
            if not math.isfinite(bd.total):
                raise TrainingError(f"fine-tuning loss is not finite at epoch {epoch}, step {step}")
            bd.check(config.lambda_ce, lam_cam if objective == "synq" else 0.0)
            opt.zero_grad()
            backward(loss)
            opt.step()
            bad = [n for n, p in qmodel.model.params.items() if not np.all(np.isfinite(p.data))]
            if bad:
                raise TrainingError(f"parameters {bad[:3]} became non-finite at epoch {epoch}, step {step}")
            for k in sums:
                sums[k] += getattr(bd, k) * len(idx)
        result.epoch_seconds.append(time.perf_counter() - t0)
        row = {"epoch": epoch, **{k: v / len(order) for k, v in sums.items()}}
        row["heldout_top1"] = evaluate_top1(qmodel, *heldout) if heldout is not None else float("nan")
        result.log.append(row)
        log.info("finetune epoch %d: %s", epoch, row)
        if on_epoch is not None:
            on_epoch(row)
    reset_tape()
    return result
