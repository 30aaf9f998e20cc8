"""Accuracy, difficulty-stratified error, saliency discrepancy and runtime scaling."""
from __future__ import annotations

import csv
import io
import json
import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ops
from .distill import FinetuneConfig, finetune, grad_cam
from .errors import DomainError, ParameterError
from .model import ModelGraph
from .quant import quantize_model
from .synthesis import SyntheticDataset
from .tensor import Tensor, no_grad

SALIENCY_FLOOR = 1e-8


def _logits(model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            out.append(model.forward(Tensor(images[s:s + batch_size]), "eval").logits.data)
    return np.concatenate(out)


def top1_accuracy(model, images: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) equals the label."""
    if len(labels) == 0:
        raise DomainError("top-1 accuracy of an empty dataset is undefined")
    return float(np.mean(np.argmax(_logits(model, images), axis=1) == np.asarray(labels)))


# -- difficulty bins ------------------------------------------------------------------

@dataclass
class DifficultyBin:
    low: float
    high: float
    count: int
    error_rate: float


def difficulty_bin_index(delta: np.ndarray, num_bins: int) -> np.ndarray:
    """Uniform bins over [0, 1], half-open ``[a, b)`` except the closed last bin."""
    return np.minimum((np.asarray(delta, np.float64) * num_bins).astype(np.int64), num_bins - 1)


def error_rate_by_difficulty(model, images: np.ndarray, labels: np.ndarray,
                             num_bins: int = 10) -> list[DifficultyBin]:
    """Per-bin misclassification rate; bins holding no sample are omitted."""
    if num_bins < 1:
        raise ParameterError(f"num_bins must be >= 1, got {num_bins}")
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DomainError("cannot bin an empty dataset")
    logits = _logits(model, images)
    p = np.exp(ops._log_softmax64(logits))
    delta = np.clip(1.0 - p[np.arange(len(labels)), labels], 0.0, 1.0)
    wrong = np.argmax(logits, axis=1) != labels
    which = difficulty_bin_index(delta, num_bins)
    rows = []
    for b in range(num_bins):
        sel = which == b
        if sel.any():
            rows.append(DifficultyBin(b / num_bins, (b + 1) / num_bins, int(sel.sum()), float(wrong[sel].mean())))
    return rows


# -- saliency discrepancy ---------------------------------------------------------------

def _as_distribution(maps: np.ndarray) -> tuple[np.ndarray, int]:
    flat = np.maximum(maps.reshape(len(maps), -1).astype(np.float64), SALIENCY_FLOOR)
    zero = int(np.sum(maps.reshape(len(maps), -1).max(axis=1) <= 0)) if len(maps) else 0
    return flat / flat.sum(axis=1, keepdims=True), zero


def cam_discrepancy(teacher, student, images: np.ndarray, labels: np.ndarray, batch_size: int = 32) -> float:
    """Mean over batches of the mean per-sample KL(teacher map || student map).

    Maps are floored at 1e-8 and normalized to sum 1; all-zero maps trigger a
    warning because they degrade to the uniform distribution.
    """
    if len(labels) == 0:
        raise DomainError("cam_discrepancy needs at least one sample")
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    t, zt = _as_distribution(grad_cam(teacher, images, labels).values)
    s, zs = _as_distribution(grad_cam(student, images, labels).values)
    if zt or zs:
        warnings.warn(f"{zt + zs} all-zero saliency maps were floored to uniform", RuntimeWarning, stacklevel=2)
    kl = np.sum(t * (np.log(t) - np.log(s)), axis=1)
    per_batch = [kl[i:i + batch_size].mean() for i in range(0, len(kl), batch_size)]
    return float(max(np.mean(per_batch), 0.0))


# -- runtime scaling --------------------------------------------------------------------

@dataclass
class BenchRow:
    n: int
    seconds_cam_on: float
    seconds_cam_off: float

    @property
    def cam_overhead(self) -> float:
        return (self.seconds_cam_on - self.seconds_cam_off) / self.seconds_cam_on


@dataclass
class BenchResult:
    rows: list[BenchRow]
    slope: float       # seconds per sample, CAM on
    intercept: float
    doubling_ratios: list[float]

    @property
    def mean_cam_overhead(self) -> float:
        return float(np.mean([r.cam_overhead for r in self.rows]))

    def csv_text(self, include_timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "seconds_cam_on", "seconds_cam_off", "cam_overhead", "ratio_to_previous"])
        prev = None
        for r in self.rows:
            ratio = "" if prev is None else f"{r.seconds_cam_on / prev:.4f}"
            w.writerow([r.n, f"{r.seconds_cam_on:.6f}", f"{r.seconds_cam_off:.6f}", f"{r.cam_overhead:.4f}", ratio])
            prev = r.seconds_cam_on
        return buf.getvalue()


def _epoch_time(teacher: ModelGraph, dataset: SyntheticDataset, config: FinetuneConfig,
                bits: tuple[int, int], repeats: int) -> float:
    q = quantize_model(teacher, *bits)
    res = finetune(teacher, q, dataset, replace(config, epochs=repeats, recalibrate_each_epoch=False))
    return float(np.median(res.epoch_seconds))


def runtime_bench(teacher: ModelGraph, dataset: SyntheticDataset, sizes, config: FinetuneConfig,
                  bits: tuple[int, int] = (4, 4), repeats: int = 3) -> BenchResult:
    """Median per-epoch fine-tuning time for each dataset size, CAM on and off."""
    sizes = [int(n) for n in sizes]
    if not sizes or min(sizes) < 1:
        raise ParameterError("benchmark sizes must be positive")
    if max(sizes) > len(dataset):
        raise ParameterError(f"largest size {max(sizes)} exceeds the {len(dataset)} available samples")
    on = replace(config, use_cam=True)
    off = replace(config, use_cam=False)
    # warm-up so first-call costs do not land on the smallest size
    _epoch_time(teacher, dataset.subset(min(sizes)), off, bits, 1)
    rows = []
    for n in sizes:
        sub = dataset.subset(n)
        rows.append(BenchRow(n, _epoch_time(teacher, sub, on, bits, repeats),
                             _epoch_time(teacher, sub, off, bits, repeats)))
    ns = np.array([r.n for r in rows], np.float64)
    ts = np.array([r.seconds_cam_on for r in rows])
    slope, intercept = np.polyfit(ns, ts, 1) if len(rows) > 1 else (ts[0] / ns[0], 0.0)
    ratios = [rows[i].seconds_cam_on / rows[i - 1].seconds_cam_on for i in range(1, len(rows))]
    return BenchResult(rows, float(slope), float(intercept), ratios)


# -- reports ------------------------------------------------------------------------------

@dataclass
class EvalReport:
    top1: float
    bins: list[DifficultyBin]
    cam_kl: float | None = None
    timing: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["top1", f"{self.top1:.6f}"])
        if self.cam_kl is not None:
            w.writerow(["cam_kl", f"{self.cam_kl:.8g}"])
        for b in self.bins:
            w.writerow([f"error_rate[{b.low:.1f},{b.high:.1f}]", f"{b.error_rate:.6f}"])
        for k, v in sorted(self.timing.items()):
            w.writerow([f"seconds_{k}", f"{v:.6f}"])
        w.writerow(["config", json.dumps(self.config, sort_keys=True)])
        return buf.getvalue()

    def text(self) -> str:
        lines = [f"top-1 accuracy: {self.top1:.4f}"]
        if self.cam_kl is not None:
            lines.append(f"CAM discrepancy (KL): {self.cam_kl:.6f}")
        lines.append("difficulty bin   count  error rate")
        for b in self.bins:
            lines.append(f"[{b.low:.1f}, {b.high:.1f}{']' if b.high >= 1 else ')'}  {b.count:6d}  {b.error_rate:10.4f}")
        return "\n".join(lines) + "\n"


def difficulty_plot_rows(bins: list[DifficultyBin]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_low", "bin_high", "count", "error_rate"])
    for b in bins:
        w.writerow([f"{b.low:.2f}", f"{b.high:.2f}", b.count, f"{b.error_rate:.6f}"])
    return buf.getvalue()


def profile_csv(profile) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["radius_bin", "mean_amplitude", "std_amplitude"])
    for i, m, s in profile.to_rows():
        w.writerow([i, f"{m:.8g}", f"{s:.8g}"])
    return buf.getvalue()


def report_dict(report: EvalReport) -> dict:
    return asdict(report)
