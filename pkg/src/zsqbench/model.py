"""Layer graphs, BN statistics, checkpoints and full-precision pretraining."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ops
from .errors import BuildError, FormatError, ShapeError, TrainingError, VersionError
from .optim import SGD, cosine_lr
from .tensor import Tensor, backward, no_grad, reset_tape

log = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "bn", "relu", "maxpool", "avgpool", "linear")
CHECKPOINT_FORMAT = "zsqbench-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class LayerSpec:
    """One layer of a sequential graph.

    ``hyper`` keys by kind: conv ``in_ch, out_ch, k, stride, pad``;
    bn ``features``; maxpool/avgpool ``k, stride`` (avgpool with ``k=None`` is
    a global pool that flattens to N x C); linear ``in_features, out_features``.
    """

    kind: str
    hyper: dict = field(default_factory=dict)

    @property
    def param_names(self) -> tuple[str, ...]:
        if self.kind in ("conv", "linear"):
            return ("weight", "bias")
        if self.kind == "bn":
            return ("gamma", "beta")
        return ()

    @property
    def buffer_names(self) -> tuple[str, ...]:
        return ("running_mean", "running_var") if self.kind == "bn" else ()


def conv(in_ch, out_ch, k=3, stride=1, pad=None) -> LayerSpec:
    return LayerSpec("conv", dict(in_ch=in_ch, out_ch=out_ch, k=k, stride=stride, pad=k // 2 if pad is None else pad))


def bn(features) -> LayerSpec:
    return LayerSpec("bn", dict(features=features))


def relu() -> LayerSpec:
    return LayerSpec("relu", {})


def maxpool(k=2, stride=None) -> LayerSpec:
    return LayerSpec("maxpool", dict(k=k, stride=k if stride is None else stride))


def avgpool(k=None, stride=None) -> LayerSpec:
    return LayerSpec("avgpool", dict(k=k, stride=k if stride is None else stride))


def linear(in_features, out_features) -> LayerSpec:
    return LayerSpec("linear", dict(in_features=in_features, out_features=out_features))


def desk_spec(num_classes: int = 10, in_ch: int = 3, widths=(16, 32, 64)) -> list[LayerSpec]:
    """Three conv-BN-ReLU blocks, 2x max-pooling after the first two, global pool, linear head."""
    layers: list[LayerSpec] = []
    c = in_ch
    for i, w in enumerate(widths):
        layers += [conv(c, w, 3), bn(w), relu()]
        if i < len(widths) - 1:
            layers.append(maxpool(2))
        c = w
    layers += [avgpool(None), linear(c, num_classes)]
    return layers


@dataclass
class BNStats:
    layer_index: int  # 1-based BN ordinal
    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class ForwardResult:
    logits: Tensor
    tap: Tensor | None
    bn_stats: list[tuple[Tensor, Tensor]] | None


WeightFn = Callable[[str, Tensor], Tensor]
ActFn = Callable[[int, Tensor], Tensor]


class ModelGraph:
    """A sequential CNN with named parameters and BN running buffers."""

    def __init__(self, layers: Sequence[LayerSpec], input_shape: tuple[int, int, int],
                 eps: float = 1e-5, momentum: float = 0.1):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.eps = eps
        self.momentum = momentum
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.norm_mean: tuple[float, ...] = (0.0,) * self.input_shape[0]
        self.norm_std: tuple[float, ...] = (1.0,) * self.input_shape[0]
        self.shapes = self._infer_shapes()
        self.num_classes = self.shapes[-1][0]
        self.tap_index = self._find_tap()
        self.bn_layers = [i for i, l in enumerate(self.layers) if l.kind == "bn"]
        # activation-quantization sites: after every ReLU and after the global pool
        self.act_sites: dict[int, int] = {}
        for i, l in enumerate(self.layers):
            if l.kind == "relu" or (l.kind == "avgpool" and l.hyper.get("k") is None):
                self.act_sites[i] = len(self.act_sites)

    # -- construction ---------------------------------------------------------
    def _infer_shapes(self) -> list[tuple[int, ...]]:
        if not self.layers:
            raise BuildError("model spec is empty")
        shape: tuple[int, ...] = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            h = layer.hyper
            where = f"layer {i} ({layer.kind}) with input shape {shape}"
            if layer.kind not in LAYER_KINDS:
                raise BuildError(f"unknown layer kind at {where}")
            if layer.kind == "conv":
                if len(shape) != 3 or shape[0] != h["in_ch"]:
                    raise BuildError(f"{where}: expects {h['in_ch']} input channels")
                ho = ops.conv_output_size(shape[1], h["k"], h["stride"], h["pad"])
                wo = ops.conv_output_size(shape[2], h["k"], h["stride"], h["pad"])
                if ho < 1 or wo < 1:
                    raise BuildError(f"{where}: kernel {h['k']} does not fit")
                shape = (h["out_ch"], ho, wo)
            elif layer.kind == "bn":
                if shape[0] != h["features"]:
                    raise BuildError(f"{where}: expects {h['features']} features")
            elif layer.kind in ("maxpool", "avgpool"):
                if len(shape) != 3:
                    raise BuildError(f"{where}: pooling needs a spatial input")
                if h.get("k") is None:
                    shape = (shape[0],)
                else:
                    if h["k"] > shape[1] or h["k"] > shape[2]:
                        raise BuildError(f"{where}: window {h['k']} does not fit")
                    shape = (shape[0],
                             ops.conv_output_size(shape[1], h["k"], h["stride"], 0),
                             ops.conv_output_size(shape[2], h["k"], h["stride"], 0))
            elif layer.kind == "linear":
                if len(shape) != 1 or shape[0] != h["in_features"]:
                    raise BuildError(f"{where}: expects {h['in_features']} flat features")
                shape = (h["out_features"],)
            out.append(shape)
        if len(out[-1]) != 1:
            raise BuildError(f"model output must be flat class scores, got {out[-1]}")
        return out

    def _find_tap(self) -> int:
        spatial = [i for i, s in enumerate(self.shapes) if len(s) == 3]
        if not spatial:
            raise BuildError("model has no spatial layer to serve as the Grad-CAM tap")
        last = spatial[-1]
        if any(len(s) == 3 for s in self.shapes[last + 1:]):
            raise BuildError("Grad-CAM tap must be unique")
        return last

    def init_params(self, seed: int = 0) -> "ModelGraph":
        rng = np.random.default_rng(seed)
        for i, layer in enumerate(self.layers):
            h = layer.hyper
            if layer.kind == "conv":
                fan_in = h["in_ch"] * h["k"] * h["k"]
                w = rng.normal(0.0, math.sqrt(2.0 / fan_in), (h["out_ch"], h["in_ch"], h["k"], h["k"]))
                self.params[f"{i}.weight"] = Tensor(w, requires_grad=True)
                self.params[f"{i}.bias"] = Tensor(np.zeros(h["out_ch"]), requires_grad=True)
            elif layer.kind == "linear":
                bound = 1.0 / math.sqrt(h["in_features"])
                w = rng.uniform(-bound, bound, (h["out_features"], h["in_features"]))
                self.params[f"{i}.weight"] = Tensor(w, requires_grad=True)
                self.params[f"{i}.bias"] = Tensor(np.zeros(h["out_features"]), requires_grad=True)
            elif layer.kind == "bn":
                c = h["features"]
                self.params[f"{i}.gamma"] = Tensor(np.ones(c), requires_grad=True)
                self.params[f"{i}.beta"] = Tensor(np.zeros(c), requires_grad=True)
                self.buffers[f"{i}.running_mean"] = np.zeros(c, np.float32)
                self.buffers[f"{i}.running_var"] = np.ones(c, np.float32)
        return self

    # -- accessors ------------------------------------------------------------
    @property
    def num_bn_layers(self) -> int:
        return len(self.bn_layers)

    def bn_stats(self) -> list[BNStats]:
        """Stored running mean and standard deviation, one entry per BN layer."""
        return [
            BNStats(l + 1, self.buffers[f"{i}.running_mean"].copy(),
                    np.sqrt(self.buffers[f"{i}.running_var"].astype(np.float64) + self.eps).astype(np.float32))
            for l, i in enumerate(self.bn_layers)
        ]

    def weight_names(self) -> list[str]:
        return [f"{i}.weight" for i, l in enumerate(self.layers) if l.kind in ("conv", "linear")]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def freeze(self) -> "ModelGraph":
        for p in self.params.values():
            p.requires_grad = False
        return self

    def clone(self) -> "ModelGraph":
        m = ModelGraph(self.layers, self.input_shape, self.eps, self.momentum)
        m.params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        m.buffers = {k: v.copy() for k, v in self.buffers.items()}
        m.norm_mean, m.norm_std = self.norm_mean, self.norm_std
        return m

    # -- forward --------------------------------------------------------------
    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"model expects N x {self.input_shape} input, got {x.shape}")

    def _run(self, x: Tensor, start: int, stop: int, training: bool, stats: list | None,
             weight_fn: WeightFn | None, act_fn: ActFn | None) -> Tensor:
        for i in range(start, stop):
            layer = self.layers[i]
            h = layer.hyper
            if layer.kind in ("conv", "linear"):
                w = self.params[f"{i}.weight"]
                if weight_fn is not None:
                    w = weight_fn(f"{i}.weight", w)
                b = self.params[f"{i}.bias"]
                x = (ops.conv2d(x, w, b, stride=h["stride"], pad=h["pad"]) if layer.kind == "conv"
                     else ops.linear(x, w, b))
            elif layer.kind == "bn":
                x, bm, bv = ops.batchnorm(
                    x, self.params[f"{i}.gamma"], self.params[f"{i}.beta"],
                    self.buffers[f"{i}.running_mean"], self.buffers[f"{i}.running_var"],
                    training, self.eps, self.momentum, collect_stats=stats is not None)
                if stats is not None:
                    stats.append((bm, bv))
            elif layer.kind == "relu":
                x = ops.relu(x)
            elif layer.kind == "maxpool":
                x = ops.maxpool2d(x, h["k"], h["stride"])
            elif layer.kind == "avgpool":
                x = ops.global_avgpool(x) if h.get("k") is None else ops.avgpool2d(x, h["k"], h["stride"])
            if act_fn is not None and i in self.act_sites:
                x = act_fn(self.act_sites[i], x)
        return x

    def features(self, x: Tensor, mode: str = "eval", collect_bn_stats: bool = False,
                 weight_fn: WeightFn | None = None, act_fn: ActFn | None = None):
        """Run up to and including the Grad-CAM tap; returns ``(tap, bn_stats)``."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x)
        stats = [] if (collect_bn_stats or mode == "train") else None
        a = self._run(x, 0, self.tap_index + 1, mode == "train", stats, weight_fn, act_fn)
        return a, stats

    def head(self, tap: Tensor, weight_fn: WeightFn | None = None, act_fn: ActFn | None = None) -> Tensor:
        """Map tapped activations to logits (no BN lives past the tap)."""
        return self._run(tap, self.tap_index + 1, len(self.layers), False, None, weight_fn, act_fn)

    def forward(self, x, mode: str = "eval", collect_bn_stats: bool = False,
                weight_fn: WeightFn | None = None, act_fn: ActFn | None = None) -> ForwardResult:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        a, stats = self.features(x, mode, collect_bn_stats, weight_fn, act_fn)
        return ForwardResult(self.head(a, weight_fn, act_fn), a, stats)

    def __call__(self, x, mode: str = "eval") -> Tensor:
        return self.forward(x, mode).logits


def build_model(spec: Sequence[LayerSpec], input_shape=(3, 32, 32), seed: int = 0) -> ModelGraph:
    return ModelGraph(spec, input_shape).init_params(seed)


def forward_logits(model: ModelGraph, batch, mode: str = "eval") -> Tensor:
    return model.forward(batch, mode).logits


def forward_with_taps(model: ModelGraph, batch, mode: str = "eval") -> ForwardResult:
    """Logits, last-block activations and differentiable per-BN batch (mean, var)."""
    return model.forward(batch, mode, collect_bn_stats=True)


def predict_logits(model: ModelGraph, images: np.ndarray, batch_size: int = 256, **kw) -> np.ndarray:
    """Eval-mode logits for a whole array, without recording a tape."""
    out = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            out.append(model.forward(Tensor(images[s:s + batch_size]), "eval", **kw).logits.data)
    return np.concatenate(out) if out else np.zeros((0, model.num_classes), np.float32)


# -- checkpoints ------------------------------------------------------------------------

@dataclass
class Checkpoint:
    manifest: dict
    blob: bytes


def _tensor_order(model: ModelGraph) -> list[tuple[str, np.ndarray]]:
    items = []
    for i, layer in enumerate(model.layers):
        for n in layer.param_names:
            items.append((f"{i}.{n}", model.params[f"{i}.{n}"].data))
        for n in layer.buffer_names:
            items.append((f"{i}.{n}", model.buffers[f"{i}.{n}"]))
    return items


def to_checkpoint(model: ModelGraph, extra: dict | None = None) -> Checkpoint:
    chunks, layers, offset = [], [], 0
    by_layer: dict[int, list] = {}
    for name, arr in _tensor_order(model):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        idx = int(name.split(".")[0])
        by_layer.setdefault(idx, []).append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "len": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    for i, layer in enumerate(model.layers):
        layers.append({"kind": layer.kind, "hyper": layer.hyper, "tensors": by_layer.get(i, [])})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "bn_eps": model.eps,
        "bn_momentum": model.momentum,
        "normalization": {"mean": list(model.norm_mean), "std": list(model.norm_std)},
        "layers": layers,
        "blob_bytes": offset,
        "extra": extra or {},
    }
    return Checkpoint(manifest, b"".join(chunks))


def from_checkpoint(ckpt: Checkpoint) -> ModelGraph:
    m = ckpt.manifest
    if m.get("format") != CHECKPOINT_FORMAT or m.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint format {m.get('format')!r} v{m.get('version')}")
    layers = []
    for entry in m["layers"]:
        if entry["kind"] not in LAYER_KINDS:
            raise VersionError(f"unknown layer kind {entry['kind']!r}")
        layers.append(LayerSpec(entry["kind"], dict(entry["hyper"])))
    blob = ckpt.blob
    if len(blob) != m.get("blob_bytes", len(blob)):
        raise FormatError(f"blob has {len(blob)} bytes, manifest declares {m['blob_bytes']}")
    spans = sorted((t["offset"], t["offset"] + t["len"], t["name"])
                   for e in m["layers"] for t in e["tensors"])
    prev_end = 0
    for start, end, name in spans:
        if start < prev_end:
            raise FormatError(f"tensor {name} overlaps its predecessor in the blob")
        if end > len(blob):
            raise FormatError(f"tensor {name} extends past the blob end ({end} > {len(blob)})")
        prev_end = end
    model = ModelGraph(layers, tuple(m["input_shape"]), m.get("bn_eps", 1e-5), m.get("bn_momentum", 0.1))
    model.norm_mean = tuple(m["normalization"]["mean"])
    model.norm_std = tuple(m["normalization"]["std"])
    for i, (layer, entry) in enumerate(zip(layers, m["layers"])):
        got = {t["name"]: t for t in entry["tensors"]}
        for n in layer.param_names + layer.buffer_names:
            key = f"{i}.{n}"
            if key not in got:
                raise FormatError(f"checkpoint lacks tensor {key}")
            t = got[key]
            if t["len"] != 4 * int(np.prod(t["shape"])):
                raise FormatError(f"tensor {key} length {t['len']} does not match shape {t['shape']}")
            arr = np.frombuffer(blob, dtype="<f4", count=t["len"] // 4, offset=t["offset"])
            arr = arr.reshape(t["shape"]).astype(np.float32)
            if n in layer.param_names:
                model.params[key] = Tensor(arr, requires_grad=True)
            else:
                model.buffers[key] = arr.copy()
    return model


def manifest_path(prefix) -> Path:
    return Path(f"{prefix}.manifest.json")


def blob_path(prefix) -> Path:
    return Path(f"{prefix}.blob")


def write_checkpoint(ckpt: Checkpoint, prefix) -> None:
    manifest_path(prefix).write_text(json.dumps(ckpt.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    blob_path(prefix).write_bytes(ckpt.blob)


def read_checkpoint(prefix) -> Checkpoint:
    try:
        manifest = json.loads(manifest_path(prefix).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path(prefix)} is not valid JSON: {exc}") from exc
    return Checkpoint(manifest, blob_path(prefix).read_bytes())


def save_checkpoint(model: ModelGraph, prefix, extra: dict | None = None) -> Checkpoint:
    ckpt = to_checkpoint(model, extra)
    write_checkpoint(ckpt, prefix)
    return ckpt


def load_checkpoint(prefix) -> ModelGraph:
    return from_checkpoint(read_checkpoint(prefix))


# -- pretraining --------------------------------------------------------------------------

@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    heldout_top1: float
    history: list[dict]


def top1(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def pretrain(model: ModelGraph, train_x: np.ndarray, train_y: np.ndarray, epochs: int, lr: float,
             seed: int, batch_size: int = 64, weight_decay: float = 5e-4,
             heldout: tuple[np.ndarray, np.ndarray] | None = None) -> PretrainResult:
    """Supervised training with SGD + cosine lr; the only place real data is used."""
    rng = np.random.default_rng(seed)
    opt = SGD(model.parameters(), lr, momentum=0.9, weight_decay=weight_decay)
    steps_per_epoch = math.ceil(len(train_x) / batch_size)
    total, step = epochs * steps_per_epoch, 0
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(train_x))
        losses = []
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            if len(idx) < 2:
                continue
            opt.lr = cosine_lr(lr, step, total)
            reset_tape()
            logits = model.forward(Tensor(train_x[idx]), "train").logits
            loss = ops.cross_entropy(logits, train_y[idx])
            if not np.isfinite(loss.item()):
                raise TrainingError(f"pretraining diverged at epoch {epoch}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(loss.item())
            step += 1
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if heldout is not None:
            rec["heldout_top1"] = top1(predict_logits(model, heldout[0]), heldout[1])
        history.append(rec)
        log.info("pretrain epoch %d: %s", epoch, rec)
    acc = history[-1].get("heldout_top1", float("nan")) if history else float("nan")
    return PretrainResult(to_checkpoint(model, {"heldout_top1": acc}), acc, history)
