"""Uniform min-max quantization and straight-through fake-quant training.

Codes follow ``floor(w / s - z + 1/2)`` with ``s = (beta - alpha) / (2^B - 1)``
and ``z = alpha / s + 2^(B-1)``, clamped to the signed range
``[-2^(B-1), 2^(B-1) - 1]``; dequantization is ``s * (code + z)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import CalibrationError, ContractError, DomainError, FormatError, ParameterError, StateError
from .model import Checkpoint, ModelGraph, from_checkpoint, read_checkpoint, to_checkpoint, write_checkpoint
from .tensor import Tensor, as_tensor, make_result, no_grad


@dataclass(frozen=True)
class QuantParams:
    bits: int
    alpha: float
    beta: float
    scale: float
    zero_point: float

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


def _check_bits(bits: int) -> None:
    if int(bits) != bits or bits < 2:
        raise ParameterError(f"bits must be an integer >= 2, got {bits}")


def params_from_range(alpha: float, beta: float, bits: int) -> QuantParams:
    _check_bits(bits)
    alpha, beta = float(alpha), float(beta)
    if not (np.isfinite(alpha) and np.isfinite(beta)):
        raise DomainError("clip range must be finite")
    if beta < alpha:
        raise ParameterError(f"clip range inverted: alpha={alpha} > beta={beta}")
    if beta == alpha:
        # constant tensor: every value maps to code 0, which dequantizes to alpha
        return QuantParams(int(bits), alpha, beta, 1.0, alpha)
    s = (beta - alpha) / (2 ** bits - 1)
    return QuantParams(int(bits), alpha, beta, s, alpha / s + 2 ** (bits - 1))


def compute_minmax_params(values, bits: int) -> QuantParams:
    """Clip range from the tensor's own minimum and maximum."""
    v = np.asarray(values.data if isinstance(values, Tensor) else values)
    if v.size == 0:
        raise DomainError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(v)):
        raise DomainError("values must be finite")
    return params_from_range(float(v.min()), float(v.max()), bits)


def quantize_rtn(values, params: QuantParams) -> np.ndarray:
    """Round-to-nearest integer codes (ties toward +inf), clamped to the B-bit range."""
    v = np.asarray(values.data if isinstance(values, Tensor) else values, dtype=np.float64)
    codes = np.floor(v / params.scale - params.zero_point + 0.5)
    return np.clip(codes, params.qmin, params.qmax).astype(np.int32)


def dequantize(codes, params: QuantParams) -> np.ndarray:
    c = np.asarray(codes)
    if c.size and (c.min() < params.qmin or c.max() > params.qmax):
        raise ContractError(f"codes outside [{params.qmin}, {params.qmax}]")
    return (params.scale * (c.astype(np.float64) + params.zero_point)).astype(np.float32)


def fake_quant(x, params: QuantParams) -> Tensor:
    """``dequantize(quantize_rtn(x))`` with a clipped straight-through gradient.

    The backward pass is the identity for inputs inside ``[alpha, beta]`` and
    zero outside.
    """
    x = as_tensor(x)
    v = x.data.astype(np.float64)
    codes = np.clip(np.floor(v / params.scale - params.zero_point + 0.5), params.qmin, params.qmax)
    out = (params.scale * (codes + params.zero_point)).astype(x.dtype)
    inside = (x.data >= params.alpha) & (x.data <= params.beta)
    return make_result("fake_quant", out, (x,), lambda g: (g * inside,))


# -- quantized model -------------------------------------------------------------

@dataclass
class ActSite:
    running_min: float | None = None
    running_max: float | None = None
    params: QuantParams | None = None


@dataclass
class QuantConfig:
    weight_bits: int | None = 4
    act_bits: int | None = 4
    ends_8bit: bool = False  # first conv / last linear weights at 8 bits
    act_momentum: float = 0.9

    @property
    def bypass(self) -> bool:
        return self.weight_bits is None and self.act_bits is None


class QuantizedModel:
    """Shadow full-precision weights plus per-tensor quantizers.

    Weight quantizers are refreshed from the shadow weights on every
    forward; activation quantizers use EMA-tracked min/max from calibration.
    ``weight_bits``/``act_bits`` of ``None`` bypass that side entirely.
    """

    def __init__(self, model: ModelGraph, config: QuantConfig | None = None):
        self.model = model
        self.config = config or QuantConfig()
        for b in (self.config.weight_bits, self.config.act_bits):
            if b is not None:
                _check_bits(b)
        self.sites = [ActSite() for _ in range(len(model.act_sites))]
        self.weight_params: dict[str, QuantParams] = {}
        names = model.weight_names()
        self._ends = {names[0], names[-1]} if names else set()

    def weight_bits_for(self, name: str) -> int | None:
        if self.config.weight_bits is None:
            return None
        if self.config.ends_8bit and name in self._ends:
            return 8
        return self.config.weight_bits

    def _weight_fn(self, name: str, w: Tensor) -> Tensor:
        bits = self.weight_bits_for(name)
        if bits is None:
            return w
        qp = compute_minmax_params(w.data, bits)
        self.weight_params[name] = qp
        return fake_quant(w, qp)

    def _act_fn(self, site: int, x: Tensor) -> Tensor:
        if self.config.act_bits is None:
            return x
        qp = self.sites[site].params
        if qp is None:
            raise StateError(f"activation site {site} is uncalibrated")
        return fake_quant(x, qp)

    @property
    def calibrated(self) -> bool:
        return self.config.act_bits is None or all(s.params is not None for s in self.sites)

    def refresh_weight_params(self) -> dict[str, QuantParams]:
        for name in self.model.weight_names():
            bits = self.weight_bits_for(name)
            if bits is not None:
                self.weight_params[name] = compute_minmax_params(self.model.params[name].data, bits)
        return self.weight_params

    def forward(self, x, mode: str = "eval", collect_bn_stats: bool = False):
        return self.model.forward(x, mode, collect_bn_stats, weight_fn=self._weight_fn, act_fn=self._act_fn)

    def features(self, x, mode: str = "eval"):
        return self.model.features(x, mode, weight_fn=self._weight_fn, act_fn=self._act_fn)

    def head(self, tap: Tensor) -> Tensor:
        return self.model.head(tap, weight_fn=self._weight_fn, act_fn=self._act_fn)

    def __call__(self, x, mode: str = "eval") -> Tensor:
        return self.forward(x, mode).logits

    def parameters(self) -> list[Tensor]:
        return self.model.parameters()

    @property
    def num_classes(self) -> int:
        return self.model.num_classes


def quantize_model(model: ModelGraph, weight_bits: int | None, act_bits: int | None,
                   ends_8bit: bool = False) -> QuantizedModel:
    """Round-to-nearest initialization: copy the model and attach quantizers."""
    q = QuantizedModel(model.clone(), QuantConfig(weight_bits, act_bits, ends_8bit))
    for p in q.model.params.values():
        p.requires_grad = True
    q.refresh_weight_params()
    return q


def fake_quant_forward(qmodel: QuantizedModel, batch, mode: str = "eval") -> Tensor:
    return qmodel.forward(batch, mode).logits


def calibrate_activation_ranges(qmodel: QuantizedModel, batches: Iterable[np.ndarray],
                                momentum: float | None = None) -> list[QuantParams | None]:
    """EMA min/max per activation site, starting fresh, then recompute params.

    Activations are observed with weights fake-quantized and activation
    quantization switched off, in eval mode.
    """
    m = qmodel.config.act_momentum if momentum is None else momentum
    mins: list[float | None] = [None] * len(qmodel.sites)
    maxs: list[float | None] = [None] * len(qmodel.sites)

    def observe(site: int, x: Tensor) -> Tensor:
        lo, hi = float(x.data.min()), float(x.data.max())
        if mins[site] is None:
            mins[site], maxs[site] = lo, hi
        else:
            mins[site] = m * mins[site] + (1 - m) * lo
            maxs[site] = m * maxs[site] + (1 - m) * hi
        return x

    seen = 0
    with no_grad():
        for b in batches:
            if len(b) == 0:
                continue
            qmodel.model.forward(Tensor(b), "eval", weight_fn=qmodel._weight_fn, act_fn=observe)
            seen += 1
    if seen == 0:
        raise CalibrationError("activation calibration needs at least one batch")
    for site, lo, hi in zip(qmodel.sites, mins, maxs):
        site.running_min, site.running_max = lo, hi
        if qmodel.config.act_bits is not None:
            site.params = params_from_range(lo, hi, qmodel.config.act_bits)
    return [s.params for s in qmodel.sites]


# -- quantized checkpoint ---------------------------------------------------------------

def codes_path(prefix) -> Path:
    return Path(f"{prefix}.codes")


def save_quantized(qmodel: QuantizedModel, prefix, extra: dict | None = None) -> Checkpoint:
    """Write the shadow checkpoint plus a ``quant`` manifest section and int8 codes."""
    ckpt = to_checkpoint(qmodel.model, extra)
    if qmodel.config.weight_bits is not None and qmodel.config.weight_bits > 8:
        raise ParameterError("int8 code storage needs weight bits <= 8")
    qmodel.refresh_weight_params()
    chunks, offset, tensors = [], 0, {}
    for name, qp in qmodel.weight_params.items():
        codes = quantize_rtn(qmodel.model.params[name].data, qp).astype("<i1")
        raw = codes.tobytes()
        tensors[name] = dict(asdict(qp), shape=list(codes.shape), offset=offset, len=len(raw))
        chunks.append(raw)
        offset += len(raw)
    ckpt.manifest["quant"] = {
        "weight_bits": qmodel.config.weight_bits,
        "act_bits": qmodel.config.act_bits,
        "ends_8bit": qmodel.config.ends_8bit,
        "weights": tensors,
        "activations": [
            {"running_min": s.running_min, "running_max": s.running_max,
             "params": None if s.params is None else asdict(s.params)}
            for s in qmodel.sites
        ],
        "codes_bytes": offset,
    }
    write_checkpoint(ckpt, prefix)
    codes_path(prefix).write_bytes(b"".join(chunks))
    return ckpt


def load_quantized(prefix) -> tuple[QuantizedModel, dict[str, np.ndarray]]:
    """Return the quantized model and the stored integer codes per weight."""
    ckpt = read_checkpoint(prefix)
    q = ckpt.manifest.get("quant")
    if q is None:
        raise FormatError(f"{prefix} is not a quantized checkpoint")
    model = from_checkpoint(ckpt)
    qm = QuantizedModel(model, QuantConfig(q["weight_bits"], q["act_bits"], q.get("ends_8bit", False)))
    raw = codes_path(prefix).read_bytes()
    if len(raw) != q["codes_bytes"]:
        raise FormatError(f"codes file has {len(raw)} bytes, manifest declares {q['codes_bytes']}")
    codes = {}
    for name, t in q["weights"].items():
        if t["offset"] + t["len"] > len(raw):
            raise FormatError(f"codes for {name} extend past the file end")
        codes[name] = np.frombuffer(raw, dtype="<i1", count=t["len"], offset=t["offset"]).reshape(t["shape"])
        qm.weight_params[name] = QuantParams(t["bits"], t["alpha"], t["beta"], t["scale"], t["zero_point"])
    for site, entry in zip(qm.sites, q["activations"]):
        site.running_min, site.running_max = entry["running_min"], entry["running_max"]
        site.params = None if entry["params"] is None else QuantParams(**entry["params"])
    return qm, codes
