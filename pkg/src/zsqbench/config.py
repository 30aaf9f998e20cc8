"""Pipeline configuration: one JSON document, strict keys, named presets."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .distill import FinetuneConfig
from .errors import ConfigError
from .synthesis import SynthesisConfig

# searched ranges for the fine-tuning hyperparameters; D0 is stated for
# 224-pixel inputs and rescaled by image side
TAU_RANGE = (0.5, 0.7)
D0_RANGE_224 = (20.0, 100.0)
LAMBDA_CE_RANGE = (0.005, 5.0)
LAMBDA_CAM_RANGE = (20.0, 2000.0)
DATASET_FORMATS = ("cifar10", "desk-digits", "records")


@dataclass
class DatasetConfig:
    path: str = "data/desk"
    format: str = "cifar10"
    train_limit: int | None = 2000
    test_limit: int | None = 1000


@dataclass
class PretrainConfig:
    epochs: int = 15
    lr: float = 0.05
    batch: int = 64
    weight_decay: float = 5e-4


@dataclass
class PipelineConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: str = "desk"
    bits: tuple[int, int] = (4, 4)
    ends_8bit: bool = False
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    seeds: tuple[int, ...] = (0, 1, 2)
    output_dir: str = "runs/desk"

    # -- text form --------------------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["bits"] = list(self.bits)
        d["seeds"] = list(self.seeds)
        return d

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        sections = {"dataset": DatasetConfig, "pretrain": PretrainConfig,
                    "synthesis": SynthesisConfig, "finetune": FinetuneConfig}
        _check_keys(doc, {f.name for f in fields(cls)}, "")
        kw = {}
        for key, value in doc.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ConfigError(f"'{key}' must be an object")
                sub = sections[key]
                _check_keys(value, {f.name for f in fields(sub)}, key + ".")
                kw[key] = sub(**value)
            elif key in ("bits", "seeds"):
                kw[key] = tuple(int(v) for v in value)
            else:
                kw[key] = value
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"configuration is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    # -- checks ---------------------------------------------------------------------
    def validate(self) -> "PipelineConfig":
        if len(self.bits) != 2 or any(not 2 <= b <= 8 for b in self.bits):
            raise ConfigError(f"bits must be two integers in [2, 8], got {self.bits}")
        if self.dataset.format not in DATASET_FORMATS:
            raise ConfigError(f"dataset.format must be one of {DATASET_FORMATS}")
        if self.model != "desk":
            raise ConfigError(f"unknown model spec {self.model!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        try:
            self.synthesis.validate()
            self.finetune.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def range_warnings(self, image_side: int = 32) -> list[str]:
        """Hyperparameters outside the searched ranges; these are allowed but reported."""
        ft = self.finetune
        lo, hi = (v * image_side / 224 for v in D0_RANGE_224)
        checks = [("finetune.tau", ft.tau, TAU_RANGE), ("finetune.d0", ft.d0, (lo, hi)),
                  ("finetune.lambda_ce", ft.lambda_ce, LAMBDA_CE_RANGE),
                  ("finetune.lambda_cam", ft.lambda_cam, LAMBDA_CAM_RANGE)]
        return [f"{name}={v:g} lies outside the searched range [{a:g}, {b:g}]"
                for name, v, (a, b) in checks if not a <= v <= b]

    def echo(self) -> dict:
        return self.to_dict()


def _check_keys(doc: dict, allowed: set[str], prefix: str) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(prefix + k for k in unknown)}")


def preset(name: str) -> PipelineConfig:
    """Named configurations: ``desk`` (= ``W4A4``), ``W3A3`` and the large ``full`` run."""
    base = PipelineConfig()
    if name in ("desk", "W4A4"):
        return base
    if name == "W3A3":
        return replace(base, bits=(3, 3), output_dir="runs/desk-w3a3")
    if name == "full":
        return replace(
            base, dataset=replace(base.dataset, train_limit=None, test_limit=None),
            synthesis=replace(base.synthesis, n=5120, batch=256, iters=1000),
            finetune=replace(base.finetune, epochs=100, batch=256),
            output_dir="runs/full")
    raise ConfigError(f"unknown preset {name!r}; choose desk, W4A4, W3A3 or full")


PRESETS = ("desk", "W4A4", "W3A3", "full")
