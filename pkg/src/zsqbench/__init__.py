"""Zero-shot quantization workbench: numpy autodiff, RTN quantization, synthesis and distillation."""

__version__ = "0.1.0"
