"""JPEG-robust adversarial perturbations via a straight-through differentiable JPEG."""

__version__ = "0.1.0"
