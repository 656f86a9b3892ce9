"""Vision-transformer face image quality assessment with a learnable
quality token, plus the verification metrics needed to evaluate it."""

from . import data, edc, heads, tensor, train, vit  # noqa: F401

__version__ = "0.1.0"
