"""Three-block strided CNN: canvas -> N-way logits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .generator import ConfigError, kaiming_uniform

CHANNELS = (1, 16, 32, 64)


@dataclass
class ClassifierParams:
    kernels: list[Tensor]
    biases: list[Tensor]
    head_w: Tensor
    head_b: Tensor

    @property
    def n_classes(self) -> int:
        return self.head_w.shape[1]

    def named(self) -> dict[str, Tensor]:
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"cls.conv{i}.kernel"] = k
            out[f"cls.conv{i}.bias"] = b
        out["cls.head_w"] = self.head_w
        out["cls.head_b"] = self.head_b
        return out


def init_classifier(n_classes: int, seed=0) -> ClassifierParams:
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    rng = np.random.default_rng(seed)
    dt = ad.get_default_dtype()
    kernels, biases = [], []
    for c_in, c_out in zip(CHANNELS[:-1], CHANNELS[1:]):
        kernels.append(Tensor(kaiming_uniform(rng, c_in * 9, (c_out, c_in, 3, 3)), requires_grad=True))
        biases.append(Tensor(np.zeros(c_out, dtype=dt), requires_grad=True))
    # unit-gain head keeps initial logits small, i.e. near-uniform softmax
    bound = 1.0 / np.sqrt(CHANNELS[-1])
    head_w = rng.uniform(-bound, bound, size=(CHANNELS[-1], n_classes)).astype(dt)
    return ClassifierParams(
        kernels, biases,
        Tensor(head_w, requires_grad=True),
        Tensor(np.zeros(n_classes, dtype=dt), requires_grad=True),
    )


def features(canvas: Tensor, params: ClassifierParams) -> Tensor:
    """Final conv feature map ``[b, 64, h/8, w/8]``."""
    if canvas.ndim != 4 or canvas.shape[1] != 1:
        raise DimensionError(f"canvas batch must be [b, 1, H, W], got {canvas.shape}")
    x = canvas
    for k, b in zip(params.kernels, params.biases):
        x = ad.relu(ad.affine_bias(ad.conv2d(x, k, stride=2, padding=1), b))
    return x


def head(pooled: Tensor, params: ClassifierParams) -> Tensor:
    return ad.affine_bias(ad.matmul(pooled, params.head_w), params.head_b)


def classify(canvas: Tensor, params: ClassifierParams, size: int | None = None) -> Tensor:
    """Logits ``[b, N]`` for a canvas batch ``[b, 1, H, W]`` (or ``[b, H, W]``)."""
    if canvas.ndim == 3:
        canvas = ad.reshape(canvas, (canvas.shape[0], 1) + canvas.shape[1:])
    if size is not None and canvas.shape[2:] != (size, size):
        raise DimensionError(f"classifier configured for {size}x{size} canvases, got {canvas.shape[2:]}")
    return head(ad.global_avg_pool(features(canvas, params)), params)
