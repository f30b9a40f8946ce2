"""Convolutional classification encoder, class activation maps and attention."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

Params = Dict[str, Tensor]


@dataclass(frozen=True)
class EncoderConfig:
    """Encoder geometry. ``num_classes`` counts foreground classes only."""

    widths: Tuple[int, ...] = (16, 32, 64, 128)
    strides: Tuple[int, ...] = (2, 2, 2, 1)
    num_classes: int = 4
    input_size: Tuple[int, int] = (64, 64)
    sam_residual: bool = False

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if len(self.widths) != len(self.strides) or not self.widths:
            raise ValueError("widths and strides must be non-empty and equally long")
        if any(w < 1 for w in self.widths) or any(s < 1 for s in self.strides):
            raise ValueError("widths and strides must be positive")
        h, w = self.feature_size(self.input_size)
        if h < 4 or w < 4:
            raise ValueError(f"final feature map {h}x{w} is smaller than 4x4")

    @property
    def num_stages(self) -> int:
        return len(self.widths)

    @property
    def output_stride(self) -> int:
        return int(np.prod(self.strides))

    def feature_size(self, size: Tuple[int, int]) -> Tuple[int, int]:
        h, w = size
        for s in self.strides:
            h = (h + 2 - 3) // s + 1
            w = (w + 2 - 3) // s + 1
        return h, w


@dataclass
class CamOutput:
    cam: Tensor
    logits: Tensor
    features: Tensor
    stages: List[Tensor] = field(default_factory=list)


@dataclass
class SamParams:
    g1: Tensor
    g2: Tensor
    g3: Tensor

    @classmethod
    def identity(cls, channels: int) -> "SamParams":
        return cls(*(Tensor(np.eye(channels)) for _ in range(3)))

    @classmethod
    def from_params(cls, params: Params) -> "SamParams":
        return cls(params["sam.g1"], params["sam.g2"], params["sam.g3"])


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> Params:
    """He-initialised stage convolutions, a CAM head and near-identity SAM projections."""
    params: Params = {}
    c_in = 3
    for i, width in enumerate(cfg.widths):
        std = np.sqrt(2.0 / (c_in * 9))
        params[f"stage{i}.w"] = Tensor(rng.normal(0.0, std, (width, c_in, 3, 3)), requires_grad=True)
        params[f"stage{i}.b"] = Tensor(np.zeros(width), requires_grad=True)
        c_in = width
    params["cam.w"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / c_in), (cfg.num_classes, c_in, 1, 1)),
                             requires_grad=True)
    k = cfg.num_classes
    for name in ("g1", "g2", "g3"):
        params[f"sam.{name}"] = Tensor(np.eye(k) + rng.normal(0.0, 0.01, (k, k)), requires_grad=True)
    return params


def conv_block(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    y = T.conv2d(x, w, stride=stride, padding=w.shape[-1] // 2)
    return T.relu(y + T.reshape(b, (1, -1, 1, 1)))


def encoder_forward(image, params: Params, cfg: EncoderConfig, *, check_size: bool = True) -> CamOutput:
    """Run the encoder on ``image`` [3,H,W] or a batch [B,3,H,W].

    ``logits`` are the spatial means of ``cam``. Set ``check_size=False`` for
    crops and rescaled inputs whose extent differs from ``cfg.input_size``.
    """
    x = T.as_tensor(image)
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"expected [3,H,W] or [B,3,H,W] image, got {x.shape}")
    if check_size and tuple(x.shape[2:]) != tuple(cfg.input_size):
        raise DimensionError(f"image extent {x.shape[2:]} does not match input_size {cfg.input_size}")
    stages = []
    h = x
    for i, stride in enumerate(cfg.strides):
        h = conv_block(h, params[f"stage{i}.w"], params[f"stage{i}.b"], stride)
        stages.append(h)
    cam = T.conv2d(h, params["cam.w"])
    logits = T.mean(cam, axis=(2, 3))
    if single:
        cam = T.reshape(cam, cam.shape[1:])
        logits = T.reshape(logits, logits.shape[1:])
        h = T.reshape(h, h.shape[1:])
    return CamOutput(cam=cam, logits=logits, features=h, stages=stages)


def sam_forward(m, params: SamParams, residual: bool = False) -> Tensor:
    """Global spatial self-attention over a response map [C,h,w] (or [B,C,h,w]).

    Every output position is a softmax-weighted combination, over all source
    positions, of the value projection ``g3(M)``.
    """
    m = T.as_tensor(m)
    single = m.ndim == 3
    if single:
        m = T.reshape(m, (1,) + m.shape)
    B, C, h, w = m.shape
    x = T.reshape(m, (B, C, h * w))
    q = T.matmul(params.g1, x)
    k = T.matmul(params.g2, x)
    v = T.matmul(params.g3, x)
    scores = T.matmul(T.transpose(q, (0, 2, 1)), k)  # [B, query, key]
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(v, T.transpose(attn, (0, 2, 1)))
    out = T.reshape(out, (B, C, h, w))
    if residual:
        out = out + m
    return T.reshape(out, (C, h, w)) if single else out


def background_map(cam) -> Tensor:
    """Append a background channel to foreground maps [..., C-1, h, w].

    Foreground maps are softmax-normalised across classes per pixel; the
    background is one minus their per-pixel maximum.
    """
    cam = T.as_tensor(cam)
    fg = T.softmax(cam, axis=-3)
    bg = 1.0 - T.max_(fg, axis=-3, keepdims=True)
    return T.concatenate([fg, bg], axis=-3)
