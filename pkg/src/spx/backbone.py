"""Tiny strided conv encoder and hypercolumn fusion at stride 8."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

TAP_BLOCKS = {2: 0, 8: 2, 32: 4}  # stride -> block index (0-based)


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple = (16, 32, 64, 128, 256)
    model_width: int = 256
    in_channels: int = 3
    depth: int = 0  # extra residual stride-1 conv layers per block

    def __post_init__(self):
        if len(self.channels) != 5:
            raise ConfigError("backbone_channels", f"need 5 block widths, got {len(self.channels)}")
        if self.depth < 0:
            raise ConfigError("backbone_depth", "must be >= 0")

    def stage_channels(self) -> dict:
        return {s: self.channels[b] for s, b in TAP_BLOCKS.items()}


def init_backbone_params(cfg: BackboneConfig, rng, dtype=None) -> dict:
    dtype = dtype or ad.default_dtype()
    params = {}
    c_in = cfg.in_channels
    for i, c_out in enumerate(cfg.channels):
        std = math.sqrt(2.0 / (9 * c_in))
        params[f"backbone.block{i}.w"] = Tensor(rng.normal(0.0, std, size=(3, 3, c_in, c_out)), requires_grad=True, dtype=dtype)
        params[f"backbone.block{i}.b"] = Tensor(np.zeros(c_out), requires_grad=True, dtype=dtype)
        params[f"backbone.block{i}.ln.g"] = Tensor(np.ones(c_out), requires_grad=True, dtype=dtype)
        params[f"backbone.block{i}.ln.b"] = Tensor(np.zeros(c_out), requires_grad=True, dtype=dtype)
        for j in range(cfg.depth):
            p = f"backbone.block{i}.res{j}."
            std = math.sqrt(2.0 / (9 * c_out))
            params[p + "w"] = Tensor(rng.normal(0.0, std, size=(3, 3, c_out, c_out)), requires_grad=True, dtype=dtype)
            params[p + "b"] = Tensor(np.zeros(c_out), requires_grad=True, dtype=dtype)
            params[p + "ln.g"] = Tensor(np.ones(c_out), requires_grad=True, dtype=dtype)
            params[p + "ln.b"] = Tensor(np.zeros(c_out), requires_grad=True, dtype=dtype)
        c_in = c_out
    return params


def init_hypercolumn_params(cfg: BackboneConfig, rng, dtype=None) -> dict:
    dtype = dtype or ad.default_dtype()
    params = {}
    for stride, c in cfg.stage_channels().items():
        params[f"hyper.s{stride}.w"] = Tensor(
            rng.normal(0.0, 1.0 / math.sqrt(c), size=(c, cfg.model_width)), requires_grad=True, dtype=dtype
        )
        params[f"hyper.s{stride}.b"] = Tensor(np.zeros(cfg.model_width), requires_grad=True, dtype=dtype)
    return params


def check_image_dims(h: int, w: int):
    if h < 32 or h % 32:
        raise ConfigError("image_h", f"image height {h} must be a positive multiple of 32")
    if w < 32 or w % 32:
        raise ConfigError("image_w", f"image width {w} must be a positive multiple of 32")


def conv_block(x: Tensor, params: dict, i: int) -> Tensor:
    """stride-2 3x3 conv (zero padding) -> layer norm over channels -> GELU,
    followed by any residual stride-1 conv layers present in ``params``."""
    p = f"backbone.block{i}."
    y = ad.conv2d(x, params[p + "w"], params[p + "b"], stride=2, pad=1)
    y = ad.layer_norm(y, params[p + "ln.g"], params[p + "ln.b"])
    y = ad.gelu(y)
    j = 0
    while p + f"res{j}.w" in params:
        r = p + f"res{j}."
        h = ad.conv2d(y, params[r + "w"], params[r + "b"], stride=1, pad=1)
        y = y + ad.gelu(ad.layer_norm(h, params[r + "ln.g"], params[r + "ln.b"]))
        j += 1
    return y


def encode(image: Tensor, params: dict, n_blocks: int = 5) -> dict:
    """Return ``{2: f, 8: f, 32: f}`` stage features for a (B, H, W, 3) image."""
    _, h, w, _ = image.shape
    check_image_dims(h, w)
    feats = {}
    taps = {b: s for s, b in TAP_BLOCKS.items()}
    x = image
    for i in range(n_blocks):
        x = conv_block(x, params, i)
        if i in taps:
            feats[taps[i]] = x
    return feats


def build_hypercolumn(feats: dict, params: dict, branches=(2, 8, 32)) -> Tensor:
    """Project each stage to the model width, resize to stride 8, and sum.

    ``branches`` restricts the sum (used to test additivity).
    """
    ref = feats[8]
    out_h, out_w = ref.shape[1], ref.shape[2]
    total = None
    for stride in branches:
        f = feats[stride]
        wt = params[f"hyper.s{stride}.w"]
        if wt.shape[0] != f.shape[-1]:
            raise ConfigError(
                f"hyper.s{stride}", f"projection expects {wt.shape[0]} input channels, stage has {f.shape[-1]}"
            )
        y = ad.linear(f, wt, params[f"hyper.s{stride}.b"])
        y = ad.bilinear_resize(y, out_h, out_w)
        total = y if total is None else total + y
    return total
