"""Global multi-head self-attention over superpixel tokens plus a linear class head."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError


@dataclass(frozen=True)
class ClassifierConfig:
    n_layers: int = 4
    n_heads: int = 4
    channels: int = 256
    n_classes: int = 19
    prenorm: bool = False
    ffn: bool = False

    def __post_init__(self):
        if self.n_layers < 0:
            raise ConfigError("cls_layers", "must be >= 0")
        if self.n_heads < 1 or self.channels % self.n_heads:
            raise ConfigError("cls_heads", f"channels={self.channels} not divisible by cls_heads={self.n_heads}")
        if self.n_classes < 1:
            raise ConfigError("n_classes", "must be >= 1")


def init_classifier_params(cfg: ClassifierConfig, rng, dtype=None) -> dict:
    dtype = dtype or ad.default_dtype()
    c = cfg.channels

    def lin(name, c_in, c_out):
        params[name + ".w"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(c_in), size=(c_in, c_out)), requires_grad=True, dtype=dtype)
        params[name + ".b"] = Tensor(np.zeros(c_out), requires_grad=True, dtype=dtype)

    def norm(name):
        params[name + ".g"] = Tensor(np.ones(c), requires_grad=True, dtype=dtype)
        params[name + ".b"] = Tensor(np.zeros(c), requires_grad=True, dtype=dtype)

    params: dict = {}
    for layer in range(cfg.n_layers):
        for name in ("q", "k", "v", "o"):
            lin(f"cls.layer{layer}.{name}", c, c)
        if cfg.prenorm:
            norm(f"cls.layer{layer}.ln")
        if cfg.ffn:
            lin(f"cls.layer{layer}.ffn1", c, 4 * c)
            lin(f"cls.layer{layer}.ffn2", 4 * c, c)
            if cfg.prenorm:
                norm(f"cls.layer{layer}.ln2")
    lin("cls.head", c, cfg.n_classes)
    return params


def self_attention(x: Tensor, params: dict, prefix: str, n_heads: int, return_weights: bool = False):
    """Global MHSA with output projection. x: (B, T, C)."""
    bsz, t, c = x.shape
    d = c // n_heads

    def proj(name):
        return ad.linear(x, params[f"{prefix}{name}.w"], params[f"{prefix}{name}.b"]).reshape(bsz, t, n_heads, d)

    q, k, v = proj("q"), proj("k"), proj("v")
    logits = ad.einsum("bthd,bshd->bhts", q, k) * (1.0 / math.sqrt(d))
    attn = ad.softmax(logits, axis=-1)
    out = ad.einsum("bhts,bshd->bthd", attn, v).reshape(bsz, t, c)
    out = ad.linear(out, params[f"{prefix}o.w"], params[f"{prefix}o.b"])
    return (out, attn) if return_weights else out


def classify(S: Tensor, params: dict, cfg: ClassifierConfig):
    """Refine superpixel tokens and predict raw class logits.

    S: (B, Gh, Gw, C) or (B, T, C). Returns (F, C_logits) with shapes
    (B, T, C) and (B, T, n_classes).
    """
    if S.ndim == 4:
        S = S.reshape(S.shape[0], S.shape[1] * S.shape[2], S.shape[3])
    if S.shape[-1] != cfg.channels:
        raise ValueError(f"token width {S.shape[-1]} != classifier channels {cfg.channels}")
    x = S
    for layer in range(cfg.n_layers):
        p = f"cls.layer{layer}."
        h = ad.layer_norm(x, params[p + "ln.g"], params[p + "ln.b"]) if cfg.prenorm else x
        x = x + self_attention(h, params, p, cfg.n_heads)
        if cfg.ffn:
            h = ad.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"]) if cfg.prenorm else x
            h = ad.gelu(ad.linear(h, params[p + "ffn1.w"], params[p + "ffn1.b"]))
            x = x + ad.linear(h, params[p + "ffn2.w"], params[p + "ffn2.b"])
    logits = ad.linear(x, params["cls.head.w"], params["cls.head.b"])
    return x, logits
