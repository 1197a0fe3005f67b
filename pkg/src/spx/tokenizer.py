"""Superpixel tokenization by local dual-path cross-attention.

Pixels live on an (H, W) feature map; superpixels on a (Gh, Gw) grid where
each grid cell owns an h x w patch. A pixel sees the 3x3 superpixels around
its own cell; a superpixel sees every pixel of those 9 cells.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

# row-major over (di, dj) in {-1, 0, 1}^2
OFFSETS = tuple((di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1))
CENTER_SLOT = 4


@dataclass(frozen=True)
class GridConfig:
    grid_h: int
    grid_w: int
    feat_h: int
    feat_w: int
    n_layers: int = 2
    n_heads: int = 2
    channels: int = 256
    pe_every_layer: bool = True
    prenorm: bool = False
    scale_logits: bool = True

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigError("grid_h", f"grid extents must be positive, got {self.grid_h}x{self.grid_w}")
        if self.feat_h % self.grid_h:
            raise ConfigError("grid_h", f"feature height {self.feat_h} not divisible by grid_h={self.grid_h}")
        if self.feat_w % self.grid_w:
            raise ConfigError("grid_w", f"feature width {self.feat_w} not divisible by grid_w={self.grid_w}")
        if self.n_heads < 1 or self.channels % self.n_heads:
            raise ConfigError("tok_heads", f"channels={self.channels} not divisible by tok_heads={self.n_heads}")

    @property
    def h(self) -> int:
        return self.feat_h // self.grid_h

    @property
    def w(self) -> int:
        return self.feat_w // self.grid_w

    @property
    def n_superpixels(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def n_pixels(self) -> int:
        return self.feat_h * self.feat_w


@dataclass
class NeighborhoodIndex:
    """Pixel <-> superpixel neighbor lists with validity masks.

    ``pix_sp[p, k]`` is the superpixel at offset ``OFFSETS[k]`` from pixel
    ``p``'s cell. ``sp_pix[i, m]`` enumerates the pixels of the 3x3 cells
    around superpixel ``i`` (slot-major, then patch row-major). Invalid
    entries hold index 0 and a False mask.
    """

    H: int
    W: int
    grid_h: int
    grid_w: int
    pix_sp: np.ndarray
    pix_mask: np.ndarray
    sp_pix: np.ndarray
    sp_mask: np.ndarray

    @property
    def h(self):
        return self.H // self.grid_h

    @property
    def w(self):
        return self.W // self.grid_w

    def cell_of(self, p):
        y, x = divmod(p, self.W)
        return y // self.h, x // self.w


def build_neighborhood_index(H: int, W: int, grid_h: int, grid_w: int, wrap: bool = False) -> NeighborhoodIndex:
    """Deterministic neighbor index. ``wrap=True`` uses a periodic grid (tests only)."""
    if H % grid_h:
        raise ConfigError("grid_h", f"height {H} not divisible by grid_h={grid_h}")
    if W % grid_w:
        raise ConfigError("grid_w", f"width {W} not divisible by grid_w={grid_w}")
    h, w = H // grid_h, W // grid_w
    ys, xs = np.divmod(np.arange(H * W), W)
    ci, cj = ys // h, xs // w
    pix_sp = np.zeros((H * W, 9), dtype=np.int64)
    pix_mask = np.zeros((H * W, 9), dtype=bool)
    for k, (di, dj) in enumerate(OFFSETS):
        ni, nj = ci + di, cj + dj
        if wrap:
            ni, nj = ni % grid_h, nj % grid_w
            ok = np.ones_like(ni, dtype=bool)
        else:
            ok = (ni >= 0) & (ni < grid_h) & (nj >= 0) & (nj < grid_w)
        pix_sp[:, k] = np.where(ok, ni * grid_w + nj, 0)
        pix_mask[:, k] = ok

    n_sp = grid_h * grid_w
    patch_y, patch_x = np.divmod(np.arange(h * w), w)
    sp_pix = np.zeros((n_sp, 9 * h * w), dtype=np.int64)
    sp_mask = np.zeros((n_sp, 9 * h * w), dtype=bool)
    gi, gj = np.divmod(np.arange(n_sp), grid_w)
    for k, (di, dj) in enumerate(OFFSETS):
        ni, nj = gi + di, gj + dj
        if wrap:
            ni, nj = ni % grid_h, nj % grid_w
            ok = np.ones_like(ni, dtype=bool)
        else:
            ok = (ni >= 0) & (ni < grid_h) & (nj >= 0) & (nj < grid_w)
        py = ni[:, None] * h + patch_y[None, :]
        px = nj[:, None] * w + patch_x[None, :]
        sl = slice(k * h * w, (k + 1) * h * w)
        sp_pix[:, sl] = np.where(ok[:, None], py * W + px, 0)
        sp_mask[:, sl] = ok[:, None]
    return NeighborhoodIndex(H, W, grid_h, grid_w, pix_sp, pix_mask, sp_pix, sp_mask)


# -- parameters ---------------------------------------------------------------

def _linear_params(rng, c_in, c_out, dtype, std=None):
    std = 1.0 / math.sqrt(c_in) if std is None else std
    return (
        Tensor(rng.normal(0.0, std, size=(c_in, c_out)), requires_grad=True, dtype=dtype),
        Tensor(np.zeros(c_out), requires_grad=True, dtype=dtype),
    )


def pe_shape(h: int, w: int) -> tuple[int, int]:
    """Parameter extents for a position embedding: quarter resolution, or full if under 4."""
    if h < 4 or w < 4:
        return h, w
    return h // 4, w // 4


def init_position_embeddings(cfg: GridConfig, rng, dtype=None, std=0.02):
    """Learned pixel and superpixel position embeddings at quarter resolution."""
    dtype = dtype or ad.default_dtype()
    ph, pw = pe_shape(cfg.feat_h, cfg.feat_w)
    sh, sw = pe_shape(cfg.grid_h, cfg.grid_w)
    pixel_pe = Tensor(rng.normal(0.0, std, size=(1, ph, pw, cfg.channels)), requires_grad=True, dtype=dtype)
    sp_pe = Tensor(rng.normal(0.0, std, size=(1, sh, sw, cfg.channels)), requires_grad=True, dtype=dtype)
    return pixel_pe, sp_pe


def init_tokenizer_params(cfg: GridConfig, rng, dtype=None) -> dict:
    dtype = dtype or ad.default_dtype()
    c = cfg.channels
    params = {
        "queries": Tensor(rng.normal(0.0, 0.02, size=(cfg.grid_h, cfg.grid_w, c)), requires_grad=True, dtype=dtype),
    }
    params["pixel_pe"], params["superpixel_pe"] = init_position_embeddings(cfg, rng, dtype)
    for layer in range(cfg.n_layers):
        for name in ("s_q", "s_k", "s_v", "i_q", "i_k", "i_v"):
            wt, b = _linear_params(rng, c, c, dtype)
            params[f"layer{layer}.{name}.w"] = wt
            params[f"layer{layer}.{name}.b"] = b
        if cfg.prenorm:
            for name in ("ln_s", "ln_i"):
                params[f"layer{layer}.{name}.g"] = Tensor(np.ones(c), requires_grad=True, dtype=dtype)
                params[f"layer{layer}.{name}.b"] = Tensor(np.zeros(c), requires_grad=True, dtype=dtype)
    return params


def layer_params(params: dict, layer: int) -> dict:
    prefix = f"layer{layer}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# -- forward ------------------------------------------------------------------

def _heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, c = x.shape
    return x.reshape(b, n, n_heads, c // n_heads)


def local_attention(q: Tensor, k: Tensor, v: Tensor, nbr: np.ndarray, mask: np.ndarray,
                    n_heads: int, scale: bool = True, return_weights: bool = False):
    """Each query row attends over its own neighbor list of key/value rows.

    q: (B, Nq, C); k, v: (B, Nk, C); nbr, mask: (Nq, M).
    """
    bsz, nq, c = q.shape
    d = c // n_heads
    qh = _heads(q, n_heads)
    kg = ad.gather(_heads(k, n_heads), nbr, axis=1)  # (B, Nq, M, nh, d)
    vg = ad.gather(_heads(v, n_heads), nbr, axis=1)
    logits = ad.einsum("bnhd,bnmhd->bnmh", qh, kg)
    if scale:
        logits = logits * (1.0 / math.sqrt(d))
    attn = ad.softmax(logits, axis=2, mask=mask[None, :, :, None])
    out = ad.einsum("bnmh,bnmhd->bnhd", attn, vg).reshape(bsz, nq, c)
    return (out, attn) if return_weights else out


def dual_path_layer(S: Tensor, I: Tensor, index: NeighborhoodIndex, lp: dict, cfg: GridConfig,
                    pixel_pe: Tensor | None = None, superpixel_pe: Tensor | None = None,
                    return_weights: bool = False):
    """One residual update of both paths; both read the previous-layer state.

    S: (B, Nsp, C) superpixel features, I: (B, P, C) pixel features.
    ``pixel_pe`` / ``superpixel_pe`` (broadcastable) are added to the
    query/key inputs when given.
    """
    s_in, i_in = S, I
    if cfg.prenorm:
        s_in = ad.layer_norm(S, lp["ln_s.g"], lp["ln_s.b"])
        i_in = ad.layer_norm(I, lp["ln_i.g"], lp["ln_i.b"])
    s_qk = s_in if superpixel_pe is None else s_in + superpixel_pe
    i_qk = i_in if pixel_pe is None else i_in + pixel_pe

    def proj(x, name):
        return ad.linear(x, lp[f"{name}.w"], lp[f"{name}.b"])

    s_upd = local_attention(
        proj(s_qk, "s_q"), proj(i_qk, "s_k"), proj(i_in, "s_v"),
        index.sp_pix, index.sp_mask, cfg.n_heads, cfg.scale_logits, return_weights,
    )
    i_upd = local_attention(
        proj(i_qk, "i_q"), proj(s_qk, "i_k"), proj(s_in, "i_v"),
        index.pix_sp, index.pix_mask, cfg.n_heads, cfg.scale_logits, return_weights,
    )
    if return_weights:
        (s_upd, s_attn), (i_upd, i_attn) = s_upd, i_upd
        return S + s_upd, I + i_upd, s_attn, i_attn
    return S + s_upd, I + i_upd


def position_embeddings(params: dict, cfg: GridConfig):
    """Upsample the stored embeddings to (1, H*W, C) and (1, Gh*Gw, C)."""
    c = cfg.channels
    pix = ad.bilinear_resize(params["pixel_pe"], cfg.feat_h, cfg.feat_w).reshape(1, cfg.n_pixels, c)
    sp = ad.bilinear_resize(params["superpixel_pe"], cfg.grid_h, cfg.grid_w).reshape(1, cfg.n_superpixels, c)
    return pix, sp


def tokenize(I0: Tensor, params: dict, cfg: GridConfig, index: NeighborhoodIndex):
    """Run ``cfg.n_layers`` dual-path layers from the learned queries.

    I0: (B, H, W, C) hypercolumn. Returns (S, I) shaped (B, Gh, Gw, C) and (B, H, W, C).
    """
    if cfg.n_layers < 1:
        raise ConfigError("tok_layers", "at least one tokenizer layer is required")
    bsz, H, W, c = I0.shape
    if (H, W, c) != (cfg.feat_h, cfg.feat_w, cfg.channels):
        raise ValueError(f"hypercolumn {I0.shape} does not match grid config")
    pix_pe, sp_pe = position_embeddings(params, cfg)
    I = I0.reshape(bsz, cfg.n_pixels, c) + pix_pe
    S = params["queries"].reshape(1, cfg.n_superpixels, c) + sp_pe
    if bsz > 1:
        S = S + Tensor(np.zeros((bsz, 1, 1)), dtype=I.dtype)
    for layer in range(cfg.n_layers):
        lp = layer_params(params, layer)
        if cfg.pe_every_layer:
            S, I = dual_path_layer(S, I, index, lp, cfg, pix_pe, sp_pe)
        else:
            S, I = dual_path_layer(S, I, index, lp, cfg)
    return S.reshape(bsz, cfg.grid_h, cfg.grid_w, c), I.reshape(bsz, H, W, c)
