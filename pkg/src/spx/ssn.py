"""Differentiable SLIC: soft k-means over a 3x3 superpixel neighborhood."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokenizer import NeighborhoodIndex

log = logging.getLogger(__name__)

Z_FLOOR = 1e-12


@dataclass
class SsnState:
    S: Tensor  # (B, Gh, Gw, C) centers
    Q: Tensor  # (B, P, 9) unnormalized weights, 0 on invalid slots
    Z: Tensor  # (B, Gh*Gw) normalizers


def slic_init(I: Tensor, index: NeighborhoodIndex) -> Tensor:
    """Mean feature of each superpixel's own h x w patch. I: (B, H, W, C)."""
    bsz, H, W, c = I.shape
    h, w = index.h, index.w
    x = I.reshape(bsz, index.grid_h, h, index.grid_w, w, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(bsz, index.grid_h, index.grid_w, h * w, c).mean(axis=3)


def add_position_channels(image: np.ndarray, compactness: float = 0.5) -> np.ndarray:
    """Append (row, col) / max(H, W) scaled by ``compactness`` to an (H, W, C) array."""
    H, W = image.shape[:2]
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    pos = np.stack([ys, xs], axis=-1) / max(H, W) * compactness
    return np.concatenate([np.asarray(image, dtype=np.float64), pos], axis=-1)


def ssn_step(I: Tensor, S: Tensor, index: NeighborhoodIndex) -> SsnState:
    bsz, H, W, c = I.shape
    n_sp = index.grid_h * index.grid_w
    If = I.reshape(bsz, H * W, c)
    Sg = ad.gather(S.reshape(bsz, n_sp, c), index.pix_sp, axis=1)  # (B, P, 9, C)
    diff = If.reshape(bsz, H * W, 1, c) - Sg
    dist = ad.square(diff).sum(axis=-1)
    Q = ad.exp(-dist) * index.pix_mask.astype(dist.dtype)
    Z = ad.scatter_add(Q, index.pix_sp, n_sp, axis=1)  # (B, n_sp)
    if np.any(Z.data < Z_FLOOR):
        log.warning("ssn: %d superpixel normalizers below %.0e, flooring", int((Z.data < Z_FLOOR).sum()), Z_FLOOR)
        Z = Z + Tensor(np.where(Z.data < Z_FLOOR, Z_FLOOR, 0.0), dtype=Z.dtype)
    weighted = ad.einsum("bpk,bpc->bpkc", Q, If)
    num = ad.scatter_add(weighted, index.pix_sp, n_sp, axis=1)  # (B, n_sp, C)
    S_new = num * ad.reciprocal(Z).reshape(bsz, n_sp, 1)
    return SsnState(S_new.reshape(bsz, index.grid_h, index.grid_w, c), Q, Z)


def ssn_iterate(I: Tensor, S: Tensor, index: NeighborhoodIndex, iters: int) -> SsnState:
    """Alternate soft assignment and weighted-mean update ``iters`` times."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    state = None
    for _ in range(iters):
        state = ssn_step(I, S, index)
        S = state.S
    return state


def ssn_hard_labels(state: SsnState, index: NeighborhoodIndex) -> np.ndarray:
    """Superpixel id per pixel, (B, H, W); ties go to the lowest slot."""
    q = np.where(index.pix_mask[None], state.Q.data, -np.inf)
    slot = q.argmax(axis=-1)
    ids = np.take_along_axis(index.pix_sp[None].repeat(q.shape[0], 0), slot[..., None], axis=-1)[..., 0]
    return ids.reshape(q.shape[0], index.H, index.W)
