"""Pixel-superpixel association, unfolding of superpixel logits, hard assignment
and boundary/label overlays."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import MASK_VALUE, Tensor
from .tokenizer import OFFSETS, NeighborhoodIndex, build_neighborhood_index

BOUNDARY_COLOR = (255, 0, 0)


@dataclass
class AssociationMap:
    """Per-pixel weights over the 9 neighbor slots; invalid slots are exactly 0."""

    Q: Tensor  # (B, H, W, 9)
    mask: np.ndarray  # (H, W, 9)
    index: NeighborhoodIndex


@dataclass
class DensePrediction:
    Y: Tensor  # (B, H, W, n_classes)

    @property
    def labels(self) -> np.ndarray:
        return self.Y.data.argmax(axis=-1)


def association_logits(I: Tensor, S: Tensor, index: NeighborhoodIndex) -> Tensor:
    """Slot k of pixel p holds ``I_p . S_{i(p,k)}``; invalid slots hold the mask sentinel.

    I: (B, H, W, C), S: (B, Gh, Gw, C). Returns (B, H, W, 9).
    """
    bsz, H, W, c = I.shape
    Sf = S.reshape(bsz, index.grid_h * index.grid_w, c)
    Sg = ad.gather(Sf, index.pix_sp, axis=1)  # (B, P, 9, C)
    dots = ad.einsum("bpc,bpkc->bpk", I.reshape(bsz, H * W, c), Sg)
    m = index.pix_mask.astype(dots.dtype)
    out = dots * m + Tensor((1.0 - m) * MASK_VALUE, dtype=dots.dtype)
    return out.reshape(bsz, H, W, 9)


def _slot_ranges(n_cells: int, cell: int, delta: int):
    """Valid source range (lo, hi) of one axis for a slot offset, or None."""
    lo_cell = max(0, -delta)
    hi_cell = n_cells - 1 - max(0, delta)
    if lo_cell > hi_cell:
        return None
    return lo_cell * cell, (hi_cell + 1) * cell - 1


def slot_interp_matrices(index: NeighborhoodIndex, scale: int, dtype):
    """Per-slot bilinear matrices (9, out, in) with sources clamped to the slot's valid band."""
    H, W = index.H, index.W
    rows = np.zeros((9, H * scale, H), dtype=dtype)
    cols = np.zeros((9, W * scale, W), dtype=dtype)
    for k, (di, dj) in enumerate(OFFSETS):
        r = _slot_ranges(index.grid_h, index.h, di)
        c = _slot_ranges(index.grid_w, index.w, dj)
        if r is None or c is None:
            continue
        rows[k] = ad._interp_matrix(H, H * scale, dtype, *r)
        cols[k] = ad._interp_matrix(W, W * scale, dtype, *c)
    return rows, cols


def upsample_associate(logits: Tensor, index: NeighborhoodIndex, out_h: int, out_w: int) -> AssociationMap:
    """Bilinearly upsample each slot channel, then masked softmax at full resolution.

    ``index`` is the stride-8 neighbor index that produced ``logits``. The
    target must be an integer multiple of the logit map (8x in the model,
    1x allowed for testing).
    """
    bsz, H, W, _ = logits.shape
    if out_h % H or out_w % W or out_h // H != out_w // W:
        raise ValueError(f"target {out_h}x{out_w} is not a common integer multiple of {H}x{W}")
    scale = out_h // H
    full = build_neighborhood_index(out_h, out_w, index.grid_h, index.grid_w)
    mask = full.pix_mask.reshape(out_h, out_w, 9)
    if scale == 1:
        up = logits
    else:
        rows, cols = slot_interp_matrices(index, scale, logits.dtype)
        t = ad.einsum("kiy,byxk->bixk", Tensor(rows, dtype=logits.dtype), logits)
        up = ad.einsum("kjx,bixk->bijk", Tensor(cols, dtype=logits.dtype), t)
    Q = ad.softmax(up, axis=-1, mask=mask[None])
    return AssociationMap(Q, mask, full)


def unfold(assoc: AssociationMap, C: Tensor) -> DensePrediction:
    """``Y_p = sum_k Q_p[k] * C_{i(p,k)}``. C: (B, Gh*Gw, n_classes)."""
    Q = assoc.Q
    bsz, H, W, _ = Q.shape
    n_cls = C.shape[-1]
    Cg = ad.gather(C, assoc.index.pix_sp, axis=1)  # (B, P, 9, n_cls)
    Y = ad.einsum("bpk,bpkc->bpc", Q.reshape(bsz, H * W, 9), Cg)
    return DensePrediction(Y.reshape(bsz, H, W, n_cls))


def hard_assign(assoc: AssociationMap) -> np.ndarray:
    """Argmax superpixel id per pixel over valid slots; ties go to the lowest slot."""
    q = np.where(assoc.mask[None], assoc.Q.data, -np.inf)
    slot = q.argmax(axis=-1)  # (B, H, W)
    bsz, H, W = slot.shape
    ids = np.take_along_axis(assoc.index.pix_sp[None].repeat(bsz, 0), slot.reshape(bsz, -1, 1), axis=-1)
    return ids.reshape(bsz, H, W)


# -- rendering ----------------------------------------------------------------

def boundary_mask(label_map: np.ndarray) -> np.ndarray:
    """True where any 4-neighbor carries a different label."""
    lm = np.asarray(label_map)
    out = np.zeros(lm.shape, dtype=bool)
    dv = lm[1:, :] != lm[:-1, :]
    dh = lm[:, 1:] != lm[:, :-1]
    out[1:, :] |= dv
    out[:-1, :] |= dv
    out[:, 1:] |= dh
    out[:, :-1] |= dh
    return out


def default_palette(n_classes: int) -> np.ndarray:
    """Deterministic, well-separated colors (bit-interleaved, as in VOC)."""
    pal = np.zeros((n_classes, 3), dtype=np.uint8)
    for cid in range(n_classes):
        c, r, g, b = cid, 0, 0, 0
        for bit in range(8):
            r |= ((c >> 0) & 1) << (7 - bit)
            g |= ((c >> 1) & 1) << (7 - bit)
            b |= ((c >> 2) & 1) << (7 - bit)
            c >>= 3
        pal[cid] = (r, g, b)
    return pal


def to_uint8(image) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        return img.copy()
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def render_boundaries(image, hard_map: np.ndarray, color=BOUNDARY_COLOR) -> np.ndarray:
    img = to_uint8(image)
    if img.shape[:2] != hard_map.shape:
        raise ValueError(f"image {img.shape[:2]} and map {hard_map.shape} differ in size")
    img[boundary_mask(hard_map)] = color
    return img


def render_labels(label_map: np.ndarray, palette: np.ndarray, ignore_index: int = 255) -> np.ndarray:
    lm = np.asarray(label_map)
    out = np.zeros(lm.shape + (3,), dtype=np.uint8)
    valid = lm != ignore_index
    out[valid] = palette[lm[valid]]
    return out


def render_overlay(image, path, hard_map=None, label_map=None, palette=None, png: bool = False) -> np.ndarray:
    """Draw superpixel boundaries (``hard_map``) or a palette-colored label map
    and write it as binary PPM (plus PNG when ``png``)."""
    from .imageio import write_png, write_ppm

    if hard_map is not None:
        out = render_boundaries(image, hard_map)
    elif label_map is not None:
        if palette is None:
            palette = default_palette(int(np.max(np.where(label_map == 255, 0, label_map))) + 1)
        if np.asarray(image).shape[:2] != np.asarray(label_map).shape:
            raise ValueError("image and label map differ in size")
        out = render_labels(label_map, palette)
    else:
        raise ValueError("need hard_map or label_map")
    write_ppm(path, out)
    if png:
        write_png(str(path).rsplit(".", 1)[0] + ".png", out)
    return out
