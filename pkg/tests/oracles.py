"""Independent brute-force references. Plain numpy loops/dense matrices only;
nothing here touches spx's gather/scatter or autodiff code paths."""
import math

import numpy as np


def cell(y, x, h, w):
    return y // h, x // w


def neighbors_bruteforce(H, W, Gh, Gw):
    """Dense (Gh*Gw, H*W) boolean: superpixel i neighbors pixel p."""
    h, w = H // Gh, W // Gw
    m = np.zeros((Gh * Gw, H * W), dtype=bool)
    for gi in range(Gh):
        for gj in range(Gw):
            for y in range(H):
                for x in range(W):
                    ci, cj = cell(y, x, h, w)
                    if abs(ci - gi) <= 1 and abs(cj - gj) <= 1:
                        m[gi * Gw + gj, y * W + x] = True
    return m


def softmax_masked(z, mask, axis):
    z = np.where(mask, z, -1e9)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def dense_dual_path(S, I, lp, n_heads, H, W, Gh, Gw, pix_pe=None, sp_pe=None, scale=True):
    """Full cross-attention over all (pixel, superpixel) pairs, non-neighbors masked.

    S: (B, Nsp, C), I: (B, P, C); lp holds numpy weights named like the layer params.
    """
    nb = neighbors_bruteforce(H, W, Gh, Gw)  # (Nsp, P)
    s_qk = S if sp_pe is None else S + sp_pe
    i_qk = I if pix_pe is None else I + pix_pe

    def lin(x, n):
        return x @ lp[n + ".w"] + lp[n + ".b"]

    def attend(q, k, v, mask):
        bsz, nq, c = q.shape
        d = c // n_heads
        out = np.zeros_like(q)
        for hh in range(n_heads):
            sl = slice(hh * d, (hh + 1) * d)
            logits = np.einsum("bqd,bkd->bqk", q[..., sl], k[..., sl])
            if scale:
                logits = logits / math.sqrt(d)
            a = softmax_masked(logits, mask[None], axis=-1)
            out[..., sl] = np.einsum("bqk,bkd->bqd", a, v[..., sl])
        return out

    S_new = S + attend(lin(s_qk, "s_q"), lin(i_qk, "s_k"), lin(I, "s_v"), nb)
    I_new = I + attend(lin(i_qk, "i_q"), lin(s_qk, "i_k"), lin(S, "i_v"), nb.T)
    return S_new, I_new


def ssn_bruteforce(I, S, Gh, Gw, iters):
    """Soft k-means with exp(-||I_p - S_i||^2) restricted to 3x3 neighborhoods.

    I: (H, W, C), S: (Gh, Gw, C). Scalar loops over every (pixel, superpixel).
    """
    H, W, C = I.shape
    h, w = H // Gh, W // Gw
    S = S.copy()
    Q = None
    for _ in range(iters):
        Q = np.zeros((H, W, Gh, Gw))
        for y in range(H):
            for x in range(W):
                ci, cj = cell(y, x, h, w)
                for gi in range(Gh):
                    for gj in range(Gw):
                        if abs(ci - gi) <= 1 and abs(cj - gj) <= 1:
                            diff = I[y, x] - S[gi, gj]
                            Q[y, x, gi, gj] = math.exp(-float(diff @ diff))
        S_new = np.zeros_like(S)
        for gi in range(Gh):
            for gj in range(Gw):
                z = 0.0
                acc = np.zeros(C)
                for y in range(H):
                    for x in range(W):
                        z += Q[y, x, gi, gj]
                        acc += Q[y, x, gi, gj] * I[y, x]
                S_new[gi, gj] = acc / max(z, 1e-12)
        S = S_new
    return S, Q


def dense_association(Q9, pix_sp, pix_mask, n_sp):
    """(P, Nsp) matrix with Q placed at each valid (pixel, neighbor) entry."""
    P = Q9.shape[0]
    A = np.zeros((P, n_sp))
    for p in range(P):
        for k in range(9):
            if pix_mask[p, k]:
                A[p, pix_sp[p, k]] += Q9[p, k]
    return A


def full_res_neighbor(y, x, k, H, W, Gh, Gw):
    """Superpixel id at slot k for full-res pixel (y, x), or None when off-grid."""
    h, w = H // Gh, W // Gw
    di, dj = k // 3 - 1, k % 3 - 1
    ci, cj = y // h + di, x // w + dj
    if 0 <= ci < Gh and 0 <= cj < Gw:
        return ci * Gw + cj
    return None


def scalar_bilinear(img, out_h, out_w):
    """Loop-based half-pixel bilinear resize used as an oracle."""
    in_h, in_w = img.shape
    out = np.zeros((out_h, out_w))

    def src(d, n_in, n_out):
        s = (d + 0.5) * n_in / n_out - 0.5
        s = min(max(s, 0.0), n_in - 1)
        i0 = int(math.floor(s))
        return i0, min(i0 + 1, n_in - 1), s - i0

    for i in range(out_h):
        y0, y1, fy = src(i, in_h, out_h)
        for j in range(out_w):
            x0, x1, fx = src(j, in_w, out_w)
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def scalar_conv(x, w, b, stride, pad):
    """Direct-loop NHWC conv; x (H, W, Cin), w (k, k, Cin, Cout)."""
    k = w.shape[0]
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    oh = (x.shape[0] + 2 * pad - k) // stride + 1
    ow = (x.shape[1] + 2 * pad - k) // stride + 1
    out = np.zeros((oh, ow, w.shape[3]))
    for i in range(oh):
        for j in range(ow):
            for co in range(w.shape[3]):
                acc = 0.0 if b is None else float(b[co])
                for a in range(k):
                    for c in range(k):
                        for ci in range(x.shape[2]):
                            acc += xp[i * stride + a, j * stride + c, ci] * w[a, c, ci, co]
                out[i, j, co] = acc
    return out
