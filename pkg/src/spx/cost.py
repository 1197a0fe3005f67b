"""Analytic FLOPs accounting and per-component latency benchmark.

FLOPs are 2x multiply-accumulates of the matmul-like work only (convolutions,
linear projections, attention logits and value mixing, association and
unfolding). Norms, activations, softmax and resizing are not counted.
"""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import TAP_BLOCKS
from .model import FEATURE_STRIDE, Model, ModelConfig, init_params

ROWS = ("Backbone", "Hypercolumn", "Superpixel Tokenization", "Superpixel Self-Attention", "Superpixel Association")
_PREFIX = {
    "Backbone": ("backbone.",),
    "Hypercolumn": ("hyper.",),
    "Superpixel Tokenization": ("tok.",),
    "Superpixel Self-Attention": ("cls.",),
    "Superpixel Association": (),
}


@dataclass
class CostRow:
    name: str
    params: int = 0
    flops: int = 0
    ms: float | None = None


@dataclass
class CostReport:
    rows: list
    spatial_ratio: Fraction = Fraction(0)  # superpixel tokens / image pixels
    quadratic_ratio: Fraction = Fraction(0)  # self-attn T^2 term vs dense pixel attention
    overhead_ms: float | None = None
    loops: dict = field(default_factory=dict)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def total_ms(self):
        if any(r.ms is None for r in self.rows):
            return None
        return round(sum(r.ms for r in self.rows), 4)

    def row(self, name) -> CostRow:
        return next(r for r in self.rows if r.name == name)

    def to_dict(self) -> dict:
        return {
            "rows": [{"name": r.name, "params": r.params, "flops": r.flops, "ms": r.ms} for r in self.rows],
            "total": {"params": self.total_params, "flops": self.total_flops, "ms": self.total_ms},
            "overhead_ms": self.overhead_ms,
            "spatial_ratio": str(self.spatial_ratio),
            "quadratic_ratio": str(self.quadratic_ratio),
            "quadratic_ratio_float": float(self.quadratic_ratio),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        def ms(v):
            return "-" if v is None else f"{v:.4f}"

        lines = [("component", "params", "flops", "ms")]
        lines += [(r.name, str(r.params), str(r.flops), ms(r.ms)) for r in self.rows]
        lines.append(("Total", str(self.total_params), str(self.total_flops), ms(self.total_ms)))
        widths = [max(len(l[i]) for l in lines) for i in range(4)]
        out = []
        for l in lines:
            out.append(l[0].ljust(widths[0]) + "  " + "  ".join(c.rjust(w) for c, w in zip(l[1:], widths[1:])))
        out.append(f"overhead_ms {ms(self.overhead_ms)}")
        out.append(f"spatial_ratio {self.spatial_ratio}")
        out.append(f"quadratic_ratio {self.quadratic_ratio} ({float(self.quadratic_ratio):.6g})")
        return "\n".join(out)


def _conv(h, w, c_in, c_out, k=3):
    return 2 * h * w * c_in * c_out * k * k


def _lin(n, c_in, c_out):
    return 2 * n * c_in * c_out


def _param_counts(cfg: ModelConfig) -> dict:
    # shapes only; init at float32 is cheap even at reference resolution
    params = init_params(cfg, seed=0, dtype=np.float32)
    counts = {}
    for row, prefixes in _PREFIX.items():
        counts[row] = sum(v.data.size for k, v in params.items() if prefixes and k.startswith(prefixes))
    return counts


def flops_count(cfg) -> CostReport:
    """Analytic counts from shapes. ``cfg`` is a RunConfig or ModelConfig."""
    m = cfg if isinstance(cfg, ModelConfig) else cfg.model_config()
    H, W, C = m.image_h, m.image_w, m.channels
    fh, fw = H // FEATURE_STRIDE, W // FEATURE_STRIDE
    P = fh * fw
    T = m.grid_h * m.grid_w
    hw = (fh // m.grid_h) * (fw // m.grid_w)

    backbone = 0
    h, w, c_in = H, W, 3
    stage_dims = {}
    for i, c_out in enumerate(m.backbone_channels):
        h, w = h // 2, w // 2
        backbone += _conv(h, w, c_in, c_out) + m.backbone_depth * _conv(h, w, c_out, c_out)
        stage_dims[i] = (h, w, c_out)
        c_in = c_out
    hyper = 0
    for stride, block in TAP_BLOCKS.items():
        sh, sw, sc = stage_dims[block]
        hyper += _lin(sh * sw, sc, C)

    tok_layer = (
        _lin(T, C, C) * 3 + _lin(P, C, C) * 3  # s_q, i_k, i_v on tokens; s_k, s_v, i_q on pixels
        + 2 * 2 * T * (9 * hw) * C  # superpixel path: logits + values
        + 2 * 2 * P * 9 * C  # pixel path
    )
    tok = m.tok_layers * tok_layer

    cls_layer = _lin(T, C, C) * 4 + 2 * 2 * T * T * C
    if m.ffn:
        cls_layer += _lin(T, C, 4 * C) + _lin(T, 4 * C, C)
    cls = m.cls_layers * cls_layer + _lin(T, C, m.n_classes)

    assoc = 2 * P * 9 * C + 2 * H * W * 9 * m.n_classes

    counts = _param_counts(m)
    flops = dict(zip(ROWS, (backbone, hyper, tok, cls, assoc)))
    rows = [CostRow(name, counts[name], flops[name]) for name in ROWS]
    spatial = Fraction(T, H * W)
    return CostReport(rows, spatial_ratio=spatial, quadratic_ratio=spatial ** 2)


def _tick() -> float:
    return max(time.get_clock_info("perf_counter").resolution, 1e-9)


def _time_call(fn, repeats: int, warmup: int = 3):
    """Median seconds per call. Loops are grown until one timed run spans at
    least 10 timer ticks."""
    for _ in range(warmup):
        fn()
    loops = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(loops):
            fn()
        dt = time.perf_counter() - t0
        if dt >= 10 * _tick():
            break
        loops *= 2
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(loops):
            fn()
        samples.append((time.perf_counter() - t0) / loops)
    return statistics.median(samples), loops


def benchmark(cfg, repeats: int = 5, batch: int = 1, seed: int = 0) -> CostReport:
    """Per-component median wall time (inference, no autodiff tape)."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    report = flops_count(cfg)
    m = cfg if isinstance(cfg, ModelConfig) else cfg.model_config()
    model = Model.create(m, seed=seed, dtype=np.float32)
    rng = np.random.default_rng(seed)
    image = Tensor(rng.random((batch, m.image_h, m.image_w, 3)), dtype=np.float32)
    with ad.no_grad():
        feats = model.stage_backbone(image)
        hyper = model.stage_hypercolumn(feats)
        S, I = model.stage_tokenization(hyper)
        _, C = model.stage_self_attention(S)
        calls = {
            "Backbone": lambda: model.stage_backbone(image),
            "Hypercolumn": lambda: model.stage_hypercolumn(feats),
            "Superpixel Tokenization": lambda: model.stage_tokenization(hyper),
            "Superpixel Self-Attention": lambda: model.stage_self_attention(S),
            "Superpixel Association": lambda: model.stage_association(I, S, C),
        }
        for row in report.rows:
            sec, loops = _time_call(calls[row.name], repeats)
            row.ms = round(sec * 1e3, 4)
            report.loops[row.name] = loops
        full, loops = _time_call(lambda: model.forward(image), repeats)
        report.loops["forward"] = loops
    report.overhead_ms = round(full * 1e3 - report.total_ms, 4)
    return report
