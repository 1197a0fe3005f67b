"""Synthetic data, loss, optimizer, schedule, metrics, checkpoints and the training loop."""
from __future__ import annotations

import json
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .imageio import read_pnm, write_pgm, write_ppm

log = logging.getLogger(__name__)

IGNORE_ID = 255
SHAPE_KINDS = ("rectangle", "circle", "triangle")


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 3000
    weight_decay: float = 0.05
    backbone_lr_mult: float = 0.1
    topk_frac: float = 0.2
    batch_size: int = 8
    seed: int = 0
    poly_power: float = 0.9
    eval_interval: int = 500
    ckpt_interval: int = 0

    def __post_init__(self):
        if not (0.0 < self.topk_frac <= 1.0):
            raise ConfigError("topk_frac", f"must lie in (0, 1], got {self.topk_frac}")
        if self.total_steps < 0:
            raise ConfigError("total_steps", "must be >= 0")
        if self.warmup_steps < 0 or (self.total_steps > 0 and self.warmup_steps >= self.total_steps):
            raise ConfigError("warmup_steps", f"must be < total_steps ({self.total_steps})")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.base_lr < 0:
            raise ConfigError("base_lr", "must be >= 0")


# -- synthetic shapes dataset --------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3) uint8
    labels: np.ndarray  # (N, H, W) uint8
    n_classes: int

    def __len__(self):
        return len(self.images)

    @property
    def height(self):
        return self.images.shape[1]

    @property
    def width(self):
        return self.images.shape[2]

    def subset(self, start, stop) -> "Dataset":
        return Dataset(self.images[start:stop], self.labels[start:stop], self.n_classes)

    def batch(self, idx, dtype=np.float32):
        return self.images[idx].astype(dtype) / dtype(255.0), self.labels[idx]


BG_MAX, FG_MIN = 0.45, 0.55  # fixed contrast polarity: dark background, light shapes


def shape_mask(kind: str, y0: int, x0: int, sh: int, sw: int, H: int, W: int) -> np.ndarray:
    ys, xs = np.mgrid[0:H, 0:W]
    yc, xc = ys + 0.5, xs + 0.5
    inside = (ys >= y0) & (ys < y0 + sh) & (xs >= x0) & (xs < x0 + sw)
    if kind == "rectangle":
        return inside
    if kind == "circle":
        r = min(sh, sw) / 2.0
        return inside & ((yc - (y0 + sh / 2.0)) ** 2 + (xc - (x0 + sw / 2.0)) ** 2 <= r * r)
    if kind == "triangle":
        half = (yc - y0) / sh * (sw / 2.0)  # apex up, base on the bottom edge
        return inside & (np.abs(xc - (x0 + sw / 2.0)) <= half)
    raise ValueError(kind)


def generate_sample(seed: int, i: int, H: int, W: int, n_classes: int, max_tries: int = 50):
    """One image/label pair. Procedure (all draws from ``default_rng([seed, i])``):

    background color ~ U[0,0.45]^3 (dark); shape count ~ U{1..4}; per shape:
    class ~ U{1..n_classes-1} (class c draws kind ``SHAPE_KINDS[(c-1) % 3]``),
    color ~ U[0.55,1]^3 (light), then up to ``max_tries`` placements of extents
    ~ U{H//4..H//2} x U{W//4..W//2} (circles use a square box) and top-left
    corner ~ uniform, rejected if the box grown by 2 px touches an earlier
    shape. Finally N(0, 0.05) noise per channel, clip, round to uint8.
    """
    rng = np.random.default_rng([seed, i])
    bg = rng.uniform(0.0, BG_MAX, 3)
    img = np.empty((H, W, 3))
    img[:] = bg
    lbl = np.zeros((H, W), dtype=np.uint8)
    occupied = np.zeros((H, W), dtype=bool)
    n_shapes = int(rng.integers(1, 5))
    lo_h, hi_h, lo_w, hi_w = H // 4, H // 2, W // 4, W // 2
    for _ in range(n_shapes):
        cls = int(rng.integers(1, n_classes))
        kind = SHAPE_KINDS[(cls - 1) % len(SHAPE_KINDS)]
        color = rng.uniform(FG_MIN, 1.0, 3)
        placed = False
        for _ in range(max_tries):
            sh = int(rng.integers(lo_h, hi_h + 1))
            sw = int(rng.integers(lo_w, hi_w + 1))
            if kind == "circle":
                sw = sh = min(sh, sw)
            y0 = int(rng.integers(0, H - sh + 1))
            x0 = int(rng.integers(0, W - sw + 1))
            if occupied[max(0, y0 - 2) : y0 + sh + 2, max(0, x0 - 2) : x0 + sw + 2].any():
                continue
            m = shape_mask(kind, y0, x0, sh, sw, H, W)
            img[m] = color
            lbl[m] = cls
            occupied[y0 : y0 + sh, x0 : x0 + sw] = True
            placed = True
            break
        if not placed:
            log.debug("sample %d: could not place a %s after %d tries", i, kind, max_tries)
    img = img + rng.normal(0.0, 0.05, size=img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return img, lbl


def generate_shapes_dataset(seed: int, count: int, H: int = 64, W: int = 64, n_classes: int = 4,
                            start: int = 0) -> Dataset:
    if n_classes < 2:
        raise ConfigError("n_classes", "shapes dataset needs background plus at least one shape class")
    if H % 32 or W % 32:
        raise ConfigError("image_h" if H % 32 else "image_w", "dataset dims must be multiples of 32")
    images = np.zeros((count, H, W, 3), dtype=np.uint8)
    labels = np.zeros((count, H, W), dtype=np.uint8)
    for j in range(count):
        images[j], labels[j] = generate_sample(seed, start + j, H, W, n_classes)
    return Dataset(images, labels, n_classes)


def save_dataset(ds: Dataset, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "meta.txt").write_text(
        f"n_classes {ds.n_classes}\nH {ds.height if len(ds) else 0}\nW {ds.width if len(ds) else 0}\ncount {len(ds)}\n"
    )
    for j in range(len(ds)):
        write_ppm(out / f"img_{j:05d}.ppm", ds.images[j])
        write_pgm(out / f"lbl_{j:05d}.pgm", ds.labels[j])


def load_dataset(path) -> Dataset:
    root = Path(path)
    meta = {}
    for line in (root / "meta.txt").read_text().splitlines():
        if line.strip():
            k, v = line.split()
            meta[k] = int(v)
    n, H, W = meta["count"], meta["H"], meta["W"]
    images = np.zeros((n, H, W, 3), dtype=np.uint8)
    labels = np.zeros((n, H, W), dtype=np.uint8)
    for j in range(n):
        images[j] = read_pnm(root / f"img_{j:05d}.ppm")
        labels[j] = read_pnm(root / f"lbl_{j:05d}.pgm")
    return Dataset(images, labels, meta["n_classes"])


# -- loss, schedule, optimizer ---------------------------------------------------

def topk_count(frac: float, n: int) -> int:
    return max(1, min(n, int(math.ceil(frac * n - 1e-9))))


def topk_selection(ce: np.ndarray, valid: np.ndarray, frac: float) -> np.ndarray:
    """Per-image weights: 1/k on the k highest-loss valid pixels (stable index order on ties)."""
    bsz = ce.shape[0]
    flat = ce.reshape(bsz, -1)
    vflat = valid.reshape(bsz, -1)
    weights = np.zeros(flat.shape, dtype=ce.dtype)
    for b in range(bsz):
        idx = np.flatnonzero(vflat[b])
        if idx.size == 0:
            continue
        k = topk_count(frac, idx.size)
        order = np.argsort(-flat[b, idx], kind="stable")[:k]
        weights[b, idx[order]] = 1.0 / k
    return weights.reshape(ce.shape)


def topk_cross_entropy(Y: Tensor, labels, frac: float = 0.2) -> Tensor:
    """Mean over images of the mean CE of each image's top ``frac`` hardest pixels."""
    if not (0.0 < frac <= 1.0):
        raise ValueError(f"frac must lie in (0, 1], got {frac}")
    labels = np.asarray(labels)
    valid = labels != IGNORE_ID
    if not valid.any():
        raise ValueError("no labelled pixels in batch")
    ce = ad.cross_entropy(Y, labels, IGNORE_ID)
    w = topk_selection(ce.data, valid, frac)
    n_img = int(valid.reshape(valid.shape[0], -1).any(axis=1).sum())
    return (ce * Tensor(w, dtype=ce.dtype)).sum() * (1.0 / n_img)


def poly_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr`` then polynomial decay to 0 at ``total_steps``."""
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return 0.0
    frac = min(max((step - cfg.warmup_steps) / span, 0.0), 1.0)
    return cfg.base_lr * (1.0 - frac) ** cfg.poly_power


@dataclass
class AdamW:
    """AdamW with decoupled weight decay and per-parameter lr multipliers."""

    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    skipped: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, lr: float, lr_mult=None) -> bool:
        """Apply one update from ``p.grad``. Returns False (and counts a skip) on non-finite grads."""
        grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in params.items()}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            log.warning("non-finite gradient, skipping step (skipped=%d)", self.skipped)
            return False
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p.data)
                self.v[k] = np.zeros_like(p.data)
            m = self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            lr_k = lr * (lr_mult(k) if lr_mult else 1.0)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - lr_k * upd).astype(p.data.dtype)
        return True


def adamw_step(params: dict, grads: dict, state: AdamW, lr: float, wd: float, lr_mult=None) -> bool:
    """Functional wrapper: load ``grads`` into the params and step ``state``."""
    for k, p in params.items():
        p.grad = grads.get(k)
    state.weight_decay = wd
    return state.step(params, lr, lr_mult)


# -- metrics -----------------------------------------------------------------

def confusion_matrix(pred, gt, n_classes: int) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth differ in size")
    keep = gt != IGNORE_ID
    return np.bincount(gt[keep].astype(np.int64) * n_classes + pred[keep], minlength=n_classes * n_classes).reshape(
        n_classes, n_classes
    )


def iou_from_confusion(conf: np.ndarray):
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.full(len(tp), np.nan)
    present = denom > 0
    iou[present] = tp[present] / denom[present]
    return iou, float(np.nanmean(iou)) if present.any() else float("nan")


def mean_iou(pred, gt, n_classes: int):
    """(per-class IoU with NaN for absent classes, mean over present classes)."""
    return iou_from_confusion(confusion_matrix(pred, gt, n_classes))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SPX_THREADS", "1")))
    except ValueError:
        return 1


def predict_labels(model, images: np.ndarray) -> np.ndarray:
    dtype = model.params["tok.queries"].dtype.type
    x = images.astype(dtype) / dtype(255.0)
    return model.predict(x)["pred"].labels


def evaluate(model, ds: Dataset, batch_size: int = 16) -> dict:
    """Dataset-level confusion; batches may run on ``SPX_THREADS`` threads."""
    n = len(ds)
    starts = list(range(0, n, batch_size))

    def one(s):
        labels = predict_labels(model, ds.images[s : s + batch_size])
        return confusion_matrix(labels, ds.labels[s : s + batch_size], ds.n_classes)

    conf = np.zeros((ds.n_classes, ds.n_classes), dtype=np.int64)
    workers = min(_threads(), max(1, len(starts)))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            for c in ex.map(one, starts):
                conf += c
    else:
        for s in starts:
            conf += one(s)
    iou, miou = iou_from_confusion(conf)
    return {"miou": miou, "iou": iou.tolist(), "confusion": conf}


# -- checkpoints -------------------------------------------------------------

MAGIC = b"SPXF"
FORMAT_VERSION = 1


def write_checkpoint(path, records: dict):
    """Little-endian records: name, rank, u64 extents, float32 payload."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", FORMAT_VERSION)
    for name, arr in records.items():
        a = np.array(arr, dtype="<f4", order="C")  # keeps 0-d scalars at rank 0
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", a.ndim)
        buf += struct.pack(f"<{a.ndim}Q", *a.shape)
        buf += a.tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def read_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an SPXF checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    out = {}
    while off < len(data):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
    return out


def checkpoint_records(model, opt: AdamW | None = None, step: int = 0, eval_miou: float | None = None) -> dict:
    rec = {f"param/{k}": p.data for k, p in model.params.items()}
    rec["meta/step"] = np.float32(step)
    if eval_miou is not None:
        rec["meta/eval_miou"] = np.float32(eval_miou)
    if opt is not None:
        rec["meta/adam_t"] = np.float32(opt.t)
        rec["meta/adam_skipped"] = np.float32(opt.skipped)
        for k in model.params:
            if k in opt.m:
                rec[f"adam.m/{k}"] = opt.m[k]
                rec[f"adam.v/{k}"] = opt.v[k]
    return rec


def load_into(model, records: dict, opt: AdamW | None = None) -> int:
    """Restore params (and optimizer state); returns the stored step."""
    for k, p in model.params.items():
        key = f"param/{k}"
        if key not in records:
            raise ValueError(f"checkpoint lacks parameter {k}")
        if records[key].shape != p.shape:
            raise ValueError(f"parameter {k}: checkpoint shape {records[key].shape} != model {p.shape}")
        p.data = records[key].astype(p.data.dtype)
    if opt is not None:
        opt.t = int(records.get("meta/adam_t", 0))
        opt.skipped = int(records.get("meta/adam_skipped", 0))
        opt.m = {k[len("adam.m/"):]: v.copy() for k, v in records.items() if k.startswith("adam.m/")}
        opt.v = {k[len("adam.v/"):]: v.copy() for k, v in records.items() if k.startswith("adam.v/")}
    return int(records.get("meta/step", 0))


# -- training ------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


def batch_indices(seed: int, step: int, batch_size: int, n: int) -> np.ndarray:
    """Epoch-wise seeded permutations, addressable by step (so resume is exact)."""
    out = []
    pos = step * batch_size
    while len(out) < batch_size:
        epoch, off = divmod(pos, n)
        perm = np.random.default_rng([seed, 1, epoch]).permutation(n)
        take = min(batch_size - len(out), n - off)
        out.extend(perm[off : off + take].tolist())
        pos += take
    return np.asarray(out)


@dataclass
class TrainResult:
    model: object
    opt: AdamW
    history: list
    evals: list
    checkpoint: Path | None = None


def train(run_cfg, train_set: Dataset, val_set: Dataset | None = None, out_dir=None,
          resume=None, model=None, max_steps: int | None = None) -> TrainResult:
    """Train from ``run_cfg``. ``max_steps`` stops early without changing the schedule."""
    from .model import Model, is_backbone

    tcfg: TrainConfig = run_cfg.train_config()
    mcfg = run_cfg.model_config()
    if train_set.n_classes != mcfg.n_classes:
        raise ConfigError("n_classes", f"model has {mcfg.n_classes} classes, data has {train_set.n_classes}")
    if (train_set.height, train_set.width) != (mcfg.image_h, mcfg.image_w):
        raise ConfigError("image_h", f"data is {train_set.height}x{train_set.width}, model expects {mcfg.image_h}x{mcfg.image_w}")
    if model is None:
        model = Model.create(mcfg, seed=tcfg.seed)
    opt = AdamW(weight_decay=tcfg.weight_decay)
    start = 0
    if resume is not None:
        start = load_into(model, read_checkpoint(resume), opt)
    out = Path(out_dir) if out_dir else None
    metrics = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(run_cfg.dumps())
        metrics = open(out / "metrics.jsonl", "a" if resume else "w")

    def lr_mult(name):
        return tcfg.backbone_lr_mult if is_backbone(name) else 1.0

    history, evals = [], []
    stop = tcfg.total_steps if max_steps is None else min(tcfg.total_steps, start + max_steps)
    last_miou = None
    try:
        for step in range(start, stop):
            idx = batch_indices(tcfg.seed, step, tcfg.batch_size, len(train_set))
            x, y = train_set.batch(idx)
            for p in model.params.values():
                p.grad = None
            outp = model.forward(x)
            loss = topk_cross_entropy(outp["Y"], y, tcfg.topk_frac)
            lv = float(loss.data)
            if not math.isfinite(lv):
                diag = {"step": step, "loss": lv, "batch": idx.tolist(),
                        "logit_absmax": float(np.nanmax(np.abs(outp["Y"].data)))}
                if out:
                    (out / "diverged.json").write_text(json.dumps(diag))
                raise TrainingDiverged(f"loss became {lv} at step {step}: {diag}")
            loss.backward()
            lr = poly_lr(step, tcfg)
            opt.step(model.params, lr, lr_mult)
            rec = {"step": step, "lr": lr, "loss": lv}
            history.append(rec)
            if metrics:
                metrics.write(json.dumps(rec) + "\n")
            done = step + 1
            if val_set is not None and tcfg.eval_interval and (done % tcfg.eval_interval == 0 or done == tcfg.total_steps):
                last_miou = evaluate(model, val_set)["miou"]
                evals.append({"step": done, "miou": last_miou})
                log.info("step %d loss %.4f val mIoU %.4f", done, lv, last_miou)
                if out:
                    with open(out / "eval.jsonl", "a") as f:
                        f.write(json.dumps({"step": done, "miou": last_miou}) + "\n")
            if out and tcfg.ckpt_interval and done % tcfg.ckpt_interval == 0:
                write_checkpoint(out / f"ckpt_{done:06d}.spxf", checkpoint_records(model, opt, done, last_miou))
    finally:
        if metrics:
            metrics.close()
    ckpt = None
    if out:
        if val_set is not None and last_miou is None:
            last_miou = evaluate(model, val_set)["miou"]
        ckpt = out / "model.spxf"
        write_checkpoint(ckpt, checkpoint_records(model, opt, stop, last_miou))
    return TrainResult(model, opt, history, evals, ckpt)
