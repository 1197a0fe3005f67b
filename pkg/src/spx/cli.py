"""``spx`` command line: train / eval / infer / visualize / ssn / flops / bench / gen-data.

Exit codes: 0 success, 2 configuration error (message names the key), 1 any
other runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError

log = logging.getLogger("spx")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="seed override")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="spx", description="Superpixel transformer toolkit")
    sub = p.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("train", parents=[common], help="train on the synthetic shapes data")
    sp.add_argument("--data", help="dataset directory (default: generate from data_seed)")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.add_argument("--max-steps", type=int, help="stop after this many steps (schedule unchanged)")

    sp = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the val split")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", help="dataset directory (default: generated val split)")

    for name, text in (("infer", "predict label maps"), ("visualize", "label maps plus superpixel boundaries")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--ckpt", required=True)
        src = sp.add_mutually_exclusive_group(required=True)
        src.add_argument("--image", nargs="+", help="PPM image(s)")
        src.add_argument("--data", help="dataset directory; also reports mIoU against its labels")
        sp.add_argument("--png", action="store_true", help="also write PNG copies")

    sp = sub.add_parser("ssn", parents=[common], help="differentiable SLIC on an image")
    sp.add_argument("--image", required=True)
    sp.add_argument("--iters", type=int, help="defaults to config ssn_iters")

    sub.add_parser("flops", parents=[common], help="analytic FLOPs / params per component")

    sp = sub.add_parser("bench", parents=[common], help="per-component latency")
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    sp.add_argument("--batch", type=int, default=1)

    sp = sub.add_parser("gen-data", parents=[common], help="write a synthetic shapes dataset")
    sp.add_argument("--count", type=int, help="defaults to train_count + val_count")
    sp.add_argument("--start", type=int, default=0, help="first sample index (train_count gives the val split)")
    return p


def _load_config(args, ckpt=None):
    from .config import RunConfig

    path = args.config
    if path is None and ckpt is not None:
        sibling = Path(ckpt).parent / "config.cfg"
        if sibling.exists():
            path = sibling
    cfg = RunConfig.load(path, args.set)
    if args.seed is not None and args.cmd == "train":
        cfg.set("seed", str(args.seed))
    return cfg


def _splits(cfg, data_dir=None):
    from .pipeline import generate_shapes_dataset, load_dataset

    n_tr = cfg["train_count"]
    if data_dir:
        ds = load_dataset(data_dir)
        return ds.subset(0, min(n_tr, len(ds))), ds.subset(min(n_tr, len(ds)), len(ds))
    args = (cfg["image_h"], cfg["image_w"], cfg["n_classes"])
    train = generate_shapes_dataset(cfg["data_seed"], n_tr, *args)
    val = generate_shapes_dataset(cfg["data_seed"], cfg["val_count"], *args, start=n_tr)
    return train, val


def _load_model(cfg, ckpt):
    from .model import Model
    from .pipeline import load_into, read_checkpoint

    model = Model.create(cfg.model_config(), seed=cfg["seed"])
    records = read_checkpoint(ckpt)
    load_into(model, records)
    return model, records


def _emit(args, payload: dict, text: str | None = None):
    if args.json:
        print(json.dumps(payload, indent=2, default=float))
    else:
        print(text if text is not None else "\n".join(f"{k}: {v}" for k, v in payload.items()))


def cmd_gen_data(args):
    from .config import RunConfig
    from .pipeline import generate_shapes_dataset, save_dataset

    cfg = RunConfig.load(args.config, args.set)
    if not args.out:
        raise ConfigError("out", "gen-data needs --out DIR")
    seed = cfg["data_seed"] if args.seed is None else args.seed
    count = args.count if args.count is not None else cfg["train_count"] + cfg["val_count"]
    if count < 0:
        raise ConfigError("count", "must be >= 0")
    if args.start < 0:
        raise ConfigError("start", "must be >= 0")
    ds = generate_shapes_dataset(seed, count, cfg["image_h"], cfg["image_w"], cfg["n_classes"], start=args.start)
    save_dataset(ds, args.out)
    _emit(args, {"out": args.out, "count": count, "seed": seed, "start": args.start})
    return 0


def cmd_train(args):
    from .pipeline import train

    cfg = _load_config(args)
    if not args.out:
        raise ConfigError("out", "train needs --out DIR")
    train_set, val_set = _splits(cfg, args.data)
    res = train(cfg, train_set, val_set if len(val_set) else None, out_dir=args.out,
                resume=args.resume, max_steps=args.max_steps)
    final = res.history[-1]["loss"] if res.history else None
    miou = res.evals[-1]["miou"] if res.evals else None
    _emit(args, {"checkpoint": str(res.checkpoint), "steps": len(res.history), "final_loss": final, "val_miou": miou})
    return 0


def cmd_eval(args):
    from .pipeline import evaluate

    cfg = _load_config(args, args.ckpt)
    model, records = _load_model(cfg, args.ckpt)
    _, val = _splits(cfg, args.data)
    res = evaluate(model, val)
    stored = records.get("meta/eval_miou")
    _emit(args, {"miou": res["miou"], "iou": res["iou"], "count": len(val),
                 "stored_miou": None if stored is None else float(stored)})
    return 0


def cmd_infer(args, boundaries: bool = False):
    from .assoc import default_palette, hard_assign, render_overlay
    from .imageio import read_pnm, write_palette, write_pgm
    from .pipeline import confusion_matrix, iou_from_confusion, load_dataset

    cfg = _load_config(args, args.ckpt)
    if not args.out:
        raise ConfigError("out", f"{args.cmd} needs --out DIR")
    model, records = _load_model(cfg, args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    palette = default_palette(cfg["n_classes"])
    write_palette(out / "palette.txt", palette)

    if args.data:
        ds = load_dataset(args.data)
        items = [(f"{j:05d}", ds.images[j], ds.labels[j]) for j in range(len(ds))]
    else:
        items = [(Path(p).stem, read_pnm(p), None) for p in args.image]
    dtype = model.params["tok.queries"].dtype.type
    conf = np.zeros((cfg["n_classes"],) * 2, dtype=np.int64)
    n_connected = n_superpixels = 0
    for start in range(0, len(items), 16):
        chunk = items[start : start + 16]
        imgs = np.stack([it[1] for it in chunk])
        if imgs.ndim != 4 or imgs.shape[1:] != (cfg["image_h"], cfg["image_w"], 3):
            raise ValueError(f"images must be {cfg['image_h']}x{cfg['image_w']} RGB, got {imgs.shape[1:]}")
        outp = model.predict(imgs.astype(dtype) / dtype(255.0))
        labels = outp["pred"].labels
        hard = hard_assign(outp["assoc"]) if boundaries else None
        for j, (stem, img, gt) in enumerate(chunk):
            write_pgm(out / f"{stem}_labels.pgm", labels[j].astype(np.uint8))
            render_overlay(img, out / f"{stem}_overlay.ppm", label_map=labels[j], palette=palette, png=args.png)
            if boundaries:
                render_overlay(img, out / f"{stem}_superpixels.ppm", hard_map=hard[j], png=args.png)
                c, n = connectivity_stats(hard[j])
                n_connected += c
                n_superpixels += n
            if gt is not None:
                conf += confusion_matrix(labels[j], gt, cfg["n_classes"])
    payload = {"count": len(items), "out": str(out)}
    if args.data:
        iou, miou = iou_from_confusion(conf)
        stored = records.get("meta/eval_miou")
        payload.update(miou=miou, iou=iou.tolist(), stored_miou=None if stored is None else float(stored))
    if boundaries:
        payload["connected_fraction"] = n_connected / max(n_superpixels, 1)
    _emit(args, payload)
    return 0


def connectivity_stats(hard_map: np.ndarray):
    """(number of 4-connected superpixel regions, number of superpixels present)."""
    from scipy import ndimage

    ids = np.unique(hard_map)
    connected = 0
    for i in ids:
        _, n = ndimage.label(hard_map == i)
        connected += n == 1
    return int(connected), len(ids)


def cmd_ssn(args):
    from .assoc import render_overlay
    from .autodiff import Tensor
    from .imageio import read_pnm
    from .ssn import add_position_channels, slic_init, ssn_hard_labels, ssn_iterate
    from .tokenizer import build_neighborhood_index

    cfg = _load_config(args)
    if not args.out:
        raise ConfigError("out", "ssn needs --out DIR")
    iters = cfg["ssn_iters"] if args.iters is None else args.iters
    if iters < 1:
        raise ConfigError("ssn_iters", "must be >= 1")
    img = read_pnm(args.image)
    if img.ndim != 3:
        raise ValueError(f"{args.image}: expected an RGB (P6) image")
    H, W = img.shape[:2]
    gh, gw = cfg["grid_h"], cfg["grid_w"]
    if H % gh:
        raise ConfigError("grid_h", f"image height {H} not divisible by grid_h={gh}")
    if W % gw:
        raise ConfigError("grid_w", f"image width {W} not divisible by grid_w={gw}")
    feats = add_position_channels(img / 255.0, cfg["compactness"])
    index = build_neighborhood_index(H, W, gh, gw)
    I = Tensor(feats[None], dtype=np.float64)
    state = ssn_iterate(I, slic_init(I, index), index, iters)
    hard = ssn_hard_labels(state, index)[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    render_overlay(img, out / f"{stem}_ssn.ppm", hard_map=hard)
    connected, present = connectivity_stats(hard)
    _emit(args, {"iters": iters, "superpixels": present, "connected": connected,
                 "overlay": str(out / f"{stem}_ssn.ppm")})
    return 0


def cmd_flops(args):
    from .cost import flops_count

    cfg = _load_config(args)
    rep = flops_count(cfg)
    _emit(args, rep.to_dict(), rep.table())
    return 0


def cmd_bench(args):
    from threadpoolctl import threadpool_limits

    from .cost import benchmark

    cfg = _load_config(args)
    with threadpool_limits(limits=args.threads):
        rep = benchmark(cfg, repeats=args.repeats, batch=args.batch, seed=args.seed or 0)
    _emit(args, rep.to_dict(), rep.table())
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "visualize": lambda a: cmd_infer(a, boundaries=True),
    "ssn": cmd_ssn,
    "flops": cmd_flops,
    "bench": cmd_bench,
    "gen-data": cmd_gen_data,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.cmd](args)
    except ConfigError as e:
        print(f"spx: config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - surface any failure as exit 1
        log.debug("failure", exc_info=True)
        print(f"spx: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
