"""Run configuration: ``key = value`` text files with ``--set`` overrides."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple:
    return tuple(int(x) for x in s.replace(" ", "").split(",") if x)


# key -> (parser, default)
SCHEMA = {
    # model
    "image_h": (int, 64),
    "image_w": (int, 64),
    "backbone_channels": (_ints, (16, 32, 64, 128, 256)),
    "backbone_depth": (int, 0),
    "channels": (int, 256),
    "grid_h": (int, 4),
    "grid_w": (int, 4),
    "tok_layers": (int, 2),
    "tok_heads": (int, 2),
    "cls_layers": (int, 4),
    "cls_heads": (int, 4),
    "n_classes": (int, 4),
    "pe_every_layer": (_bool, True),
    "prenorm": (_bool, False),
    "ffn": (_bool, False),
    "scale_logits": (_bool, True),
    # training
    "base_lr": (float, 1e-3),
    "warmup_steps": (int, 100),
    "total_steps": (int, 3000),
    "weight_decay": (float, 0.05),
    "backbone_lr_mult": (float, 0.1),
    "topk_frac": (float, 0.2),
    "batch_size": (int, 8),
    "seed": (int, 0),
    "poly_power": (float, 0.9),
    "eval_interval": (int, 500),
    "ckpt_interval": (int, 0),
    # data
    "data_seed": (int, 7),
    "train_count": (int, 512),
    "val_count": (int, 128),
    # ssn
    "ssn_iters": (int, 10),
    "compactness": (float, 0.5),
}

MODEL_KEYS = (
    "image_h", "image_w", "backbone_channels", "channels", "grid_h", "grid_w", "tok_layers", "tok_heads",
    "cls_layers", "cls_heads", "n_classes", "pe_every_layer", "prenorm", "ffn", "scale_logits", "backbone_depth",
)
TRAIN_KEYS = (
    "base_lr", "warmup_steps", "total_steps", "weight_decay", "backbone_lr_mult", "topk_frac",
    "batch_size", "seed", "poly_power", "eval_interval", "ckpt_interval",
)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({k: d for k, (_, d) in SCHEMA.items()})

    def set(self, key: str, raw: str):
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(key, "unknown configuration key")
        parser, _ = SCHEMA[key]
        try:
            self.values[key] = parser(raw) if isinstance(raw, str) else raw
        except ValueError as e:
            raise ConfigError(key, f"cannot parse {raw!r}: {e}") from None

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def parse(cls, text: str, overrides=()) -> "RunConfig":
        cfg = cls.defaults()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}", f"expected key = value, got {line!r}")
            k, v = line.split("=", 1)
            cfg.set(k, v.strip())
        for ov in overrides:
            if "=" not in ov:
                raise ConfigError(ov, "override must be key=value")
            k, v = ov.split("=", 1)
            cfg.set(k, v.strip())
        return cfg

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        text = Path(path).read_text() if path else ""
        return cls.parse(text, overrides)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in SCHEMA)

    def model_config(self):
        from .model import ModelConfig

        return ModelConfig(**{k: self.values[k] for k in MODEL_KEYS})

    def train_config(self):
        from .pipeline import TrainConfig

        return TrainConfig(**{k: self.values[k] for k in TRAIN_KEYS})
