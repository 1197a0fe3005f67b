"""End-to-end superpixel transformer: encoder -> hypercolumn -> tokenizer ->
superpixel classifier -> association/unfolding."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .assoc import association_logits, unfold, upsample_associate
from .autodiff import Tensor
from .backbone import BackboneConfig, build_hypercolumn, check_image_dims, encode, init_backbone_params, init_hypercolumn_params
from .classifier import ClassifierConfig, classify, init_classifier_params
from .errors import ConfigError
from .tokenizer import GridConfig, build_neighborhood_index, init_tokenizer_params, tokenize

FEATURE_STRIDE = 8
COMPONENTS = ("backbone", "hypercolumn", "tokenization", "self_attention", "association")


@dataclass(frozen=True)
class ModelConfig:
    image_h: int = 64
    image_w: int = 64
    backbone_channels: tuple = (16, 32, 64, 128, 256)
    backbone_depth: int = 0
    channels: int = 256
    grid_h: int = 4
    grid_w: int = 4
    tok_layers: int = 2
    tok_heads: int = 2
    cls_layers: int = 4
    cls_heads: int = 4
    n_classes: int = 4
    pe_every_layer: bool = True
    prenorm: bool = False
    ffn: bool = False
    scale_logits: bool = True

    def __post_init__(self):
        check_image_dims(self.image_h, self.image_w)
        self.grid()  # validates divisibility / heads
        self.classifier()
        self.backbone()
        if self.tok_layers < 1:
            raise ConfigError("tok_layers", "must be >= 1")

    @property
    def feat_h(self):
        return self.image_h // FEATURE_STRIDE

    @property
    def feat_w(self):
        return self.image_w // FEATURE_STRIDE

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(tuple(self.backbone_channels), self.channels, depth=self.backbone_depth)

    def grid(self) -> GridConfig:
        return GridConfig(
            self.grid_h, self.grid_w, self.feat_h, self.feat_w, self.tok_layers, self.tok_heads,
            self.channels, self.pe_every_layer, self.prenorm, self.scale_logits,
        )

    def classifier(self) -> ClassifierConfig:
        return ClassifierConfig(self.cls_layers, self.cls_heads, self.channels, self.n_classes, self.prenorm, self.ffn)


def init_params(cfg: ModelConfig, seed: int, dtype=None) -> dict:
    """Seeded parameter initialization; each sub-module draws from its own stream."""
    seqs = np.random.SeedSequence(seed).spawn(4)
    rngs = [np.random.default_rng(s) for s in seqs]
    params = {}
    params.update(init_backbone_params(cfg.backbone(), rngs[0], dtype))
    params.update(init_hypercolumn_params(cfg.backbone(), rngs[1], dtype))
    params.update({f"tok.{k}": v for k, v in init_tokenizer_params(cfg.grid(), rngs[2], dtype).items()})
    params.update(init_classifier_params(cfg.classifier(), rngs[3], dtype))
    return params


def is_backbone(name: str) -> bool:
    return name.startswith("backbone.")


@dataclass
class Model:
    cfg: ModelConfig
    params: dict
    _index: object = field(default=None, repr=False)

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0, dtype=None) -> "Model":
        return cls(cfg, init_params(cfg, seed, dtype))

    @property
    def index(self):
        if self._index is None:
            self._index = build_neighborhood_index(self.cfg.feat_h, self.cfg.feat_w, self.cfg.grid_h, self.cfg.grid_w)
        return self._index

    def tok_params(self) -> dict:
        return {k[4:]: v for k, v in self.params.items() if k.startswith("tok.")}

    def n_params(self, prefix=None) -> int:
        return sum(v.data.size for k, v in self.params.items() if prefix is None or k.startswith(prefix))

    # stage functions, kept separate so they can be timed individually
    def stage_backbone(self, images: Tensor):
        return encode(images, self.params)

    def stage_hypercolumn(self, feats):
        return build_hypercolumn(feats, self.params)

    def stage_tokenization(self, hyper: Tensor):
        return tokenize(hyper, self.tok_params(), self.cfg.grid(), self.index)

    def stage_self_attention(self, S: Tensor):
        return classify(S, self.params, self.cfg.classifier())

    def stage_association(self, I: Tensor, S: Tensor, C: Tensor):
        logits = association_logits(I, S, self.index)
        assoc = upsample_associate(logits, self.index, self.cfg.image_h, self.cfg.image_w)
        return assoc, unfold(assoc, C)

    def forward(self, images) -> dict:
        """images: (B, H, W, 3) array or Tensor in [0, 1]."""
        if not isinstance(images, Tensor):
            images = Tensor(images, dtype=self.params["tok.queries"].dtype)
        feats = self.stage_backbone(images)
        hyper = self.stage_hypercolumn(feats)
        S, I = self.stage_tokenization(hyper)
        F, C = self.stage_self_attention(S)
        assoc, pred = self.stage_association(I, S, C)
        return {"features": feats, "hypercolumn": hyper, "S": S, "I": I, "F": F, "C": C,
                "assoc": assoc, "Y": pred.Y, "pred": pred}

    def predict(self, images) -> dict:
        with ad.no_grad():
            return self.forward(images)
