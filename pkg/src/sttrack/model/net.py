"""The full tracking network: backbone, transformer and heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..engine import nn
from ..engine.rng import DROPOUT, INIT, stream
from ..engine.tensor import Tensor, mean, no_grad
from .backbone import Backbone, Bottleneck
from .heads import CornerHead, MLPBoxHead, ScoreHead, corners_from_maps, modulate_search_features
from .transformer import Decoder, Encoder, TokenSequence, build_sequence


@dataclass
class ModelConfig:
    backbone_channels: tuple[int, ...] = (16, 32, 64)
    d_model: int = 64
    heads: int = 4
    ffn_dim: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    dropout: float = 0.0
    head_layers: int = 5
    score_hidden: int = 64
    box_head: str = "corner"  # corner | mlp
    use_encoder: bool = True
    use_decoder: bool = True
    use_pos: bool = True
    pos_mode: str = "per_layer"  # per_layer | input_once
    norm_style: str = "pre"  # pre | post
    template_size: int = 32
    search_size: int = 80
    mode: str = "spatio_temporal"  # spatio_temporal | spatial_only
    freeze_bn: bool = False
    padding_mode: str = "zeros"

    @property
    def stride(self) -> int:
        return 2 ** len(self.backbone_channels)

    def validate(self) -> None:
        if self.box_head not in ("corner", "mlp"):
            raise ValueError(f"box_head must be corner or mlp, got {self.box_head!r}")
        if self.pos_mode not in ("per_layer", "input_once"):
            raise ValueError(f"pos_mode must be per_layer or input_once, got {self.pos_mode!r}")
        if self.norm_style not in ("pre", "post"):
            raise ValueError(f"norm_style must be pre or post, got {self.norm_style!r}")
        if self.mode not in ("spatio_temporal", "spatial_only"):
            raise ValueError(f"mode must be spatio_temporal or spatial_only, got {self.mode!r}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_model % 4:
            raise ValueError(f"d_model {self.d_model} must be divisible by 4")
        for name in ("template_size", "search_size"):
            if getattr(self, name) % self.stride:
                raise ValueError(f"{name} {getattr(self, name)} not divisible by stride {self.stride}")


@dataclass
class Prediction:
    boxes: Tensor  # (B, 4) crop-pixel corners
    embedding: Tensor  # (B, 1, d)
    maps: Tensor | None = None  # (B, 2, H, W) corner distributions
    score_logit: Tensor | None = None  # (B,)
    sequence: TokenSequence | None = None
    attention: dict = field(default_factory=dict)


class TrackerNet(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = stream(seed, INIT)
        d = cfg.d_model
        self.dropout = nn.Dropout(cfg.dropout, stream(seed, DROPOUT))
        self.backbone = Backbone(cfg.backbone_channels, rng, cfg.freeze_bn, cfg.padding_mode)
        self.bottleneck = Bottleneck(self.backbone.out_channels, d, rng)
        pre = cfg.norm_style == "pre"
        self.encoder = Encoder(cfg.enc_layers, d, cfg.heads, cfg.ffn_dim, rng, self.dropout, pre)
        self.decoder = Decoder(cfg.dec_layers, d, cfg.heads, cfg.ffn_dim, rng, self.dropout, pre)
        if cfg.box_head == "corner":
            self.box_head = CornerHead(d, cfg.head_layers, rng)
        else:
            self.box_head = MLPBoxHead(d, rng)
        self.score_head = ScoreHead(d, cfg.score_hidden, rng)

    @property
    def stride(self) -> int:
        return self.cfg.stride

    @property
    def spatial_only(self) -> bool:
        return self.cfg.mode == "spatial_only"

    def param_groups(self) -> dict[str, list]:
        """Partition of named parameters into backbone / score_head / rest."""
        groups = {"backbone": [], "score_head": [], "rest": []}
        for name, p in self.named_parameters():
            key = name.split(".", 1)[0]
            groups[key if key in ("backbone", "score_head") else "rest"].append((name, p))
        return groups

    def features(self, img) -> Tensor:
        """Image batch (B, 3, H, W) in [0, 1] -> (B, d, H/s, W/s) projected features."""
        if not isinstance(img, Tensor):
            img = Tensor(np.asarray(img, dtype=self.backbone.blocks[0].conv1.weight.dtype))
        return self.bottleneck(self.backbone(img))

    def forward(
        self,
        f_init: Tensor,
        f_dyn: Tensor | None,
        search,
        with_score: bool = False,
        record: bool = False,
    ) -> Prediction:
        cfg = self.cfg
        if self.spatial_only:
            f_dyn = None
        elif f_dyn is None:
            raise ValueError("spatio-temporal model needs a dynamic template")
        f_x = self.features(search)
        seq = build_sequence(f_init, f_dyn, f_x)
        pos = seq.pos if cfg.use_pos else None
        tokens = seq.tokens
        if pos is not None and cfg.pos_mode == "input_once":
            tokens = tokens + pos
            pos = None

        enc_records = [] if record else None
        dec_records = {"self": [], "cross": []} if record else None
        memory = self.encoder(tokens, pos, enc_records) if cfg.use_encoder else tokens
        start, stop, hx, wx = seq.segments["search"]
        search_tokens = memory[:, start:stop]
        if cfg.use_decoder:
            embedding = self.decoder(memory, pos, dec_records)
        else:
            embedding = mean(search_tokens, axis=1, keepdims=True)

        maps = None
        if cfg.box_head == "corner":
            fmap, _ = modulate_search_features(search_tokens, embedding, hx, wx)
            maps = self.box_head(fmap)
            boxes = corners_from_maps(maps, self.stride)
        else:
            boxes = self.box_head(embedding) * float(cfg.search_size)

        score_logit = None
        if with_score and not self.spatial_only:
            score_logit = self.score_head(embedding)
        attention = {}
        if record:
            attention = {"encoder": enc_records, "decoder_self": dec_records["self"], "decoder_cross": dec_records["cross"]}
        return Prediction(boxes, embedding, maps, score_logit, seq, attention)

    def predict(self, f_init, f_dyn, search) -> tuple[np.ndarray, float | None]:
        """Inference for one search crop: crop-pixel corners and confidence."""
        with no_grad():
            pred = self.forward(f_init, f_dyn, search[None] if np.ndim(search) == 3 else search, with_score=True)
        conf = None
        if pred.score_logit is not None:
            conf = float(1.0 / (1.0 + np.exp(-float(pred.score_logit.data[0]))))
        return pred.boxes.data[0].astype(np.float64), conf
