"""Flat ``key = value`` run configuration.

One file drives synthesis, training, tracking and ablations. Lines are
``key = value``; ``#`` starts a comment; blank lines are ignored. Every key
has a default, unknown keys are errors, and every malformed value raises an
error naming its key. ``STARK_SEED`` in the environment overrides ``seed``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .losses import LossWeights
from .model import ModelConfig
from .synthvid import SceneParams
from .tracker import TrackerConfig
from .trainer import TrainConfig

SEED_ENV = "STARK_SEED"


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "yes", "on", "1"):
        return True
    if v in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    parts = [p.strip() for p in s.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(int(p) for p in parts)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        v = s.strip()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {v!r}")
        return v

    return parse


def _opt_int(s: str) -> int | None:
    return None if s.strip().lower() in ("", "none") else int(s)


def _path(s: str) -> str:
    return s.strip()


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    doc: str


_M = ModelConfig()
_T1 = TrainConfig()
_T2 = TrainConfig.stage2()
_S = SceneParams()
_TR = TrackerConfig()

KEYS: dict[str, Key] = {
    # model
    "backbone_channels": Key(_ints, _M.backbone_channels, "output channels per backbone stage; stride = 2^stages"),
    "d_model": Key(int, _M.d_model, "transformer width"),
    "heads": Key(int, _M.heads, "attention heads"),
    "ffn_dim": Key(int, _M.ffn_dim, "feed-forward hidden size"),
    "enc_layers": Key(int, _M.enc_layers, "encoder layers (N)"),
    "dec_layers": Key(int, _M.dec_layers, "decoder layers (M)"),
    "dropout": Key(float, _M.dropout, "dropout rate inside the transformer"),
    "head_layers": Key(int, _M.head_layers, "conv-BN-ReLU layers in the corner head"),
    "score_hidden": Key(int, _M.score_hidden, "hidden width of the score MLP"),
    "head": Key(_choice("corner", "mlp"), _M.box_head, "box head: corner distributions or direct MLP"),
    "use_encoder": Key(_bool, _M.use_encoder, "ablation: run the encoder"),
    "use_decoder": Key(_bool, _M.use_decoder, "ablation: run the decoder (else mean-pool search tokens)"),
    "use_pos": Key(_bool, _M.use_pos, "ablation: sinusoidal position embeddings"),
    "pos_mode": Key(_choice("per_layer", "input_once"), _M.pos_mode, "add positions in every attention or once at input"),
    "norm_style": Key(_choice("pre", "post"), _M.norm_style, "layer-norm placement"),
    "template_size": Key(int, _M.template_size, "template crop side, pixels (factor 2)"),
    "search_size": Key(int, _M.search_size, "search crop side, pixels (factor 5)"),
    "mode": Key(_choice("spatio_temporal", "spatial_only"), _M.mode, "with or without the dynamic template"),
    "freeze_bn": Key(_bool, _M.freeze_bn, "keep backbone batch norm in inference mode"),
    "padding_mode": Key(_choice("zeros", "circular"), _M.padding_mode, "backbone conv padding"),
    # training (stage 1; paper: 500 epochs x 6e4 triplets, batch 128, decay after 400)
    "steps": Key(int, _T1.steps, "stage-1 optimizer steps"),
    "batch_size": Key(int, _T1.batch_size, "triplets per step"),
    "lr": Key(float, _T1.lr, "stage-1 learning rate of non-backbone parts (paper 1e-4)"),
    "backbone_lr_scale": Key(float, _T1.backbone_lr_scale, "backbone lr multiplier (paper 1e-5 / 1e-4)"),
    "decay_step": Key(int, _T1.decay_step, "stage-1 step after which lr is multiplied by decay_factor"),
    "decay_factor": Key(float, _T1.decay_factor, "step decay multiplier"),
    "weight_decay": Key(float, _T1.weight_decay, "AdamW decoupled weight decay"),
    "grad_clip": Key(float, _T1.grad_clip, "global gradient-norm clip, 0 disables"),
    "giou_weight": Key(float, _T1.loss.giou, "GIoU loss weight"),
    "l1_weight": Key(float, _T1.loss.l1, "L1 loss weight"),
    "joint": Key(_bool, _T1.joint, "train localization and score jointly in one stage"),
    "data_limit": Key(_opt_int, _T1.data_limit, "cap on triplets drawn per stage, none = unbounded"),
    # stage 2 (paper: 50 epochs, decay after 40)
    "stage2_steps": Key(int, _T2.steps, "stage-2 optimizer steps"),
    "stage2_lr": Key(float, _T2.lr, "stage-2 score-head learning rate"),
    "stage2_decay_step": Key(int, _T2.decay_step, "stage-2 step after which lr decays"),
    "stage1_weights": Key(_path, "", "stage-1 weights file for stage 2 (or --init on the command line)"),
    # synthetic data
    "frames": Key(int, _S.frames, "frames per synthetic sequence"),
    "image_height": Key(int, _S.height, "frame height, pixels"),
    "image_width": Key(int, _S.width, "frame width, pixels"),
    "distractors": Key(int, _S.distractors, "distractor rectangles per sequence"),
    "occlusion_prob": Key(float, 0.0, "stage-1 per-frame occlusion start probability"),
    "out_of_view_prob": Key(float, 0.0, "stage-1 per-frame out-of-view start probability"),
    "stage2_occlusion_prob": Key(float, 0.03, "stage-2 / joint per-frame occlusion start probability"),
    "stage2_out_of_view_prob": Key(float, 0.01, "stage-2 / joint per-frame out-of-view start probability"),
    "occlusion_len": Key(int, _S.occlusion_len, "frames per occlusion episode"),
    "out_of_view_len": Key(int, _S.out_of_view_len, "frames per out-of-view episode"),
    "speed": Key(float, _S.speed, "target velocity kick, pixels per frame"),
    # tracker
    "update_interval": Key(int, _TR.update_interval, "dynamic-template update interval T_u, frames"),
    "threshold": Key(float, _TR.threshold, "update confidence threshold tau"),
    # reproducibility
    "seed": Key(int, 0, f"master seed; the {SEED_ENV} environment variable overrides it"),
}


class RunConfig:
    """Validated settings; values are attributes named after their keys."""

    def __init__(self, values: dict[str, Any] | None = None, env: dict | None = None):
        env = os.environ if env is None else env
        merged = {k: spec.default for k, spec in KEYS.items()}
        for k, v in (values or {}).items():
            if k not in KEYS:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = v
        if env.get(SEED_ENV, "").strip():
            try:
                merged["seed"] = int(env[SEED_ENV])
            except ValueError:
                raise ConfigError(f"seed: {SEED_ENV}={env[SEED_ENV]!r} is not an integer") from None
        self._values = merged
        self._check()

    def __getattr__(self, key: str):
        try:
            return self.__dict__["_values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)

    def replace(self, **kw) -> "RunConfig":
        v = self.as_dict()
        v.update(kw)
        return RunConfig(v, env={})

    @classmethod
    def parse(cls, text: str, source: str = "<config>", env: dict | None = None) -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in KEYS:
                raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
            if key in values:
                raise ConfigError(f"{source}:{lineno}: {key}: set twice")
            try:
                values[key] = KEYS[key].parse(value)
            except ValueError as e:
                raise ConfigError(f"{source}:{lineno}: {key}: {e}") from None
        return cls(values, env)

    @classmethod
    def load(cls, path, env: dict | None = None) -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"), str(path), env)

    def to_text(self) -> str:
        lines = []
        for k, spec in KEYS.items():
            v = self._values[k]
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, tuple):
                s = ",".join(str(x) for x in v)
            elif v is None:
                s = "none"
            else:
                s = str(v)
            lines.append(f"{k} = {s}  # {spec.doc}")
        return "\n".join(lines) + "\n"

    # --- typed views ---------------------------------------------------------
    def model_config(self) -> ModelConfig:
        v = self._values
        return ModelConfig(
            backbone_channels=tuple(v["backbone_channels"]),
            d_model=v["d_model"],
            heads=v["heads"],
            ffn_dim=v["ffn_dim"],
            enc_layers=v["enc_layers"],
            dec_layers=v["dec_layers"],
            dropout=v["dropout"],
            head_layers=v["head_layers"],
            score_hidden=v["score_hidden"],
            box_head=v["head"],
            use_encoder=v["use_encoder"],
            use_decoder=v["use_decoder"],
            use_pos=v["use_pos"],
            pos_mode=v["pos_mode"],
            norm_style=v["norm_style"],
            template_size=v["template_size"],
            search_size=v["search_size"],
            mode=v["mode"],
            freeze_bn=v["freeze_bn"],
            padding_mode=v["padding_mode"],
        )

    def scene_params(self, stage: int) -> SceneParams:
        v = self._values
        second = stage == 2 or v["joint"]
        return SceneParams(
            frames=v["frames"],
            height=v["image_height"],
            width=v["image_width"],
            distractors=v["distractors"],
            occlusion_prob=v["stage2_occlusion_prob"] if second else v["occlusion_prob"],
            occlusion_len=v["occlusion_len"],
            out_of_view_prob=v["stage2_out_of_view_prob"] if second else v["out_of_view_prob"],
            out_of_view_len=v["out_of_view_len"],
            speed=v["speed"],
        )

    def train_config(self, stage: int) -> TrainConfig:
        v = self._values
        common = dict(
            batch_size=v["batch_size"],
            backbone_lr_scale=v["backbone_lr_scale"],
            decay_factor=v["decay_factor"],
            weight_decay=v["weight_decay"],
            grad_clip=v["grad_clip"],
            loss=LossWeights(v["giou_weight"], v["l1_weight"]),
            model=self.model_config(),
            scene=self.scene_params(stage),
            seed=v["seed"],
            data_limit=v["data_limit"],
        )
        if stage == 1:
            return TrainConfig(stage=1, steps=v["steps"], lr=v["lr"], decay_step=v["decay_step"], joint=v["joint"], **common)
        return TrainConfig(stage=2, steps=v["stage2_steps"], lr=v["stage2_lr"], decay_step=v["stage2_decay_step"], **common)

    def tracker_config(self) -> TrackerConfig:
        return TrackerConfig(self._values["update_interval"], self._values["threshold"])

    def _check(self) -> None:
        """Cross-field validation, reported against the offending key."""
        checks = [
            ("model", lambda: self.model_config().validate()),
            ("stage-1 data", lambda: self.scene_params(1).validate()),
            ("stage-2 data", lambda: self.scene_params(2).validate()),
            ("stage-1 training", lambda: self.train_config(1).validate()),
            ("stage-2 training", lambda: self.train_config(2).validate()),
            ("tracker", self.tracker_config),
        ]
        for what, fn in checks:
            try:
                fn()
            except (ValueError, TypeError) as e:
                raise ConfigError(f"{what}: {e}") from None
