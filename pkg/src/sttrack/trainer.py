"""Two-stage training: localization end-to-end, then the score head alone.

Stage 1 optimizes everything except the score head with the weighted GIoU + L1
loss on search crops that always contain the target. Stage 2 freezes the whole
network (eval mode, no graph) and fits only the score head with BCE on a
balanced present/absent stream. ``joint`` trains both objectives at once for
the one-stage comparison.

Desk defaults are sized for a CPU. The paper-scale schedule was 500 / 50
epochs of 6e4 triplets at batch 128, lr 1e-5 backbone / 1e-4 rest, decayed
x0.1 after 400 / 40 epochs.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .engine import serialization
from .engine.optim import AdamW, clip_grad_norm
from .engine.tensor import Tensor, backward, no_grad
from .losses import LossWeights, bce_with_logits, localization_loss
from .model import ModelConfig, TrackerNet
from .synthvid import Batch, CropSizes, SceneParams, TripletSource

STAGE1_COLUMNS = ("step", "loss_total", "loss_giou", "loss_l1")
STAGE2_COLUMNS = ("step", "loss_bce", "accuracy")
JOINT_COLUMNS = ("step", "loss_total", "loss_giou", "loss_l1", "loss_bce", "accuracy")

# occlusion and out-of-view episodes supply the negatives for the score head
OCCLUSION_SCENE = SceneParams(occlusion_prob=0.03, occlusion_len=12, out_of_view_prob=0.01)


class DataExhausted(RuntimeError):
    """The triplet stream ran out before the configured number of steps."""


@dataclass
class TrainConfig:
    stage: int = 1
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    backbone_lr_scale: float = 0.1
    decay_step: int = 2400
    decay_factor: float = 0.1
    weight_decay: float = 1e-4
    grad_clip: float = 0.1  # global norm; 0 disables
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    scene: SceneParams | None = None  # None picks the stage default
    seed: int = 0
    joint: bool = False
    data_limit: int | None = None  # cap on triplets drawn, None = unbounded

    @classmethod
    def stage2(cls, **kw) -> "TrainConfig":
        base = dict(stage=2, steps=500, decay_step=400)
        base.update(kw)
        return cls(**base)

    def scene_params(self) -> SceneParams:
        if self.scene is not None:
            return self.scene
        return OCCLUSION_SCENE if (self.stage == 2 or self.joint) else SceneParams()

    def crop_sizes(self) -> CropSizes:
        return CropSizes(template=self.model.template_size, search=self.model.search_size)

    def validate(self) -> None:
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.joint and self.stage != 1:
            raise ValueError("joint training replaces stage 1; set stage = 1")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.lr <= 0 or self.backbone_lr_scale < 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be nonnegative")
        self.model.validate()
        self.scene_params().validate()


@dataclass
class TrainResult:
    model: TrackerNet
    log: list[dict]
    columns: tuple[str, ...]

    def write_log(self, path) -> None:
        write_log(self.log, self.columns, path)


def write_log(rows: list[dict], columns, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[c])) for c in columns[1:]])


def smoothed(values, window: int = 100) -> np.ndarray:
    """Trailing moving average; the first entries average over what is available."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# --- checkpoints -----------------------------------------------------------------
def save_checkpoint(weights, path) -> None:
    """Write a state dict (or a model) as an STKW file."""
    if hasattr(weights, "state_dict"):
        weights = weights.state_dict()
    serialization.save(weights, path)


def load_checkpoint(path) -> dict:
    if not Path(path).is_file():
        raise FileNotFoundError(f"weights file not found: {path}")
    return serialization.load(path)


# --- data ------------------------------------------------------------------------
class _Prefetcher:
    """Builds batch k+1 on a worker thread while step k runs; batch order stays fixed."""

    def __init__(self, source: TripletSource, batch_size: int):
        self._source = source
        self._size = batch_size
        self._pool = ThreadPoolExecutor(max_workers=1)
        self._next = self._pool.submit(source.batch, batch_size)

    def get(self) -> Batch:
        batch = self._next.result()
        self._next = self._pool.submit(self._source.batch, self._size)
        return batch

    def close(self) -> None:
        self._next.cancel()
        self._pool.shutdown(wait=True)


def _source(cfg: TrainConfig, stage: int) -> TripletSource:
    return TripletSource(cfg.seed, stage, cfg.scene_params(), cfg.crop_sizes(), limit=cfg.data_limit)


def _fetch(pf: _Prefetcher, step: int, cfg: TrainConfig) -> Batch:
    try:
        return pf.get()
    except StopIteration:
        raise DataExhausted(
            f"data exhausted after {step} of {cfg.steps} steps (limit {cfg.data_limit} triplets)"
        ) from None


def _loop(cfg: TrainConfig, opt: AdamW, step_fn: Callable[[Batch], dict], stage: int, progress=None) -> list[dict]:
    pf = _Prefetcher(_source(cfg, stage), cfg.batch_size)
    log = []
    try:
        for step in range(1, cfg.steps + 1):
            opt.set_lr_scale(cfg.decay_factor if step > cfg.decay_step else 1.0)
            row = step_fn(_fetch(pf, step - 1, cfg))
            row["step"] = step
            log.append(row)
            if progress is not None:
                progress(row)
    finally:
        pf.close()
    return log


def _optimizer(cfg: TrainConfig, groups: list[tuple[list, float]]) -> AdamW:
    return AdamW([{"params": p, "lr": lr} for p, lr in groups if p], weight_decay=cfg.weight_decay)


def _clip(cfg: TrainConfig, opt: AdamW) -> None:
    if cfg.grad_clip > 0:
        clip_grad_norm([p for _, p in opt.named_params()], cfg.grad_clip)


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean((logits > 0) == (labels > 0.5)))


# --- stages ----------------------------------------------------------------------
def train_stage1(cfg: TrainConfig, model: TrackerNet | None = None, progress=None) -> TrainResult:
    """Localization training; the score head is never touched (joint mode aside)."""
    cfg.validate()
    if cfg.stage != 1:
        raise ValueError("train_stage1 needs stage = 1")
    model = model or TrackerNet(cfg.model, cfg.seed)
    groups = model.param_groups()
    loc = [(groups["backbone"], cfg.lr * cfg.backbone_lr_scale), (groups["rest"], cfg.lr)]
    if cfg.joint:
        loc.append((groups["score_head"], cfg.lr))
    opt = _optimizer(cfg, loc)
    scale = 1.0 / cfg.model.search_size
    st = not model.spatial_only

    def step(b: Batch) -> dict:
        model.train()
        model.zero_grad()
        f_init = model.features(b.template_init)
        f_dyn = model.features(b.template_dyn) if st else None
        pred = model(f_init, f_dyn, b.search, with_score=cfg.joint)
        boxes, gt = pred.boxes * scale, b.gt
        if cfg.joint:
            keep = np.flatnonzero(b.present > 0.5)
            boxes, gt = boxes[keep], gt[keep]
        total, g, l1 = localization_loss(boxes, gt, cfg.loss)
        row = {"loss_giou": float(g.data), "loss_l1": float(l1.data)}
        if cfg.joint:
            bce = bce_with_logits(pred.score_logit, b.present)
            total = total + bce
            row.update(loss_bce=float(bce.data), accuracy=_accuracy(pred.score_logit.data, b.present))
        backward(total)
        _clip(cfg, opt)
        opt.step()
        row["loss_total"] = float(total.data)
        return row

    log = _loop(cfg, opt, step, 2 if cfg.joint else 1, progress)
    model.eval()
    return TrainResult(model, log, JOINT_COLUMNS if cfg.joint else STAGE1_COLUMNS)


def embeddings(model: TrackerNet, b: Batch) -> np.ndarray:
    """Decoder output for a batch with the network frozen in eval mode."""
    model.eval()
    with no_grad():
        f_init = model.features(b.template_init)
        f_dyn = model.features(b.template_dyn) if not model.spatial_only else None
        return model(f_init, f_dyn, b.search).embedding.data


def train_stage2(cfg: TrainConfig, stage1_weights, progress=None) -> TrainResult:
    """Score-head training on top of frozen stage-1 weights (a state dict or a path)."""
    cfg.validate()
    if cfg.stage != 2:
        raise ValueError("train_stage2 needs stage = 2")
    if stage1_weights is None:
        raise ValueError("stage 2 needs stage-1 weights")
    if cfg.model.mode == "spatial_only":
        raise ValueError("the spatial-only model has no score head to train")
    if isinstance(stage1_weights, (str, Path)):
        stage1_weights = load_checkpoint(stage1_weights)
    model = TrackerNet(cfg.model, cfg.seed)
    model.load_state_dict(stage1_weights)
    opt = _optimizer(cfg, [(model.param_groups()["score_head"], cfg.lr)])

    def step(b: Batch) -> dict:
        emb = embeddings(model, b)
        model.score_head.zero_grad()
        logits = model.score_head(Tensor(emb))
        loss = bce_with_logits(logits, b.present)
        backward(loss)
        _clip(cfg, opt)
        opt.step()
        return {"loss_bce": float(loss.data), "accuracy": _accuracy(logits.data, b.present)}

    log = _loop(cfg, opt, step, 2, progress)
    return TrainResult(model, log, STAGE2_COLUMNS)


def classification_accuracy(model: TrackerNet, batches, tau: float = 0.5) -> float:
    """Fraction of crops whose sigmoid score lands on the right side of ``tau``."""
    hits = total = 0
    for b in batches:
        with no_grad():
            logits = model.score_head(Tensor(embeddings(model, b))).data
        probs = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
        hits += int(np.sum((probs > tau) == (b.present > 0.5)))
        total += len(b)
    return hits / total
