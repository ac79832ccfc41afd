"""Inference state machine with the score-gated dynamic template.

The initial template is cropped once from the first frame and never changes.
Each tracked frame is searched at factor 5 around the last valid box, and the
network returns exactly one box. The dynamic template is re-cropped at the
predicted box only when the frame counter hits a multiple of the update
interval and the confidence clears the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .boxes import Box
from .engine.tensor import Tensor, no_grad
from .model import TrackerNet
from .synthvid import SEARCH_FACTOR, TEMPLATE_FACTOR, CropTransform, crop_search_region


@dataclass(frozen=True)
class TrackerConfig:
    update_interval: int = 200  # T_u, frames
    threshold: float = 0.5  # tau
    search_factor: float = SEARCH_FACTOR
    template_factor: float = TEMPLATE_FACTOR

    def __post_init__(self):
        if self.update_interval < 1:
            raise ValueError(f"update_interval must be >= 1, got {self.update_interval}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")


@dataclass
class TrackerState:
    init_features: np.ndarray
    dyn_features: np.ndarray | None  # None in spatial-only mode
    box: Box  # last valid box, anchors the next search crop
    frame_counter: int
    update_interval: int
    threshold: float
    mode: str


@dataclass(frozen=True)
class TrackResult:
    box: Box  # image coordinates, extents clamped at zero
    confidence: float | None
    updated: bool

    @property
    def score(self) -> float:
        return 1.0 if self.confidence is None else self.confidence


def update_gate(frame_counter: int, confidence: float | None, interval: int, threshold: float) -> bool:
    return confidence is not None and frame_counter % interval == 0 and confidence > threshold


def map_box_to_image(box_in_crop: Box, t: CropTransform) -> Box:
    return t.crop_to_image(box_in_crop)


class Tracker:
    """Drives one network over sequences; the per-sequence state lives in ``TrackerState``.

    ``confidence_hook(frame_counter, confidence)`` may replace the network's
    confidence before it reaches the gate, for scripted tests.
    """

    def __init__(
        self,
        net: TrackerNet,
        cfg: TrackerConfig = TrackerConfig(),
        confidence_hook: Callable[[int, float | None], float | None] | None = None,
    ):
        self.net = net.eval()
        self.cfg = cfg
        self.hook = confidence_hook
        self._dtype = net.backbone.blocks[0].conv1.weight.dtype

    def _template(self, frame, box: Box) -> np.ndarray:
        patch, _ = crop_search_region(frame, box, self.cfg.template_factor, self.net.cfg.template_size)
        with no_grad():
            return self.net.features(patch[None].astype(self._dtype)).data

    def init(self, frame, box: Box) -> TrackerState:
        if not box.is_valid():
            raise ValueError(f"init box must have positive finite extent, got {box}")
        h, w = frame.shape[:2]
        x0, y0, x1, y1 = box.corners
        if x1 <= 0 or y1 <= 0 or x0 >= w or y0 >= h:
            raise ValueError(f"init box {box} lies outside the {w}x{h} frame")
        feats = self._template(frame, box)
        dyn = None if self.net.spatial_only else feats.copy()
        mode = self.net.cfg.mode
        return TrackerState(feats, dyn, box, 1, self.cfg.update_interval, self.cfg.threshold, mode)

    def track(self, state: TrackerState | None, frame) -> TrackResult:
        if state is None:
            raise ValueError("tracker state is not initialized; call init first")
        state.frame_counter += 1
        patch, t = crop_search_region(frame, state.box, self.cfg.search_factor, self.net.cfg.search_size)
        f_dyn = None if state.dyn_features is None else Tensor(state.dyn_features)
        corners, conf = self.net.predict(Tensor(state.init_features), f_dyn, patch.astype(self._dtype))
        if self.hook is not None:
            conf = self.hook(state.frame_counter, conf)
        box = t.corners_to_image(corners)
        valid = box.is_valid()
        if valid:
            state.box = box
        updated = update_gate(state.frame_counter, conf, state.update_interval, state.threshold)
        if updated:
            # a degenerate prediction cannot be cropped; fall back to the last valid box
            state.dyn_features = self._template(frame, state.box)
        return TrackResult(box.clamped() if np.isfinite(box.as_array()).all() else state.box, conf, updated)


def track_sequence(tracker: Tracker, frames, init_box: Box) -> list[TrackResult]:
    """Results for every frame; frame 0 reports the init box with score 1."""
    state = tracker.init(frames[0], init_box)
    out = [TrackResult(init_box, None, False)]
    for i in range(1, len(frames)):
        out.append(tracker.track(state, frames[i]))
    return out


def format_results(results: list[TrackResult]) -> str:
    lines = []
    for r in results:
        b = r.box
        lines.append(f"{b.x:.4f},{b.y:.4f},{b.w:.4f},{b.h:.4f},{r.score:.6f}")
    return "\n".join(lines) + "\n"


def write_results(path, results: list[TrackResult]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(format_results(results))


def read_results(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a results file into (n, 4) xywh boxes and (n,) scores."""
    boxes, scores = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                if len(parts) != 5:
                    raise ValueError(f"expected 5 fields, got {len(parts)}")
                vals = [float(p) for p in parts]
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: malformed results line {line!r}: {e}") from None
            boxes.append(vals[:4])
            scores.append(vals[4])
    return np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(scores, dtype=np.float64)
