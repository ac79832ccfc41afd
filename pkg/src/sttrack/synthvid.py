"""Synthetic tracking videos, crop geometry, triplet sampling and augmentation.

A sequence is a static cluttered background with a textured target rectangle
that drifts in position, scale and aspect, a few look-alike distractors, and
optional occlusion and out-of-view episodes. Only the scene state is simulated
eagerly; frames are rendered on demand from that state, so sampling three
frames out of a long sequence costs three renders.

Frames are uint8 (H, W, 3) or float in [0, 1]. Crops are float32 (3, S, S) in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .boxes import Box
from .engine.rng import DATA, stream

SEARCH_FACTOR = 5.0
TEMPLATE_FACTOR = 2.0


class InsufficientFrames(ValueError):
    """The sequence cannot supply the frames a sampler asked for."""


# --- scene simulation --------------------------------------------------------------
@dataclass(frozen=True)
class SceneParams:
    frames: int = 100
    height: int = 128
    width: int = 128
    distractors: int = 3
    occlusion_prob: float = 0.0  # per-frame chance of starting an occlusion episode
    occlusion_len: int = 12
    out_of_view_prob: float = 0.0  # per-frame chance of starting an excursion off-frame
    out_of_view_len: int = 16
    min_size: float = 14.0  # sqrt(w*h) range of the target, pixels
    max_size: float = 30.0
    speed: float = 1.2  # std of the per-frame velocity kick, pixels

    def validate(self) -> None:
        if self.frames < 2:
            raise ValueError(f"a sequence needs at least 2 frames, got {self.frames}")
        if self.height < 16 or self.width < 16:
            raise ValueError(f"frame {self.height}x{self.width} is too small")
        if self.distractors < 0:
            raise ValueError("distractor count must be nonnegative")
        for name in ("occlusion_prob", "out_of_view_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.occlusion_len < 1 or self.out_of_view_len < 2:
            raise ValueError("episode lengths must be positive (out-of-view needs 2 frames)")
        if not 0 < self.min_size <= self.max_size or self.max_size * 2 > min(self.height, self.width):
            raise ValueError(f"target size range [{self.min_size}, {self.max_size}] does not fit the frame")
        if self.speed < 0:
            raise ValueError("speed must be nonnegative")


def _texture(rng: np.random.Generator) -> np.ndarray:
    """Small uint8 pattern (checker, stripes or blobs) in two or three saturated colors."""
    colors = rng.integers(0, 256, size=(3, 3))
    kind = rng.integers(3)
    n = int(rng.integers(2, 5))
    r, c = np.mgrid[0:8, 0:8]
    if kind == 0:
        idx = ((r * n // 8) + (c * n // 8)) % 2
    elif kind == 1:
        idx = (c * n // 8) % 2 if rng.random() < 0.5 else (r * n // 8) % 2
    else:
        idx = rng.integers(0, 3, size=(8, 8))
    return colors[idx].astype(np.uint8)


def _paint(img: np.ndarray, box: np.ndarray, tex: np.ndarray) -> None:
    """Nearest-neighbour stretch of ``tex`` over the (x, y, w, h) box, clipped to the frame."""
    h_img, w_img = img.shape[:2]
    x, y, w, h = box
    xa, xb = int(round(x)), int(round(x + w))
    ya, yb = int(round(y)), int(round(y + h))
    cx0, cx1 = max(xa, 0), min(xb, w_img)
    cy0, cy1 = max(ya, 0), min(yb, h_img)
    if cx1 <= cx0 or cy1 <= cy0 or w <= 0 or h <= 0:
        return
    th, tw = tex.shape[:2]
    u = np.clip(((np.arange(cx0, cx1) + 0.5 - x) / w * tw).astype(int), 0, tw - 1)
    v = np.clip(((np.arange(cy0, cy1) + 0.5 - y) / h * th).astype(int), 0, th - 1)
    img[cy0:cy1, cx0:cx1] = tex[v[:, None], u[None, :]]


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(40, 215, size=(5, 5, 3))
    ys = np.linspace(0, 4, h)
    xs = np.linspace(0, 4, w)
    y0 = np.minimum(ys.astype(int), 3)
    x0 = np.minimum(xs.astype(int), 3)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    # interpolate the five coarse rows along x once; row lookups then reuse them
    rows = coarse[:, x0] * (1 - fx) + coarse[:, x0 + 1] * fx
    top, bottom = rows[y0], rows[y0 + 1]
    img = (top * (1 - fy) + bottom * fy).astype(np.uint8)
    base = 2 * coarse.mean(axis=(0, 1)).astype(np.int32)
    for _ in range(int(rng.integers(4, 9))):
        bw, bh = rng.uniform(6, w / 3), rng.uniform(6, h / 3)
        # low-contrast clutter: pulled two thirds of the way toward the average color
        tex = ((_texture(rng).astype(np.int32) + base) // 3).astype(np.uint8)
        _paint(img, np.array([rng.uniform(-bw / 2, w - bw / 2), rng.uniform(-bh / 2, h - bh / 2), bw, bh]), tex)
    return img


@dataclass
class _Scene:
    background: np.ndarray
    target_tex: np.ndarray
    target: np.ndarray  # (n, 4) xywh
    distractor_tex: list
    distractors: np.ndarray  # (n, k, 4)
    occluder_tex: list
    occluder: np.ndarray  # (n, 4), nan when no occluder is drawn
    occluder_id: np.ndarray  # (n,) index into occluder_tex or -1

    def render(self, i: int) -> np.ndarray:
        img = self.background.copy()
        for k, tex in enumerate(self.distractor_tex):
            _paint(img, self.distractors[i, k], tex)
        _paint(img, self.target[i], self.target_tex)
        if self.occluder_id[i] >= 0:
            _paint(img, self.occluder[i], self.occluder_tex[self.occluder_id[i]])
        return img


class LazyFrames:
    """Read-only frame list that renders each frame when indexed."""

    def __init__(self, scene: _Scene, n: int):
        self._scene = scene
        self._n = n

    def __len__(self) -> int:
        return self._n

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(self._n))]
        if i < 0:
            i += self._n
        if not 0 <= i < self._n:
            raise IndexError(f"frame {i} out of range for {self._n} frames")
        return self._scene.render(i)

    def __iter__(self):
        return (self[i] for i in range(self._n))


@dataclass
class SyntheticSequence:
    frames: object  # sequence of uint8 (H, W, 3) arrays
    gt: np.ndarray  # (n, 4) xywh, float64
    visible: np.ndarray  # (n,) bool
    name: str = ""

    def __post_init__(self):
        self.gt = np.asarray(self.gt, dtype=np.float64).reshape(-1, 4)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if not len(self.frames) == len(self.gt) == len(self.visible):
            raise ValueError(
                f"frames ({len(self.frames)}), gt ({len(self.gt)}) and visible ({len(self.visible)}) differ in length"
            )

    def __len__(self) -> int:
        return len(self.gt)

    def box(self, i: int) -> Box:
        return Box.from_array(self.gt[i])


def generate_sequence(seed: int, params: SceneParams = SceneParams()) -> SyntheticSequence:
    """Simulate one sequence; identical (seed, params) give identical frames and labels."""
    params.validate()
    rng = stream(seed, DATA)
    n, H, W = params.frames, params.height, params.width
    background = _background(rng, H, W)

    size = float(rng.uniform(params.min_size, params.max_size))
    log_aspect = float(rng.uniform(-0.4, 0.4))
    cx, cy = (float(v) for v in rng.uniform([size, size], [W - size, H - size]))
    vx, vy = (float(v) for v in rng.normal(0, params.speed, size=2))

    k = params.distractors
    d_size = rng.uniform(params.min_size, params.max_size, size=k)
    d_aspect = rng.uniform(-0.4, 0.4, size=k)
    d_start = rng.uniform([0, 0], [W, H], size=(k, 2))
    distractor_tex = [_texture(rng) for _ in range(k)]
    target_tex = _texture(rng)

    # all per-frame noise is drawn up front; the loop only does scalar arithmetic
    kick = rng.normal(0, params.speed, size=(n, 2)).tolist()
    size_step = np.exp(rng.normal(0, 0.02, size=n)).tolist()
    aspect_step = rng.normal(0, 0.02, size=n).tolist()
    d_kick = rng.normal(0, params.speed, size=(n, k, 2))
    u_occ = rng.random(n).tolist()
    u_oov = rng.random(n).tolist()

    centers = np.zeros((n, 2))
    sizes = np.zeros(n)
    aspects = np.zeros(n)
    occluded = np.zeros(n, dtype=bool)
    occluder_id = np.full(n, -1, dtype=np.int64)
    occluder_tex = []

    occ_left = 0
    excursion = None  # (start, direction, peak)
    length = params.out_of_view_len
    for t in range(n):
        if t > 0:
            vx = 0.85 * vx + kick[t][0]
            vy = 0.85 * vy + kick[t][1]
            cx, cy = cx + vx, cy + vy
            size = min(max(size * size_step[t], params.min_size), params.max_size)
            log_aspect = min(max(log_aspect + aspect_step[t], -0.6), 0.6)
            # bounce the underlying walk off the frame borders
            r = size / 2
            if not r <= cx <= W - r:
                vx, cx = -vx, min(max(cx, r), W - r)
            if not r <= cy <= H - r:
                vy, cy = -vy, min(max(cy, r), H - r)

            if occ_left == 0 and excursion is None:
                if u_occ[t] < params.occlusion_prob:
                    occ_left = params.occlusion_len
                    occluder_tex.append(_texture(rng))
                elif u_oov[t] < params.out_of_view_prob:
                    edges = [cx, W - cx, cy, H - cy]
                    side = int(np.argmin(edges))
                    direction = ((-1, 0), (1, 0), (0, -1), (0, 1))[side]
                    excursion = (t, direction, edges[side] + size)

        sx, sy = cx, cy
        if excursion is not None:
            start, direction, peak = excursion
            phase = (t - start + 1) / (length + 1)
            # triangular profile, saturating at ``peak`` (fully off-frame) mid-episode
            d = min(peak, peak * (1 - abs(2 * phase - 1)) * 2)
            sx, sy = cx + direction[0] * d, cy + direction[1] * d
            if t - start + 1 >= length:
                excursion = None
        centers[t] = sx, sy
        sizes[t] = size
        aspects[t] = log_aspect
        if occ_left > 0:
            occ_left -= 1
            occluded[t] = True
            occluder_id[t] = len(occluder_tex) - 1

    w = sizes * np.exp(aspects / 2)
    h = sizes * np.exp(-aspects / 2)
    target = np.stack([centers[:, 0] - w / 2, centers[:, 1] - h / 2, w, h], axis=1)
    occluder = np.where(occluded[:, None], target + np.stack([-0.2 * w, -0.2 * h, 0.4 * w, 0.4 * h], axis=1), np.nan)
    iw = np.clip(np.minimum(target[:, 0] + w, W) - np.maximum(target[:, 0], 0), 0, None)
    ih = np.clip(np.minimum(target[:, 1] + h, H) - np.maximum(target[:, 1], 0), 0, None)
    visible = ~occluded & (iw * ih >= 0.5 * w * h)

    # distractors: AR(1) velocity, wrapping around the frame
    d_vel = np.zeros((n, k, 2))
    for t in range(1, n):
        d_vel[t] = 0.9 * d_vel[t - 1] + d_kick[t]
    d_center = np.mod(d_start + np.cumsum(d_vel, axis=0), [W, H])
    dw = np.broadcast_to(d_size * np.exp(d_aspect / 2), (n, k))
    dh = np.broadcast_to(d_size * np.exp(-d_aspect / 2), (n, k))
    distractors = np.stack([d_center[..., 0] - dw / 2, d_center[..., 1] - dh / 2, dw, dh], axis=-1)

    scene = _Scene(background, target_tex, target, distractor_tex, distractors, occluder_tex, occluder, occluder_id)
    return SyntheticSequence(LazyFrames(scene, n), target, visible, name=f"synth-{seed:08d}")


# --- crop geometry ----------------------------------------------------------------
@dataclass(frozen=True)
class CropTransform:
    """Affine map between image pixels and crop pixels: crop = (image - offset) * zoom."""

    offset_x: float
    offset_y: float
    zoom: float
    out_size: int

    @classmethod
    def centered(cls, cx: float, cy: float, side: float, out_size: int) -> "CropTransform":
        return cls(cx - side / 2, cy - side / 2, out_size / side, out_size)

    @property
    def side(self) -> float:
        return self.out_size / self.zoom

    def image_to_crop(self, box: Box) -> Box:
        return Box((box.x - self.offset_x) * self.zoom, (box.y - self.offset_y) * self.zoom, box.w * self.zoom, box.h * self.zoom)

    def crop_to_image(self, box: Box) -> Box:
        return Box(box.x / self.zoom + self.offset_x, box.y / self.zoom + self.offset_y, box.w / self.zoom, box.h / self.zoom)

    def corners_to_image(self, corners) -> Box:
        x0, y0, x1, y1 = (float(v) for v in corners)
        return self.crop_to_image(Box.from_corners(x0, y0, x1, y1))


def to_unit(frame: np.ndarray) -> np.ndarray:
    """uint8 frames scale to float32 [0, 1]; float frames are taken as already in [0, 1]."""
    if frame.dtype == np.uint8:
        return frame.astype(np.float32) * np.float32(1 / 255)
    return np.asarray(frame, dtype=np.float32)


_UNIT_LEVELS = (np.arange(256, dtype=np.float32) * np.float32(1 / 255)).astype(np.float64)


def _frame_mean(frame: np.ndarray) -> np.ndarray:
    """Per-channel mean of ``to_unit(frame)`` as float32.

    For uint8 frames this goes through a 256-bin histogram. Every partial sum
    of float32 levels is exact in float64 at these frame sizes, so the result
    equals the direct mean bit for bit.
    """
    if frame.dtype != np.uint8:
        return to_unit(frame).reshape(-1, 3).mean(axis=0, dtype=np.float64).astype(np.float32)
    flat = frame.reshape(-1, 3)
    sums = [np.bincount(flat[:, c], minlength=256) @ _UNIT_LEVELS for c in range(3)]
    return (np.array(sums) / flat.shape[0]).astype(np.float32)


def crop_region(frame: np.ndarray, transform: CropTransform) -> np.ndarray:
    """Bilinear resample of ``frame`` through ``transform``.

    Output pixels whose centers fall outside the frame take the frame's mean
    color exactly.
    """
    h, w = frame.shape[:2]
    mean = _frame_mean(frame)
    s = transform.out_size
    grid = (np.arange(s) + 0.5) / transform.zoom
    xs = transform.offset_x + grid
    ys = transform.offset_y + grid
    px, py = xs - 0.5, ys - 0.5
    x0, y0 = np.floor(px).astype(int), np.floor(py).astype(int)
    fx = (px - x0).astype(np.float32)[None, :, None]
    fy = (py - y0).astype(np.float32)[:, None, None]
    xa, xb = np.clip(x0, 0, w - 1), np.clip(x0 + 1, 0, w - 1)
    ya, yb = np.clip(y0, 0, h - 1), np.clip(y0 + 1, 0, h - 1)
    # gather the needed rows first so only they get converted
    rows_a, rows_b = to_unit(frame[ya]), to_unit(frame[yb])
    top = rows_a[:, xa] * (1 - fx) + rows_a[:, xb] * fx
    bottom = rows_b[:, xa] * (1 - fx) + rows_b[:, xb] * fx
    out = top * (1 - fy) + bottom * fy
    outside = ((ys < 0) | (ys >= h))[:, None] | ((xs < 0) | (xs >= w))[None, :]
    out[outside] = mean
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def crop_search_region(
    frame: np.ndarray,
    box: Box,
    area_factor: float,
    out_size: int,
    jitter: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> tuple[np.ndarray, CropTransform]:
    """Square crop of side area_factor * sqrt(w*h) around the box center, resized to ``out_size``.

    ``jitter`` = (dx, dy, ds): center shift as fractions of the crop side and a
    relative scale change.
    """
    if not (box.w > 0 and box.h > 0) or not np.isfinite(box.as_array()).all():
        raise ValueError(f"cannot crop around a box without positive area: {box}")
    side = area_factor * float(np.sqrt(box.w * box.h)) * (1.0 + jitter[2])
    cx, cy = box.center
    t = CropTransform.centered(cx + jitter[0] * side, cy + jitter[1] * side, side, out_size)
    return crop_region(frame, t), t


# --- triplets ---------------------------------------------------------------------
@dataclass
class TrainingTriplet:
    template_init: np.ndarray  # (3, Sz, Sz)
    template_dyn: np.ndarray
    search: np.ndarray  # (3, Sx, Sx)
    gt_box: Box  # search-crop pixels
    target_present: bool
    frames: tuple[int, int, int] = (0, 0, 0)  # init, dyn, search indices

    @property
    def gt_corners(self) -> np.ndarray:
        """gt corners normalized by the search crop side."""
        return np.array(self.gt_box.corners) / self.search.shape[-1]


@dataclass(frozen=True)
class CropSizes:
    template: int = 32
    search: int = 80
    translation_jitter: float = 0.1
    scale_jitter: float = 0.05


def _search_crop(seq: SyntheticSequence, idx: int, rng, sizes: CropSizes):
    j = sizes.translation_jitter
    s = sizes.scale_jitter
    jitter = (rng.uniform(-j, j), rng.uniform(-j, j), rng.uniform(-s, s))
    patch, t = crop_search_region(seq.frames[idx], seq.box(idx), SEARCH_FACTOR, sizes.search, jitter)
    return patch, t.image_to_crop(seq.box(idx))


def sample_triplet(seq: SyntheticSequence, rng: np.random.Generator, stage: int, sizes: CropSizes = CropSizes()) -> TrainingTriplet:
    """Stage 1: three visible frames init < dyn < search, target always present.

    Stage 2: the label is a fair coin; the search frame is drawn from the
    visible or the not-visible frames after the dynamic template accordingly.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    vis = np.flatnonzero(seq.visible)
    if stage == 1:
        if len(vis) < 3:
            raise InsufficientFrames(f"stage 1 needs 3 visible frames, sequence has {len(vis)}")
        i, j, k = np.sort(rng.choice(vis, size=3, replace=False))
        present = True
    else:
        present = bool(rng.random() < 0.5)
        pool = vis if present else np.flatnonzero(~seq.visible)
        # the search frame needs a visible frame before it for the dynamic template
        later = pool[pool > vis[0]] if len(vis) else pool[:0]
        if not len(later):
            kind = "visible" if present else "not-visible"
            raise InsufficientFrames(f"no {kind} search frame follows a visible template frame")
        k = int(later[int(rng.integers(len(later)))])
        before = vis[vis < k]
        j = int(before[int(rng.integers(len(before)))])
        upto = vis[vis <= j]
        i = int(upto[int(rng.integers(len(upto)))])
    z_init, _ = crop_search_region(seq.frames[i], seq.box(i), TEMPLATE_FACTOR, sizes.template)
    z_dyn, _ = crop_search_region(seq.frames[j], seq.box(j), TEMPLATE_FACTOR, sizes.template)
    search, gt = _search_crop(seq, int(k), rng, sizes)
    return TrainingTriplet(z_init, z_dyn, search, gt, present, (int(i), int(j), int(k)))


# --- augmentation ----------------------------------------------------------------
def flip_horizontal(img: np.ndarray, box: Box) -> tuple[np.ndarray, Box]:
    """Mirror a (3, H, W) image and its box: x0' = W - x1, x1' = W - x0."""
    w = img.shape[-1]
    x0, y0, x1, y1 = box.corners
    return np.ascontiguousarray(img[..., ::-1]), Box.from_corners(w - x1, y0, w - x0, y1)


def scale_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return img
    return np.clip(img * np.float32(factor), 0.0, 1.0).astype(img.dtype)


def augment(t: TrainingTriplet, rng: np.random.Generator, flip_prob: float = 0.5, brightness=(0.8, 1.2)) -> TrainingTriplet:
    """Random horizontal flip of the search crop, independent brightness jitter on all three crops."""
    search, box = t.search, t.gt_box
    if rng.random() < flip_prob:
        search, box = flip_horizontal(search, box)
    lo, hi = brightness
    return replace(
        t,
        template_init=scale_brightness(t.template_init, rng.uniform(lo, hi)),
        template_dyn=scale_brightness(t.template_dyn, rng.uniform(lo, hi)),
        search=scale_brightness(search, rng.uniform(lo, hi)),
        gt_box=box,
    )


@dataclass
class Batch:
    template_init: np.ndarray  # (B, 3, Sz, Sz)
    template_dyn: np.ndarray
    search: np.ndarray  # (B, 3, Sx, Sx)
    gt: np.ndarray  # (B, 4) normalized corners
    present: np.ndarray  # (B,) float labels

    def __len__(self) -> int:
        return len(self.gt)


def collate(triplets: list[TrainingTriplet]) -> Batch:
    return Batch(
        np.stack([t.template_init for t in triplets]),
        np.stack([t.template_dyn for t in triplets]),
        np.stack([t.search for t in triplets]),
        np.stack([t.gt_corners for t in triplets]),
        np.array([float(t.target_present) for t in triplets], dtype=np.float32),
    )


@dataclass
class TripletSource:
    """Deterministic stream of augmented triplets; each draws a fresh sequence.

    ``limit`` caps the number of triplets handed out (None means unbounded).
    """

    seed: int
    stage: int
    params: SceneParams = field(default_factory=SceneParams)
    sizes: CropSizes = field(default_factory=CropSizes)
    augment: bool = True
    limit: int | None = None
    key: int = DATA

    def __post_init__(self):
        self._rng = stream(self.seed, self.key, self.stage)
        self.served = 0

    def next_triplet(self) -> TrainingTriplet:
        if self.limit is not None and self.served >= self.limit:
            raise StopIteration
        while True:
            seq = generate_sequence(int(self._rng.integers(2**31)), self.params)
            try:
                t = sample_triplet(seq, self._rng, self.stage, self.sizes)
            except InsufficientFrames:
                continue
            break
        if self.augment:
            t = augment(t, self._rng)
        self.served += 1
        return t

    def batch(self, size: int) -> Batch:
        return collate([self.next_triplet() for _ in range(size)])
