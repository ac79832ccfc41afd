"""Sequence directories and 8-bit PPM / PGM images.

A sequence directory holds frames ``00000001.ppm, 00000002.ppm, ...`` (binary
P6, 8-bit RGB), ``groundtruth.txt`` with one ``x,y,w,h`` line per frame (the
first line is the init box), and optionally ``visible.txt`` with one 0/1 flag
per frame. Without ``visible.txt`` every frame counts as visible.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .synthvid import SyntheticSequence, to_unit

FRAME_DIGITS = 8
_FRAME_RE = re.compile(r"^(\d+)\.ppm$")


class FormatError(ValueError):
    pass


# --- images ----------------------------------------------------------------------
def _header(blob: bytes, magic: bytes, path) -> tuple[int, int, int, int]:
    """Parse ``magic width height maxval`` allowing comments; returns the fields and data offset."""
    if blob[:2] != magic:
        raise FormatError(f"{path}: not a {magic.decode()} image (starts with {blob[:2]!r})")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed {magic.decode()} header")
        fields.append(int(blob[start:pos]))
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise FormatError(f"{path}: malformed {magic.decode()} header")
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    return w, h, maxval, pos + 1


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs a uint8 (H, W, 3) array, got {img.dtype} {img.shape}")
    h, w = img.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    w, h, _, off = _header(blob, b"P6", path)
    n = w * h * 3
    if len(blob) - off < n:
        raise FormatError(f"{path}: truncated pixel data ({len(blob) - off} of {n} bytes)")
    return np.frombuffer(blob, dtype=np.uint8, count=n, offset=off).reshape(h, w, 3).copy()


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError(f"PGM needs a uint8 (H, W) array, got {img.dtype} {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    w, h, _, off = _header(blob, b"P5", path)
    if len(blob) - off < w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=off).reshape(h, w).copy()


# --- text files ------------------------------------------------------------------
def _fmt(v: float) -> str:
    """Shortest text that parses back to the same float; integers print without '.0'."""
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


def format_boxes(boxes: np.ndarray) -> str:
    return "".join(",".join(_fmt(v) for v in b) + "\n" for b in np.asarray(boxes, dtype=np.float64).reshape(-1, 4))


def read_groundtruth(path) -> np.ndarray:
    """(n, 4) xywh boxes; a malformed line raises with its line number."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            parts = re.split(r"[,\s]+", text)
            try:
                if len(parts) != 4:
                    raise ValueError(f"expected 4 values, got {len(parts)}")
                vals = [float(p) for p in parts]
                if not np.isfinite(vals).all():
                    raise ValueError("non-finite value")
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: malformed groundtruth line {text!r}: {e}") from None
            rows.append(vals)
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def read_visible(path) -> np.ndarray:
    flags = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            if text not in ("0", "1"):
                raise FormatError(f"{path}:{lineno}: visibility flag must be 0 or 1, got {text!r}")
            flags.append(text == "1")
    return np.array(flags, dtype=bool)


# --- sequences -------------------------------------------------------------------
def frame_name(i: int) -> str:
    """File name of frame ``i`` (0-based); files are numbered from 1."""
    return f"{i + 1:0{FRAME_DIGITS}d}.ppm"


def save_sequence(path, seq: SyntheticSequence) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        write_ppm(d / frame_name(i), frame)
    (d / "groundtruth.txt").write_text(format_boxes(seq.gt), encoding="utf-8")
    (d / "visible.txt").write_text("".join("1\n" if v else "0\n" for v in seq.visible), encoding="utf-8")
    return d


def load_sequence(path) -> SyntheticSequence:
    """Frames decoded to float32 RGB in [0, 1], gt boxes and visibility."""
    d = Path(path)
    if not d.is_dir():
        raise FormatError(f"{d}: not a sequence directory")
    gt_path = d / "groundtruth.txt"
    if not gt_path.is_file():
        raise FormatError(f"{d}: missing groundtruth.txt")
    numbered = sorted((int(m.group(1)), p) for p in d.iterdir() if (m := _FRAME_RE.match(p.name)))
    if not numbered:
        raise FormatError(f"{d}: no frame images (expected {frame_name(0)}, ...)")
    expected = list(range(1, len(numbered) + 1))
    if [n for n, _ in numbered] != expected:
        raise FormatError(f"{d}: frame files are not numbered consecutively from 1")
    gt = read_groundtruth(gt_path)
    if len(gt) != len(numbered):
        raise FormatError(f"{d}: {len(numbered)} frames but {len(gt)} groundtruth lines")
    vis_path = d / "visible.txt"
    visible = read_visible(vis_path) if vis_path.is_file() else np.ones(len(gt), dtype=bool)
    if len(visible) != len(gt):
        raise FormatError(f"{d}: {len(gt)} groundtruth lines but {len(visible)} visibility flags")
    frames = [to_unit(read_ppm(p)) for _, p in numbered]
    return SyntheticSequence(frames, gt, visible, name=d.name)
