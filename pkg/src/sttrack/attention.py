"""Attention-map export for one frame of a sequence.

Two views are written, each split per source map (initial template, dynamic
template, search region):

* ``encoder_<map>``: the last encoder layer's attention row for one query
  token, by default the central cell of the initial template;
* ``decoder_<map>``: the last decoder layer's cross-attention of the target
  query over the encoder memory.

Weights are averaged over heads. CSV files hold the raw weights, so the grids
of one view sum to 1 across maps. PGM files rescale each map to [0, 255] for
viewing and upsample every cell to ``stride`` pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import Box
from .engine.tensor import Tensor, no_grad
from .io import write_pgm
from .model import TrackerNet
from .synthvid import SEARCH_FACTOR, TEMPLATE_FACTOR, crop_search_region


@dataclass
class AttentionDump:
    query_cell: tuple[int, int]
    encoder: dict[str, np.ndarray]  # map name -> (h, w) grid
    decoder: dict[str, np.ndarray]


def default_query_cell(net: TrackerNet) -> tuple[int, int]:
    """Central cell of the initial template's feature grid."""
    n = net.cfg.template_size // net.stride
    return n // 2, n // 2


def attention_maps(net: TrackerNet, frames, gt, frame_idx: int, query_cell: tuple[int, int] | None = None) -> AttentionDump:
    """Both templates come from frame 0's box; the search crop is centered on the previous frame's box."""
    if not 0 <= frame_idx < len(frames):
        raise ValueError(f"frame index {frame_idx} out of range for {len(frames)} frames")
    n = net.cfg.template_size // net.stride
    cell = default_query_cell(net) if query_cell is None else tuple(int(v) for v in query_cell)
    if not (0 <= cell[0] < n and 0 <= cell[1] < n):
        raise ValueError(f"query cell {cell} outside the {n}x{n} template grid")
    net.eval()
    dtype = net.backbone.blocks[0].conv1.weight.dtype
    z, _ = crop_search_region(frames[0], Box.from_array(gt[0]), TEMPLATE_FACTOR, net.cfg.template_size)
    anchor = Box.from_array(gt[max(frame_idx - 1, 0)])
    x, _ = crop_search_region(frames[frame_idx], anchor, SEARCH_FACTOR, net.cfg.search_size)
    with no_grad():
        f_z = net.features(z[None].astype(dtype))
        f_dyn = None if net.spatial_only else Tensor(f_z.data.copy())
        pred = net(f_z, f_dyn, x[None].astype(dtype), record=True)
    seg = pred.sequence.segments
    enc, dec = {}, {}
    records = pred.attention
    if records.get("encoder"):
        start = seg["init_template"][0]
        row = records["encoder"][-1][0].mean(axis=0)[start + cell[0] * n + cell[1]]
        enc = _split(row, seg)
    if records.get("decoder_cross"):
        dec = _split(records["decoder_cross"][-1][0].mean(axis=0)[0], seg)
    return AttentionDump(cell, enc, dec)


def _split(row: np.ndarray, segments) -> dict[str, np.ndarray]:
    return {name: np.asarray(row[a:b], dtype=np.float64).reshape(h, w) for name, (a, b, h, w) in segments.items()}


def write_dump(dump: AttentionDump, out_dir, stride: int = 1) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for view, grids in (("encoder", dump.encoder), ("decoder", dump.decoder)):
        for name, g in grids.items():
            stem = out / f"{view}_{name}"
            np.savetxt(f"{stem}.csv", g, delimiter=",", fmt="%.9e")
            peak = g.max()
            img = np.zeros_like(g) if peak <= 0 else g / peak
            img = np.kron(np.round(img * 255).astype(np.uint8), np.ones((stride, stride), dtype=np.uint8))
            write_pgm(f"{stem}.pgm", img)
            written += [Path(f"{stem}.csv"), Path(f"{stem}.pgm")]
    return written
