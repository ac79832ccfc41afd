"""Box and confidence heads."""

from __future__ import annotations

import numpy as np

from ..engine import nn, relu, sigmoid, softmax
from ..engine.tensor import Tensor, _result, concat, minimum


def modulate_search_features(search_tokens: Tensor, embedding: Tensor, h: int, w: int) -> tuple[Tensor, Tensor]:
    """Re-weight search tokens by their similarity to the target embedding.

    ``search_tokens`` is (B, h*w, d), ``embedding`` is (B, 1, d). Each token is
    scaled by sigmoid(<token, embedding> / sqrt(d)). Returns the (B, d, h, w)
    feature map and the (B, h*w) scores.
    """
    b, n, d = search_tokens.shape
    if n == 0:
        raise ValueError("no search tokens to modulate")
    if n != h * w:
        raise ValueError(f"{n} search tokens do not fill a {h}x{w} grid")
    sim = (search_tokens @ embedding.transpose(0, 2, 1)) * (1.0 / np.sqrt(d))
    score = sigmoid(sim)
    fmap = (search_tokens * score).transpose(0, 2, 1).reshape(b, d, h, w)
    return fmap, score.reshape(b, n)


def soft_argmax(prob: Tensor) -> Tensor:
    """Expected (x, y) grid coordinate of each (..., H, W) distribution.

    Sums run sequentially in row-major order in float64, so they reproduce a
    plain double loop bit for bit. Output shape is (..., 2).
    """
    *lead, h, w = prob.shape
    p = prob.data.astype(np.float64).reshape(-1, h * w)
    xs = np.tile(np.arange(w, dtype=np.float64), h)
    ys = np.repeat(np.arange(h, dtype=np.float64), w)
    x_hat = np.cumsum(p * xs, axis=1)[:, -1]
    y_hat = np.cumsum(p * ys, axis=1)[:, -1]
    out = np.stack([x_hat, y_hat], axis=1).reshape(tuple(lead) + (2,)).astype(prob.dtype)

    def back(g):
        g2 = g.reshape(-1, 2)
        gp = g2[:, :1] * xs.astype(prob.dtype) + g2[:, 1:] * ys.astype(prob.dtype)
        return (gp.reshape(prob.shape).astype(prob.dtype),)

    return _result(out, (prob,), back, "soft_argmax")


class CornerHead(nn.Module):
    """Conv-BN-ReLU tower emitting top-left and bottom-right corner distributions."""

    def __init__(self, d: int, layers: int, rng: np.random.Generator, frozen_bn: bool = False):
        if layers < 1:
            raise ValueError("corner head needs at least one layer")
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        for _ in range(layers - 1):
            self.convs.append(nn.Conv2d(d, d, 3, rng, padding=1, bias=False))
            self.norms.append(nn.BatchNorm2d(d, frozen=frozen_bn))
        self.out = nn.Conv2d(d, 2, 1, rng)

    def logits(self, f: Tensor) -> Tensor:
        for conv, norm in zip(self.convs, self.norms):
            f = relu(norm(conv(f)))
        return self.out(f)

    def forward(self, f: Tensor) -> Tensor:
        """(B, d, H, W) -> (B, 2, H, W) maps, each normalized over all H*W cells."""
        return normalize_maps(self.logits(f))


def normalize_maps(logits: Tensor) -> Tensor:
    b, c, h, w = logits.shape
    return softmax(logits.reshape(b, c, h * w), axis=-1).reshape(b, c, h, w)


def corners_from_maps(maps: Tensor, stride: int) -> Tensor:
    """(B, 2, H, W) corner maps -> (B, 4) crop-pixel corners (x0, y0, x1, y1).

    Grid coordinate g maps to pixel g * stride + stride / 2 (cell centers).
    """
    xy = soft_argmax(maps)
    return xy.reshape(maps.shape[0], 4) * float(stride) + stride / 2.0


class MLPBoxHead(nn.Module):
    """Three-layer perceptron regressing a normalized box from the target embedding.

    Sigmoid outputs are read as (cx, cy, w, h); each extent is scaled by
    2*min(c, 1-c) so the box never leaves the unit square.
    """

    def __init__(self, d: int, rng: np.random.Generator):
        self.fc1 = nn.Linear(d, d, rng)
        self.fc2 = nn.Linear(d, d, rng)
        self.fc3 = nn.Linear(d, 4, rng)

    def forward(self, embedding: Tensor) -> Tensor:
        """(B, 1, d) -> (B, 4) normalized corners."""
        b = embedding.shape[0]
        x = embedding.reshape(b, -1)
        out = sigmoid(self.fc3(relu(self.fc2(relu(self.fc1(x))))))
        center = out[:, :2]
        extent = out[:, 2:] * minimum(center, 1.0 - center) * 2.0
        return concat([center - extent * 0.5, center + extent * 0.5], axis=1)


class ScoreHead(nn.Module):
    """Three-layer perceptron producing the target-present logit."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = nn.Linear(d, hidden, rng)
        self.fc2 = nn.Linear(hidden, hidden, rng)
        self.fc3 = nn.Linear(hidden, 1, rng)

    def forward(self, embedding: Tensor) -> Tensor:
        """(B, 1, d) -> (B,) logits; confidence is sigmoid(logit)."""
        b = embedding.shape[0]
        x = embedding.reshape(b, -1)
        return self.fc3(relu(self.fc2(relu(self.fc1(x))))).reshape(b)
