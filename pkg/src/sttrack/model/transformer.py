"""Token sequences, sine position embeddings and the encoder/decoder stacks."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ..engine import nn, relu, softmax
from ..engine.tensor import Parameter, Tensor, concat

SOURCES = ("init_template", "dyn_template", "search")


@lru_cache(maxsize=64)
def _sine_grid(h: int, w: int, d: int) -> np.ndarray:
    if d % 4:
        raise ValueError(f"position embedding width {d} must be divisible by 4")
    quarter = d // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    ya = rows.reshape(-1, 1) * freqs
    xa = cols.reshape(-1, 1) * freqs
    emb = np.concatenate([np.sin(ya), np.cos(ya), np.sin(xa), np.cos(xa)], axis=1)
    emb.setflags(write=False)
    return emb


def position_embedding(h: int, w: int, d: int, dtype=np.float32) -> np.ndarray:
    """Parameter-free 2-D embedding, one row per cell in row-major order.

    Columns are ``[sin(row*f), cos(row*f), sin(col*f), cos(col*f)]`` with
    ``d/4`` geometric frequencies ``f`` from 1 down to 1/10000.
    """
    return _sine_grid(h, w, d).astype(dtype)


@dataclass
class TokenSequence:
    tokens: Tensor  # (B, L, d)
    pos: np.ndarray  # (L, d)
    tags: list[str]  # source per token
    origins: np.ndarray  # (L, 3): source index, row, col
    segments: dict[str, tuple[int, int, int, int]] = field(default_factory=dict)  # name -> (start, stop, h, w)

    def __len__(self) -> int:
        return self.tokens.shape[1]

    def segment(self, name: str) -> Tensor:
        start, stop, _, _ = self.segments[name]
        return self.tokens[:, start:stop]


def flatten_map(f: Tensor) -> Tensor:
    """(B, d, h, w) -> (B, h*w, d) with tokens in row-major cell order."""
    b, d, h, w = f.shape
    return f.reshape(b, d, h * w).transpose(0, 2, 1)


def build_sequence(f_init: Tensor, f_dyn: Tensor | None, f_search: Tensor) -> TokenSequence:
    """Concatenate the (init, dyn, search) feature maps into one token sequence.

    ``f_dyn`` is ``None`` for the spatial-only model. Every map gets its own
    position grid.
    """
    maps = [("init_template", f_init), ("dyn_template", f_dyn), ("search", f_search)]
    maps = [(name, f) for name, f in maps if f is not None]
    d = f_init.shape[1]
    for name, f in maps:
        if f.ndim != 4 or f.shape[1] != d:
            raise ValueError(f"{name} map has shape {f.shape}, expected (B, {d}, h, w)")
    tokens, pos, tags, origins, segments = [], [], [], [], {}
    start = 0
    for name, f in maps:
        _, _, h, w = f.shape
        tokens.append(flatten_map(f))
        pos.append(position_embedding(h, w, d, f.dtype))
        tags.extend([name] * (h * w))
        rr, cc = np.divmod(np.arange(h * w), w)
        origins.append(np.stack([np.full(h * w, SOURCES.index(name)), rr, cc], axis=1))
        segments[name] = (start, start + h * w, h, w)
        start += h * w
    return TokenSequence(
        tokens=concat(tokens, axis=1),
        pos=np.concatenate(pos, axis=0),
        tags=tags,
        origins=np.concatenate(origins, axis=0),
        segments=segments,
    )


def scaled_dot_product(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(dk)) v over the last two axes."""
    scores = (q @ k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / np.sqrt(q.shape[-1]))
    weights = softmax(scores, axis=-1)
    return weights @ v, weights


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, Tensor]:
    """Multi-head scaled dot-product attention on already-projected (B, L, d) inputs."""
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"width {d} is not divisible by {heads} heads")
    out, weights = scaled_dot_product(_split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads))
    return _merge_heads(out), weights


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = nn.Linear(d, d, rng)
        self.k_proj = nn.Linear(d, d, rng)
        self.v_proj = nn.Linear(d, d, rng)
        self.out_proj = nn.Linear(d, d, rng)

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
        out, weights = attention(self.q_proj(q), self.k_proj(k), self.v_proj(v), self.heads)
        return self.out_proj(out), weights


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator, dropout: nn.Dropout):
        self.fc1 = nn.Linear(d, hidden, rng)
        self.fc2 = nn.Linear(hidden, d, rng)
        self.dropout = dropout

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.dropout(relu(self.fc1(x))))


def _with_pos(x: Tensor, pos) -> Tensor:
    return x if pos is None else x + pos


class EncoderLayer(nn.Module):
    def __init__(self, d, heads, ffn, rng, dropout: nn.Dropout, pre_norm: bool):
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ffn = FeedForward(d, ffn, rng, dropout)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.dropout = dropout
        self.pre_norm = pre_norm

    def forward(self, x: Tensor, pos, records: list | None = None) -> Tensor:
        if self.pre_norm:
            h = self.norm1(x)
            qk = _with_pos(h, pos)
            out, w = self.attn(qk, qk, h)
            x = x + self.dropout(out)
            x = x + self.dropout(self.ffn(self.norm2(x)))
        else:
            qk = _with_pos(x, pos)
            out, w = self.attn(qk, qk, x)
            x = self.norm1(x + self.dropout(out))
            x = self.norm2(x + self.dropout(self.ffn(x)))
        if records is not None:
            records.append(w.data)
        return x


class DecoderLayer(nn.Module):
    def __init__(self, d, heads, ffn, rng, dropout: nn.Dropout, pre_norm: bool):
        self.self_attn = MultiHeadAttention(d, heads, rng)
        self.cross_attn = MultiHeadAttention(d, heads, rng)
        self.ffn = FeedForward(d, ffn, rng, dropout)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)
        self.dropout = dropout
        self.pre_norm = pre_norm

    def forward(self, tgt: Tensor, memory: Tensor, pos, records: dict | None = None) -> Tensor:
        keys = _with_pos(memory, pos)
        if self.pre_norm:
            h = self.norm1(tgt)
            out, w_self = self.self_attn(h, h, h)
            tgt = tgt + self.dropout(out)
            out, w_cross = self.cross_attn(self.norm2(tgt), keys, memory)
            tgt = tgt + self.dropout(out)
            tgt = tgt + self.dropout(self.ffn(self.norm3(tgt)))
        else:
            out, w_self = self.self_attn(tgt, tgt, tgt)
            tgt = self.norm1(tgt + self.dropout(out))
            out, w_cross = self.cross_attn(tgt, keys, memory)
            tgt = self.norm2(tgt + self.dropout(out))
            tgt = self.norm3(tgt + self.dropout(self.ffn(tgt)))
        if records is not None:
            records["self"].append(w_self.data)
            records["cross"].append(w_cross.data)
        return tgt


class Encoder(nn.Module):
    def __init__(self, layers: int, d, heads, ffn, rng, dropout: nn.Dropout, pre_norm: bool):
        self.layers = nn.ModuleList(EncoderLayer(d, heads, ffn, rng, dropout, pre_norm) for _ in range(layers))
        self.norm = nn.LayerNorm(d) if pre_norm and layers else None

    def forward(self, x: Tensor, pos, records: list | None = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, pos, records)
        if self.norm is not None:
            x = self.norm(x)
        return x


class Decoder(nn.Module):
    """Stack driven by a single learned target query."""

    def __init__(self, layers: int, d, heads, ffn, rng, dropout: nn.Dropout, pre_norm: bool):
        bound = 1.0 / np.sqrt(d)
        self.query = Parameter(rng.uniform(-bound, bound, size=(1, 1, d)).astype(np.float32))
        self.layers = nn.ModuleList(DecoderLayer(d, heads, ffn, rng, dropout, pre_norm) for _ in range(layers))
        self.norm = nn.LayerNorm(d) if pre_norm and layers else None

    def forward(self, memory: Tensor, pos, records: dict | None = None) -> Tensor:
        """Returns the (B, 1, d) target embedding."""
        ones = Tensor(np.ones((memory.shape[0], 1, 1), dtype=memory.dtype))
        tgt = self.query * ones
        for layer in self.layers:
            tgt = layer(tgt, memory, pos, records)
        if self.norm is not None:
            tgt = self.norm(tgt)
        return tgt
