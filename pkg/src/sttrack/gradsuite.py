"""Finite-difference verification of every differentiable op and of the full box loss.

Everything runs in float64 with central differences at ``h = 1e-3``. A case
passes when, for every checked tensor, ||analytic - numeric|| is within 1e-4
of max(||analytic||, ||numeric||). The entrywise maximum is reported too; on
entries whose own gradient is tiny it is dominated by the O(h^2) truncation
error of the difference quotient rather than by the analytic side.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .engine import functional as F
from .engine import tensor as T
from .engine.gradcheck import normwise_error, relative_error
from .engine.optim import AdamW
from .engine.tensor import Parameter, Tensor, backward
from .losses import bce_with_logits, localization_loss
from .model.heads import corners_from_maps, normalize_maps, soft_argmax
from .model.net import ModelConfig, TrackerNet
from .model.transformer import attention

TOLERANCE = 1e-4
STEP = 1e-3


@dataclass
class GradCase:
    name: str
    errors: dict[str, float]  # normwise, judged
    entrywise: dict[str, float]  # reported only
    seconds: float
    kink_crossings: int = 0

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def ok(self) -> bool:
        return self.worst <= TOLERANCE and self.kink_crossings == 0


def _param(rng, *shape, scale=1.0, offset=0.0) -> Parameter:
    return Parameter(rng.normal(size=shape) * scale + offset, dtype=np.float64)


def _away_from_zero(rng, *shape, margin=0.05) -> Parameter:
    # keeps kinks (relu, abs, max) out of reach of the finite-difference step
    v = rng.normal(size=shape)
    v = np.where(np.abs(v) < margin, np.sign(v + 1e-12) * margin + v, v)
    return Parameter(v, dtype=np.float64)


def _weighted(out: Tensor, rng) -> Tensor:
    w = Tensor(rng.normal(size=out.shape))
    return (out * w).sum()


def op_cases(seed: int = 0) -> dict[str, tuple]:
    """name -> (loss closure, [(name, tensor)]) for every op in isolation."""
    rng = np.random.default_rng(seed)
    cases = {}

    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    wa = rng.normal(size=(3, 4))
    cases["add_sub_mul"] = (lambda: ((a + b) * (a - b) * Tensor(wa)).sum(), [("a", a), ("b", b)])
    pos = Parameter(rng.uniform(0.5, 2.0, size=(3, 4)), dtype=np.float64)
    cases["div"] = (lambda: _weighted(a / pos, np.random.default_rng(1)), [("a", a), ("pos", pos)])
    cases["exp_log_sqrt"] = (
        lambda: _weighted(T.exp(a) + T.log(pos) + T.sqrt(pos), np.random.default_rng(2)),
        [("a", a), ("pos", pos)],
    )
    cases["power"] = (lambda: _weighted(pos**3, np.random.default_rng(3)), [("pos", pos)])
    k = _away_from_zero(rng, 3, 4)
    cases["relu_abs"] = (lambda: _weighted(T.relu(k) + T.absolute(k), np.random.default_rng(4)), [("k", k)])
    cases["sigmoid_softplus"] = (
        lambda: _weighted(T.sigmoid(a) + T.softplus(a), np.random.default_rng(5)),
        [("a", a)],
    )
    c = Parameter(a.data + np.where(rng.random((3, 4)) > 0.5, 0.3, -0.3), dtype=np.float64)
    cases["minimum_maximum"] = (
        lambda: _weighted(T.minimum(a, c) + T.maximum(a, c), np.random.default_rng(6)),
        [("a", a), ("c", c)],
    )
    cases["clamp_min"] = (lambda: _weighted(T.clamp_min(k, 0.0), np.random.default_rng(7)), [("k", k)])
    x = _param(rng, 2, 3, 4)
    cases["reductions"] = (
        lambda: (T.tsum(x, axis=1) * Tensor(np.arange(8.0).reshape(2, 4))).sum() + T.mean(x * x),
        [("x", x)],
    )
    cases["reshape_transpose_index"] = (
        lambda: _weighted(x.transpose(2, 0, 1).reshape(4, 6)[1:3] * 1.0, np.random.default_rng(8))
        + _weighted(x[:, 1, :2], np.random.default_rng(9)),
        [("x", x)],
    )
    cases["concat_stack"] = (
        lambda: _weighted(T.concat([x, x * 2.0], axis=1), np.random.default_rng(10))
        + _weighted(T.stack([x, x], axis=0), np.random.default_rng(11)),
        [("x", x)],
    )
    m1, m2 = _param(rng, 2, 3, 4), _param(rng, 2, 4, 5)
    cases["matmul"] = (lambda: _weighted(m1 @ m2, np.random.default_rng(12)), [("m1", m1), ("m2", m2)])
    s = _param(rng, 3, 5, scale=2.0)
    cases["softmax"] = (lambda: _weighted(T.softmax(s, axis=-1), np.random.default_rng(13)), [("s", s)])

    img = _param(rng, 2, 3, 7, 7)
    kern, bias = _param(rng, 4, 3, 3, 3, scale=0.3), _param(rng, 4)
    for stride, pad in ((1, 1), (2, 1)):
        cases[f"conv2d_s{stride}p{pad}"] = (
            lambda st=stride, pd=pad: _weighted(F.conv2d(img, kern, bias, st, pd), np.random.default_rng(14)),
            [("x", img), ("w", kern), ("b", bias)],
        )
    lw, lb = _param(rng, 4, 6), _param(rng, 6)
    cases["linear"] = (lambda: _weighted(F.linear(a, lw, lb), np.random.default_rng(15)), [("x", a), ("w", lw), ("b", lb)])
    gain, shift = _param(rng, 4, offset=1.0), _param(rng, 4)
    cases["layer_norm"] = (
        lambda: _weighted(F.layer_norm(x, gain, shift), np.random.default_rng(16)),
        [("x", x), ("gain", gain), ("bias", shift)],
    )
    bw, bb = _param(rng, 3, offset=1.0), _param(rng, 3)
    for training in (True, False):
        rm = np.zeros(3) + 0.1
        rv = np.ones(3) * 1.3
        cases[f"batch_norm_{'train' if training else 'frozen'}"] = (
            lambda tr=training, rm=rm, rv=rv: _weighted(
                F.batch_norm(img, bw, bb, rm.copy(), rv.copy(), tr), np.random.default_rng(17)
            ),
            [("x", img), ("w", bw), ("b", bb)],
        )
    mask_rng = np.random.default_rng(18)
    keep_mask = F.dropout(Tensor(np.ones((3, 4))), 0.3, mask_rng, True).data
    cases["dropout_fixed_mask"] = (lambda: _weighted(a * Tensor(keep_mask), np.random.default_rng(19)), [("a", a)])

    q, kk, v = _param(rng, 2, 5, 8), _param(rng, 2, 7, 8), _param(rng, 2, 7, 8)
    cases["attention"] = (
        lambda: _weighted(attention(q, kk, v, 2)[0], np.random.default_rng(20)),
        [("q", q), ("k", kk), ("v", v)],
    )
    logits = _param(rng, 2, 2, 5, 6)
    cases["corner_maps_soft_argmax"] = (
        lambda: _weighted(corners_from_maps(normalize_maps(logits), 8), np.random.default_rng(21))
        + _weighted(soft_argmax(normalize_maps(logits)), np.random.default_rng(22)),
        [("logits", logits)],
    )
    pred = Parameter(np.array([[0.1, 0.2, 0.6, 0.7], [0.3, 0.1, 0.5, 0.9], [0.0, 0.0, 0.2, 0.3]]), dtype=np.float64)
    gt = np.array([[0.2, 0.25, 0.55, 0.8], [0.05, 0.2, 0.45, 0.6], [0.5, 0.5, 0.9, 0.9]])
    cases["localization_loss"] = (lambda: localization_loss(pred, gt)[0], [("pred", pred)])
    lg = _param(rng, 6, scale=3.0)
    labels = np.array([1, 0, 1, 0, 1, 1])
    cases["bce_with_logits"] = (lambda: bce_with_logits(lg, labels), [("logits", lg)])
    return cases


MICRO_CONFIG = dict(
    backbone_channels=(4,),
    d_model=8,
    heads=2,
    ffn_dim=16,
    enc_layers=1,
    dec_layers=1,
    head_layers=2,
    score_hidden=8,
    template_size=4,
    search_size=8,
)
# Data seed of the micro operating point. Chosen by scanning seeds for a point
# where no finite-difference stencil crosses a relu/min/max/abs kink; the check
# re-verifies this every run and fails loudly if it stops holding.
MICRO_SEED = 5
KINK_OPS = ("relu", "maximum", "minimum", "clamp_min", "absolute")


def branch_signature(loss: Tensor) -> list[np.ndarray]:
    """Which branch every piecewise op took while computing ``loss``."""
    sig = []
    for t in reversed(T.tape(loss)):
        if t.node.op not in KINK_OPS:
            continue
        src = t.node.parents[0].data
        sig.append(src >= 0 if t.node.op == "absolute" else t.data == np.broadcast_to(src, t.shape))
    return sig


def micro_model_case(seed: int = MICRO_SEED, warmup: int = 40):
    """Full box loss through a tiny spatio-temporal network.

    The network first takes ``warmup`` AdamW steps so the predicted boxes are
    well formed (at initialization both corner maps sit on the crop center and
    the box is degenerate, which is exactly where GIoU has its kinks). The
    target is then placed a fixed margin away from the prediction in every
    coordinate so the L1 and GIoU branches are unambiguous.
    """
    cfg = ModelConfig(**MICRO_CONFIG)
    net = TrackerNet(cfg, seed).to(np.float64)
    rng = np.random.default_rng(seed + 100)
    tz, sx = cfg.template_size, cfg.search_size
    z = Tensor(rng.random((1, 3, tz, tz)))
    zd = Tensor(rng.random((1, 3, tz, tz)))
    x = Tensor(rng.random((1, 3, sx, sx)))
    gt = np.array([[0.25, 0.3, 0.7, 0.65]])

    def loss():
        pred = net(net.features(z), net.features(zd), x)
        return localization_loss(pred.boxes * (1.0 / sx), gt)[0]

    named = [(n, p) for n, p in net.named_parameters() if not n.startswith("score_head")]
    opt = AdamW([{"params": named, "lr": 1e-2}], weight_decay=0.0)
    for _ in range(warmup):
        net.zero_grad()
        backward(loss())
        opt.step()
    with T.no_grad():
        pred = net(net.features(z), net.features(zd), x).boxes.data / sx
    gt[:] = pred + np.array([0.07, -0.06, 0.05, 0.08])
    return loss, named


def check_smooth(fn, tensors, h: float = STEP) -> tuple[dict[str, float], dict[str, float], int]:
    """Like ``check_gradients`` but also counts stencils that switch a branch."""
    for _, t in tensors:
        t.grad = None
    base = fn()
    ref = branch_signature(base)
    backward(base, [t for _, t in tensors])
    errors, entrywise, crossings = {}, {}, 0
    for name, t in tensors:
        analytic = t.grad.copy()
        numeric = np.zeros(t.shape)
        flat, out = t.data.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            vals = []
            for step in (h, -h):
                flat[i] = keep + step
                val = fn()
                vals.append(float(val.data))
                if any(not np.array_equal(a, b) for a, b in zip(ref, branch_signature(val))):
                    crossings += 1
            flat[i] = keep
            out[i] = (vals[0] - vals[1]) / (2 * h)
        errors[name] = normwise_error(analytic, numeric)
        entrywise[name] = relative_error(analytic, numeric)
    return errors, entrywise, crossings


def run(seed: int = 0, include_model: bool = True) -> list[GradCase]:
    results = []
    for name, (fn, tensors) in op_cases(seed).items():
        t0 = time.perf_counter()
        errors, entrywise, crossings = check_smooth(fn, tensors)
        results.append(GradCase(name, errors, entrywise, time.perf_counter() - t0, crossings))
    if include_model:
        t0 = time.perf_counter()
        fn, tensors = micro_model_case()
        errors, entrywise, crossings = check_smooth(fn, tensors)
        results.append(GradCase("micro_model_box_loss", errors, entrywise, time.perf_counter() - t0, crossings))
    return results
