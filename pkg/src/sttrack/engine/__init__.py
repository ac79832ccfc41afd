from . import functional, nn
from .optim import AdamW, clip_grad_norm
from .rng import stream
from .tensor import (
    Parameter,
    Tensor,
    absolute,
    backward,
    clamp_min,
    concat,
    exp,
    getitem,
    is_grad_enabled,
    log,
    matmul,
    maximum,
    mean,
    minimum,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    stack,
    tape,
    transpose,
    tsum,
)
from .gradcheck import check_gradients, normwise_error, numeric_grad, relative_error
