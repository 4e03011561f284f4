"""Minimal dense tensors, reverse-mode autodiff and Adam."""

from .gradcheck import GradCheckResult, gradcheck
from .nn import (
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    xavier_uniform,
)
from .optim import Adam, WarmupSchedule
from .tensor import (
    NEG_INF,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    attention,
    concat,
    cross_entropy,
    default_dtype,
    div,
    dot,
    exp,
    get_default_dtype,
    getitem,
    is_grad_enabled,
    layer_norm,
    log,
    log_softmax,
    logsumexp,
    masked_fill,
    matmul,
    maximum,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    softmax,
    sqrt,
    stack,
    std,
    sub,
    sum_,
    swapaxes,
    take_rows,
    transpose,
    where,
)

__all__ = [name for name in dir() if not name.startswith("_")]
