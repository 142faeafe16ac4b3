"""Attention over backbone feature maps.

A feature map ``[B, C, H, W]`` is read as a sequence of ``L = H * W`` tokens
of width ``d = C`` (row-major over spatial positions).  Three mechanisms are
provided: unprojected scaled dot-product attention (``sda``), multi-head
attention (``mha``) and sequence self-attention with learned query/key/value
projections (``ssa``).  In the classifier they are attached residually,
``X + Attn(X)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import Module, glorot_uniform
from .tensor import Parameter, Tensor, get_dtype

VARIANTS = ("none", "sda", "mha", "ssa")


def to_sequence(featmap: Tensor) -> Tensor:
    """``[B, C, H, W] -> [B, H*W, C]``; token ``i*W + j`` is ``featmap[:, :, i, j]``."""
    B, C, H, W = featmap.shape
    return featmap.reshape(B, C, H * W).transpose(0, 2, 1)


def from_sequence(seq: Tensor, height: int, width: int) -> Tensor:
    B, L, C = seq.shape
    if L != height * width:
        raise ValueError(f"sequence of length {L} cannot be laid out as {height}x{width}")
    return seq.transpose(0, 2, 1).reshape(B, C, height, width)


def attention_weights(Q: Tensor, K: Tensor) -> Tensor:
    """Row-stochastic ``softmax(Q K^T / sqrt(d_k))`` over the last axis."""
    if Q.shape[-1] != K.shape[-1]:
        raise ValueError(f"query width {Q.shape[-1]} does not match key width {K.shape[-1]}")
    d_k = Q.shape[-1]
    scores = (Q @ K.swapaxes(-1, -2)) * (1.0 / math.sqrt(d_k))
    return F.softmax(scores, axis=-1)


def scalar_dot_attention(Q: Tensor, K: Tensor, V: Tensor) -> Tensor:
    """``softmax(Q K^T / sqrt(d_k)) V``; leading axes are batch axes."""
    if K.shape[-2] != V.shape[-2]:
        raise ValueError(f"keys ({K.shape[-2]}) and values ({V.shape[-2]}) differ in length")
    return attention_weights(Q, K) @ V


@dataclass
class AttentionParams:
    """Projection weights; query/key/value are ``[d, h*d_k]``, output ``[h*d_v, d]``."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor | None = None
    heads: int = 1


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, L, width = x.shape
    return x.reshape(*lead, L, heads, width // heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, L, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, L, h * dh)


def multi_head_attention(X: Tensor, params: AttentionParams, K: Tensor | None = None, V: Tensor | None = None) -> Tensor:
    """``Concat(head_1..head_h) W_O`` with ``head_i = SDA(Q W_Q^i, K W_K^i, V W_V^i)``.

    With only ``X`` given this is self-attention (``Q = K = V = X``).
    """
    K = X if K is None else K
    V = X if V is None else V
    h = params.heads
    width = params.w_q.shape[1]
    if width % h:
        raise ValueError(f"{h} heads do not divide projection width {width}")
    q = _split_heads(X @ params.w_q, h)
    k = _split_heads(K @ params.w_k, h)
    v = _split_heads(V @ params.w_v, h)
    out = _merge_heads(scalar_dot_attention(q, k, v))
    return out @ params.w_o


def seq_self_attention(X: Tensor, params: AttentionParams) -> Tensor:
    """``softmax(X W_Q (X W_K)^T / sqrt(d_k)) X W_V``, then ``W_O`` when one is set."""
    if params.w_q.shape[0] != X.shape[-1]:
        raise ValueError(f"projection expects width {params.w_q.shape[0]}, got {X.shape[-1]}")
    out = scalar_dot_attention(X @ params.w_q, X @ params.w_k, X @ params.w_v)
    return out if params.w_o is None else out @ params.w_o


class ScaledDotAttention(Module):
    """Parameter-free self-attention, ``SDA(X, X, X)``."""

    def forward(self, X: Tensor) -> Tensor:
        return scalar_dot_attention(X, X, X)

    def weights(self, X: Tensor) -> Tensor:
        return attention_weights(X, X)


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int = 4, attn_dim: int | None = None):
        super().__init__()
        width = d if attn_dim is None else attn_dim
        if width % heads:
            raise ValueError(f"{heads} heads do not divide attention width {width}")
        self.heads = heads
        self.w_q = Parameter(np.zeros((d, width)))
        self.w_k = Parameter(np.zeros((d, width)))
        self.w_v = Parameter(np.zeros((d, width)))
        self.w_o = Parameter(np.zeros((width, d)))

    def reset_parameters(self, rng):
        for p in (self.w_q, self.w_k, self.w_v, self.w_o):
            p.data = glorot_uniform(rng, p.shape[0], p.shape[1], p.shape).astype(get_dtype())

    @property
    def params(self) -> AttentionParams:
        return AttentionParams(self.w_q, self.w_k, self.w_v, self.w_o, self.heads)

    def forward(self, X: Tensor) -> Tensor:
        return multi_head_attention(X, self.params)

    def weights(self, X: Tensor) -> Tensor:
        return attention_weights(_split_heads(X @ self.w_q, self.heads), _split_heads(X @ self.w_k, self.heads))


class SeqSelfAttention(Module):
    """Learned query/key/value projections of one sequence.

    ``attn_dim`` narrows the projections; when it differs from ``d`` an
    output projection back to ``d`` is allocated so the residual still fits.
    """

    def __init__(self, d: int, attn_dim: int | None = None):
        super().__init__()
        width = d if attn_dim is None else attn_dim
        self.w_q = Parameter(np.zeros((d, width)))
        self.w_k = Parameter(np.zeros((d, width)))
        self.w_v = Parameter(np.zeros((d, width)))
        self.w_o = Parameter(np.zeros((width, d))) if width != d else None

    def reset_parameters(self, rng):
        for p in (self.w_q, self.w_k, self.w_v, self.w_o):
            if p is not None:
                p.data = glorot_uniform(rng, p.shape[0], p.shape[1], p.shape).astype(get_dtype())

    @property
    def params(self) -> AttentionParams:
        return AttentionParams(self.w_q, self.w_k, self.w_v, self.w_o, 1)

    def forward(self, X: Tensor) -> Tensor:
        return seq_self_attention(X, self.params)

    def weights(self, X: Tensor) -> Tensor:
        return attention_weights(X @ self.w_q, X @ self.w_k)


def make_attention(variant: str, d: int, heads: int = 4, attn_dim: int | None = None) -> Module | None:
    if variant not in VARIANTS:
        raise ValueError(f"unknown attention variant {variant!r}; expected one of {VARIANTS}")
    if variant == "none":
        return None
    if variant == "sda":
        return ScaledDotAttention()
    if variant == "mha":
        return MultiHeadAttention(d, heads, attn_dim)
    return SeqSelfAttention(d, attn_dim)


def attach_attention(featmap: Tensor, variant: str, attention: Module | None = None) -> Tensor:
    """Residually refine a feature map: ``from_sequence(X + Attn(X))``; ``none`` passes through."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown attention variant {variant!r}; expected one of {VARIANTS}")
    if variant == "none":
        return featmap
    if attention is None:
        if variant != "sda":
            raise ValueError(f"variant {variant!r} needs attention parameters")
        attention = ScaledDotAttention()
    B, C, H, W = featmap.shape
    seq = to_sequence(featmap)
    return from_sequence(seq + attention(seq), H, W)
