"""Multi-head attention and feed-forward blocks shared by the planner and the denoiser."""

from __future__ import annotations

from typing import Callable, Optional

import torch
from torch import nn

from .numerics import Mlp, attention, joint_attention

Rotator = Optional[Callable[[torch.Tensor], torch.Tensor]]


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    # [n, D] -> [heads, n, D/heads]
    return x.unflatten(-1, (heads, -1)).transpose(-3, -2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    return x.transpose(-3, -2).flatten(-2)


class MultiHeadAttention(nn.Module):
    """Projected multi-head attention.

    ``rot_q``/``rot_k`` act on per-head tensors ``[heads, n, d_head]`` after
    projection; values are never rotated.
    """

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(kv_dim, dim)
        self.wv = nn.Linear(kv_dim, dim)
        self.wo = nn.Linear(dim, dim)

    def forward(self, x, ctx=None, rot_q: Rotator = None, rot_k: Rotator = None, mask=None):
        ctx = x if ctx is None else ctx
        q = split_heads(self.wq(x), self.heads)
        k = split_heads(self.wk(ctx), self.heads)
        v = split_heads(self.wv(ctx), self.heads)
        if rot_q is not None:
            q = rot_q(q)
        if rot_k is not None:
            k = rot_k(k)
        return self.wo(merge_heads(attention(q, k, v, mask)))

    def joint(self, x, sources):
        """Single softmax over several contexts.

        ``sources`` is a list of ``(ctx, rot_q, rot_k)``; each context is
        projected with this layer's weights.
        """
        q0 = split_heads(self.wq(x), self.heads)
        parts = []
        for ctx, rot_q, rot_k in sources:
            k = split_heads(self.wk(ctx), self.heads)
            v = split_heads(self.wv(ctx), self.heads)
            parts.append((rot_q(q0) if rot_q else q0, rot_k(k) if rot_k else k, v))
        return self.wo(merge_heads(joint_attention(parts)))


class FeedForward(Mlp):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__((dim, mult * dim, dim), activation="gelu")
