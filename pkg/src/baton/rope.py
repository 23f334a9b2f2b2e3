"""Rotary position encodings: 1D, per-head 3D, and rescaled cross-grid positions.

Pairs are adjacent coordinates ``(h[2k], h[2k+1])`` rotated by ``p·ω_k`` with
``ω_k = θ^(-2k/d)``, ``d`` being the width of the segment being rotated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .errors import ConfigurationError, InvalidPositionError, InvalidShapeError


def default_axis_split(head_dim: int) -> tuple[int, int, int]:
    # equal thirds floored to even, remainder to time
    third = (head_dim // 3) // 2 * 2
    return head_dim - 2 * third, third, third


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    theta: float = 10000.0
    axis_split: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ConfigurationError(f"head_dim must be even and positive, got {self.head_dim}")
        if self.axis_split is not None:
            parts = tuple(self.axis_split)
            if len(parts) != 3 or any(s < 0 or s % 2 for s in parts) or sum(parts) != self.head_dim:
                raise ConfigurationError(f"axis split {parts} must be three even parts summing to {self.head_dim}")

    @classmethod
    def for_3d(cls, head_dim: int, theta: float = 10000.0) -> "RopeConfig":
        return cls(head_dim, theta, default_axis_split(head_dim))


@dataclass(frozen=True)
class GridSpec:
    """Latent grid, semantic plan grid, and audio lengths."""

    latent_t: int
    latent_h: int
    latent_w: int
    sem_n: int
    sem_h: int
    sem_w: int
    audio_latent: int
    audio_plan: int

    def __post_init__(self):
        if any(v <= 0 for v in (self.latent_t, self.latent_h, self.latent_w, self.sem_n,
                                self.sem_h, self.sem_w, self.audio_latent, self.audio_plan)):
            raise InvalidShapeError(f"grid extents must be positive: {self}")

    @property
    def n_latent(self) -> int:
        return self.latent_t * self.latent_h * self.latent_w

    @property
    def n_v(self) -> int:
        return self.sem_h * self.sem_w

    @property
    def plan_len(self) -> int:
        return self.sem_n * self.n_v


class PositionTriple(NamedTuple):
    t: float
    h: float
    w: float


def rotate_half(h: torch.Tensor) -> torch.Tensor:
    """Map adjacent pairs (a, b) to (-b, a)."""
    if h.shape[-1] % 2:
        raise InvalidShapeError(f"rotate_half needs an even last dim, got {h.shape[-1]}")
    pairs = h.unflatten(-1, (-1, 2))
    return torch.stack((-pairs[..., 1], pairs[..., 0]), dim=-1).flatten(-2)


def frequencies(dim: int, theta: float, dtype=torch.float64) -> torch.Tensor:
    """ω_k for k < dim/2, each repeated for its coordinate pair."""
    k = torch.arange(dim // 2, dtype=torch.float64)
    omega = theta ** (-2.0 * k / dim)
    return omega.repeat_interleave(2).to(dtype)


def _positions(p, like: torch.Tensor) -> torch.Tensor:
    p = torch.as_tensor(p, dtype=torch.float64)
    if not bool(torch.isfinite(p).all()):
        raise InvalidPositionError("rotary position must be finite")
    return p


def rope_apply(h: torch.Tensor, p, cfg: RopeConfig | None = None, theta: float | None = None) -> torch.Tensor:
    """Rotate the last dim of ``h`` by position ``p``.

    ``p`` is a scalar or a tensor broadcastable against ``h.shape[:-1]``.
    """
    d = h.shape[-1]
    if cfg is not None and cfg.head_dim != d:
        raise InvalidShapeError(f"rope config head_dim {cfg.head_dim} != {d}")
    if d % 2:
        raise InvalidShapeError(f"rope needs an even width, got {d}")
    base = theta if theta is not None else (cfg.theta if cfg is not None else 10000.0)
    pos = _positions(p, h)
    angle = pos.unsqueeze(-1) * frequencies(d, base)
    cos, sin = angle.cos().to(h.dtype), angle.sin().to(h.dtype)
    return h * cos + rotate_half(h) * sin


def rope3d_apply(h: torch.Tensor, p, cfg: RopeConfig) -> torch.Tensor:
    """Split the last dim into (t, h, w) segments and rotate each by its coordinate.

    ``p`` is a :class:`PositionTriple` or a tensor whose last dim is 3.
    """
    if cfg.axis_split is None:
        raise ConfigurationError("rope3d_apply needs a RopeConfig with axis_split")
    if h.shape[-1] != cfg.head_dim:
        raise InvalidShapeError(f"rope config head_dim {cfg.head_dim} != {h.shape[-1]}")
    pos = _positions(tuple(p) if isinstance(p, PositionTriple) else p, h)
    segments = torch.split(h, list(cfg.axis_split), dim=-1)
    out = [
        seg if seg.shape[-1] == 0 else rope_apply(seg, pos[..., axis], theta=cfg.theta)
        for axis, seg in enumerate(segments)
    ]
    return torch.cat(out, dim=-1)


def latent_query_positions(g: GridSpec) -> torch.Tensor:
    """Integer (t, h, w) for each video latent, row-major t→h→w."""
    t, hh, ww = torch.meshgrid(
        torch.arange(g.latent_t, dtype=torch.float64),
        torch.arange(g.latent_h, dtype=torch.float64),
        torch.arange(g.latent_w, dtype=torch.float64),
        indexing="ij",
    )
    return torch.stack((t, hh, ww), dim=-1).reshape(-1, 3)


def semantic_key_positions(g: GridSpec) -> torch.Tensor:
    """Planned-token positions rescaled onto the latent grid's frame."""
    scale = torch.tensor(
        [g.latent_t / g.sem_n, g.latent_h / g.sem_h, g.latent_w / g.sem_w], dtype=torch.float64
    )
    j_t, j_h, j_w = torch.meshgrid(
        torch.arange(g.sem_n, dtype=torch.float64),
        torch.arange(g.sem_h, dtype=torch.float64),
        torch.arange(g.sem_w, dtype=torch.float64),
        indexing="ij",
    )
    return torch.stack((j_t, j_h, j_w), dim=-1).reshape(-1, 3) * scale


def audio_positions(g: GridSpec) -> tuple[torch.Tensor, torch.Tensor]:
    q = torch.arange(g.audio_latent, dtype=torch.float64)
    k = torch.arange(g.audio_plan, dtype=torch.float64) * (g.audio_latent / g.audio_plan)
    return q, k


def _block_rotation(dim: int, pos: float, theta: float) -> np.ndarray:
    r = np.zeros((dim, dim))
    for k in range(dim // 2):
        a = pos * theta ** (-2.0 * k / dim)
        c, s = np.cos(a), np.sin(a)
        r[2 * k : 2 * k + 2, 2 * k : 2 * k + 2] = [[c, -s], [s, c]]
    return r


def rotation_matrix_3d(p, cfg: RopeConfig) -> np.ndarray:
    """Explicit block-diagonal rotation for one position triple."""
    split = cfg.axis_split or (cfg.head_dim, 0, 0)
    coords = (p,) if np.isscalar(p) else tuple(p)
    if cfg.axis_split is None:
        coords = (coords[0], 0.0, 0.0)
    r = np.zeros((cfg.head_dim, cfg.head_dim))
    off = 0
    for dim, pos in zip(split, coords):
        if dim:
            r[off : off + dim, off : off + dim] = _block_rotation(dim, float(pos), cfg.theta)
        off += dim
    return r


def relative_score_oracle(q, k, p_q, p_k, cfg: RopeConfig) -> float:
    """Attention logit (R(p_q) q) · (R(p_k) k) built from explicit 2x2 rotation blocks.

    Scalar positions are treated as 1D RoPE over the full width.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    return float((rotation_matrix_3d(p_q, cfg) @ q) @ (rotation_matrix_3d(p_k, cfg) @ k))


class RotaryTable:
    """Precomputed cos/sin for a fixed set of positions.

    ``positions`` is ``(n,)`` for 1D rotation over the whole width, or
    ``(n, 3)`` for the per-axis split of ``cfg``. ``apply`` matches
    :func:`rope_apply` / :func:`rope3d_apply` for those positions.
    """

    def __init__(self, positions: torch.Tensor, cfg: RopeConfig):
        pos = _positions(positions, None)
        if pos.dim() == 1:
            angle = pos.unsqueeze(-1) * frequencies(cfg.head_dim, cfg.theta)
        else:
            if cfg.axis_split is None:
                raise ConfigurationError("3D positions need a RopeConfig with axis_split")
            angle = torch.cat(
                [pos[:, axis : axis + 1] * frequencies(dim, cfg.theta)
                 for axis, dim in enumerate(cfg.axis_split) if dim],
                dim=-1,
            )
        self.n = pos.shape[0]
        self.cos = angle.cos()
        self.sin = angle.sin()

    def apply(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-2] != self.n:
            raise InvalidShapeError(f"rotary table covers {self.n} positions, got {h.shape[-2]}")
        return h * self.cos.to(h.dtype) + rotate_half(h) * self.sin.to(h.dtype)
