"""Planner: causal surrogate LM, pad-state extraction and the dual alignment towers.

The towers turn the LM's pad-position states into continuous planned tokens.
Both intra-modal cross-attentions run first; the two towers then exchange
their features through timestamp-rotated cross-modal attention, and a Sem-MLP
maps each result to its target feature width.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .errors import AlignmentError, ExtractionError, LossError, TowerError, VocabError
from .layers import FeedForward, MultiHeadAttention, merge_heads, split_heads
from .numerics import Mlp, RngStream, attention, seeded_init
from .prompt import VOCAB, PlanGeometry, PromptLayout, pad_spans
from .rope import RopeConfig, rope_apply


class PlannedTokens(NamedTuple):
    video: torch.Tensor  # (L_v, D_s)
    audio: torch.Tensor  # (L_a, D_a)


@dataclass(frozen=True)
class PlannerConfig:
    d_model: int = 64
    blocks: int = 4
    heads: int = 4
    d_s: int = 16
    d_a: int = 8
    theta: float = 10000.0
    vocab_size: int = len(VOCAB)


@dataclass(frozen=True)
class PlannerFlags:
    tower: bool = True
    learnable_query: bool = True
    tower_rope: bool = True
    # off: the exchange output replaces the tower stream; on: it is added to it
    tower_residual: bool = False


class LmBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x, rot, mask):
        x = x + self.attn(self.norm1(x), rot_q=rot, rot_k=rot, mask=mask)
        return x + self.ff(self.norm2(x))


class SurrogateLm(nn.Module):
    """Pre-norm causal transformer with 1D rotary positions."""

    def __init__(self, cfg: PlannerConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.blocks = nn.ModuleList(LmBlock(cfg.d_model, cfg.heads) for _ in range(cfg.blocks))
        self.norm_f = nn.LayerNorm(cfg.d_model)
        self.rope = RopeConfig(cfg.d_model // cfg.heads, cfg.theta)

    def embed_ids(self, ids) -> torch.Tensor:
        ids = torch.as_tensor(np.asarray(ids), dtype=torch.int64)
        if ids.numel() == 0 or int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size:
            raise VocabError("token id outside the vocabulary")
        return self.embed(ids)

    def forward(self, ids=None, embeds: torch.Tensor | None = None) -> torch.Tensor:
        x = self.embed_ids(ids) if embeds is None else embeds
        n = x.shape[0]
        pos = torch.arange(n, dtype=torch.float64)
        mask = torch.ones(n, n, dtype=torch.bool).tril()

        def rot(h):
            return rope_apply(h, pos, self.rope)

        for block in self.blocks:
            x = block(x, rot, mask)
        return self.norm_f(x)


def lm_forward(lm: SurrogateLm, layout: PromptLayout) -> torch.Tensor:
    return lm(layout.ids)


def extract_hidden(hidden: torch.Tensor, spans) -> tuple[torch.Tensor, torch.Tensor]:
    """Gather the rows at the image-pad and audio-pad positions."""
    vid, aud = (np.asarray(s, dtype=np.int64) for s in spans)
    n = hidden.shape[0]
    for idx in (vid, aud):
        if len(idx) == 0 or idx.min() < 0 or idx.max() >= n:
            raise ExtractionError(f"pad span outside a sequence of length {n}")
    return hidden[torch.from_numpy(vid)], hidden[torch.from_numpy(aud)]


def assign_video_timestamps(geom: PlanGeometry) -> torch.Tensor:
    """Keyframe i at i·M/N seconds, shared by its n_v spatial tokens."""
    i = torch.arange(geom.n_keyframes, dtype=torch.float64)
    return (i * geom.duration / geom.n_keyframes).repeat_interleave(geom.n_v)


def assign_audio_timestamps(geom: PlanGeometry) -> torch.Tensor:
    """Slot j of chunk m at m + j/n_a seconds."""
    m = torch.arange(geom.duration, dtype=torch.float64).repeat_interleave(geom.n_a)
    j = torch.arange(geom.n_a, dtype=torch.float64).repeat(geom.duration)
    return m + j / geom.n_a


def cmattn_timestamped(q_feat, kv_feat, tau_q, tau_k, cfg: RopeConfig, heads: int = 1) -> torch.Tensor:
    """Projection-free cross-modal attention with timestamp rotation of queries and keys."""
    if len(tau_q) != q_feat.shape[0] or len(tau_k) != kv_feat.shape[0]:
        raise AlignmentError("timestamp count does not match token count")
    q = split_heads(q_feat, heads)
    k = split_heads(kv_feat, heads)
    v = split_heads(kv_feat, heads)
    out = attention(rope_apply(q, tau_q, cfg), rope_apply(k, tau_k, cfg), v)
    return merge_heads(out)


class Tower(nn.Module):
    def __init__(self, length: int, dim: int, heads: int, d_out: int):
        super().__init__()
        self.length = length
        self.query = nn.Parameter(torch.zeros(length, dim))
        self.cattn = MultiHeadAttention(dim, heads)
        self.cmattn = MultiHeadAttention(dim, heads)
        self.smlp = Mlp((dim, dim, d_out))

    def intra(self, hidden: torch.Tensor, learnable_query: bool = True) -> torch.Tensor:
        if hidden.shape[0] != self.length:
            raise TowerError(f"tower expects {self.length} rows, got {hidden.shape[0]}")
        q = self.query if learnable_query else hidden
        return self.cattn(q, hidden)

    def exchange(self, own, other, tau_own, tau_other, rope: RopeConfig | None) -> torch.Tensor:
        if len(tau_own) != own.shape[0] or len(tau_other) != other.shape[0]:
            raise AlignmentError("timestamp count does not match token count")
        if rope is None:
            return self.cmattn(own, other)
        return self.cmattn(
            own,
            other,
            rot_q=lambda h: rope_apply(h, tau_own, rope),
            rot_k=lambda h: rope_apply(h, tau_other, rope),
        )


class VaPlanner(nn.Module):
    def __init__(self, cfg: PlannerConfig, geom: PlanGeometry, flags: PlannerFlags = PlannerFlags()):
        super().__init__()
        self.cfg = cfg
        self.geom = geom
        self.flags = flags
        self.lm = SurrogateLm(cfg)
        self.video_tower = Tower(geom.video_len, cfg.d_model, cfg.heads, cfg.d_s)
        self.audio_tower = Tower(geom.audio_len, cfg.d_model, cfg.heads, cfg.d_a)
        self.tower_rope = RopeConfig(cfg.d_model // cfg.heads, cfg.theta)

    def init_weights(self, rng: RngStream) -> "VaPlanner":
        seeded_init(self, rng)
        return self

    def hidden_states(self, layout: PromptLayout) -> tuple[torch.Tensor, torch.Tensor]:
        return extract_hidden(lm_forward(self.lm, layout), pad_spans(layout))

    def towers(self, h_v, h_a, tau_v=None, tau_a=None) -> PlannedTokens:
        tau_v = assign_video_timestamps(self.geom) if tau_v is None else tau_v
        tau_a = assign_audio_timestamps(self.geom) if tau_a is None else tau_a
        lq = self.flags.learnable_query
        f_v = self.video_tower.intra(h_v, lq)
        f_a = self.audio_tower.intra(h_a, lq)
        if self.flags.tower:
            rope = self.tower_rope if self.flags.tower_rope else None
            x_v = self.video_tower.exchange(f_v, f_a, tau_v, tau_a, rope)
            x_a = self.audio_tower.exchange(f_a, f_v, tau_a, tau_v, rope)
            if self.flags.tower_residual:
                x_v, x_a = f_v + x_v, f_a + x_a
        else:
            x_v, x_a = f_v, f_a
        return PlannedTokens(self.video_tower.smlp(x_v), self.audio_tower.smlp(x_a))

    def forward(self, layout: PromptLayout) -> PlannedTokens:
        h_v, h_a = self.hidden_states(layout)
        return self.towers(h_v, h_a)


def video_tower(planner: VaPlanner, h_v, h_a, tau_v, tau_a) -> torch.Tensor:
    if h_v.shape[0] != planner.geom.video_len or h_a.shape[0] != planner.geom.audio_len:
        raise TowerError("hidden-state rows do not match the plan geometry")
    return planner.towers(h_v, h_a, tau_v, tau_a).video


def audio_tower(planner: VaPlanner, h_a, h_v, tau_a, tau_v) -> torch.Tensor:
    if h_v.shape[0] != planner.geom.video_len or h_a.shape[0] != planner.geom.audio_len:
        raise TowerError("hidden-state rows do not match the plan geometry")
    return planner.towers(h_v, h_a, tau_v, tau_a).audio


def plan(planner: VaPlanner, layout: PromptLayout) -> PlannedTokens:
    return planner(layout)


def plan_loss(pred: PlannedTokens, target_v: torch.Tensor, target_a: torch.Tensor) -> torch.Tensor:
    """Summed squared error over every video and audio planned token."""
    if pred.video.shape != target_v.shape or pred.audio.shape != target_a.shape:
        raise LossError(
            f"plan shapes {tuple(pred.video.shape)}/{tuple(pred.audio.shape)} vs "
            f"targets {tuple(target_v.shape)}/{tuple(target_a.shape)}"
        )
    return ((pred.video - target_v) ** 2).sum() + ((pred.audio - target_a) ** 2).sum()
