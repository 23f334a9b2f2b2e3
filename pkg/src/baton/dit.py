"""Dual-branch flow-matching denoiser with planned-token cross-attention.

Video latents live on a (T, H, W) grid and audio latents on a 1D axis. Each
block runs, per branch: self-attention, inter-branch cross-attention, text
cross-attention, planned-token cross-attention, feed-forward. The planned
tokens are rotated with positions rescaled onto the latent grid so that
queries and keys share one coordinate frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from .errors import AlignmentError, DivergenceError, LossError, ProjectionError, RangeError
from .layers import FeedForward, MultiHeadAttention, merge_heads, split_heads
from .numerics import Mlp, RngStream, attention, rng_tensor, seeded_init
from .planner import PlannedTokens
from .prompt import VOCAB
from .rope import (
    GridSpec,
    RopeConfig,
    RotaryTable,
    audio_positions,
    latent_query_positions,
    semantic_key_positions,
)

ROPE_MODES = ("rs3d", "temporal", "none")
TOPOLOGIES = ("cascade", "parallel", "concat")
CONDITIONING = ("planned", "text_only", "planned_only")


@dataclass(frozen=True)
class InjectionFlags:
    rope_mode: str = "rs3d"
    topology: str = "cascade"
    conditioning: str = "planned"

    def __post_init__(self):
        if self.rope_mode not in ROPE_MODES:
            raise ValueError(f"rope_mode must be one of {ROPE_MODES}")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}")
        if self.conditioning not in CONDITIONING:
            raise ValueError(f"conditioning must be one of {CONDITIONING}")


@dataclass(frozen=True)
class DitConfig:
    d: int = 32
    heads: int = 4
    blocks: int = 4
    d_s: int = 16
    d_a: int = 8
    theta: float = 10000.0
    vocab_size: int = len(VOCAB)
    text_seed: int = 7


# positional machinery ------------------------------------------------------------


def _video_positions(grid: GridSpec, mode: str) -> tuple[torch.Tensor, torch.Tensor] | None:
    if mode == "none":
        return None
    q, k = latent_query_positions(grid), semantic_key_positions(grid)
    if mode == "temporal":
        q = q * torch.tensor([1.0, 0.0, 0.0], dtype=q.dtype)
        k = k * torch.tensor([1.0, 0.0, 0.0], dtype=k.dtype)
    return q, k


def plan_rotations(grid: GridSpec, cfg: RopeConfig, mode: str, modality: str, offset: float = 0.0):
    """(rot_q, rot_k) callables for planned-token cross-attention, or (None, None) for ``none``.

    ``offset`` shifts query and key positions alike.
    """
    if mode == "none":
        return None, None
    if modality == "video":
        q, k = _video_positions(grid, mode)
        cfg_r = cfg if cfg.axis_split is not None else RopeConfig.for_3d(cfg.head_dim, cfg.theta)
    else:
        q, k = audio_positions(grid)
        cfg_r = RopeConfig(cfg.head_dim, cfg.theta)
    return RotaryTable(q + offset, cfg_r).apply, RotaryTable(k + offset, cfg_r).apply


def _cross(z, h, rot_q, rot_k, head_dim):
    if z.shape[-1] != h.shape[-1] or z.shape[-1] % head_dim:
        raise AlignmentError(f"latent width {z.shape[-1]} and planned width {h.shape[-1]} must match a multiple of {head_dim}")
    heads = z.shape[-1] // head_dim
    q = split_heads(z, heads)
    k = split_heads(h, heads)
    v = split_heads(h, heads)
    if rot_q is not None:
        q, k = rot_q(q), rot_k(k)
    return merge_heads(attention(q, k, v))


def vcattn(z_v, h_dit_v, grid: GridSpec, cfg: RopeConfig, mode: str = "rs3d", offset: float = 0.0) -> torch.Tensor:
    """Projection-free video planned-token cross-attention; values stay unrotated."""
    if z_v.shape[0] != grid.n_latent or h_dit_v.shape[0] != grid.plan_len:
        raise AlignmentError(
            f"expected {grid.n_latent} latents and {grid.plan_len} planned tokens, "
            f"got {z_v.shape[0]} and {h_dit_v.shape[0]}"
        )
    rot_q, rot_k = plan_rotations(grid, cfg, mode, "video", offset)
    return _cross(z_v, h_dit_v, rot_q, rot_k, cfg.head_dim)


def acattn(z_a, h_dit_a, grid: GridSpec, cfg: RopeConfig, mode: str = "rs3d", offset: float = 0.0) -> torch.Tensor:
    """Audio counterpart of :func:`vcattn` with 1D rescaled positions."""
    if z_a.shape[0] != grid.audio_latent or h_dit_a.shape[0] != grid.audio_plan:
        raise AlignmentError(
            f"expected {grid.audio_latent} latents and {grid.audio_plan} planned tokens, "
            f"got {z_a.shape[0]} and {h_dit_a.shape[0]}"
        )
    rot_q, rot_k = plan_rotations(grid, cfg, mode, "audio", offset)
    return _cross(z_a, h_dit_a, rot_q, rot_k, cfg.head_dim)


def latent_project(lmlp: Mlp, h_sem: torch.Tensor) -> torch.Tensor:
    if h_sem.shape[-1] != lmlp.d_in:
        raise ProjectionError(f"planned tokens have width {h_sem.shape[-1]}, projector expects {lmlp.d_in}")
    return lmlp(h_sem)


# flow matching ------------------------------------------------------------------


def interpolate(z0: torch.Tensor, z1: torch.Tensor, t: float) -> torch.Tensor:
    """Rectified-flow interpolant (1 - t) z0 + t z1."""
    if z0.shape != z1.shape:
        raise LossError(f"interpolating tensors of shapes {tuple(z0.shape)} and {tuple(z1.shape)}")
    if not 0.0 <= float(t) <= 1.0:
        raise RangeError(f"t={t} outside [0, 1]")
    return (1.0 - t) * z0 + t * z1


def fm_loss(pred_v, pred_a, z0, z1) -> torch.Tensor:
    """Summed squared error of both velocity predictions against ``z1 - z0``.

    ``z0`` and ``z1`` are ``(video, audio)`` pairs.
    """
    (z0_v, z0_a), (z1_v, z1_a) = z0, z1
    if pred_v.shape != z0_v.shape or pred_a.shape != z0_a.shape or z0_v.shape != z1_v.shape or z0_a.shape != z1_a.shape:
        raise LossError("velocity and latent shapes disagree")
    return ((pred_v - (z1_v - z0_v)) ** 2).sum() + ((pred_a - (z1_a - z0_a)) ** 2).sum()


# network ------------------------------------------------------------------------


def timestep_embedding(t, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    angle = 1000.0 * float(t) * freqs
    return torch.cat([angle.cos(), angle.sin()])


class BranchBlock(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.mod = nn.Linear(d, 4 * d)
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False)
        self.self_attn = MultiHeadAttention(d, heads)
        self.norm_x = nn.LayerNorm(d)
        self.norm_other = nn.LayerNorm(d)
        self.branch_attn = MultiHeadAttention(d, heads)
        self.norm_t = nn.LayerNorm(d)
        self.text_attn = MultiHeadAttention(d, heads)
        self.norm_p = nn.LayerNorm(d)
        self.plan_attn = MultiHeadAttention(d, heads)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False)
        self.ff = FeedForward(d)

    def condition(self, x, text, plan, plan_rot, flags: InjectionFlags):
        """Text and planned-token injection in the requested topology."""
        use_text = flags.conditioning != "planned_only"
        use_plan = flags.conditioning != "text_only"
        rot_q, rot_k = plan_rot
        if flags.topology == "concat" and use_text and use_plan:
            return x + self.text_attn.joint(self.norm_t(x), [(text, None, None), (plan, rot_q, rot_k)])
        if flags.topology == "parallel":
            delta = 0
            if use_text:
                delta = delta + self.text_attn(self.norm_t(x), text)
            if use_plan:
                delta = delta + self.plan_attn(self.norm_p(x), plan, rot_q=rot_q, rot_k=rot_k)
            return x + delta
        if use_text:
            x = x + self.text_attn(self.norm_t(x), text)
        if use_plan:
            x = x + self.plan_attn(self.norm_p(x), plan, rot_q=rot_q, rot_k=rot_k)
        return x


class DualBlock(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.video = BranchBlock(d, heads)
        self.audio = BranchBlock(d, heads)

    def forward(self, xv, xa, c, ctx):
        mods = []
        for br, x, rot in ((self.video, xv, ctx["self_v"]), (self.audio, xa, ctx["self_a"])):
            sh1, sc1, sh2, sc2 = br.mod(nn.functional.silu(c)).chunk(4)
            mods.append((sh2, sc2))
            h = br.norm1(x) * (1 + sc1) + sh1
            x = x + br.self_attn(h, rot_q=rot, rot_k=rot)
            if br is self.video:
                xv = x
            else:
                xa = x
        rq_v, rk_a = ctx["branch_v"], ctx["branch_a"]
        xv, xa = (
            xv + self.video.branch_attn(self.video.norm_x(xv), self.video.norm_other(xa), rot_q=rq_v, rot_k=rk_a),
            xa + self.audio.branch_attn(self.audio.norm_x(xa), self.audio.norm_other(xv), rot_q=rk_a, rot_k=rq_v),
        )
        flags = ctx["flags"]
        xv = self.video.condition(xv, ctx["text"], ctx["plan_v"], ctx["plan_rot_v"], flags)
        xa = self.audio.condition(xa, ctx["text"], ctx["plan_a"], ctx["plan_rot_a"], flags)
        out = []
        for br, x, (sh2, sc2) in ((self.video, xv, mods[0]), (self.audio, xa, mods[1])):
            out.append(x + br.ff(br.norm2(x) * (1 + sc2) + sh2))
        return out[0], out[1]


class DualDit(nn.Module):
    def __init__(self, cfg: DitConfig, grid: GridSpec):
        super().__init__()
        self.cfg = cfg
        self.grid = grid
        d = cfg.d
        self.video_in = nn.Linear(d, d)
        self.audio_in = nn.Linear(d, d)
        self.time_mlp = Mlp((d, d, d))
        self.lmlp_v = Mlp((cfg.d_s, d, d))
        self.lmlp_a = Mlp((cfg.d_a, d, d))
        self.blocks = nn.ModuleList(DualBlock(d, cfg.heads) for _ in range(cfg.blocks))
        self.video_norm_out = nn.LayerNorm(d)
        self.audio_norm_out = nn.LayerNorm(d)
        self.video_out = nn.Linear(d, d)
        self.audio_out = nn.Linear(d, d)
        table = rng_tensor(RngStream(cfg.text_seed), (cfg.vocab_size, d), "normal", 1.0, torch.float32)
        self.register_buffer("text_table", table)
        self.rope = RopeConfig.for_3d(d // cfg.heads, cfg.theta)
        self._tables: dict[str, object] = {}

    def init_weights(self, rng: RngStream) -> "DualDit":
        seeded_init(self, rng)
        return self

    def _rotations(self, mode: str):
        if mode not in self._tables:
            g, hd = self.grid, self.cfg.d // self.cfg.heads
            rope1 = RopeConfig(hd, self.cfg.theta)
            t_v = torch.arange(g.latent_t, dtype=torch.float64) * (g.audio_latent / g.latent_t)
            t_v = t_v.repeat_interleave(g.latent_h * g.latent_w)
            self._tables[mode] = {
                "self_v": RotaryTable(latent_query_positions(g), self.rope).apply,
                "self_a": RotaryTable(torch.arange(g.audio_latent, dtype=torch.float64), rope1).apply,
                "branch_v": RotaryTable(t_v, rope1).apply,
                "branch_a": RotaryTable(torch.arange(g.audio_latent, dtype=torch.float64), rope1).apply,
                "plan_rot_v": plan_rotations(g, self.rope, mode, "video"),
                "plan_rot_a": plan_rotations(g, self.rope, mode, "audio"),
            }
        return self._tables[mode]

    def embed_text(self, text_ids) -> torch.Tensor:
        ids = torch.as_tensor(np.asarray(text_ids), dtype=torch.int64)
        n, d = ids.shape[0], self.cfg.d
        pos = torch.arange(n, dtype=torch.float64).unsqueeze(-1)
        freqs = torch.exp(-math.log(100.0) * torch.arange(d // 2, dtype=torch.float64) / (d // 2))
        pe = torch.cat([(pos * freqs).sin(), (pos * freqs).cos()], dim=-1)
        return self.text_table[ids] + pe.to(self.text_table.dtype)

    def project_plan(self, planned: PlannedTokens | None):
        if planned is None:
            return None, None
        return latent_project(self.lmlp_v, planned.video), latent_project(self.lmlp_a, planned.audio)

    def forward_projected(self, z_v, z_a, t, text_ids, h_dit_v, h_dit_a, flags: InjectionFlags = InjectionFlags()):
        g = self.grid
        shape_v = z_v.shape
        zv = z_v.reshape(g.n_latent, self.cfg.d)
        if z_a.shape != (g.audio_latent, self.cfg.d):
            raise AlignmentError(f"audio latents must be ({g.audio_latent}, {self.cfg.d}), got {tuple(z_a.shape)}")
        if flags.conditioning != "text_only":
            if h_dit_v is None or h_dit_v.shape[0] != g.plan_len or h_dit_a.shape[0] != g.audio_plan:
                raise AlignmentError("planned tokens missing or misaligned with the grid")
        dtype = zv.dtype
        c = self.time_mlp(timestep_embedding(t, self.cfg.d).to(dtype))
        ctx = dict(self._rotations(flags.rope_mode))
        ctx.update(flags=flags, text=self.embed_text(text_ids).to(dtype), plan_v=h_dit_v, plan_a=h_dit_a)
        xv, xa = self.video_in(zv), self.audio_in(z_a)
        for block in self.blocks:
            xv, xa = block(xv, xa, c, ctx)
        vv = self.video_out(self.video_norm_out(xv)).reshape(shape_v)
        va = self.audio_out(self.audio_norm_out(xa))
        return vv, va

    def forward(self, z_v, z_a, t, text_ids, planned: PlannedTokens | None, flags: InjectionFlags = InjectionFlags()):
        if flags.conditioning == "text_only":
            h_v = h_a = None
        else:
            h_v, h_a = self.project_plan(planned)
        return self.forward_projected(z_v, z_a, t, text_ids, h_v, h_a, flags)


def dit_forward(m: DualDit, z_t_v, z_t_a, t, prompt_tokens, h_dit_v, h_dit_a, flags: InjectionFlags = InjectionFlags()):
    return m.forward_projected(z_t_v, z_t_a, t, prompt_tokens, h_dit_v, h_dit_a, flags)


# sampling -------------------------------------------------------------------------

Velocity = Callable[[torch.Tensor, torch.Tensor, float], tuple[torch.Tensor, torch.Tensor]]


def euler_integrate(velocity: Velocity, z1_v: torch.Tensor, z1_a: torch.Tensor, steps: int):
    """Integrate dz/dt = v from t=1 down to t=0 with ``steps`` uniform Euler steps."""
    if steps < 1:
        raise RangeError("steps must be at least 1")
    dt = 1.0 / steps
    zv, za = z1_v, z1_a
    for k in range(steps, 0, -1):
        vv, va = velocity(zv, za, k / steps)
        zv = zv - dt * vv
        za = za - dt * va
        if not (bool(torch.isfinite(zv).all()) and bool(torch.isfinite(za).all())):
            raise DivergenceError(k)
    return zv, za


@torch.no_grad()
def euler_sample(m: DualDit, text_ids, planned: PlannedTokens | None, flags: InjectionFlags,
                 steps: int, rng: RngStream, dtype=torch.float32):
    """Draw unit-normal noise from ``rng`` and integrate the learned velocity field to t=0."""
    g, d = m.grid, m.cfg.d
    z1_v = rng_tensor(rng, (g.latent_t, g.latent_h, g.latent_w, d), "normal", 1.0, dtype)
    z1_a = rng_tensor(rng, (g.audio_latent, d), "normal", 1.0, dtype)
    h_v, h_a = (None, None) if flags.conditioning == "text_only" else m.project_plan(planned)

    def velocity(zv, za, t):
        return m.forward_projected(zv, za, t, text_ids, h_v, h_a, flags)

    return euler_integrate(velocity, z1_v, z1_a, steps)
