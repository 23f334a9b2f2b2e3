"""Dense-tensor substrate: seeded PRNG, attention, MLPs, AdamW, gradient checks.

Tensors are ``torch.Tensor`` values and reverse-mode gradients come from
``torch.autograd``. Everything random goes through :class:`RngStream`
(SplitMix64) so that initialisations and datasets do not depend on torch's
generator.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import DegenerateMaskError, InvalidShapeError, TrainingDivergenceError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def serial_mode() -> None:
    """Pin torch to a single thread and deterministic kernels."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for an independent stream, e.g. one per sample index."""
    s = seed & _MASK64
    for k in keys:
        s = _mix((s + _GOLDEN * ((k & _MASK64) + 1)) & _MASK64)
    return s


class RngStream:
    """SplitMix64 generator.

    The scalar reference is ``next_u64``; bulk draws use the same recurrence
    vectorised in uint64 arithmetic and produce the identical sequence.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self.state = self.seed

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        return _mix(self.state)

    def u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GOLDEN) & _MASK64
        return z

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) from the top 53 bits."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int, sigma: float = 1.0) -> np.ndarray:
        # Box-Muller on pairs; an odd request still consumes a whole pair.
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = 2.0 * math.pi * u[1::2]
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return sigma * out[:n]

    def integers(self, low: int, high: int, n: int | None = None):
        """Uniform integers in [low, high)."""
        k = 1 if n is None else n
        vals = low + np.floor(self.uniform(k) * (high - low)).astype(np.int64)
        return int(vals[0]) if n is None else vals

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def fork(self, *keys: int) -> "RngStream":
        return RngStream(derive_seed(self.seed, *keys))


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise InvalidShapeError(f"invalid tensor shape {shape}")
    return shape


def rng_tensor(
    stream: RngStream,
    shape: Sequence[int],
    dist: str = "normal",
    sigma: float = 1.0,
    dtype: torch.dtype = torch.float64,
) -> torch.Tensor:
    """Draw a tensor from ``stream``: ``dist`` is ``"uniform01"`` or ``"normal"``."""
    shape = _check_shape(shape)
    n = math.prod(shape)
    if dist == "uniform01":
        vals = stream.uniform(n)
    elif dist == "normal":
        if not sigma > 0:
            raise ValueError(f"normal sigma must be positive, got {sigma}")
        vals = stream.normal(n, sigma)
    else:
        raise ValueError(f"unknown distribution {dist!r}")
    return torch.from_numpy(vals.reshape(shape)).to(dtype)


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """softmax(q kᵀ / √d + mask) v over the last two dims.

    ``mask`` is boolean with True marking keys a query may see. Leading
    dims (heads) broadcast.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise InvalidShapeError(
            f"attention shape mismatch q={tuple(q.shape)} k={tuple(k.shape)} v={tuple(v.shape)}"
        )
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        if not bool(mask.any(-1).all()):
            raise DegenerateMaskError("attention mask leaves a query row with no keys")
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


def joint_attention(parts: Sequence[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]) -> torch.Tensor:
    """One softmax over several key sets.

    Each part is ``(q, k, v)`` sharing query rows; the queries may differ per
    part (e.g. rotated for one key set, plain for another).
    """
    d = parts[0][0].shape[-1]
    logits = torch.cat([q @ k.transpose(-1, -2) for q, k, _ in parts], dim=-1) / math.sqrt(d)
    values = torch.cat([v for _, _, v in parts], dim=-2)
    return torch.softmax(logits, dim=-1) @ values


_ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "gelu": nn.functional.gelu,
    "identity": lambda x: x,
}


class Mlp(nn.Module):
    """Stack of affine layers with ``activation`` between them (none after the last)."""

    def __init__(self, dims: Sequence[int], activation: str = "gelu"):
        super().__init__()
        if len(dims) < 2:
            raise InvalidShapeError("an Mlp needs at least input and output widths")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.dims = tuple(dims)
        self.activation = activation
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    @property
    def d_in(self) -> int:
        return self.dims[0]

    @property
    def d_out(self) -> int:
        return self.dims[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise InvalidShapeError(f"Mlp expects width {self.d_in}, got {x.shape[-1]}")
        act = _ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


def mlp_apply(m: Mlp, x: torch.Tensor) -> torch.Tensor:
    return m(x)


def seeded_init(module: nn.Module, rng: RngStream) -> None:
    """Deterministically (re)initialise every parameter of ``module``.

    Matrices get N(0, 1/fan_in), biases zero, norm gains one, learnable
    queries N(0, 0.02²). Parameters are visited in ``named_parameters`` order.
    """
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "bias":
                p.zero_()
            elif "norm" in name and p.dim() == 1:
                p.fill_(1.0)
            elif leaf == "query":
                p.copy_(rng_tensor(rng, p.shape, "normal", 0.02, p.dtype))
            else:
                fan_in = p.shape[-1] if p.dim() > 1 else p.shape[0]
                p.copy_(rng_tensor(rng, p.shape, "normal", 1.0 / math.sqrt(fan_in), p.dtype))


@dataclass
class AdamWState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


class AdamW:
    """AdamW with bias correction and decoupled weight decay."""

    def __init__(self, named_params: Iterable[tuple[str, torch.Tensor]], **hyper):
        self.params = dict(named_params)
        self.state = AdamWState(**hyper)
        for name, p in self.params.items():
            self.state.exp_avg[name] = torch.zeros_like(p)
            self.state.exp_avg_sq[name] = torch.zeros_like(p)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self, grads: dict[str, torch.Tensor] | None = None) -> None:
        if grads is None:
            grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        for name, g in grads.items():
            if g.shape != self.params[name].shape:
                raise InvalidShapeError(f"gradient for {name} has shape {tuple(g.shape)}")
            if not bool(torch.isfinite(g).all()):
                raise TrainingDivergenceError(f"non-finite gradient for {name}")
        s = self.state
        s.step += 1
        bc1 = 1.0 - s.beta1**s.step
        bc2 = 1.0 - s.beta2**s.step
        for name, g in grads.items():
            p = self.params[name]
            m, v = s.exp_avg[name], s.exp_avg_sq[name]
            p.mul_(1.0 - s.lr * s.weight_decay)
            m.mul_(s.beta1).add_(g, alpha=1.0 - s.beta1)
            v.mul_(s.beta2).addcmul_(g, g, value=1.0 - s.beta2)
            denom = (v / bc2).sqrt_().add_(s.eps)
            p.addcdiv_(m, denom, value=-s.lr / bc1)

    def named_state(self) -> dict[str, torch.Tensor]:
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.state.exp_avg[name]
            out[f"opt.v.{name}"] = self.state.exp_avg_sq[name]
        out["opt.step"] = torch.tensor([self.state.step], dtype=torch.int64)
        return out

    def load_named_state(self, tensors: dict[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for name in self.params:
                self.state.exp_avg[name].copy_(tensors[f"opt.m.{name}"])
                self.state.exp_avg_sq[name].copy_(tensors[f"opt.v.{name}"])
        self.state.step = int(tensors["opt.step"][0])


def adamw_step(opt: AdamW, grads: dict[str, torch.Tensor] | None = None) -> None:
    opt.step(grads)


GRAD_CHECK_TOL = 1e-4


def _fault_scale() -> float:
    # BATON_INJECT_FAULT=grad_scale perturbs analytic gradients (self-test of the checker).
    return 1.01 if os.environ.get("BATON_INJECT_FAULT") == "grad_scale" else 1.0


def _central(loss_fn: Callable[[], torch.Tensor], flat: torch.Tensor, i: int, eps: float) -> tuple[float, float]:
    """Central difference at entry ``i`` and its rounding resolution ``u (|f+| + |f-|) / 2ε``."""
    orig = flat[i].item()
    flat[i] = orig + eps
    out = loss_fn()
    fp = float(out)
    flat[i] = orig - eps
    fm = float(loss_fn())
    flat[i] = orig
    unit = torch.finfo(out.dtype).eps / 2
    return (fp - fm) / (2.0 * eps), unit * (abs(fp) + abs(fm)) / (2.0 * eps)


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor] | dict[str, torch.Tensor],
    eps: float = 1e-5,
    grads: Sequence[torch.Tensor] | None = None,
    max_per_tensor: int | None = None,
    floor: float = 1e-7,
    rng: RngStream | None = None,
    richardson: bool = False,
) -> float:
    """Worst elementwise relative error between gradients and central differences.

    ``grads`` defaults to autograd on ``loss_fn``. With ``max_per_tensor`` a
    seeded subset of entries is probed per parameter. The relative error of an
    entry is ``max(|a - n| - r, 0) / max(|a|, |n|, floor)`` where ``r`` is the
    rounding resolution of the difference quotient; without it, entries whose
    true gradient is zero or below ``r`` report pure rounding noise.

    ``richardson`` combines the central differences at ``ε`` and ``2ε`` as
    ``(4 D(ε) - D(2ε)) / 3``, cancelling the ``ε²`` truncation term so that a
    larger ``ε`` (less rounding) can be used when gradient magnitudes span
    many decades.
    """
    plist = list(params.values()) if isinstance(params, dict) else list(params)
    if grads is None:
        for p in plist:
            p.grad = None
        loss = loss_fn()
        grads = torch.autograd.grad(loss, plist, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(plist, grads)]
    scale = _fault_scale()
    rng = rng or RngStream(0)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(plist, grads):
            flat = p.data.view(-1)
            gflat = g.reshape(-1) * scale
            idx = np.arange(flat.numel())
            if max_per_tensor is not None and flat.numel() > max_per_tensor:
                idx = np.sort(rng.permutation(flat.numel())[:max_per_tensor])
            for i in idx:
                num, resolution = _central(loss_fn, flat, i, eps)
                if richardson:
                    wide, res_wide = _central(loss_fn, flat, i, 2.0 * eps)
                    num = (4.0 * num - wide) / 3.0
                    resolution = (4.0 * resolution + res_wide) / 3.0
                ana = float(gflat[i])
                err = max(abs(ana - num) - resolution, 0.0) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
    return worst
