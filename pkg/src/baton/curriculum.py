"""Three-stage training, evaluation metrics and checkpoints.

Stage 1 fits the planner to the frozen target features. Stage 2 fits the
denoiser with ground-truth features as planned tokens. Stage 3 keeps the
planner frozen and fits the denoiser on the planner's own predictions. Stages
2 and 3 share one step function and differ only in where the conditioning
comes from.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .container import decode, encode, i64_to_text, text_to_i64
from .dit import DualDit, InjectionFlags, euler_sample, fm_loss, interpolate
from .errors import (
    BatonError,
    ConfigurationError,
    DivergenceError,
    EvaluationError,
    FormatError,
    IncompatibleCheckpointError,
)
from .numerics import AdamW, RngStream, derive_seed, rng_tensor
from .planner import PlannedTokens, VaPlanner, plan_loss
from .prompt import VOCAB, PlanGeometry, PromptLayout, assemble_prompt
from .synth_data import FrozenStandIns, Sample, probe_script, sync_score, text_to_script

META_ENTRY = "__meta__"
FORMAT_VERSION = 1

# stream keys, so that both denoiser stages draw identical batches, times and noise
_PLANNER_STREAM = 0x51
_DIT_STREAM = 0xD1
_EVAL_STREAM = 0xE7


@dataclass(frozen=True)
class StageConfig:
    stage: int
    steps: int
    lr: float = 1e-5
    batch_size: int = 1
    seed: int = 0
    weight_decay: float = 0.01
    eval_every: int = 250
    order: str = "v_then_a"
    flags: InjectionFlags = InjectionFlags()
    skip_stage2: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ConfigurationError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigurationError("steps must be >= 0, batch_size and eval_every >= 1")
        if self.skip_stage2 and self.stage != 3:
            raise ConfigurationError("skip_stage2 only applies to stage 3")


@dataclass
class MetricsRecord:
    step: int
    stage: int
    loss: float | None = None
    plan_mse: float | None = None
    fm_val: float | None = None
    sync_score: float | None = None
    event_acc: float | None = None
    wall_time: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def values(self) -> dict:
        """Every field except wall time, for determinism comparisons."""
        out = asdict(self)
        out.pop("wall_time")
        return out


class Prepared(NamedTuple):
    """One sample as model-ready tensors."""

    layout: PromptLayout
    text_ids: np.ndarray
    f_gt: PlannedTokens
    z0_v: torch.Tensor
    z0_a: torch.Tensor


class Dataset(NamedTuple):
    train: list[Sample]
    heldout: list[Sample]


def prepare(s: Sample, geom: PlanGeometry, order: str = "v_then_a", dtype=torch.float32) -> Prepared:
    layout = assemble_prompt(VOCAB.sys_tokens, s.video_text, s.audio_text, geom, order)
    return Prepared(
        layout=layout,
        text_ids=np.asarray(list(s.video_text) + list(s.audio_text), dtype=np.int64),
        f_gt=PlannedTokens(torch.as_tensor(s.f_gt_v, dtype=dtype), torch.as_tensor(s.f_gt_a, dtype=dtype)),
        z0_v=torch.as_tensor(s.z0_v, dtype=dtype),
        z0_a=torch.as_tensor(s.z0_a, dtype=dtype),
    )


def param_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _finite(x: float) -> bool:
    return math.isfinite(x)


def _batch(rng: RngStream, n: int, size: int) -> list[int]:
    return [rng.integers(0, n) for _ in range(size)]


# metrics ---------------------------------------------------------------------------


@torch.no_grad()
def heldout_plan_mse(planner: VaPlanner, heldout: Sequence[Prepared]) -> float:
    """Per-element mean squared error of the planner against ground-truth features."""
    if not heldout:
        raise EvaluationError("empty held-out set")
    total, count = 0.0, 0
    for p in heldout:
        total += float(plan_loss(planner(p.layout), *p.f_gt))
        count += p.f_gt.video.numel() + p.f_gt.audio.numel()
    return total / count


def _fixed_flow(index: int, seed: int, p: Prepared):
    rng = RngStream(derive_seed(seed, _EVAL_STREAM, index))
    t = float(rng.uniform(1)[0])
    z1_v = rng_tensor(rng, tuple(p.z0_v.shape), "normal", 1.0, p.z0_v.dtype)
    z1_a = rng_tensor(rng, tuple(p.z0_a.shape), "normal", 1.0, p.z0_a.dtype)
    return t, z1_v, z1_a


@torch.no_grad()
def heldout_fm_val(dit: DualDit, heldout: Sequence[Prepared], conditions: Sequence[PlannedTokens | None],
                   flags: InjectionFlags, seed: int = 0) -> float:
    """Per-element flow-matching loss with a fixed (t, noise) per held-out sample."""
    if not heldout:
        raise EvaluationError("empty held-out set")
    total, count = 0.0, 0
    for i, (p, cond) in enumerate(zip(heldout, conditions)):
        t, z1_v, z1_a = _fixed_flow(i, seed, p)
        pv, pa = dit(interpolate(p.z0_v, z1_v, t), interpolate(p.z0_a, z1_a, t), t, p.text_ids, cond, flags)
        total += float(fm_loss(pv, pa, (p.z0_v, p.z0_a), (z1_v, z1_a)))
        count += p.z0_v.numel() + p.z0_a.numel()
    return total / count


def event_acc(samples: Sequence[tuple[np.ndarray, np.ndarray]], prompts: Sequence[Sequence[int]],
              stand: FrozenStandIns) -> float:
    """Fraction of generated video latents whose probed motion script equals the prompt's."""
    if not samples:
        raise EvaluationError("no samples to score")
    if len(samples) != len(prompts):
        raise EvaluationError(f"{len(samples)} samples but {len(prompts)} prompts")
    per_frame = stand.cfg.speed / stand.geom.fps
    hits = 0
    for (z_v, _), video_text in zip(samples, prompts):
        x, y = stand.centroid_trajectory(np.asarray(z_v))
        want = [code for _, _, code in text_to_script(video_text, stand.cfg)]
        hits += probe_script(x, y, per_frame) == want
    return hits / len(samples)


def mean_sync(samples: Sequence[tuple[np.ndarray, np.ndarray]], stand: FrozenStandIns) -> float:
    """Mean sync score; degenerate pairs count as 0."""
    if not samples:
        raise EvaluationError("no samples to score")
    return float(np.mean([sync_score(np.asarray(v), np.asarray(a), stand).score for v, a in samples]))


def planner_conditions(planner: VaPlanner | None, data: Sequence[Prepared], flags: InjectionFlags):
    if flags.conditioning == "text_only":
        return [None] * len(data)
    if planner is None:
        return [p.f_gt for p in data]
    with torch.no_grad():
        return [planner(p.layout) for p in data]


def generate(dit: DualDit, data: Sequence[Prepared], conditions, flags: InjectionFlags, steps: int,
             seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Euler samples, one independent noise stream per prompt."""
    out = []
    for i, (p, cond) in enumerate(zip(data, conditions)):
        rng = RngStream(derive_seed(seed, _EVAL_STREAM, 0x5A, i))
        zv, za = euler_sample(dit, p.text_ids, cond, flags, steps, rng, dtype=p.z0_v.dtype)
        out.append((zv.double().numpy(), za.double().numpy()))
    return out


def evaluate(planner: VaPlanner | None, dit: DualDit | None, heldout: Sequence[Sample], flags: InjectionFlags,
             stand: FrozenStandIns, steps: int = 20, seed: int = 0, order: str = "v_then_a",
             stage: int = 3, step: int = 0) -> MetricsRecord:
    """All held-out metrics as one record.

    Without a planner the ground-truth features stand in for planned tokens.
    """
    if not heldout:
        raise EvaluationError("empty held-out set")
    start = time.perf_counter()
    data = [prepare(s, stand.geom, order) for s in heldout]
    rec = MetricsRecord(step=step, stage=stage)
    if planner is not None:
        rec.plan_mse = heldout_plan_mse(planner, data)
    if dit is not None:
        conds = planner_conditions(planner, data, flags)
        rec.fm_val = heldout_fm_val(dit, data, conds, flags, seed)
        gen = generate(dit, data, conds, flags, steps, seed)
        rec.sync_score = mean_sync(gen, stand)
        rec.event_acc = event_acc(gen, [s.video_text for s in heldout], stand)
    rec.wall_time = time.perf_counter() - start
    return rec


# training ---------------------------------------------------------------------------

Sink = Callable[[MetricsRecord], None] | None


def _emit(records: list, sink: Sink, rec: MetricsRecord) -> None:
    values = [v for v in rec.values().values() if isinstance(v, float)]
    if not all(_finite(v) for v in values):
        raise DivergenceError(rec.step, f"non-finite metric at step {rec.step}")
    records.append(rec)
    if sink is not None:
        sink(rec)


def _snapshot(module: nn.Module) -> dict:
    return copy.deepcopy(module.state_dict())


def _eval_due(step: int, cfg: StageConfig) -> bool:
    return step == 0 or step == cfg.steps or step % cfg.eval_every == 0


def train_stage1(planner: VaPlanner, data: Dataset, cfg: StageConfig, stand: FrozenStandIns | None = None,
                 sink: Sink = None) -> tuple[list[MetricsRecord], AdamW]:
    """Fit the whole planner to the frozen target features with plan loss."""
    if cfg.stage != 1:
        raise ConfigurationError("train_stage1 needs a stage-1 config")
    if not data.train:
        raise ConfigurationError("empty training set")
    geom = planner.geom
    train = [prepare(s, geom, cfg.order) for s in data.train]
    held = [prepare(s, geom, cfg.order) for s in data.heldout]
    frozen = stand.digest() if stand is not None else None
    opt = AdamW(planner.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = RngStream(derive_seed(cfg.seed, _PLANNER_STREAM))
    records: list[MetricsRecord] = []
    start = time.perf_counter()
    good = _snapshot(planner)
    for step in range(cfg.steps + 1):
        batch = _batch(rng, len(train), cfg.batch_size)
        opt.zero_grad()
        loss = sum(plan_loss(planner(train[i].layout), *train[i].f_gt) for i in batch) / len(batch)
        value = loss.item()
        if not _finite(value):
            planner.load_state_dict(good)
            raise DivergenceError(step, f"non-finite plan loss at step {step}")
        if _eval_due(step, cfg):
            rec = MetricsRecord(step=step, stage=1, loss=value,
                                plan_mse=heldout_plan_mse(planner, held) if held else None,
                                wall_time=time.perf_counter() - start)
            _emit(records, sink, rec)
            good = _snapshot(planner)
        if step == cfg.steps:
            break
        loss.backward()
        opt.step()
    if stand is not None and stand.digest() != frozen:
        raise BatonError("frozen stand-ins changed during training")
    return records, opt


def dit_train_step(dit: DualDit, opt: AdamW, batch: Sequence[Prepared], conditions: Sequence[PlannedTokens | None],
                   flags: InjectionFlags, rng: RngStream, step: int = 0, trace: list | None = None,
                   update: bool = True) -> torch.Tensor:
    """One flow-matching step; both denoiser stages go through here.

    With ``trace`` the drawn t, the loss and every gradient are appended so
    two runs can be compared bit for bit.
    """
    opt.zero_grad()
    losses = []
    for p, cond in zip(batch, conditions):
        t = float(rng.uniform(1)[0])
        z1_v = rng_tensor(rng, tuple(p.z0_v.shape), "normal", 1.0, p.z0_v.dtype)
        z1_a = rng_tensor(rng, tuple(p.z0_a.shape), "normal", 1.0, p.z0_a.dtype)
        pv, pa = dit(interpolate(p.z0_v, z1_v, t), interpolate(p.z0_a, z1_a, t), t, p.text_ids, cond, flags)
        losses.append(fm_loss(pv, pa, (p.z0_v, p.z0_a), (z1_v, z1_a)))
        if trace is not None:
            trace.append(("t", t))
    loss = sum(losses) / len(losses)
    if not _finite(loss.item()):
        raise DivergenceError(step, f"non-finite flow-matching loss at step {step}")
    if update:
        loss.backward()
        if trace is not None:
            trace.append(("loss", loss.detach().clone()))
            trace.extend((name, p.grad.detach().clone()) for name, p in dit.named_parameters() if p.grad is not None)
        opt.step()
    return loss.detach()


def _train_dit(dit: DualDit, data: Dataset, cfg: StageConfig, condition: Callable[[int, Prepared, bool], object],
               stand: FrozenStandIns | None, sink: Sink, trace: list | None) -> tuple[list[MetricsRecord], AdamW]:
    if not data.train:
        raise ConfigurationError("empty training set")
    geom = stand.geom if stand is not None else None
    grid_geom = geom or PlanGeometry()
    train = [prepare(s, grid_geom, cfg.order) for s in data.train]
    held = [prepare(s, grid_geom, cfg.order) for s in data.heldout]
    held_conds = [condition(i, p, True) for i, p in enumerate(held)]
    frozen = stand.digest() if stand is not None else None
    opt = AdamW(dit.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = RngStream(derive_seed(cfg.seed, _DIT_STREAM))
    records: list[MetricsRecord] = []
    start = time.perf_counter()
    good = _snapshot(dit)
    for step in range(cfg.steps + 1):
        batch = _batch(rng, len(train), cfg.batch_size)
        conds = [condition(i, train[i], False) for i in batch]
        last = step == cfg.steps
        try:
            loss = dit_train_step(dit, opt, [train[i] for i in batch], conds, cfg.flags, rng, step,
                                  trace, update=not last)
        except DivergenceError:
            dit.load_state_dict(good)
            raise
        if _eval_due(step, cfg):
            rec = MetricsRecord(step=step, stage=cfg.stage, loss=loss.item(),
                                fm_val=heldout_fm_val(dit, held, held_conds, cfg.flags, cfg.seed) if held else None,
                                wall_time=time.perf_counter() - start)
            _emit(records, sink, rec)
            good = _snapshot(dit)
    if stand is not None and stand.digest() != frozen:
        raise BatonError("frozen stand-ins changed during training")
    return records, opt


def train_stage2(dit: DualDit, data: Dataset, cfg: StageConfig, stand: FrozenStandIns | None = None,
                 sink: Sink = None, trace: list | None = None) -> tuple[list[MetricsRecord], AdamW]:
    """Fit the denoiser with ground-truth features as planned tokens; no planner involved."""
    if cfg.stage != 2:
        raise ConfigurationError("train_stage2 needs a stage-2 config")
    text_only = cfg.flags.conditioning == "text_only"

    def condition(_i, p: Prepared, _held):
        return None if text_only else p.f_gt

    return _train_dit(dit, data, cfg, condition, stand, sink, trace)


def train_stage3(planner: VaPlanner, dit: DualDit, data: Dataset, cfg: StageConfig,
                 stand: FrozenStandIns | None = None, sink: Sink = None,
                 trace: list | None = None) -> tuple[list[MetricsRecord], AdamW]:
    """Fit the denoiser on the frozen planner's predictions."""
    if cfg.stage != 3:
        raise ConfigurationError("train_stage3 needs a stage-3 config")
    before = param_digest(planner)
    flags_grad = [p.requires_grad for p in planner.parameters()]
    for p in planner.parameters():
        p.requires_grad_(False)
    text_only = cfg.flags.conditioning == "text_only"
    cache: dict[tuple[bool, int], PlannedTokens] = {}

    def condition(i, p: Prepared, held):
        if text_only:
            return None
        key = (held, i)
        if key not in cache:
            with torch.no_grad():
                pred = planner(p.layout)
            cache[key] = PlannedTokens(pred.video.to(p.z0_v.dtype), pred.audio.to(p.z0_v.dtype))
        return cache[key]

    try:
        out = _train_dit(dit, data, cfg, condition, stand, sink, trace)
    finally:
        for p, g in zip(planner.parameters(), flags_grad):
            p.requires_grad_(g)
    if param_digest(planner) != before:
        raise BatonError("planner parameters changed during stage 3")
    return out


# checkpoints ---------------------------------------------------------------------------


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {k[len("param."):]: v for k, v in self.tensors.items() if k.startswith("param.")}


def checkpoint_bytes(module: nn.Module, kind: str, config: dict, stage: int, step: int,
                     opt: AdamW | None = None, resolved: dict | None = None) -> bytes:
    """``config`` is hashed for compatibility checks; ``resolved`` is stored as-is for reloading."""
    entries: dict[str, object] = {f"param.{n}": p.detach() for n, p in module.named_parameters()}
    if opt is not None:
        entries.update(opt.named_state())
    meta = {"format": FORMAT_VERSION, "kind": kind, "config": config, "config_hash": config_hash(config),
            "stage": stage, "step": step}
    if resolved is not None:
        meta["resolved"] = resolved
    entries[META_ENTRY] = text_to_i64(json.dumps(meta, sort_keys=True))
    return encode(entries)


def checkpoint_save(path: str | Path, module: nn.Module, kind: str, config: dict, stage: int, step: int,
                    opt: AdamW | None = None, resolved: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(module, kind, config, stage, step, opt, resolved))


def read_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    tensors = decode(path.read_bytes(), source=str(path))
    if META_ENTRY not in tensors:
        raise FormatError(f"{path}: no {META_ENTRY} entry")
    try:
        meta = json.loads(i64_to_text(tensors.pop(META_ENTRY)))
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"{path}: unreadable metadata ({exc})") from None
    if meta.get("format") != FORMAT_VERSION:
        raise IncompatibleCheckpointError(f"{path}: format version {meta.get('format')} != {FORMAT_VERSION}")
    return Checkpoint(meta, tensors)


def checkpoint_load(path: str | Path, module: nn.Module | None = None, config: dict | None = None,
                    opt: AdamW | None = None, kind: str | None = None) -> Checkpoint:
    """Read a checkpoint and, if ``module`` is given, copy its parameters in.

    Parameter names must match exactly; a given ``config`` must hash to the
    stored value.
    """
    ckpt = read_checkpoint(path)
    if module is not None:
        want = {n for n, _ in module.named_parameters()}
        have = set(ckpt.params)
        if want != have:
            missing, extra = sorted(want - have), sorted(have - want)
            raise IncompatibleCheckpointError(
                f"{path}: parameter names differ; missing {missing[:8]}{'...' if len(missing) > 8 else ''} "
                f"({len(missing)}), unexpected {extra[:8]}{'...' if len(extra) > 8 else ''} ({len(extra)})"
            )
    if kind is not None and ckpt.meta.get("kind") != kind:
        raise IncompatibleCheckpointError(f"{path}: holds a {ckpt.meta.get('kind')} checkpoint, expected {kind}")
    if config is not None and ckpt.meta.get("config_hash") != config_hash(config):
        raise IncompatibleCheckpointError(f"{path}: config hash {ckpt.meta.get('config_hash')} does not match")
    if module is not None:
        with torch.no_grad():
            for n, p in module.named_parameters():
                src = ckpt.params[n]
                if tuple(src.shape) != tuple(p.shape):
                    raise IncompatibleCheckpointError(f"{path}: {n} has shape {src.shape}, expected {tuple(p.shape)}")
                p.copy_(torch.from_numpy(src).to(p.dtype))
    if opt is not None:
        opt.load_named_state({k: torch.from_numpy(v) for k, v in ckpt.tensors.items() if k.startswith("opt.")})
    return ckpt


def iter_records(records: Iterable[MetricsRecord]) -> Iterable[str]:
    return (r.to_json() for r in records)
