"""Property and oracle suite behind ``baton verify``.

Each check returns ``(passed, details)``; :func:`run_checks` times it and
emits one JSON line per check. Everything runs in 64-bit on miniature
configurations and writes only to temporary directories.
"""

from __future__ import annotations

import json
import math
import tempfile
import time
from pathlib import Path
from typing import Callable, TextIO

import numpy as np
import torch

from .container import decode, encode, read_container, write_container
from .curriculum import checkpoint_load, checkpoint_save
from .dit import DitConfig, DualDit, InjectionFlags, euler_integrate, fm_loss, interpolate, vcattn, acattn
from .numerics import AdamW, Mlp, RngStream, attention, grad_check, rng_tensor, seeded_init, serial_mode
from .planner import (
    PlannedTokens,
    PlannerConfig,
    PlannerFlags,
    VaPlanner,
    assign_audio_timestamps,
    assign_video_timestamps,
    plan_loss,
)
from .prompt import VOCAB, PlanGeometry, assemble_prompt
from .rope import (
    GridSpec,
    RopeConfig,
    RotaryTable,
    audio_positions,
    relative_score_oracle,
    rope3d_apply,
    rope_apply,
    rotate_half,
    rotation_matrix_3d,
    semantic_key_positions,
)

F64 = torch.float64
Check = Callable[[], tuple[bool, dict]]
CHECKS: dict[str, Check] = {}


def check(name: str):
    def register(fn: Check) -> Check:
        CHECKS[name] = fn
        return fn

    return register


def _normal(rng: RngStream, *shape: int) -> torch.Tensor:
    return rng_tensor(rng, shape, "normal", 1.0, F64)


def _max_abs(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).abs().max())


# miniature models -----------------------------------------------------------------

MINI_GEOM = PlanGeometry(duration=1, sem_h=1, sem_w=2, n_a=2, fps=2)
MINI_PLANNER = PlannerConfig(d_model=8, blocks=1, heads=2, d_s=3, d_a=2)
MINI_GRID = GridSpec(4, 2, 2, 2, 1, 2, 4, 2)
MINI_DIT = DitConfig(d=12, heads=2, blocks=1, d_s=3, d_a=2)


def mini_planner(flags: PlannerFlags = PlannerFlags(), seed: int = 1) -> VaPlanner:
    return VaPlanner(MINI_PLANNER, MINI_GEOM, flags).init_weights(RngStream(seed)).to(F64)


def mini_layout(rng: RngStream, order: str = "v_then_a"):
    words = [i for i in range(len(VOCAB)) if i not in set(VOCAB.special_ids.values())]
    pick = lambda n: [words[int(j)] for j in rng.integers(0, len(words), n)]
    return assemble_prompt(VOCAB.sys_tokens, pick(3), pick(2), MINI_GEOM, order)


def mini_dit(seed: int = 2) -> DualDit:
    return DualDit(MINI_DIT, MINI_GRID).init_weights(RngStream(seed)).to(F64)


# rope ---------------------------------------------------------------------------


@check("rope.oracle")
def _rope_oracle():
    rng = RngStream(11)
    worst, trials = 0.0, 0
    for _ in range(120):
        d = 2 * int(rng.integers(1, 17))
        theta = float(rng.uniform(1)[0]) * 1e4 + 10.0
        h = _normal(rng, d)
        if trials % 2:
            cfg = RopeConfig(d, theta)
            p = float(rng.normal(1, 50.0)[0])
            fast = rope_apply(h, p, cfg)
        else:
            cfg = RopeConfig.for_3d(d, theta)
            p = tuple(float(x) for x in rng.normal(3, 50.0))
            fast = rope3d_apply(h, torch.tensor(p, dtype=F64), cfg)
        want = rotation_matrix_3d(p, cfg) @ h.numpy()
        worst = max(worst, float(np.abs(fast.numpy() - want).max()))
        trials += 1
    return worst <= 1e-12, {"max_abs_err": worst, "trials": trials, "tol": 1e-12}


@check("rope.table")
def _rope_table():
    rng = RngStream(12)
    cfg = RopeConfig.for_3d(12)
    pos = torch.as_tensor(rng.normal(30, 10.0)).reshape(10, 3)
    h = _normal(rng, 3, 10, 12)
    err3 = _max_abs(RotaryTable(pos, cfg).apply(h), rope3d_apply(h, pos, cfg))
    cfg1 = RopeConfig(12)
    err1 = _max_abs(RotaryTable(pos[:, 0], cfg1).apply(h), rope_apply(h, pos[:, 0], cfg1))
    worst = max(err1, err3)
    return worst <= 1e-12, {"max_abs_err": worst, "tol": 1e-12}


@check("rope.relative_shift")
def _rope_shift():
    rng = RngStream(13)
    worst = 0.0
    for trial in range(100):
        d = 2 * int(rng.integers(1, 13))
        cfg = RopeConfig.for_3d(d) if trial % 2 else RopeConfig(d)
        q, k = _normal(rng, d), _normal(rng, d)
        n = 3 if cfg.axis_split else 1
        pq, pk, s = (torch.as_tensor(rng.normal(n, 20.0)) for _ in range(3))
        if n == 1:
            pq, pk, s = pq[0], pk[0], s[0]
            rot = lambda h, p: rope_apply(h, p, cfg)
        else:
            rot = lambda h, p: rope3d_apply(h, p, cfg)
        base = float(rot(q, pq) @ rot(k, pk))
        shifted = float(rot(q, pq + s) @ rot(k, pk + s))
        oracle = relative_score_oracle(q.numpy(), k.numpy(), pq.tolist() if n == 3 else float(pq),
                                       pk.tolist() if n == 3 else float(pk), cfg)
        worst = max(worst, abs(base - shifted), abs(base - oracle))
    return worst <= 1e-9, {"max_abs_err": worst, "tol": 1e-9}


@check("rope.involution")
def _rope_involution():
    rng = RngStream(14)
    h = _normal(rng, 5, 16)
    half = _max_abs(rotate_half(rotate_half(h)), -h)
    cfg = RopeConfig.for_3d(16)
    p = torch.as_tensor(rng.normal(15, 30.0)).reshape(5, 3)
    inverse = _max_abs(rope3d_apply(rope3d_apply(h, p, cfg), -p, cfg), h)
    zero = _max_abs(rope_apply(h, 0.0, RopeConfig(16)), h)
    passed = half == 0.0 and zero == 0.0 and inverse <= 1e-12
    return passed, {"rotate_half_twice": half, "inverse_err": inverse, "zero_position": zero}


@check("rope.grid_map")
def _rope_grid_map():
    g = GridSpec(8, 8, 8, 4, 2, 2, 16, 8)
    keys = semantic_key_positions(g).reshape(4, 2, 2, 3)
    example = keys[1, 1, 1].tolist()
    g_eq = GridSpec(3, 2, 2, 3, 2, 2, 5, 5)
    eq = semantic_key_positions(g_eq)
    t, h, w = torch.meshgrid(torch.arange(3.0, dtype=F64), torch.arange(2.0, dtype=F64),
                             torch.arange(2.0, dtype=F64), indexing="ij")
    integer = torch.equal(eq, torch.stack((t, h, w), -1).reshape(-1, 3))
    q_a, k_a = audio_positions(g)
    audio_ok = torch.equal(k_a, torch.tensor([k * 16 / 8 for k in range(8)], dtype=F64))
    audio_ok &= torch.equal(q_a, torch.arange(16, dtype=F64))
    passed = example == [2.0, 4.0, 4.0] and integer and audio_ok
    return passed, {"j_111": example, "equal_grids_integer": integer, "audio_map": bool(audio_ok)}


# attention and planner -------------------------------------------------------------


@check("attention.oracle")
def _attention_oracle():
    rng = RngStream(21)
    q, k, v = _normal(rng, 2, 5, 4), _normal(rng, 2, 7, 4), _normal(rng, 2, 7, 3)
    mask = torch.as_tensor(rng.uniform(35) < 0.7).reshape(5, 7)
    mask[:, 0] = True
    fast = attention(q, k, v, mask).numpy()
    qn, kn, vn, mn = q.numpy(), k.numpy(), v.numpy(), mask.numpy()
    worst = 0.0
    for hd in range(2):
        for i in range(5):
            logits = [qn[hd, i] @ kn[hd, j] / 2.0 for j in range(7) if mn[i, j]]
            vals = [vn[hd, j] for j in range(7) if mn[i, j]]
            top = max(logits)
            w = [math.exp(x - top) for x in logits]
            ref = sum(wi * vi for wi, vi in zip(w, vals)) / sum(w)
            worst = max(worst, float(np.abs(fast[hd, i] - ref).max()))
    return worst <= 1e-12, {"max_abs_err": worst, "tol": 1e-12}


@check("planner.causality")
def _causality():
    rng = RngStream(22)
    planner = mini_planner()
    ids = torch.as_tensor(mini_layout(rng).ids)
    worst = 0.0
    with torch.no_grad():
        base = planner.lm(ids)
        for cut in (1, len(ids) // 2, len(ids) - 1):
            changed = ids.clone()
            changed[cut:] = torch.as_tensor(rng.integers(0, len(VOCAB), len(ids) - cut))
            worst = max(worst, _max_abs(planner.lm(changed)[:cut], base[:cut]))
    return worst == 0.0, {"prefix_max_abs_diff": worst}


def _video_plan_sensitivity(flags: PlannerFlags) -> float:
    rng = RngStream(23)
    planner = mini_planner(flags)
    h_v = _normal(rng, MINI_GEOM.video_len, MINI_PLANNER.d_model)
    h_a = _normal(rng, MINI_GEOM.audio_len, MINI_PLANNER.d_model)
    with torch.no_grad():
        base = planner.towers(h_v, h_a).video
        moved = planner.towers(h_v, h_a + _normal(rng, *h_a.shape)).video
    return _max_abs(base, moved)


@check("planner.tower_blindness")
def _tower_blind():
    diff = _video_plan_sensitivity(PlannerFlags(tower=False))
    return diff == 0.0, {"video_plan_change_from_audio": diff}


@check("planner.tower_sensitivity")
def _tower_sensitive():
    diff = _video_plan_sensitivity(PlannerFlags(tower=True))
    return diff > 0.0, {"video_plan_change_from_audio": diff}


@check("planner.timestamps")
def _timestamps():
    g = PlanGeometry(duration=2, sem_h=3, sem_w=3, n_a=40, fps=6)
    tau_v = assign_video_timestamps(g)
    tau_a = assign_audio_timestamps(g)
    v_ok = torch.equal(tau_v, torch.tensor([i * 2 / 12 for i in range(12) for _ in range(9)], dtype=F64))
    a_example = float(tau_a[1 * 40 + 10])
    a_ok = torch.equal(tau_a, torch.tensor([m + j / 40 for m in range(2) for j in range(40)], dtype=F64))
    planner = mini_planner()
    rng = RngStream(24)
    h_v = _normal(rng, MINI_GEOM.video_len, MINI_PLANNER.d_model)
    h_a = _normal(rng, MINI_GEOM.audio_len, MINI_PLANNER.d_model)
    tv, ta = assign_video_timestamps(MINI_GEOM), assign_audio_timestamps(MINI_GEOM)
    with torch.no_grad():
        base = planner.towers(h_v, h_a, tv, ta)
        shifted = planner.towers(h_v, h_a, tv + 7.3, ta + 7.3)
    shift = max(_max_abs(base.video, shifted.video), _max_abs(base.audio, shifted.audio))
    passed = v_ok and a_ok and a_example == 1.25 and shift <= 1e-9
    return passed, {"m1_j10_na40": a_example, "video_formula": v_ok, "audio_formula": a_ok, "shift_err": shift}


# denoiser -------------------------------------------------------------------------


def _permutation_diff(mode: str) -> float:
    rng = RngStream(31)
    grid = GridSpec(4, 4, 4, 4, 2, 2, 8, 4)
    cfg = RopeConfig.for_3d(12)
    z_v, h_v = _normal(rng, grid.n_latent, 24), _normal(rng, grid.plan_len, 24)
    z_a, h_a = _normal(rng, grid.audio_latent, 24), _normal(rng, grid.audio_plan, 24)
    perm_v = torch.as_tensor(rng.permutation(grid.plan_len))
    perm_a = torch.as_tensor(rng.permutation(grid.audio_plan))
    dv = _max_abs(vcattn(z_v, h_v, grid, cfg, mode), vcattn(z_v, h_v[perm_v], grid, cfg, mode))
    da = _max_abs(acattn(z_a, h_a, grid, cfg, mode), acattn(z_a, h_a[perm_a], grid, cfg, mode))
    return dv if mode == "temporal" else max(dv, da)


@check("dit.permutation_none")
def _perm_none():
    # permuting keys reorders the floating-point sums, so exact means rounding level
    diff = _permutation_diff("none")
    return diff <= 1e-12, {"max_abs_diff": diff, "tol": 1e-12}


@check("dit.permutation_temporal")
def _perm_temporal():
    diff = _permutation_diff("temporal")
    return diff > 1e-3, {"max_abs_diff": diff, "min": 1e-3}


@check("dit.permutation_rs3d")
def _perm_rs3d():
    diff = _permutation_diff("rs3d")
    return diff > 1e-3, {"max_abs_diff": diff, "min": 1e-3}


# losses and sampling ---------------------------------------------------------------


@check("loss.zero_cases")
def _loss_zero():
    rng = RngStream(41)
    tv, ta = _normal(rng, 6, 3), _normal(rng, 4, 2)
    plan_zero = float(plan_loss(PlannedTokens(tv.clone(), ta.clone()), tv, ta))
    z0 = (_normal(rng, 2, 2, 2, 4), _normal(rng, 3, 4))
    z1 = (_normal(rng, 2, 2, 2, 4), _normal(rng, 3, 4))
    fm_zero = float(fm_loss(z1[0] - z0[0], z1[1] - z0[1], z0, z1))
    ends = torch.equal(interpolate(z0[0], z1[0], 0.0), z0[0]) and torch.equal(interpolate(z0[0], z1[0], 1.0), z1[0])
    passed = plan_zero == 0.0 and fm_zero == 0.0 and ends
    return passed, {"plan_loss": plan_zero, "fm_loss": fm_zero, "interpolate_endpoints": ends}


@check("euler.constant_field")
def _euler_constant():
    rng = RngStream(42)
    z0 = (_normal(rng, 2, 2, 2, 4), _normal(rng, 3, 4))
    z1 = (_normal(rng, 2, 2, 2, 4), _normal(rng, 3, 4))
    vel = (z1[0] - z0[0], z1[1] - z0[1])
    worst = 0.0
    for steps in (1, 2, 3, 7, 20, 64):
        zv, za = euler_integrate(lambda a, b, t: vel, z1[0], z1[1], steps)
        worst = max(worst, _max_abs(zv, z0[0]), _max_abs(za, z0[1]))
    return worst <= 1e-10, {"max_abs_err": worst, "tol": 1e-10}


# gradients ---------------------------------------------------------------------------


def _grad_result(err: float):
    return err < 1e-4, {"max_rel_err": err, "tol": 1e-4}


@check("grad.mlp")
def _grad_mlp():
    rng = RngStream(51)
    m = Mlp((4, 6, 3)).to(F64)
    seeded_init(m, rng)
    x, y = _normal(rng, 5, 4), _normal(rng, 5, 3)
    return _grad_result(grad_check(lambda: ((m(x) - y) ** 2).sum(), list(m.parameters())))


@check("grad.planner")
def _grad_planner():
    rng = RngStream(52)
    layout = mini_layout(rng)
    tv = _normal(rng, MINI_GEOM.video_len, MINI_PLANNER.d_s)
    ta = _normal(rng, MINI_GEOM.audio_len, MINI_PLANNER.d_a)
    worst = 0.0
    for flags, probes in ((PlannerFlags(), 12), (PlannerFlags(tower=False, learnable_query=False), 4)):
        planner = mini_planner(flags)
        worst = max(worst, grad_check(lambda: plan_loss(planner(layout), tv, ta), list(planner.parameters()),
                                      eps=1e-3, max_per_tensor=probes, rng=rng, richardson=True))
    return _grad_result(worst)


@check("grad.dit")
def _grad_dit():
    rng = RngStream(53)
    dit = mini_dit()
    g, d = MINI_GRID, MINI_DIT.d
    z0 = (_normal(rng, g.latent_t, g.latent_h, g.latent_w, d), _normal(rng, g.audio_latent, d))
    z1 = (_normal(rng, *z0[0].shape), _normal(rng, *z0[1].shape))
    planned = PlannedTokens(_normal(rng, g.plan_len, MINI_DIT.d_s), _normal(rng, g.audio_plan, MINI_DIT.d_a))
    text = [5, 9, 11, 5]
    t = 0.37
    zt = (interpolate(z0[0], z1[0], t), interpolate(z0[1], z1[1], t))
    worst = 0.0
    variants = (("cascade", "planned", 6), ("concat", "planned", 4), ("parallel", "text_only", 2))
    for topology, conditioning, probes in variants:
        flags = InjectionFlags(topology=topology, conditioning=conditioning)

        def loss():
            return fm_loss(*dit(zt[0], zt[1], t, text, planned, flags), z0, z1)

        worst = max(worst, grad_check(loss, list(dit.parameters()), eps=1e-3, max_per_tensor=probes, rng=rng,
                                          richardson=True))
    return _grad_result(worst)


# persistence ---------------------------------------------------------------------------


@check("container.roundtrip")
def _container_roundtrip():
    rng = RngStream(61)
    entries = {
        "a": rng.normal(7).astype("<f4").reshape(7),
        "b.c": rng.normal(6).reshape(2, 3),
        "ids": np.arange(5, dtype=np.int64),
        "scalar": np.float64(math.pi),
        "empty": np.zeros((0, 3)),
    }
    blob = encode(entries)
    back = decode(blob)
    same = list(back) == list(entries) and all(
        back[k].dtype == np.asarray(v).dtype and back[k].tobytes() == np.asarray(v).tobytes() for k, v in entries.items()
    )
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "c.btn"
        write_container(path, entries)
        file_same = path.read_bytes() == blob and encode(read_container(path)) == blob
    return same and file_same, {"bytes": len(blob), "memory": same, "file": file_same}


@check("checkpoint.roundtrip")
def _checkpoint_roundtrip():
    planner = mini_planner()
    opt = AdamW(planner.named_parameters(), lr=1e-3)
    layout = mini_layout(RngStream(62))
    rng = RngStream(63)
    tv = _normal(rng, MINI_GEOM.video_len, MINI_PLANNER.d_s)
    ta = _normal(rng, MINI_GEOM.audio_len, MINI_PLANNER.d_a)
    plan_loss(planner(layout), tv, ta).backward()
    opt.step()
    config = {"mini": True}
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "p.btn"
        checkpoint_save(path, planner, "planner", config, 1, 1, opt)
        other = mini_planner(seed=99)
        opt2 = AdamW(other.named_parameters(), lr=1e-3)
        checkpoint_load(path, other, config=config, opt=opt2, kind="planner")
        second = Path(tmp) / "q.btn"
        checkpoint_save(second, other, "planner", config, 1, 1, opt2)
        same_bytes = path.read_bytes() == second.read_bytes()
    params = all(torch.equal(a, b) for a, b in zip(planner.parameters(), other.parameters()))
    state = all(torch.equal(v, opt2.named_state()[k]) for k, v in opt.named_state().items())
    return params and state and same_bytes, {"params": params, "optimizer": state, "resave_identical": same_bytes}


def run_checks(name_filter: str = "", out: TextIO | None = None) -> list[dict]:
    """Run every check whose name contains ``name_filter``; one JSON line each to ``out``."""
    serial_mode()
    results = []
    for name, fn in CHECKS.items():
        if name_filter not in name:
            continue
        start = time.perf_counter()
        try:
            passed, details = fn()
        except Exception as exc:  # a crashing check is a failing check
            passed, details = False, {"error": f"{type(exc).__name__}: {exc}"}
        rec = {"name": name, "passed": bool(passed), "seconds": round(time.perf_counter() - start, 3)}
        rec.update(details)
        results.append(rec)
        if out is not None:
            print(json.dumps(rec, default=_jsonable), file=out, flush=True)
    return results


def _jsonable(x):
    if isinstance(x, (np.bool_, torch.Tensor, np.generic)):
        return x.item()
    return str(x)
