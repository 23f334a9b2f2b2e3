"""Acceptance suite.

Run with ``pytest tests/test_acceptance.py``; the terminal summary lists one
PASS/FAIL line per criterion.  Criteria 8 and 9 train the full default
curriculum once per session (about 12 minutes on one core).
"""

import io
import json
import time

import numpy as np
import pytest
import torch

from baton.cli import EXIT_OK, main
from baton.config import Config
from baton.container import encode, read_container
from baton.curriculum import checkpoint_load, prepare
from baton.dit import DualDit, euler_sample
from baton.numerics import RngStream, derive_seed
from baton.planner import VaPlanner
from baton.prompt import format_prompt_line
from baton.synth_data import dataset_read, dataset_write, generate_samples, sync_score
from baton.verify import CHECKS

ROPE_ORACLE_TOL = 1e-12
SHIFT_TOL = 1e-9
ROUNDING_TOL = 1e-12
PERMUTATION_MIN = 1e-3
GRAD_TOL = 1e-4
EULER_TOL = 1e-10
PLAN_FRACTION = 0.5
FM_FRACTION = 0.7
GT_SYNC_MIN = 0.95
MISMATCH_MAX = 0.3
MIN_HELDOUT = 20
CURRICULUM_BUDGET_S = 30 * 60


def run_check(name):
    passed, details = CHECKS[name]()
    return passed, details


def timed(names):
    start = time.perf_counter()
    results = {n: run_check(n) for n in names}
    return results, time.perf_counter() - start


def cli(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out=out)
    assert code == EXIT_OK, f"baton {' '.join(map(str, argv))} exited {code}"
    return out.getvalue()


def report_records(path):
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    return [r for r in lines if "step" in r]


# ---------------------------------------------------------------------------------------------
# property and oracle criteria


@pytest.mark.criterion(1, "RoPE oracle agreement")
def test_rope_oracle_agreement(record_property):
    results, seconds = timed(["rope.oracle", "rope.table", "rope.relative_shift"])
    oracle = results["rope.oracle"][1]
    record_property("oracle_err", f"{oracle['max_abs_err']:.2e}")
    record_property("trials", oracle["trials"])
    record_property("shift_err", f"{results['rope.relative_shift'][1]['max_abs_err']:.2e}")
    record_property("seconds", round(seconds, 2))
    assert oracle["trials"] >= 100
    assert oracle["max_abs_err"] <= ROPE_ORACLE_TOL
    assert results["rope.table"][1]["max_abs_err"] <= ROPE_ORACLE_TOL
    assert results["rope.relative_shift"][1]["max_abs_err"] <= SHIFT_TOL
    assert seconds < 10


@pytest.mark.criterion(2, "RS-RoPE grid correctness")
def test_rs_rope_grid(record_property):
    _, details = run_check("rope.grid_map")
    record_property("j_111", details["j_111"])
    assert details["j_111"] == [2.0, 4.0, 4.0]
    assert details["equal_grids_integer"]
    assert details["audio_map"]


@pytest.mark.criterion(3, "structured-plan preservation")
def test_plan_permutation(record_property):
    none = run_check("dit.permutation_none")[1]["max_abs_diff"]
    temporal = run_check("dit.permutation_temporal")[1]["max_abs_diff"]
    rs3d = run_check("dit.permutation_rs3d")[1]["max_abs_diff"]
    record_property("none", f"{none:.1e}")
    record_property("temporal", f"{temporal:.3f}")
    record_property("rs3d", f"{rs3d:.3f}")
    # permuting keys reorders the softmax sums, so invariance holds to rounding
    assert none <= ROUNDING_TOL
    assert temporal > PERMUTATION_MIN and rs3d > PERMUTATION_MIN


@pytest.mark.criterion(4, "causality and tower contracts")
def test_causality_and_towers(record_property):
    prefix = run_check("planner.causality")[1]["prefix_max_abs_diff"]
    blind = run_check("planner.tower_blindness")[1]["video_plan_change_from_audio"]
    sensitive = run_check("planner.tower_sensitivity")[1]["video_plan_change_from_audio"]
    record_property("prefix_diff", prefix)
    record_property("towers_off", blind)
    record_property("towers_on", f"{sensitive:.3e}")
    assert prefix == 0.0
    assert blind == 0.0
    assert sensitive > 0.0


@pytest.mark.criterion(5, "timestamp formulas")
def test_timestamps(record_property):
    _, details = run_check("planner.timestamps")
    record_property("m1_j10_na40", details["m1_j10_na40"])
    record_property("shift_err", f"{details['shift_err']:.1e}")
    assert details["video_formula"] and details["audio_formula"]
    assert details["m1_j10_na40"] == 1.25
    assert details["shift_err"] <= SHIFT_TOL


@pytest.mark.criterion(6, "gradient suite")
def test_gradients(record_property):
    results, seconds = timed(["grad.planner", "grad.dit"])
    planner_err = results["grad.planner"][1]["max_rel_err"]
    dit_err = results["grad.dit"][1]["max_rel_err"]
    record_property("planner", f"{planner_err:.1e}")
    record_property("dit", f"{dit_err:.1e}")
    record_property("seconds", round(seconds, 1))
    assert planner_err < GRAD_TOL and dit_err < GRAD_TOL
    assert seconds < 120


@pytest.mark.criterion(7, "flow-matching exactness")
def test_flow_matching(record_property):
    zero = run_check("loss.zero_cases")[1]
    euler = run_check("euler.constant_field")[1]
    record_property("euler_err", f"{euler['max_abs_err']:.1e}")
    assert zero["interpolate_endpoints"]
    assert zero["fm_loss"] == 0.0 and zero["plan_loss"] == 0.0
    assert euler["max_abs_err"] <= EULER_TOL


# ---------------------------------------------------------------------------------------------
# trained pipeline


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    data = root / "data"
    start = time.perf_counter()
    cli("gen-data", "--out", data)
    cli("train", "--stage", 1, "--data", data, "--ckpt-out", root / "planner.btn", "--report", root / "s1.jsonl")
    runs = {}
    for name, overrides in (("planned", []), ("text_only", ["dit.conditioning=text_only"]),
                            ("rope_none", ["dit.rope_mode=none"])):
        sets = [x for o in overrides for x in ("--set", o)]
        cli("train", "--stage", 2, *sets, "--data", data, "--ckpt-out", root / f"{name}_s2.btn",
            "--report", root / f"{name}_s2.jsonl")
        cli("train", "--stage", 3, *sets, "--data", data, "--ckpt-in", root / "planner.btn",
            "--ckpt-in", root / f"{name}_s2.btn", "--ckpt-out", root / f"{name}.btn",
            "--report", root / f"{name}_s3.jsonl")
        if name == "planned":
            heldout = dataset_read(data / "heldout")
            prompts = root / "prompts.txt"
            prompts.write_text("".join(format_prompt_line(s.video_text, s.audio_text) + "\n" for s in heldout))
            sampled = cli("sample", "--ckpt-planner", root / "planner.btn", "--ckpt-dit", root / "planned.btn",
                          "--prompt-file", prompts, "--out", root / "samples")
            curriculum_seconds = time.perf_counter() - start
        out = cli("eval", "--ckpt-planner", root / "planner.btn", "--ckpt-dit", root / f"{name}.btn",
                  "--data", data, "--report", root / f"{name}_eval.jsonl")
        runs[name] = json.loads(out.strip().splitlines()[-1])
    return {
        "root": root,
        "heldout": heldout,
        "seconds": curriculum_seconds,
        "samples": [json.loads(x) for x in sampled.splitlines()],
        "eval": runs,
    }


@pytest.mark.criterion(8, "curriculum smoke")
def test_curriculum_smoke(pipeline, record_property):
    root = pipeline["root"]
    s1 = [r["plan_mse"] for r in report_records(root / "s1.jsonl")]
    s2 = [r["fm_val"] for r in report_records(root / "planned_s2.jsonl")]
    s3 = [r["fm_val"] for r in report_records(root / "planned_s3.jsonl")]
    record_property("plan_mse", f"{s1[0]:.4f}->{s1[-1]:.4f}")
    record_property("fm_val_s2", f"{s2[0]:.4f}->{s2[-1]:.4f}")
    record_property("fm_val_s3_final", f"{s3[-1]:.4f}")
    record_property("minutes", round(pipeline["seconds"] / 60, 1))
    assert s1[-1] <= PLAN_FRACTION * s1[0]
    assert s2[-1] <= FM_FRACTION * s2[0]
    assert np.isfinite(s3).all()
    assert pipeline["samples"] and all(s["finite"] for s in pipeline["samples"])
    for s in pipeline["samples"]:
        entries = read_container(s["file"])
        assert np.isfinite(entries["z_v"]).all() and np.isfinite(entries["z_a"]).all()
    assert pipeline["seconds"] < CURRICULUM_BUDGET_S


@pytest.mark.criterion(9, "directional planning benefit")
def test_planning_benefit(pipeline, record_property):
    planned, text_only, rope_none = (pipeline["eval"][k] for k in ("planned", "text_only", "rope_none"))
    heldout = pipeline["heldout"]
    stand = Config().stand_ins()
    gt = [sync_score(s.z0_v, s.z0_a, stand).score for s in heldout]
    shifted = heldout[1:] + heldout[:1]
    mismatched = [sync_score(a.z0_v, b.z0_a, stand).score for a, b in zip(heldout, shifted)]
    record_property("sync", f"planned {planned['sync_score']:.4f} vs text_only {text_only['sync_score']:.4f}")
    record_property("event_acc", f"planned {planned['event_acc']:.4f} vs text_only {text_only['event_acc']:.4f}")
    record_property("gt_sync_min", f"{min(gt):.3f}")
    record_property("mismatched_mean", f"{np.mean(mismatched):.3f}")
    record_property("rope", f"rs3d {planned['sync_score']:.4f} vs none {rope_none['sync_score']:.4f}"
                            f" ({'rs3d >= none' if planned['sync_score'] >= rope_none['sync_score'] else 'rs3d < none'})")
    assert len(heldout) >= MIN_HELDOUT
    assert min(gt) >= GT_SYNC_MIN
    assert abs(np.mean(mismatched)) < MISMATCH_MAX
    assert planned["sync_score"] > text_only["sync_score"]
    assert planned["event_acc"] >= text_only["event_acc"]


@pytest.mark.report("Euler self-convergence, error ratio per step halving")
def test_report_euler_self_convergence(pipeline, record_property):
    cfg = Config()
    planner = VaPlanner(cfg.planner_config(), cfg.geom(), cfg.planner_flags())
    checkpoint_load(pipeline["root"] / "planner.btn", planner, config=cfg.arch("planner"), kind="planner")
    dit = DualDit(cfg.dit_config(), cfg.grid())
    checkpoint_load(pipeline["root"] / "planned.btn", dit, config=cfg.arch("dit"), kind="dit")
    flags = cfg.injection_flags()
    ratios = []
    for i, sample in enumerate(pipeline["heldout"][:2]):
        p = prepare(sample, cfg.geom())
        with torch.no_grad():
            planned = planner(p.layout)
            run = lambda n: euler_sample(dit, p.text_ids, planned, flags, n, RngStream(derive_seed(9, i)),
                                         dtype=torch.float32)
            ref = run(320)
            errs = [max(float((a - b).abs().max()) for a, b in zip(run(n), ref)) for n in (5, 10, 20, 40)]
        ratios.append([round(a / b, 2) for a, b in zip(errs, errs[1:])])
    record_property("ratios", ratios)


# ---------------------------------------------------------------------------------------------
# persistence


def _short_curriculum(root):
    sets = []
    for o in ("data.train=6", "data.heldout=2", "train.steps1=6", "train.steps2=6", "train.steps3=6",
              "train.eval_every=3"):
        sets += ["--set", o]
    cli("gen-data", *sets, "--out", root / "data")
    cli("train", "--stage", 1, *sets, "--data", root / "data", "--ckpt-out", root / "p.btn",
        "--report", root / "s1.jsonl")
    cli("train", "--stage", 2, *sets, "--data", root / "data", "--ckpt-out", root / "d2.btn",
        "--report", root / "s2.jsonl")
    cli("train", "--stage", 3, *sets, "--data", root / "data", "--ckpt-in", root / "p.btn", "--ckpt-in",
        root / "d2.btn", "--ckpt-out", root / "d3.btn", "--report", root / "s3.jsonl")
    records = []
    for stage in (1, 2, 3):
        for r in report_records(root / f"s{stage}.jsonl"):
            r.pop("wall_time")
            records.append(r)
    return records


@pytest.mark.criterion(10, "persistence")
def test_persistence(tmp_path, record_property):
    container = run_check("container.roundtrip")
    checkpoint = run_check("checkpoint.roundtrip")
    assert container[0] and checkpoint[0]

    stand = Config().stand_ins()
    serial = generate_samples(0, range(12), stand, threads=1)
    parallel = generate_samples(0, range(12), stand, threads=4)
    dataset_write(tmp_path / "serial", serial)
    dataset_write(tmp_path / "parallel", parallel)
    files = sorted(p.name for p in (tmp_path / "serial").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "parallel").iterdir())
    assert all((tmp_path / "serial" / f).read_bytes() == (tmp_path / "parallel" / f).read_bytes() for f in files)

    first = _short_curriculum(tmp_path / "a")
    second = _short_curriculum(tmp_path / "b")
    assert first == second
    for name in ("p.btn", "d2.btn", "d3.btn"):
        a, b = (tmp_path / "a" / name).read_bytes(), (tmp_path / "b" / name).read_bytes()
        assert a == b
        assert encode(read_container(tmp_path / "a" / name)) == a
    record_property("records_compared", len(first))
    record_property("dataset_files", len(files))
