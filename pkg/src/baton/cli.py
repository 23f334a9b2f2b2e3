"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 verification failure, 3 I/O, format
or runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np
import torch

from .config import Config, parse_config
from .container import read_container, write_container
from .curriculum import (
    Dataset,
    MetricsRecord,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    read_checkpoint,
    train_stage1,
    train_stage2,
    train_stage3,
)
from .dit import DualDit, InjectionFlags, euler_sample
from .errors import (
    BatonError,
    DivergenceError,
    FormatError,
    IncompatibleCheckpointError,
    UsageError,
)
from .numerics import RngStream, derive_seed, serial_mode
from .planner import VaPlanner
from .prompt import VOCAB, assemble_prompt, read_prompt_file
from .synth_data import dataset_read, dataset_write, generate_samples, sync_score

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3
HELDOUT_OFFSET = 1_000_000


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="baton", description="Planning-then-synthesis toy pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    with_config(g)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="run one curriculum stage")
    with_config(t)
    t.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--ckpt-in", action="append", default=[], help="input checkpoint (repeatable)")
    t.add_argument("--ckpt-out", required=True)
    t.add_argument("--report")

    s = sub.add_parser("sample", help="generate latents from prompts")
    s.add_argument("--ckpt-planner", required=True)
    s.add_argument("--ckpt-dit", required=True)
    s.add_argument("--prompt-file", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--flags", nargs="*", default=[], metavar="NAME=VALUE",
                   help="rope_mode=, topology=, conditioning=")
    s.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="held-out metrics")
    e.add_argument("--ckpt-planner", required=True)
    e.add_argument("--ckpt-dit", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--flags", nargs="*", default=[], metavar="NAME=VALUE")

    v = sub.add_parser("verify", help="run the property and oracle suite")
    v.add_argument("--filter", default="", help="run checks whose name contains this")

    i = sub.add_parser("inspect-ckpt", help="list container entries")
    i.add_argument("path")
    return p


# helpers ------------------------------------------------------------------------------


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} {p} does not exist")
    return p


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{what} {p} does not exist")
    return p


def _parse_flags(items: Sequence[str], base: InjectionFlags) -> InjectionFlags:
    fields = {"rope_mode": base.rope_mode, "topology": base.topology, "conditioning": base.conditioning}
    for item in items:
        key, _, value = item.partition("=")
        if key not in fields or not value:
            raise UsageError(f"bad flag {item!r}; expected one of {sorted(fields)}=VALUE")
        fields[key] = value
    try:
        return InjectionFlags(**fields)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _config_from_ckpt(path: Path) -> tuple[Config, dict]:
    meta = read_checkpoint(path).meta
    try:
        return Config(meta["resolved"]), meta
    except (KeyError, UsageError) as exc:
        raise IncompatibleCheckpointError(f"{path}: unusable stored config ({exc})") from None


def _load_planner(path: Path, cfg: Config) -> VaPlanner:
    planner = VaPlanner(cfg.planner_config(), cfg.geom(), cfg.planner_flags())
    checkpoint_load(path, planner, config=cfg.arch("planner"), kind="planner")
    return planner


def _load_dit(path: Path, cfg: Config) -> DualDit:
    dit = DualDit(cfg.dit_config(), cfg.grid())
    checkpoint_load(path, dit, config=cfg.arch("dit"), kind="dit")
    return dit


def _read_dataset(root: Path, cfg: Config) -> Dataset:
    manifest = root / "frozen.json"
    if manifest.exists():
        want = json.loads(manifest.read_text(encoding="utf-8")).get("digest")
        if want != cfg.stand_ins().digest():
            raise UsageError(f"{root}: dataset was generated with different frozen stand-ins")
    return Dataset(dataset_read(root / "train", cfg.synth()), dataset_read(root / "heldout", cfg.synth()))


class _Report:
    def __init__(self, path: str | None, out: TextIO):
        self.out = out
        self.fh = open(path, "w", encoding="utf-8") if path else None

    def line(self, text: str) -> None:
        print(text, file=self.out, flush=True)
        if self.fh:
            self.fh.write(text + "\n")
            self.fh.flush()

    def record(self, rec: MetricsRecord) -> None:
        self.line(rec.to_json())

    def close(self) -> None:
        if self.fh:
            self.fh.close()


# subcommands ------------------------------------------------------------------------------


def cmd_gen_data(args, out: TextIO) -> int:
    cfg = parse_config(args.config, args.set)
    stand = cfg.stand_ins()
    root = Path(args.out)
    seed = cfg["data.seed"]
    train = generate_samples(seed, range(cfg["data.train"]), stand)
    held = generate_samples(seed, range(HELDOUT_OFFSET, HELDOUT_OFFSET + cfg["data.heldout"]), stand)
    dataset_write(root / "train", train)
    dataset_write(root / "heldout", held)
    (root / "frozen.json").write_text(json.dumps({"digest": stand.digest(), "config": cfg.as_dict()},
                                                 sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps({"train": len(train), "heldout": len(held), "out": str(root)}), file=out)
    return EXIT_OK


def _stage_model(args, cfg: Config, ckpts: list[Path]):
    """Build the model a stage trains (and the frozen planner for stage 3) before any output."""
    seed = cfg["train.seed"]
    if args.stage == 1:
        model = VaPlanner(cfg.planner_config(), cfg.geom(), cfg.planner_flags())
        return model.init_weights(RngStream(derive_seed(seed, cfg["planner.seed"]))), None
    model = DualDit(cfg.dit_config(), cfg.grid())
    by_kind = {read_checkpoint(p).meta.get("kind"): p for p in ckpts}
    if args.stage == 2 or cfg["train.skip_stage2"]:
        model.init_weights(RngStream(derive_seed(seed, cfg["dit.seed"])))
    elif "dit" in by_kind:
        checkpoint_load(by_kind["dit"], model, config=cfg.arch("dit"), kind="dit")
    else:
        raise UsageError("stage 3 needs a stage-2 DiT --ckpt-in (or train.skip_stage2=true)")
    if args.stage == 2:
        return model, None
    if "planner" not in by_kind:
        raise UsageError("stage 3 needs a stage-1 planner --ckpt-in")
    return model, _load_planner(by_kind["planner"], cfg)


def cmd_train(args, out: TextIO) -> int:
    cfg = parse_config(args.config, args.set)
    data = _read_dataset(_require_dir(args.data, "data dir"), cfg)
    ckpts = [_require_file(p, "checkpoint") for p in args.ckpt_in]
    stage_cfg = cfg.stage_config(args.stage)
    stand = cfg.stand_ins()
    model, planner = _stage_model(args, cfg, ckpts)
    kind = "planner" if args.stage == 1 else "dit"
    report = _Report(args.report, out)
    try:
        report.line(json.dumps({"config": cfg.as_dict()}, sort_keys=True))
        try:
            if args.stage == 1:
                records, opt = train_stage1(model, data, stage_cfg, stand, sink=report.record)
            elif args.stage == 2:
                records, opt = train_stage2(model, data, stage_cfg, stand, sink=report.record)
            else:
                records, opt = train_stage3(planner, model, data, stage_cfg, stand, sink=report.record)
        except DivergenceError as exc:
            # the model was rolled back to its last evaluated state
            _save(args.ckpt_out, model, kind, cfg, args.stage, exc.step)
            print(f"baton: training diverged at step {exc.step}; last good state saved to {args.ckpt_out}",
                  file=sys.stderr)
            return EXIT_IO
        _save(args.ckpt_out, model, kind, cfg, args.stage, records[-1].step if records else 0, opt)
    finally:
        report.close()
    return EXIT_OK


def _save(path, model, kind: str, cfg: Config, stage: int, step: int, opt=None) -> None:
    checkpoint_save(path, model, kind, cfg.arch(kind), stage, step, opt, resolved=cfg.as_dict())


def _models_from_ckpts(planner_path: str, dit_path: str) -> tuple[Config, VaPlanner, DualDit]:
    pp, dp = _require_file(planner_path, "planner checkpoint"), _require_file(dit_path, "DiT checkpoint")
    cfg, _ = _config_from_ckpt(dp)
    pcfg, _ = _config_from_ckpt(pp)
    planner = _load_planner(pp, pcfg)
    dit = _load_dit(dp, cfg)
    planner.eval()
    dit.eval()
    return cfg, planner, dit


def cmd_sample(args, out: TextIO) -> int:
    prompt_path = _require_file(args.prompt_file, "prompt file")
    cfg, planner, dit = _models_from_ckpts(args.ckpt_planner, args.ckpt_dit)
    flags = _parse_flags(args.flags, cfg.injection_flags())
    steps = args.steps if args.steps is not None else cfg["dit.steps"]
    if steps < 1:
        raise UsageError("--steps must be at least 1")
    prompts = read_prompt_file(prompt_path)
    if not prompts:
        raise UsageError(f"{prompt_path}: no prompts")
    stand = cfg.stand_ins()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    geom = cfg.geom()
    for i, (vt, at) in enumerate(prompts):
        layout = assemble_prompt(VOCAB.sys_tokens, vt, at, geom, cfg["prompt.order"])
        with torch.no_grad():
            planned = planner(layout)
        text_ids = np.asarray(list(vt) + list(at), dtype=np.int64)
        rng = RngStream(derive_seed(args.seed, i))
        z_v, z_a = euler_sample(dit, text_ids, planned, flags, steps, rng)
        path = out_dir / f"sample_{i:04d}.btn"
        write_container(path, {"z_v": z_v, "z_a": z_a, "video_text": np.asarray(vt), "audio_text": np.asarray(at)})
        zs = (z_v.double().numpy(), z_a.double().numpy())
        sync = sync_score(*zs, stand)
        print(json.dumps({
            "index": i, "file": str(path), "finite": bool(np.isfinite(zs[0]).all() and np.isfinite(zs[1]).all()),
            "sync_score": sync.score, "degenerate": sync.degenerate,
        }), file=out)
    return EXIT_OK


def cmd_eval(args, out: TextIO) -> int:
    cfg, planner, dit = _models_from_ckpts(args.ckpt_planner, args.ckpt_dit)
    data = _read_dataset(_require_dir(args.data, "data dir"), cfg)
    flags = _parse_flags(args.flags, cfg.injection_flags())
    report = _Report(args.report, out)
    try:
        report.line(json.dumps({"config": cfg.as_dict()}, sort_keys=True))
        rec = evaluate(planner, dit, data.heldout, flags, cfg.stand_ins(), steps=cfg["dit.steps"],
                       seed=cfg["eval.seed"], order=cfg["prompt.order"])
        report.record(rec)
    finally:
        report.close()
    return EXIT_OK


def cmd_verify(args, out: TextIO) -> int:
    from .verify import run_checks

    results = run_checks(args.filter, out)
    if not results:
        raise UsageError(f"no checks match filter {args.filter!r}")
    failed = [r for r in results if not r["passed"]]
    if failed:
        print(f"baton verify: {len(failed)} failed: {', '.join(r['name'] for r in failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_inspect(args, out: TextIO) -> int:
    path = _require_file(args.path, "container")
    entries = read_container(path)
    for name, arr in entries.items():
        if name == "__meta__":
            continue
        print(f"{name}\t{arr.dtype.name}\t{list(arr.shape)}", file=out)
    if "__meta__" in entries:
        from .container import i64_to_text

        print(f"__meta__\t{i64_to_text(entries['__meta__'])}", file=out)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "inspect-ckpt": cmd_inspect,
}


def main(argv: Sequence[str] | None = None, out: TextIO | None = None) -> int:
    out = out or sys.stdout
    serial_mode()
    try:
        args = _build_parser().parse_args(argv)
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"baton: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, IncompatibleCheckpointError, OSError) as exc:
        print(f"baton: {exc}", file=sys.stderr)
        return EXIT_IO
    except BatonError as exc:
        print(f"baton: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
