"""Flat dotted-key configuration and the builders that turn it into model objects."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping

from .curriculum import StageConfig, config_hash
from .dit import DitConfig, InjectionFlags
from .errors import BatonError, UsageError
from .planner import PlannerConfig, PlannerFlags
from .prompt import PlanGeometry
from .rope import GridSpec
from .synth_data import FrozenStandIns, SynthConfig

DEFAULTS: dict[str, object] = {
    "data.seed": 0,
    "data.train": 256,
    "data.heldout": 24,
    "data.frozen_seed": 123,
    "geometry.duration": 2,
    "geometry.fps": 6,
    "geometry.sem_h": 2,
    "geometry.sem_w": 2,
    "geometry.n_a": 4,
    "latent.t": 8,
    "latent.h": 4,
    "latent.w": 4,
    "latent.audio": 16,
    "latent.d": 32,
    "prompt.order": "v_then_a",
    "rope.theta": 10000.0,
    "planner.d_model": 64,
    "planner.blocks": 4,
    "planner.heads": 4,
    "planner.d_s": 16,
    "planner.d_a": 8,
    "planner.tower": True,
    "planner.learnable_query": True,
    "planner.tower_rope": True,
    "planner.tower_residual": False,
    "planner.seed": 1,
    "dit.blocks": 4,
    "dit.heads": 4,
    "dit.text_seed": 7,
    "dit.seed": 2,
    "dit.steps": 20,
    "dit.rope_mode": "rs3d",
    "dit.topology": "cascade",
    "dit.conditioning": "planned",
    "train.lr": 1e-3,
    "train.weight_decay": 0.01,
    "train.batch_size": 1,
    "train.seed": 0,
    "train.eval_every": 250,
    "train.steps1": 2000,
    "train.steps2": 3000,
    "train.steps3": 2000,
    "train.skip_stage2": False,
    "eval.seed": 0,
}

# keys that fix parameter shapes or forward semantics; checkpoints hash these
_PLANNER_ARCH = ("geometry.", "prompt.", "rope.theta", "planner.d_model", "planner.blocks", "planner.heads",
                 "planner.d_s", "planner.d_a", "planner.tower", "planner.learnable_query", "planner.tower_rope",
                 "planner.tower_residual")
_DIT_ARCH = ("geometry.", "latent.", "rope.theta", "planner.d_s", "planner.d_a", "dit.blocks", "dit.heads",
             "dit.text_seed")


def _parse_value(key: str, text: str):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise UsageError(f"cannot parse {text!r} for {key} (expected {type(default).__name__})") from None
    return text


def _assign(values: dict, key: str, raw: str, where: str) -> None:
    key = key.strip()
    if key not in DEFAULTS:
        raise UsageError(f"{where}: unknown config key {key!r}")
    values[key] = _parse_value(key, raw)


class Config(Mapping):
    """Resolved configuration: defaults, then file lines, then overrides (last wins)."""

    def __init__(self, values: Mapping[str, object] | None = None):
        self._values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise UsageError(f"unknown config key {k!r}")
            self._values[k] = v
        try:
            self.geom()
            self.grid()
            self.injection_flags()
            self.planner_config()
            self.dit_config()
        except BatonError as exc:
            raise UsageError(f"invalid configuration: {exc}") from None
        except ValueError as exc:
            raise UsageError(f"invalid configuration: {exc}") from None

    def __getitem__(self, key):
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def as_dict(self) -> dict:
        return dict(self._values)

    def to_json(self) -> str:
        return json.dumps(self._values, sort_keys=True)

    def with_overrides(self, **values) -> "Config":
        merged = self.as_dict()
        merged.update({k.replace("__", "."): v for k, v in values.items()})
        return Config(merged)

    # builders -------------------------------------------------------------------

    def geom(self) -> PlanGeometry:
        v = self._values
        return PlanGeometry(v["geometry.duration"], v["geometry.sem_h"], v["geometry.sem_w"],
                            v["geometry.n_a"], v["geometry.fps"])

    def grid(self) -> GridSpec:
        v, g = self._values, self.geom()
        return GridSpec(v["latent.t"], v["latent.h"], v["latent.w"], g.n_keyframes, g.sem_h, g.sem_w,
                        v["latent.audio"], g.audio_len)

    def synth(self) -> SynthConfig:
        return SynthConfig(latent_d=self._values["latent.d"])

    def stand_ins(self) -> FrozenStandIns:
        v = self._values
        return FrozenStandIns(v["data.frozen_seed"], self.geom(), self.grid(), v["planner.d_s"], v["planner.d_a"],
                              self.synth())

    def planner_config(self) -> PlannerConfig:
        v = self._values
        return PlannerConfig(v["planner.d_model"], v["planner.blocks"], v["planner.heads"], v["planner.d_s"],
                             v["planner.d_a"], v["rope.theta"])

    def planner_flags(self) -> PlannerFlags:
        v = self._values
        return PlannerFlags(v["planner.tower"], v["planner.learnable_query"], v["planner.tower_rope"],
                            v["planner.tower_residual"])

    def dit_config(self) -> DitConfig:
        v = self._values
        return DitConfig(d=v["latent.d"], heads=v["dit.heads"], blocks=v["dit.blocks"], d_s=v["planner.d_s"],
                         d_a=v["planner.d_a"], theta=v["rope.theta"], text_seed=v["dit.text_seed"])

    def injection_flags(self) -> InjectionFlags:
        v = self._values
        return InjectionFlags(v["dit.rope_mode"], v["dit.topology"], v["dit.conditioning"])

    def stage_config(self, stage: int) -> StageConfig:
        v = self._values
        return StageConfig(
            stage=stage, steps=v[f"train.steps{stage}"], lr=v["train.lr"], batch_size=v["train.batch_size"],
            seed=v["train.seed"], weight_decay=v["train.weight_decay"], eval_every=v["train.eval_every"],
            order=v["prompt.order"], flags=self.injection_flags(), skip_stage2=v["train.skip_stage2"] and stage == 3,
        )

    def arch(self, kind: str) -> dict:
        prefixes = _PLANNER_ARCH if kind == "planner" else _DIT_ARCH
        return {k: v for k, v in self._values.items() if any(k == p or (p.endswith(".") and k.startswith(p))
                                                            for p in prefixes)}

    def arch_hash(self, kind: str) -> str:
        return config_hash(self.arch(kind))


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values: dict = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        _assign(values, key, raw, f"{source}:{n}")
    return values


def parse_config(file: str | Path | None = None, overrides: Iterable[str] = ()) -> Config:
    """Defaults, then ``key = value`` lines of ``file``, then ``key=value`` overrides."""
    values: dict = {}
    if file is not None:
        path = Path(file)
        try:
            text = path.read_text(encoding="utf-8")
        except UnicodeDecodeError:
            raise UsageError(f"{path}: config is not UTF-8") from None
        values.update(parse_config_text(text, str(path)))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _assign(values, key, raw, "--set")
    return Config(values)
