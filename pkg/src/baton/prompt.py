"""Token vocabulary, plan geometry and prompt assembly with pad regions."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AssemblyError, LayoutError, VocabError

MOTIONS = ("EV_LEFT", "EV_RIGHT", "EV_UP", "EV_DOWN", "EV_HOLD")
TONES = ("TONE_RISE", "TONE_FALL", "TONE_STEADY")
MAX_DURATION_UNITS = 6
DURATIONS = tuple(f"DUR_{k}" for k in range(1, MAX_DURATION_UNITS + 1))
START_BINS = 4
X_BINS = tuple(f"X{k}" for k in range(START_BINS))
Y_BINS = tuple(f"Y{k}" for k in range(START_BINS))
PITCH_BINS = tuple(f"P{k}" for k in range(START_BINS))

SYS = ("<|im_start|>", "<|sys_plan|>", "<|sys_av|>", "<|im_end|>")
SEG = "<|seg|>"
V_START, V_END, IMG_PAD = "<|v_start|>", "<|v_end|>", "<|img_pad|>"
A_START, A_END, AUD_PAD = "<|a_start|>", "<|a_end|>", "<|aud_pad|>"
SPECIALS = SYS + (SEG, V_START, IMG_PAD, V_END, A_START, AUD_PAD, A_END)

TAG_ORDERS = ("v_then_a", "a_then_v", "interleaved")


class Vocab:
    """Fixed synthetic vocabulary: event-code text tokens followed by specials."""

    def __init__(self):
        self.text_tokens = MOTIONS + TONES + DURATIONS + X_BINS + Y_BINS + PITCH_BINS
        self.names = self.text_tokens + SPECIALS
        self._ids = {n: i for i, n in enumerate(self.names)}
        self.special_ids = {n: self._ids[n] for n in SPECIALS}

    def __len__(self) -> int:
        return len(self.names)

    def id(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise VocabError(f"unknown token {name!r}") from None

    def ids(self, names: Sequence[str]) -> list[int]:
        return [self.id(n) for n in names]

    def name(self, idx: int) -> str:
        if not 0 <= idx < len(self.names):
            raise VocabError(f"token id {idx} out of range")
        return self.names[idx]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.name(int(i)) for i in ids]

    @property
    def sys_tokens(self) -> list[int]:
        return self.ids(SYS)


VOCAB = Vocab()


@dataclass(frozen=True)
class PlanGeometry:
    """Plan sizes: ``duration`` seconds (= audio chunks), keyframes at ``fps``."""

    duration: int = 2
    sem_h: int = 2
    sem_w: int = 2
    n_a: int = 4
    fps: int = 6

    def __post_init__(self):
        if min(self.duration, self.sem_h, self.sem_w, self.n_a, self.fps) <= 0:
            raise AssemblyError(f"plan geometry extents must be positive: {self}")
        # audio tokens are sparser in time than video tokens: per second, not per keyframe
        if self.n_a >= self.fps * self.n_v:
            raise AssemblyError(
                f"audio tokens per second ({self.n_a}) must be fewer than video tokens per second ({self.fps * self.n_v})"
            )

    @property
    def n_keyframes(self) -> int:
        return self.fps * self.duration

    @property
    def n_v(self) -> int:
        return self.sem_h * self.sem_w

    @property
    def video_len(self) -> int:
        return self.n_keyframes * self.n_v

    @property
    def audio_len(self) -> int:
        return self.duration * self.n_a


@dataclass(frozen=True)
class PromptLayout:
    ids: np.ndarray
    video_idx: np.ndarray
    audio_idx: np.ndarray
    order: str
    n_text: int

    @property
    def video_span(self) -> tuple[int, int]:
        return int(self.video_idx[0]), int(self.video_idx[-1]) + 1

    @property
    def audio_span(self) -> tuple[int, int]:
        return int(self.audio_idx[0]), int(self.audio_idx[-1]) + 1

    @property
    def text_ids(self) -> np.ndarray:
        return self.ids[: self.n_text]


def assemble_prompt(
    sys_tokens: Sequence[int],
    video_text: Sequence[int],
    audio_text: Sequence[int],
    geom: PlanGeometry,
    order: str = "v_then_a",
    vocab: Vocab = VOCAB,
) -> PromptLayout:
    """Build ``[sys; video text; audio text; tag blocks]`` and record pad positions."""
    if not len(video_text) or not len(audio_text):
        raise AssemblyError("video and audio texts must be non-empty")
    if order not in TAG_ORDERS:
        raise AssemblyError(f"unknown tag order {order!r}")
    text = list(sys_tokens) + list(video_text) + list(audio_text)
    specials = set(vocab.special_ids.values())
    if any(t in specials for t in list(video_text) + list(audio_text)):
        raise AssemblyError("prompt text contains special tokens")
    if any(not 0 <= t < len(vocab) for t in text):
        raise AssemblyError("prompt token id outside the vocabulary")
    sid = vocab.special_ids
    v_block = [sid[V_START]] + [sid[IMG_PAD]] * geom.video_len + [sid[V_END]]
    a_block = [sid[A_START]] + [sid[AUD_PAD]] * geom.audio_len + [sid[A_END]]
    if order == "v_then_a":
        tags = v_block + a_block
    elif order == "a_then_v":
        tags = a_block + v_block
    else:
        per_sec_v = geom.fps * geom.n_v
        tags = [sid[V_START], sid[A_START]]
        for _ in range(geom.duration):
            tags += [sid[IMG_PAD]] * per_sec_v + [sid[AUD_PAD]] * geom.n_a
        tags += [sid[A_END], sid[V_END]]
    ids = np.asarray(text + tags, dtype=np.int64)
    return PromptLayout(
        ids=ids,
        video_idx=np.flatnonzero(ids == sid[IMG_PAD]),
        audio_idx=np.flatnonzero(ids == sid[AUD_PAD]),
        order=order,
        n_text=len(text),
    )


def pad_spans(layout: PromptLayout, vocab: Vocab = VOCAB) -> tuple[np.ndarray, np.ndarray]:
    """Positions of the image and audio pad tokens, in sequence order."""
    ids = layout.ids
    sid = vocab.special_ids
    where = {}
    for tag in (V_START, V_END, A_START, A_END):
        hits = np.flatnonzero(ids == sid[tag])
        if len(hits) != 1:
            raise LayoutError(f"expected exactly one {tag}, found {len(hits)}")
        where[tag] = int(hits[0])
    vid = np.flatnonzero(ids == sid[IMG_PAD])
    aud = np.flatnonzero(ids == sid[AUD_PAD])
    if not len(vid) or not len(aud):
        raise LayoutError("layout has no pad tokens")
    if not (where[V_START] < vid[0] and vid[-1] < where[V_END]):
        raise LayoutError("image pads fall outside the video delimiters")
    if not (where[A_START] < aud[0] and aud[-1] < where[A_END]):
        raise LayoutError("audio pads fall outside the audio delimiters")
    if layout.order != "interleaved":
        if where[V_END] - where[V_START] - 1 != len(vid) or where[A_END] - where[A_START] - 1 != len(aud):
            raise LayoutError("tag block contains foreign tokens")
    return vid, aud


def split_prompt_line(line: str, vocab: Vocab = VOCAB) -> tuple[list[int], list[int]]:
    """Parse ``video tokens <|seg|> audio tokens`` into id lists."""
    names = line.split()
    if SEG not in names:
        raise AssemblyError(f"prompt line lacks the {SEG} separator")
    cut = names.index(SEG)
    return vocab.ids(names[:cut]), vocab.ids(names[cut + 1 :])


def read_prompt_file(path: str | Path, vocab: Vocab = VOCAB) -> list[tuple[list[int], list[int]]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [split_prompt_line(ln, vocab) for ln in lines if ln.strip()]


def format_prompt_line(video_text: Sequence[int], audio_text: Sequence[int], vocab: Vocab = VOCAB) -> str:
    return " ".join(vocab.decode(video_text) + [SEG] + vocab.decode(audio_text))
