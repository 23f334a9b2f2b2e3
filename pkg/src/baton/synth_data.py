"""Procedural paired scenes and the frozen stand-ins for encoders and VAEs.

A scene is a small square moving over a monochrome frame according to an
event script, paired with a sine tone whose frequency tracks the square's
horizontal centroid: ``f(t) = f0 + alpha * x(t)``.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import prompt as P
from .container import read_container, write_container
from .errors import EncodingError, FormatError, PatchingError, WindowingError
from .numerics import RngStream, derive_seed
from .prompt import VOCAB, PlanGeometry
from .rope import GridSpec

CODES = ("left", "right", "up", "down", "hold")
_VELOCITY = {"left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1), "hold": (0, 0)}
_TONE = {"left": "TONE_FALL", "right": "TONE_RISE", "up": "TONE_STEADY", "down": "TONE_STEADY", "hold": "TONE_STEADY"}


@dataclass(frozen=True)
class SynthConfig:
    frame: int = 16
    square: int = 4
    audio_rate: int = 800
    f0: float = 16.0
    alpha: float = 32.0
    speed: float = 0.3  # frame widths per second
    phase0: float = 0.25 * np.pi
    audio_pool: int = 4  # decoded waveform rate divisor
    latent_d: int = 32
    basis_order: int = 3
    bank_size: int = 16
    bank_fmin: float = 8.0
    bank_fmax: float = 56.0
    feature_gain: float = 3.0
    unit_s: float = 0.5  # event durations are multiples of this
    min_events: int = 2
    max_events: int = 4

    @property
    def lo(self) -> float:
        return self.square / 2 / self.frame

    @property
    def hi(self) -> float:
        return 1.0 - self.lo


@dataclass(frozen=True)
class SceneSpec:
    duration: int
    events: tuple[tuple[float, float, str], ...]
    start: tuple[float, float]
    f0: float
    alpha: float
    speed: float

    def position(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Square centroid (x, y) in frame-width units at times ``t``."""
        t = np.asarray(t, dtype=np.float64)
        x = np.full(t.shape, self.start[0])
        y = np.full(t.shape, self.start[1])
        for s, e, code in self.events:
            vx, vy = _VELOCITY[code]
            dt = np.clip(t, s, e) - s
            x = x + vx * self.speed * dt
            y = y + vy * self.speed * dt
        return x, y

    def frequency(self, t) -> np.ndarray:
        return self.f0 + self.alpha * self.position(t)[0]

    @property
    def codes(self) -> list[str]:
        return [c for _, _, c in self.events]

    def to_json(self) -> dict:
        return {
            "duration": self.duration,
            "start": list(self.start),
            "events": [[s, e, c] for s, e, c in self.events],
        }

    @classmethod
    def from_json(cls, obj: dict, cfg: SynthConfig = SynthConfig()) -> "SceneSpec":
        return cls(
            duration=int(obj["duration"]),
            events=tuple((float(s), float(e), str(c)) for s, e, c in obj["events"]),
            start=(float(obj["start"][0]), float(obj["start"][1])),
            f0=cfg.f0,
            alpha=cfg.alpha,
            speed=cfg.speed,
        )


@dataclass
class RawSample:
    video: np.ndarray  # (N, P, P) in [0, 1]
    audio: np.ndarray  # (M, rate)


def sample_script(rng: RngStream, geom: PlanGeometry, cfg: SynthConfig) -> list[tuple[int, str]]:
    """Event list as (duration in units, code); no repeated neighbours, at least one horizontal move."""
    units = int(round(geom.duration / cfg.unit_s))
    max_n = min(cfg.max_events, units)
    while True:
        n = rng.integers(cfg.min_events, max_n + 1)
        cuts = np.sort(rng.permutation(units - 1)[: n - 1] + 1)
        lengths = np.diff(np.concatenate(([0], cuts, [units])))
        if lengths.max() > P.MAX_DURATION_UNITS:
            continue
        codes = [CODES[rng.integers(0, 5)]]
        for _ in range(n - 1):
            others = [c for c in CODES if c != codes[-1]]
            codes.append(others[rng.integers(0, 4)])
        if any(c in ("left", "right") for c in codes):
            return [(int(u), c) for u, c in zip(lengths, codes)]


def bin_centre(k: int, cfg: SynthConfig) -> float:
    return cfg.lo + (k + 0.5) * (cfg.hi - cfg.lo) / P.START_BINS


def _timed(script, cfg: SynthConfig) -> tuple[tuple[float, float, str], ...]:
    events, t = [], 0.0
    for units, code in script:
        events.append((t, t + units * cfg.unit_s, code))
        t += units * cfg.unit_s
    return tuple(events)


def feasible_starts(script, geom: PlanGeometry, cfg: SynthConfig) -> tuple[list[float], list[float]]:
    """Start-bin centres per axis that keep the whole path inside the frame."""
    probe = SceneSpec(geom.duration, _timed(script, cfg), (0.0, 0.0), cfg.f0, cfg.alpha, cfg.speed)
    bounds = np.array([0.0] + [e for _, e, _ in probe.events])
    out = []
    for r in probe.position(bounds):
        lo, hi = cfg.lo - r.min(), cfg.hi - r.max()
        out.append([c for c in (bin_centre(k, cfg) for k in range(P.START_BINS)) if lo - 1e-9 <= c <= hi + 1e-9])
    return out[0], out[1]


def script_to_spec(script, start_rng: RngStream | None, geom: PlanGeometry, cfg: SynthConfig,
                   start: tuple[float, float] | None = None) -> SceneSpec | None:
    """Timed scene for ``script``; without ``start`` a feasible bin centre is drawn (None if there is none)."""
    if start is None:
        xs, ys = feasible_starts(script, geom, cfg)
        if not xs or not ys:
            return None
        start = (xs[start_rng.integers(0, len(xs))], ys[start_rng.integers(0, len(ys))])
    return SceneSpec(geom.duration, _timed(script, cfg), (float(start[0]), float(start[1])),
                     cfg.f0, cfg.alpha, cfg.speed)


def _coverage(center_px: float, half: float, n: int) -> np.ndarray:
    edges = np.arange(n + 1, dtype=np.float64)
    lo = np.maximum(edges[:-1], center_px - half)
    hi = np.minimum(edges[1:], center_px + half)
    return np.clip(hi - lo, 0.0, 1.0)


def render(spec: SceneSpec, geom: PlanGeometry, cfg: SynthConfig = SynthConfig()) -> RawSample:
    t_key = np.arange(geom.n_keyframes) / geom.fps
    xs, ys = spec.position(t_key)
    half = cfg.square / 2
    frames = np.stack([
        np.outer(_coverage(y * cfg.frame, half, cfg.frame), _coverage(x * cfg.frame, half, cfg.frame))
        for x, y in zip(xs, ys)
    ])
    n = cfg.audio_rate * geom.duration
    t = np.arange(n) / cfg.audio_rate
    f = spec.frequency(t)
    phase = cfg.phase0 + 2.0 * np.pi * np.concatenate(([0.0], np.cumsum(f[:-1]))) / cfg.audio_rate
    audio = np.sin(phase).reshape(geom.duration, cfg.audio_rate)
    return RawSample(frames, audio)


def generate_scene(rng: RngStream, geom: PlanGeometry, cfg: SynthConfig = SynthConfig()):
    # starts sit on bin centres, so the text pins the scene down exactly
    while True:
        spec = script_to_spec(sample_script(rng, geom, cfg), rng, geom, cfg)
        if spec is not None:
            return spec, render(spec, geom, cfg)


def _bin(v: float, cfg: SynthConfig) -> int:
    b = int((v - cfg.lo) / (cfg.hi - cfg.lo) * P.START_BINS)
    return min(max(b, 0), P.START_BINS - 1)


def scene_to_text(spec: SceneSpec, cfg: SynthConfig = SynthConfig(), vocab=VOCAB) -> tuple[list[int], list[int]]:
    """Video text: start bins, then (motion, duration) per event; audio text: pitch bin, then (tone, duration)."""
    bx, by = _bin(spec.start[0], cfg), _bin(spec.start[1], cfg)
    video = [P.X_BINS[bx], P.Y_BINS[by]]
    audio = [P.PITCH_BINS[bx]]
    for s, e, code in spec.events:
        dur = P.DURATIONS[int(round((e - s) / cfg.unit_s)) - 1]
        video += [f"EV_{code.upper()}", dur]
        audio += [_TONE[code], dur]
    return vocab.ids(video), vocab.ids(audio)


def text_to_script(video_text: Sequence[int], cfg: SynthConfig = SynthConfig(), vocab=VOCAB):
    """Inverse of the video text: list of (start_s, end_s, code)."""
    names = vocab.decode(video_text)
    events, t = [], 0.0
    body = [n for n in names if n.startswith(("EV_", "DUR_"))]
    for code_tok, dur_tok in zip(body[0::2], body[1::2]):
        length = int(dur_tok.split("_")[1]) * cfg.unit_s
        events.append((t, t + length, code_tok[3:].lower()))
        t += length
    return events


def cosine_basis(n: int, order: int) -> np.ndarray:
    """Separable 2D cosines ``cos(pi u y) cos(pi v x)``, u, v < order, over an n x n patch."""
    x = (np.arange(n) + 0.5) / n
    rows = [np.cos(np.pi * k * x) for k in range(order)]
    return np.stack([np.outer(a, b).reshape(-1) for a in rows for b in rows])


def filter_centres(cfg: SynthConfig) -> np.ndarray:
    return np.linspace(cfg.bank_fmin, cfg.bank_fmax, cfg.bank_size)


def tone_magnitudes(wave: np.ndarray, rate: float, centres_s: np.ndarray, span_s: float,
                    freqs: np.ndarray) -> np.ndarray:
    """Hann-windowed tone amplitude at each frequency, one row per window centre.

    A unit sine at one of ``freqs`` reads about 1 there. Windows are clipped
    at the signal edges and renormalised.
    """
    wave = np.asarray(wave, dtype=np.float64)
    half = int(round(span_s * rate / 2))
    offs = np.arange(-half, half)
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * (offs + half + 0.5) / (2 * half))
    out = np.empty((len(centres_s), len(freqs)))
    for i, c in enumerate(centres_s):
        idx = int(round(c * rate)) + offs
        ok = (idx >= 0) & (idx < len(wave))
        w = hann * ok
        t = idx / rate
        phasors = np.exp(-2j * np.pi * np.outer(freqs, t))
        out[i] = 2.0 * np.abs(phasors @ (w * np.where(ok, wave[np.clip(idx, 0, len(wave) - 1)], 0.0))) / w.sum()
    return out


def peak_frequency(mags: np.ndarray, freqs: np.ndarray, reach: int = 2) -> np.ndarray:
    """Per row, the squared-magnitude centroid of ``freqs`` within ``reach`` bins of the peak."""
    mags = np.atleast_2d(mags)
    out = np.empty(len(mags))
    for i, m in enumerate(mags):
        k = int(np.argmax(m))
        lo, hi = max(0, k - reach), min(len(m), k + reach + 1)
        w = np.clip(m[lo:hi], 0.0, None) ** 2
        out[i] = freqs[k] if w.sum() <= 0 else float(w @ freqs[lo:hi] / w.sum())
    return out


class FrozenStandIns:
    """Seeded, never-trained maps standing in for the perceptual encoders and VAEs.

    Video features: low-order cosine moments of each keyframe patch, mixed by a
    seeded matrix and squashed. Audio features: tone magnitudes over a fixed
    filter bank per window, likewise mixed and squashed. Both vary smoothly
    with square position and pitch and ignore the tone's phase.

    Video latents lift pooled cell occupancy along a fixed direction. Audio
    latents lift per-frame filter-bank magnitudes; decoding inverts the lift,
    reads a frequency per frame and resynthesises a sine.
    """

    def __init__(self, seed: int, geom: PlanGeometry, grid: GridSpec, d_s: int, d_a: int,
                 cfg: SynthConfig = SynthConfig()):
        self.seed, self.geom, self.grid, self.cfg = seed, geom, grid, cfg
        rng = RngStream(derive_seed(seed, 0xF0))
        if cfg.frame % geom.sem_h or cfg.frame % geom.sem_w or geom.sem_h != geom.sem_w:
            raise PatchingError(f"frame {cfg.frame} not divisible into square {geom.sem_h}x{geom.sem_w} patches")
        if cfg.audio_rate % geom.n_a:
            raise WindowingError(f"chunk of {cfg.audio_rate} samples not divisible into {geom.n_a} windows")
        if cfg.bank_size > cfg.latent_d:
            raise EncodingError(f"filter bank of {cfg.bank_size} exceeds latent width {cfg.latent_d}")
        self.basis = cosine_basis(cfg.frame // geom.sem_w, cfg.basis_order)
        n_basis, n_bank = self.basis.shape[0], cfg.bank_size
        self.video_w = rng.normal(d_s * n_basis, 1.0 / np.sqrt(n_basis)).reshape(d_s, n_basis)
        self.video_b = rng.normal(d_s, 0.5)
        self.audio_w = rng.normal(d_a * n_bank, 1.0 / np.sqrt(n_bank)).reshape(d_a, n_bank)
        self.audio_b = rng.normal(d_a, 0.5)
        d = cfg.latent_d
        self.video_lift = 2.0 * rng.normal(d)
        self.video_shift = rng.normal(d, 0.1)
        self.audio_lift = rng.normal(d * n_bank).reshape(d, n_bank)
        self.audio_shift = rng.normal(d, 0.1)
        self.audio_unlift = np.linalg.pinv(self.audio_lift)
        self.centres = filter_centres(cfg)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "video_w": self.video_w, "video_b": self.video_b,
            "audio_w": self.audio_w, "audio_b": self.audio_b,
            "video_lift": self.video_lift, "video_shift": self.video_shift,
            "audio_lift": self.audio_lift, "audio_shift": self.audio_shift,
        }

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    # featurizers -----------------------------------------------------------

    def video_patches(self, raw: RawSample) -> np.ndarray:
        n, fh, fw = raw.video.shape
        g = self.geom
        if fh % g.sem_h or fw % g.sem_w:
            raise PatchingError(f"frame {fh}x{fw} not divisible into {g.sem_h}x{g.sem_w} patches")
        ph, pw = fh // g.sem_h, fw // g.sem_w
        patches = raw.video.reshape(n, g.sem_h, ph, g.sem_w, pw).transpose(0, 1, 3, 2, 4)
        return patches.reshape(n * g.n_v, ph * pw)

    def audio_windows(self, raw: RawSample) -> np.ndarray:
        m, length = raw.audio.shape
        if length % self.geom.n_a:
            raise WindowingError(f"chunk of {length} samples not divisible into {self.geom.n_a} windows")
        return raw.audio.reshape(m * self.geom.n_a, length // self.geom.n_a)

    def video_features(self, raw: RawSample) -> np.ndarray:
        patches = self.video_patches(raw)
        if patches.shape[1] != self.basis.shape[1]:
            raise PatchingError(f"patch of {patches.shape[1]} pixels, basis expects {self.basis.shape[1]}")
        moments = patches @ self.basis.T / self.cfg.square**2
        return np.tanh(self.cfg.feature_gain * moments @ self.video_w.T + self.video_b)

    def audio_features(self, raw: RawSample) -> np.ndarray:
        windows = self.audio_windows(raw)
        span = windows.shape[1] / self.cfg.audio_rate
        mags = np.stack([
            tone_magnitudes(w, self.cfg.audio_rate, np.array([span / 2]), span, self.centres)[0] for w in windows
        ])
        mags = mags - mags.mean(axis=1, keepdims=True)
        return np.tanh(self.cfg.feature_gain * mags @ self.audio_w.T + self.audio_b)

    # toy VAE -----------------------------------------------------------------

    def temporal_pool_matrix(self) -> np.ndarray:
        """(T_v^l, N) area weights mapping keyframes onto latent time slices."""
        n, t = self.geom.n_keyframes, self.grid.latent_t
        w = np.zeros((t, n))
        step = n / t
        for k in range(t):
            a, b = k * step, (k + 1) * step
            for i in range(n):
                w[k, i] = max(0.0, min(b, i + 1) - max(a, i)) / step
        return w

    def pooled_video(self, raw: RawSample) -> np.ndarray:
        g = self.grid
        n, fh, fw = raw.video.shape
        if n != self.geom.n_keyframes or fh % g.latent_h or fw % g.latent_w:
            raise EncodingError(f"video {raw.video.shape} incompatible with latent grid")
        pooled_t = np.tensordot(self.temporal_pool_matrix(), raw.video, axes=(1, 0))
        return pooled_t.reshape(g.latent_t, g.latent_h, fh // g.latent_h, g.latent_w, fw // g.latent_w).mean(axis=(2, 4))

    def audio_frame_times(self) -> np.ndarray:
        frame = self.geom.duration / self.grid.audio_latent
        return (np.arange(self.grid.audio_latent) + 0.5) * frame

    def audio_spectra(self, raw: RawSample) -> np.ndarray:
        """(T_a^l, bank) tone magnitudes per latent frame over a two-frame window."""
        flat = raw.audio.reshape(-1)
        if flat.size != self.cfg.audio_rate * self.geom.duration:
            raise EncodingError(f"audio of {flat.size} samples incompatible with latent grid")
        span = 2.0 * self.geom.duration / self.grid.audio_latent
        return tone_magnitudes(flat, self.cfg.audio_rate, self.audio_frame_times(), span, self.centres)

    def encode_video(self, raw: RawSample) -> np.ndarray:
        s = self.pooled_video(raw)
        return s[..., None] * self.video_lift + self.video_shift

    def encode_audio(self, raw: RawSample) -> np.ndarray:
        return self.audio_spectra(raw) @ self.audio_lift.T + self.audio_shift

    def decode_video(self, z_v: np.ndarray) -> np.ndarray:
        """Cell occupancy (T_v^l, H_v^l, W_v^l) recovered by projecting onto the lift direction."""
        a = self.video_lift
        return (np.asarray(z_v) - self.video_shift) @ a / (a @ a)

    def decode_audio(self, z_a: np.ndarray) -> np.ndarray:
        """Resynthesised sine at ``audio_rate / audio_pool`` Hz following the decoded frame frequencies."""
        spectra = (np.asarray(z_a).reshape(self.grid.audio_latent, -1) - self.audio_shift) @ self.audio_unlift.T
        freq = peak_frequency(spectra, self.centres)
        rate = self.cfg.audio_rate / self.cfg.audio_pool
        t = np.arange(int(round(self.geom.duration * rate))) / rate
        f = np.interp(t, self.audio_frame_times(), freq)
        phase = self.cfg.phase0 + 2.0 * np.pi * np.concatenate(([0.0], np.cumsum(f[:-1]))) / rate
        return np.sin(phase)

    # trajectories ------------------------------------------------------------

    def keyframe_times(self) -> np.ndarray:
        return np.arange(self.geom.n_keyframes) / self.geom.fps

    def centroid_trajectory(self, z_v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Decoded (x, y) centroid per keyframe, in frame-width units."""
        g = self.grid
        occ = np.clip(self.decode_video(np.asarray(z_v).reshape(g.latent_t, g.latent_h, g.latent_w, -1)), 0.0, None)
        mass = occ.sum(axis=(1, 2)) + 1e-12
        cx = (np.arange(g.latent_w) + 0.5) / g.latent_w
        cy = (np.arange(g.latent_h) + 0.5) / g.latent_h
        xs = (occ.sum(axis=1) @ cx) / mass
        ys = (occ.sum(axis=2) @ cy) / mass
        n = self.geom.n_keyframes
        centers = (np.arange(g.latent_t) + 0.5) * (n / g.latent_t) - 0.5
        idx = np.arange(n)
        return np.interp(idx, centers, xs), np.interp(idx, centers, ys)

    def frequency_trajectory(self, z_a: np.ndarray) -> np.ndarray:
        wave = self.decode_audio(z_a)
        rate = self.cfg.audio_rate / self.cfg.audio_pool
        return local_frequency(wave, rate, self.keyframe_times(), 1.0 / self.geom.fps)


def zero_crossings(wave: np.ndarray, rate: float) -> np.ndarray:
    """Sign-change times (seconds), linearly interpolated between samples."""
    w = np.asarray(wave, dtype=np.float64)
    s = np.signbit(w)
    idx = np.flatnonzero(s[1:] != s[:-1])
    a, b = w[idx], w[idx + 1]
    frac = np.where(a != b, a / (a - b), 0.0)
    return (idx + frac) / rate


def local_frequency(wave: np.ndarray, rate: float, times: np.ndarray, half_window: float) -> np.ndarray:
    """Frequency around each time from crossing spacing within ``±half_window``."""
    cross = zero_crossings(wave, rate)
    out = np.zeros(len(times))
    for i, t in enumerate(times):
        c = cross[(cross >= t - half_window) & (cross <= t + half_window)]
        if len(c) >= 2 and c[-1] > c[0]:
            out[i] = (len(c) - 1) / (2.0 * (c[-1] - c[0]))
    return out


class SyncScore(NamedTuple):
    score: float
    degenerate: bool


def pearson(a: np.ndarray, b: np.ndarray, tol: float = 1e-3) -> SyncScore:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.std() < tol or b.std() < tol:
        return SyncScore(0.0, True)
    return SyncScore(float(np.corrcoef(a, b)[0, 1]), False)


def sync_score(z_v: np.ndarray, z_a: np.ndarray, stand: FrozenStandIns) -> SyncScore:
    """Correlation of the decoded centroid x-trajectory with the decoded, normalised tone frequency."""
    x, _ = stand.centroid_trajectory(z_v)
    f = stand.frequency_trajectory(z_a)
    return pearson(x, (f - stand.cfg.f0) / stand.cfg.alpha)


def probe_script(x: np.ndarray, y: np.ndarray, speed_per_frame: float, min_run: int = 2) -> list[str]:
    """Rule-based motion classifier over a keyframe-rate centroid trajectory.

    Each step is the dominant-axis direction, or ``hold`` below 0.35 of the
    nominal per-frame speed; runs shorter than ``min_run`` are absorbed.
    """
    dx, dy = np.diff(x), np.diff(y)
    thr = 0.35 * speed_per_frame
    labels = []
    for a, b in zip(dx, dy):
        if max(abs(a), abs(b)) < thr:
            labels.append("hold")
        elif abs(a) >= abs(b):
            labels.append("right" if a > 0 else "left")
        else:
            labels.append("down" if b > 0 else "up")
    runs: list[list] = []
    for lab in labels:
        if runs and runs[-1][0] == lab:
            runs[-1][1] += 1
        else:
            runs.append([lab, 1])
    kept = [r for r in runs if r[1] >= min_run] or runs
    merged: list[str] = []
    for lab, _ in kept:
        if not merged or merged[-1] != lab:
            merged.append(lab)
    return merged


# datasets ----------------------------------------------------------------------


@dataclass
class Sample:
    id: int
    seed: int
    spec: SceneSpec
    video_text: list[int]
    audio_text: list[int]
    raw: RawSample
    f_gt_v: np.ndarray
    f_gt_a: np.ndarray
    z0_v: np.ndarray
    z0_a: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "video_text": np.asarray(self.video_text, dtype=np.int64),
            "audio_text": np.asarray(self.audio_text, dtype=np.int64),
            "video": self.raw.video,
            "audio": self.raw.audio,
            "f_gt_v": self.f_gt_v,
            "f_gt_a": self.f_gt_a,
            "z0_v": self.z0_v,
            "z0_a": self.z0_a,
        }


def make_sample(master_seed: int, index: int, stand: FrozenStandIns) -> Sample:
    seed = derive_seed(master_seed, index)
    spec, raw = generate_scene(RngStream(seed), stand.geom, stand.cfg)
    vt, at = scene_to_text(spec, stand.cfg)
    return Sample(
        id=index, seed=seed, spec=spec, video_text=vt, audio_text=at, raw=raw,
        f_gt_v=stand.video_features(raw), f_gt_a=stand.audio_features(raw),
        z0_v=stand.encode_video(raw), z0_a=stand.encode_audio(raw),
    )


def threads_from_env() -> int:
    return max(1, int(os.environ.get("BATON_THREADS", "1")))


def generate_samples(master_seed: int, indices: Sequence[int], stand: FrozenStandIns,
                     threads: int | None = None) -> list[Sample]:
    """One stream per sample index, so output is independent of the thread count."""
    threads = threads or threads_from_env()
    if threads == 1:
        return [make_sample(master_seed, i, stand) for i in indices]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda i: make_sample(master_seed, i, stand), indices))


def dataset_write(directory: str | Path, samples: Sequence[Sample]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        fname = f"sample_{s.id:06d}.btn"
        write_container(d / fname, s.tensors())
        lines.append(json.dumps({"id": s.id, "seed": s.seed, "script": s.spec.to_json(), "files": [fname]},
                                sort_keys=True))
    (d / "manifest.jsonl").write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")


def dataset_read(directory: str | Path, cfg: SynthConfig = SynthConfig()) -> list[Sample]:
    d = Path(directory)
    manifest = d / "manifest.jsonl"
    if not manifest.exists():
        raise FormatError(f"{manifest}: missing dataset manifest")
    out = []
    for ln, line in enumerate(manifest.read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{manifest}:{ln + 1}: {exc}") from None
        fname = rec["files"][0]
        t = read_container(d / fname)
        missing = {"video_text", "audio_text", "video", "audio", "f_gt_v", "f_gt_a", "z0_v", "z0_a"} - set(t)
        if missing:
            raise FormatError(f"{d / fname}: missing entries {sorted(missing)}")
        out.append(Sample(
            id=int(rec["id"]), seed=int(rec["seed"]), spec=SceneSpec.from_json(rec["script"], cfg),
            video_text=t["video_text"].tolist(), audio_text=t["audio_text"].tolist(),
            raw=RawSample(t["video"], t["audio"]), f_gt_v=t["f_gt_v"], f_gt_a=t["f_gt_a"],
            z0_v=t["z0_v"], z0_a=t["z0_a"],
        ))
    return out
