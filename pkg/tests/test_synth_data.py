import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from baton.errors import FormatError, PatchingError, WindowingError
from baton.numerics import RngStream
from baton.prompt import VOCAB, PlanGeometry
from baton.rope import GridSpec
from baton.synth_data import (
    FrozenStandIns,
    RawSample,
    SceneSpec,
    SynthConfig,
    dataset_read,
    dataset_write,
    generate_samples,
    generate_scene,
    local_frequency,
    pearson,
    probe_script,
    render,
    sample_script,
    scene_to_text,
    script_to_spec,
    sync_score,
    text_to_script,
    tone_magnitudes,
    zero_crossings,
)

from conftest import GEOM, GRID

CFG = SynthConfig()


def scene(script, start=None, geom=GEOM):
    spec = script_to_spec(script, RngStream(0), geom, CFG, start)
    return spec, render(spec, geom, CFG)


class TestScenes:
    def test_hold_is_static(self):
        spec, raw = scene([(4, "hold")], start=(0.5, 0.5))
        assert all(np.array_equal(raw.video[0], f) for f in raw.video)
        assert np.all(spec.frequency(np.linspace(0, 2, 50)) == CFG.f0 + CFG.alpha * 0.5)

    def test_constant_frequency_zero_crossings(self):
        _, raw = scene([(4, "hold")], start=(0.5, 0.5))
        f = CFG.f0 + CFG.alpha * 0.5
        for chunk in raw.audio:
            assert abs(len(zero_crossings(chunk, CFG.audio_rate)) - 2 * f) <= 1

    def test_same_seed_is_bit_identical(self):
        a_spec, a = generate_scene(RngStream(9), GEOM)
        b_spec, b = generate_scene(RngStream(9), GEOM)
        assert a_spec == b_spec
        assert np.array_equal(a.video, b.video) and np.array_equal(a.audio, b.audio)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**40))
    def test_scene_invariants(self, seed):
        spec, raw = generate_scene(RngStream(seed), GEOM)
        assert raw.video.shape == (GEOM.n_keyframes, CFG.frame, CFG.frame)
        assert raw.audio.shape == (GEOM.duration, CFG.audio_rate)
        assert raw.video.min() >= 0 and raw.video.max() <= 1
        assert 2 <= len(spec.events) <= 4
        # events tile [0, M] without gaps or overlap
        assert spec.events[0][0] == 0 and spec.events[-1][1] == GEOM.duration
        assert all(a[1] == b[0] for a, b in zip(spec.events, spec.events[1:]))
        x, y = spec.position(np.linspace(0, GEOM.duration, 200))
        assert x.min() >= CFG.lo - 1e-9 and x.max() <= CFG.hi + 1e-9
        assert y.min() >= CFG.lo - 1e-9 and y.max() <= CFG.hi + 1e-9
        f = spec.frequency(np.linspace(0, GEOM.duration, 200))
        assert f.min() >= CFG.f0 - CFG.alpha and f.max() <= CFG.f0 + CFG.alpha
        assert np.abs(raw.audio).max() <= 1.0

    def test_script_grammar(self):
        rng = RngStream(1)
        for _ in range(200):
            script = sample_script(rng, GEOM, CFG)
            codes = [c for _, c in script]
            assert all(a != b for a, b in zip(codes, codes[1:]))
            assert any(c in ("left", "right") for c in codes)
            assert sum(u for u, _ in script) * CFG.unit_s == GEOM.duration

    def test_spec_json_round_trip(self):
        spec, _ = generate_scene(RngStream(3), GEOM)
        assert SceneSpec.from_json(spec.to_json()) == spec


class TestText:
    def test_left_then_right(self):
        spec, _ = scene([(2, "left"), (2, "right")], start=(0.5, 0.5))
        video, audio = scene_to_text(spec)
        names = VOCAB.decode(video)
        assert [n for n in names if n.startswith("EV_")] == ["EV_LEFT", "EV_RIGHT"]
        assert [n for n in VOCAB.decode(audio) if n.startswith("TONE_")] == ["TONE_FALL", "TONE_RISE"]

    def test_order_matters(self):
        a, _ = scene([(2, "left"), (2, "right")], start=(0.5, 0.5))
        b, _ = scene([(2, "right"), (2, "left")], start=(0.5, 0.5))
        assert scene_to_text(a) != scene_to_text(b)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**40))
    def test_script_round_trip(self, seed):
        spec, _ = generate_scene(RngStream(seed), GEOM)
        video, _ = scene_to_text(spec)
        assert tuple(tuple(e) for e in text_to_script(video)) == spec.events


class TestFeaturizers:
    def test_blank_inputs_give_bias_rows(self, stand):
        blank = RawSample(np.zeros((GEOM.n_keyframes, 16, 16)), np.zeros((GEOM.duration, 800)))
        f_v, f_a = stand.video_features(blank), stand.audio_features(blank)
        assert f_v.shape == (GEOM.video_len, 16) and f_a.shape == (GEOM.audio_len, 8)
        assert np.array_equal(f_v, np.tile(np.tanh(stand.video_b), (GEOM.video_len, 1)))
        assert np.array_equal(f_a, np.tile(np.tanh(stand.audio_b), (GEOM.audio_len, 1)))

    def test_video_loop_oracle(self, stand):
        rng = np.random.default_rng(5)
        raw = RawSample(rng.uniform(size=(GEOM.n_keyframes, 16, 16)), np.zeros((GEOM.duration, 800)))
        got = stand.video_features(raw)
        p = 16 // GEOM.sem_w
        u = (np.arange(p) + 0.5) / p
        want = np.empty_like(got)
        row = 0
        for frame in raw.video:
            for ph in range(GEOM.sem_h):
                for pw in range(GEOM.sem_w):
                    patch = frame[ph * p : (ph + 1) * p, pw * p : (pw + 1) * p]
                    moments = [
                        sum(patch[i, j] * np.cos(np.pi * a * u[i]) * np.cos(np.pi * b * u[j])
                            for i in range(p) for j in range(p)) / CFG.square**2
                        for a in range(CFG.basis_order) for b in range(CFG.basis_order)
                    ]
                    want[row] = np.tanh(CFG.feature_gain * stand.video_w @ np.array(moments) + stand.video_b)
                    row += 1
        assert np.abs(got - want).max() < 1e-12

    def test_audio_mixing_oracle(self, stand):
        rng = np.random.default_rng(6)
        raw = RawSample(np.zeros((GEOM.n_keyframes, 16, 16)), rng.uniform(-1, 1, (GEOM.duration, 800)))
        windows = raw.audio.reshape(-1, 800 // GEOM.n_a)
        span = windows.shape[1] / CFG.audio_rate
        want = []
        for w in windows:
            mags = tone_magnitudes(w, CFG.audio_rate, np.array([span / 2]), span, stand.centres)[0]
            mags = mags - mags.mean()
            want.append(np.tanh(CFG.feature_gain * stand.audio_w @ mags + stand.audio_b))
        assert np.abs(stand.audio_features(raw) - np.array(want)).max() < 1e-12

    def test_unit_tone_reads_one(self):
        freqs = np.array([20.0, 32.0, 44.0])
        t = np.arange(800) / 800
        mags = tone_magnitudes(np.sin(2 * np.pi * 32.0 * t), 800, np.array([0.5]), 0.5, freqs)[0]
        assert mags[1] == pytest.approx(1.0, abs=0.02)
        assert mags[0] < 0.1 and mags[2] < 0.1

    def test_indivisible_geometry(self):
        with pytest.raises(PatchingError):
            FrozenStandIns(0, PlanGeometry(sem_h=3, sem_w=3), GRID, 4, 4)
        with pytest.raises(WindowingError):
            FrozenStandIns(0, PlanGeometry(n_a=3), GRID, 4, 4)

    def test_digest_is_seeded(self):
        a = FrozenStandIns(1, GEOM, GRID, 16, 8)
        assert a.digest() == FrozenStandIns(1, GEOM, GRID, 16, 8).digest()
        assert a.digest() != FrozenStandIns(2, GEOM, GRID, 16, 8).digest()


class TestLatents:
    def test_constant_video_gives_constant_cells(self, stand):
        raw = RawSample(np.full((GEOM.n_keyframes, 16, 16), 0.5), np.zeros((GEOM.duration, 800)))
        z_v = stand.encode_video(raw)
        assert z_v.shape == (8, 4, 4, CFG.latent_d)
        assert np.allclose(z_v, z_v[0, 0, 0], rtol=0, atol=1e-15)
        assert np.array_equal(stand.encode_audio(raw), np.tile(stand.audio_shift, (GRID.audio_latent, 1)))

    def test_centroid_recovery(self, stand, scenes):
        errs = [np.abs(stand.centroid_trajectory(s.z0_v)[0] - s.spec.position(stand.keyframe_times())[0]).mean()
                for s in scenes]
        assert max(errs) < 0.05

    def test_frequency_recovery(self, stand, scenes):
        errs = [np.abs(stand.frequency_trajectory(s.z0_a) - s.spec.frequency(stand.keyframe_times())).mean()
                for s in scenes]
        assert np.mean(errs) < 0.05 * CFG.alpha


class TestCalibration:
    def test_raw_data_link(self, stand, scenes):
        for s in scenes:
            x, _ = s.spec.position(stand.keyframe_times())
            f = local_frequency(s.raw.audio.reshape(-1), CFG.audio_rate, stand.keyframe_times(), 1 / GEOM.fps)
            assert pearson(x, f).score >= 0.95

    def test_ground_truth_sync(self, stand, scenes):
        scores = [sync_score(s.z0_v, s.z0_a, stand) for s in scenes]
        assert not any(sc.degenerate for sc in scores)
        assert min(sc.score for sc in scores) >= 0.95

    def test_mismatched_pairs(self, stand, scenes):
        n = len(scenes)
        scores = [sync_score(scenes[i].z0_v, scenes[(i + 1) % n].z0_a, stand).score for i in range(n)]
        assert abs(np.mean(scores)) < 0.3

    def test_probe_reads_ground_truth(self, stand, scenes):
        per_frame = CFG.speed / GEOM.fps
        hits = [probe_script(*stand.centroid_trajectory(s.z0_v), per_frame) == s.spec.codes for s in scenes]
        assert np.mean(hits) >= 0.9

    def test_probe_on_mismatched_scripts_is_rare(self, stand, scenes):
        per_frame = CFG.speed / GEOM.fps
        n = len(scenes)
        hits = [probe_script(*stand.centroid_trajectory(scenes[i].z0_v), per_frame) == scenes[(i + 1) % n].spec.codes
                for i in range(n)]
        assert np.mean(hits) < 0.2

    def test_probe_rules(self):
        x = np.array([0.5, 0.5, 0.5, 0.55, 0.6, 0.65, 0.65, 0.65])
        y = np.full(8, 0.5)
        assert probe_script(x, y, 0.05) == ["hold", "right", "hold"]
        assert probe_script(y, 1 - x, 0.05) == ["hold", "up", "hold"]

    def test_pearson_degenerate(self):
        assert pearson(np.ones(5), np.arange(5.0)) == (0.0, True)
        assert pearson(np.arange(5.0), 2 * np.arange(5.0)).score == pytest.approx(1.0)


class TestDatasets:
    def test_thread_count_does_not_change_output(self, stand, tmp_path):
        serial = generate_samples(4, range(12), stand, threads=1)
        parallel = generate_samples(4, range(12), stand, threads=4)
        dataset_write(tmp_path / "a", serial)
        dataset_write(tmp_path / "b", parallel)
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_round_trip(self, stand, scenes, tmp_path):
        dataset_write(tmp_path, scenes[:10])
        assert len((tmp_path / "manifest.jsonl").read_text().splitlines()) == 10
        back = dataset_read(tmp_path)
        for a, b in zip(scenes[:10], back):
            assert (a.id, a.seed, a.spec, a.video_text, a.audio_text) == (b.id, b.seed, b.spec, b.video_text, b.audio_text)
            for key, arr in a.tensors().items():
                assert np.array_equal(arr, b.tensors()[key]) and arr.dtype == b.tensors()[key].dtype

    def test_corrupt_container_names_file(self, stand, scenes, tmp_path):
        dataset_write(tmp_path, scenes[:2])
        bad = tmp_path / "sample_000001.btn"
        bad.write_bytes(bad.read_bytes()[:-7])
        with pytest.raises(FormatError, match="sample_000001.btn"):
            dataset_read(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FormatError):
            dataset_read(tmp_path)
