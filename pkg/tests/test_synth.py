import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualflow.metrics import beat_align_score, local_minima
from dualflow.motion import FrameLayout, Skeleton
from dualflow.synth import (DuetDataset, GeneratorConfig, beat_grid, beat_phase, frame_aligned_tempo,
                            generate_clip, generate_dataset)


def test_beat_grid_unit_tempo():
    np.testing.assert_allclose(beat_grid(60, 4), [0, 1, 2, 3])


def test_beat_grid_120():
    np.testing.assert_allclose(beat_grid(120, 2), [0, 0.5, 1.0, 1.5])


@given(st.floats(1, 400))
def test_beat_grid_empty_interval(bpm):
    assert len(beat_grid(bpm, 0)) == 0


@pytest.mark.parametrize("bpm", [0, -60])
def test_beat_grid_rejects_tempo(bpm):
    with pytest.raises(ValueError):
        beat_grid(bpm, 1)


@given(st.floats(1, 300), st.floats(0, 20))
def test_beat_grid_bounds(bpm, dur):
    beats = beat_grid(bpm, dur)
    assert np.all(beats < dur)
    assert np.all(np.diff(beats) > 0)
    # nothing missing at the end
    assert len(beats) == 0 or beats[-1] + 60 / bpm >= dur - 1e-9


@given(st.floats(90, 150))
def test_aligned_tempo_lands_on_frames(bpm):
    snapped = frame_aligned_tempo(bpm, 30, (90, 150))
    per_beat = 60 * 30 / snapped
    assert per_beat == pytest.approx(round(per_beat))
    assert 90 <= snapped <= 150


def test_beat_phase_flat_on_beats():
    period = 0.5
    for k in range(4):
        t = k * period
        assert beat_phase(t, period) == pytest.approx(k)
        slope = (beat_phase(t + 1e-6, period) - beat_phase(t - 1e-6, period)) / 2e-6
        assert abs(slope) < 1e-4


def test_clip_deterministic(gen_config):
    a, b = generate_clip(7, gen_config), generate_clip(7, gen_config)
    np.testing.assert_array_equal(a.motion.frames_a, b.motion.frames_a)
    np.testing.assert_array_equal(a.motion.frames_b, b.motion.frames_b)
    np.testing.assert_array_equal(a.music_features, b.music_features)
    assert (a.text, a.decomposition, a.genre) == (b.text, b.decomposition, b.genre)


def test_clip_invariants(clips, gen_config):
    dur = gen_config.n_frames / gen_config.fps
    for clip in clips:
        assert clip.music_features.shape == (gen_config.n_frames, gen_config.music_dim)
        assert np.all(np.diff(clip.beat_times) > 0)
        assert np.all((clip.beat_times >= 0) & (clip.beat_times < dur))
        assert clip.genre in clip.text
        assert set(np.unique(FrameLayout(22).contacts(clip.motion.frames_a))) <= {0.0, 1.0}
        root = FrameLayout(22).positions(clip.motion.frames_a)[0, 0]
        np.testing.assert_allclose(root, 0, atol=1e-12)


def test_bone_lengths_match_template(clips):
    sk = Skeleton.smpl22()
    lay = FrameLayout(22)
    parents = list(sk.parents[1:])
    for clip in clips:
        for frames in (clip.motion.frames_a, clip.motion.frames_b):
            pos = lay.positions(frames)
            lengths = np.linalg.norm(pos[:, 1:] - pos[:, parents], axis=-1)
            np.testing.assert_allclose(lengths, np.broadcast_to(sk.bone_lengths, lengths.shape), atol=1e-6)


@settings(max_examples=25)
@given(st.integers(0, 10_000))
def test_foot_speed_minima_on_beats(seed):
    cfg = GeneratorConfig(n_frames=64)
    clip = generate_clip(seed, cfg)
    sk = Skeleton.smpl22()
    lay = FrameLayout(22)
    for frames in (clip.motion.frames_a, clip.motion.frames_b):
        feet = lay.positions(frames)[:, list(sk.foot_joints)]
        speed = np.linalg.norm(np.gradient(feet, axis=0), axis=-1).mean(-1)
        minima = local_minima(speed) / cfg.fps
        for beat in clip.beat_times:
            assert np.min(np.abs(minima - beat)) <= 1 / cfg.fps + 1e-9


@settings(max_examples=25)
@given(st.integers(0, 10_000))
def test_generated_clips_bas_calibrated(seed):
    clip = generate_clip(seed, GeneratorConfig(n_frames=64))
    for frames in (clip.motion.frames_a, clip.motion.frames_b):
        assert beat_align_score(frames, clip.beat_times, sigma=0.1) >= 0.95


def test_dataset_roundtrip(tmp_path, gen_config):
    records = generate_dataset(3, gen_config, tmp_path)
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    assert [json.loads(l)["clip_id"] for l in lines] == [r["clip_id"] for r in records]
    assert set(records[0]) >= {"clip_id", "motion_path", "text", "decomposition", "genre", "tempo_bpm",
                               "beat_times", "music_path"}
    ds = DuetDataset.load(tmp_path)
    fresh = generate_clip(1, gen_config)
    np.testing.assert_allclose(ds.by_id[fresh.clip_id].motion.frames_b, fresh.motion.frames_b, atol=1e-5)
    assert ds.manifest_hash() == DuetDataset.load(tmp_path).manifest_hash()


def test_dataset_missing_clip_named(tmp_path, gen_config):
    generate_dataset(2, gen_config, tmp_path)
    (tmp_path / "clips" / "clip_000001.dfmo").unlink()
    with pytest.raises(FileNotFoundError, match="clip_000001"):
        DuetDataset.load(tmp_path)


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        GeneratorConfig(tempo_range=(0, 100))
    with pytest.raises(ValueError):
        GeneratorConfig(genres=())
