import numpy as np
import pytest

from avflow.codec import PixelVideo
from avflow.synth import (
    BODY_SIZE,
    DIRECTIONS,
    MOUTH_MAX_HEIGHT,
    Script,
    body_position,
    load_manifest,
    load_sample,
    make_corpus,
    make_sample,
    mouth_heights,
    readback_mouth_height,
    sample_seed,
    script_token_ids,
    track_body,
)


def test_script_validation():
    Script("left", 2, 0)
    Script("still", 0, 3)
    with pytest.raises(ValueError, match="unknown direction"):
        Script("sideways", 1, 0)
    with pytest.raises(ValueError, match="still"):
        Script("still", 2, 0)
    with pytest.raises(ValueError, match="moving"):
        Script("left", 0, 0)
    with pytest.raises(ValueError, match="style_id"):
        Script("left", 1, 9)


def test_script_tokens_distinct():
    ids = {tuple(script_token_ids(Script(d, 0 if d == "still" else 2, 0))) for d in DIRECTIONS}
    assert len(ids) == len(DIRECTIONS)


def test_still_silent_sample_is_static():
    sample = make_sample(5, Script("still", 0, 1), envelope=np.zeros(8))
    first = sample.video.data[0]
    for k in range(1, 8):
        assert np.array_equal(sample.video.data[k], first)
    assert not sample.wave.samples.any()


def test_full_envelope_keeps_mouth_at_max():
    sample = make_sample(6, Script("still", 0, 0), envelope=np.ones(8))
    heights, valid = readback_mouth_height(sample.video, track_body(sample.video))
    assert valid.all()
    assert (heights == MOUTH_MAX_HEIGHT).all()


def test_centroid_follows_script_exactly():
    for direction, (dy, dx) in (("right", (0, 1)), ("down", (1, 0)), ("left", (0, -1)), ("up", (-1, 0))):
        script = Script(direction, 3, 0)
        sample = make_sample(11, script, envelope=np.full(8, 0.5))
        found, centers = track_body(sample.video)
        assert found.all()
        deltas = np.diff(centers, axis=0)
        assert np.allclose(deltas[:, 0], dy * 3)
        assert np.allclose(deltas[:, 1], dx * 3)


def test_reflection_at_canvas_edges():
    # straight-line positions reflect instead of leaving the canvas:
    # unbounded 42, 46, 50, ... folds over limit=44 to 42, 42, 38, ...
    script = Script("right", 4, 0)
    limit = 64 - BODY_SIZE
    xs = [body_position((0, limit - 2), script, k, 64)[1] for k in range(6)]
    assert xs == [42, 42, 38, 34, 30, 26]
    assert all(0 <= x <= limit for x in xs)


def test_mouth_heights_rounding():
    env = np.array([0.0, 0.04, 0.5, 1.0])
    assert mouth_heights(env).tolist() == [0, 0, 6, 12]
    with pytest.raises(ValueError):
        mouth_heights(np.array([1.2]))


def test_readback_exact_on_renders(rng):
    for seed in range(5):
        script = Script("left", 2, seed % 4)
        sample = make_sample(seed, script)
        heights, valid = readback_mouth_height(sample.video, track_body(sample.video))
        assert valid.all()
        assert np.array_equal(heights.astype(int), mouth_heights(sample.envelope))


def test_readback_silent_sample_is_zero():
    sample = make_sample(7, Script("right", 1, 2), envelope=np.zeros(8))
    heights, valid = readback_mouth_height(sample.video, track_body(sample.video))
    assert valid.all()
    assert not heights.any()


def test_random_frames_mostly_flagged(rng):
    noise = PixelVideo(rng.uniform(-1, 1, (8, 64, 64, 3)).astype(np.float32))
    found, _ = track_body(noise)
    assert found.mean() < 0.5


def test_ground_truth_sync_correlation():
    sample = make_sample(13, Script("up", 2, 1))
    heights, valid = readback_mouth_height(sample.video, track_body(sample.video))
    env = sample.envelope
    r = np.corrcoef(heights[valid], env[valid])[0, 1]
    assert r >= 0.99


def test_make_sample_determinism():
    a = make_sample(21, Script("down", 2, 3))
    b = make_sample(21, Script("down", 2, 3))
    assert np.array_equal(a.video.data, b.video.data)
    assert np.array_equal(a.wave.samples, b.wave.samples)


def test_make_sample_rejects_small_canvas():
    with pytest.raises(ValueError, match="larger than canvas"):
        make_sample(1, Script("still", 0, 0), size=16)


def test_audio_rms_tracks_envelope():
    sample = make_sample(31, Script("still", 0, 0))
    per_frame = sample.wave.samples.reshape(8, -1).astype(np.float64)
    rms = np.sqrt((per_frame**2).mean(axis=1))
    r = np.corrcoef(rms, sample.envelope)[0, 1]
    assert r > 0.99


def test_corpus_balance_and_files(tmp_path):
    manifest = make_corpus(20, 9, "train", tmp_path)
    assert len(manifest) == 20
    counts = {d: 0 for d in DIRECTIONS}
    for rec in manifest:
        counts[rec["script"]["direction"]] += 1
    assert all(c == 4 for c in counts.values())
    loaded = load_manifest(tmp_path, "train")
    assert loaded == manifest
    sample = load_sample(tmp_path, manifest[3])
    regenerated = make_sample(manifest[3]["seed"], sample.script)
    assert np.array_equal(sample.video.data, regenerated.video.data)
    assert np.allclose(sample.wave.samples, regenerated.wave.samples)


def test_corpus_regeneration_is_byte_identical(tmp_path):
    make_corpus(4, 2, "train", tmp_path / "a")
    make_corpus(4, 2, "train", tmp_path / "b")
    for rel in ("manifest.jsonl", "00000/video.avt", "00000/audio.wav", "00000/meta.json"):
        a = (tmp_path / "a" / "train" / rel).read_bytes()
        b = (tmp_path / "b" / "train" / rel).read_bytes()
        assert a == b, rel


def test_split_seeds_disjoint():
    train = {sample_seed(1, "train", i) for i in range(1000)}
    val = {sample_seed(1, "val", i) for i in range(1000)}
    assert not train & val


def test_balance_large_corpus_rule():
    # n=500 -> 100 per direction by round-robin construction
    per = [0] * len(DIRECTIONS)
    for i in range(500):
        per[i % len(DIRECTIONS)] += 1
    assert per == [100] * 5
