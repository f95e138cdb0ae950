import numpy as np
import pytest
import torch

from avflow.audio import (
    AudioEncoder,
    AudioFeatureConfig,
    AudioWave,
    align_to_latent,
    alignment_indices,
    extract_features,
    fuse_layers,
    load_features,
    log_filterbank,
    save_features,
    step_timestamps,
)


def make_wave(rng, seconds=1.0, rate=16000):
    return AudioWave(rng.uniform(-1, 1, int(seconds * rate)).astype(np.float32), rate)


@pytest.fixture
def fcfg():
    return AudioFeatureConfig()


def test_extract_frame_count(rng, fcfg):
    feats = extract_features(make_wave(rng, 1.0), fcfg)
    assert feats.data.shape == (3, 50, 40)
    feats = extract_features(make_wave(rng, 0.63), fcfg)
    assert feats.num_frames == 31  # floor(0.63 * 50)


def test_silence_gives_constant_floor(fcfg):
    wave = AudioWave(np.zeros(16000, dtype=np.float32))
    fb = log_filterbank(wave, fcfg)
    assert np.allclose(fb, fb[0, 0])
    feats = extract_features(wave, fcfg)
    assert np.allclose(feats.data, feats.data[:, :1, :])


def test_amplitude_monotonicity_in_filterbank(rng, fcfg):
    wave = make_wave(rng)
    fb1 = log_filterbank(wave, fcfg)
    fb2 = log_filterbank(AudioWave(np.clip(wave.samples * 2, -4, 4), 16000), fcfg)
    assert (fb2 >= fb1 - 1e-9).all()
    assert (fb2 > fb1).any()


def test_empty_or_too_short_wave_rejected(fcfg):
    with pytest.raises(ValueError, match="empty"):
        AudioWave(np.array([], dtype=np.float32))
    with pytest.raises(ValueError, match="too short"):
        log_filterbank(AudioWave(np.zeros(100, dtype=np.float32)), fcfg)


def test_fuse_equal_logits_is_mean(rng):
    layers = torch.from_numpy(rng.standard_normal((3, 10, 8)).astype(np.float32))
    fused = fuse_layers(layers, torch.zeros(3))
    assert torch.allclose(fused, layers.mean(dim=0), atol=1e-6)


def test_fuse_saturation_picks_single_layer(rng):
    layers = torch.from_numpy(rng.standard_normal((3, 10, 8)).astype(np.float32))
    logits = torch.tensor([0.0, 30.0, 0.0])
    fused = fuse_layers(layers, logits)
    assert (fused - layers[1]).abs().max() < 1e-6


def test_fuse_identical_layers_weight_invariant(rng):
    base = rng.standard_normal((1, 10, 8)).astype(np.float32)
    layers = torch.from_numpy(np.repeat(base, 4, axis=0))
    a = fuse_layers(layers, torch.tensor([0.0, 1.0, -1.0, 2.0]))
    assert torch.allclose(a, torch.from_numpy(base[0]), atol=1e-6)


def test_fuse_rejects_layer_mismatch(rng):
    layers = torch.zeros(3, 10, 8)
    with pytest.raises(ValueError, match="3 layer logits"):
        fuse_layers(layers, torch.zeros(4))


def test_fusion_convexity_envelope(rng):
    layers = torch.from_numpy(rng.standard_normal((4, 12, 6)).astype(np.float32))
    fused = fuse_layers(layers, torch.from_numpy(rng.standard_normal(4).astype(np.float32)))
    lo = layers.min(dim=0).values
    hi = layers.max(dim=0).values
    assert (fused >= lo - 1e-6).all() and (fused <= hi + 1e-6).all()


def test_compress_stride_arithmetic(rng):
    enc = AudioEncoder(num_layers=3, in_channels=40, width=32, hidden=16)
    fused = torch.from_numpy(rng.standard_normal((48, 40)).astype(np.float32))
    out = enc.compress(fused)
    assert out.shape == (12, 32)


def test_compress_causality_probe(rng):
    enc = AudioEncoder(num_layers=3, in_channels=8, width=16, hidden=8)
    x = torch.from_numpy(rng.standard_normal((40, 8)).astype(np.float32))
    with torch.no_grad():
        base = enc.compress(x)
        perturbed = x.clone()
        perturbed[-1] += 5.0
        out = enc.compress(perturbed)
    # all output steps whose dependency window ends before the final input frame
    # must be bit-identical
    assert torch.equal(base[:-1], out[:-1])
    # perturbing an input frame that is actually consumed flips the last step
    perturbed2 = x.clone()
    perturbed2[36] += 5.0  # last step depends on inputs <= 4*9 = 36
    with torch.no_grad():
        out2 = enc.compress(perturbed2)
    assert torch.equal(base[:-1], out2[:-1])
    assert not torch.equal(base[-1], out2[-1])


def test_compress_zero_in_zero_out(rng):
    enc = AudioEncoder(num_layers=3, in_channels=8, width=16, hidden=8)
    with torch.no_grad():
        enc.conv1.conv.bias.zero_()
        enc.conv2.conv.bias.zero_()
        out = enc.compress(torch.zeros(20, 8))
    assert not out.abs().any()


def test_compress_too_short_reports_minimum(rng):
    enc = AudioEncoder(num_layers=3, in_channels=8, width=16, hidden=8)
    with pytest.raises(ValueError, match=f"at least {enc.min_input_frames}"):
        enc.compress(torch.zeros(enc.min_input_frames - 1, 8))


def test_align_shape_contract(rng):
    comp = torch.from_numpy(rng.standard_normal((13, 16)).astype(np.float32))
    out = align_to_latent(
        comp, 4, 4, feature_rate=50, stride_total=4, fps=8, temporal_factor=2
    )
    assert out.shape == (4, 4, 16)


def test_align_timestamp_oracle():
    # every selected step's dependency-end timestamp must fall inside (or
    # before the end of) the owning frame's span
    idx = alignment_indices(
        13, 4, 4, feature_rate=50, stride_total=4, fps=8, temporal_factor=2
    )
    ts = step_timestamps(13, 4, 50)
    frame_dur = 2 / 8
    for i in range(4):
        assert (ts[idx[i]] <= (i + 1) * frame_dur + 1e-9).all()
    # with several candidates per span, selected steps should also start within
    inside = [(ts[idx[i]] >= i * frame_dur - 1e-9).all() for i in range(4)]
    assert all(inside)


def test_align_shift_oracle():
    base = alignment_indices(
        26, 2, 4, feature_rate=50, stride_total=4, fps=8, temporal_factor=2, frame_offset=0
    )
    shifted = alignment_indices(
        26, 2, 4, feature_rate=50, stride_total=4, fps=8, temporal_factor=2, frame_offset=2
    )
    # a two-latent-frame offset moves the span by 0.5 s = 25 feature frames
    # = 6.25 compressed steps; allow the floor-induced off-by-one
    delta = shifted - base
    assert (delta >= 6).all() and (delta <= 7).all()


def test_align_rejects_short_audio():
    comp = torch.zeros(3, 8)
    with pytest.raises(ValueError, match="shorter"):
        align_to_latent(
            comp, 8, 4, feature_rate=50, stride_total=4, fps=8, temporal_factor=2
        )


def test_alignment_totality():
    idx = alignment_indices(
        13, 4, 4, feature_rate=50, stride_total=4, fps=8, temporal_factor=2
    )
    assert idx.shape == (4, 4)
    # each frame owns exactly t_a output tokens and the index table is total
    assert (idx >= 0).all() and (idx < 13).all()


def full_pipeline(enc, wave, f_target, frame_offset=0):
    feats = extract_features(wave, AudioFeatureConfig(bands=enc.in_channels, layers=enc.num_layers))
    layered = torch.from_numpy(feats.data)
    with torch.no_grad():
        comp = enc(layered)
        return align_to_latent(
            comp, f_target, 4,
            feature_rate=50, stride_total=enc.stride_total, fps=8, temporal_factor=2,
            frame_offset=frame_offset,
        )


def test_end_to_end_causality(rng):
    enc = AudioEncoder(num_layers=3, in_channels=40, width=16, hidden=8)
    rate = 16000
    for _ in range(20):
        wave = make_wave(rng, 1.0, rate)
        base = full_pipeline(enc, wave, 4)
        tau = float(rng.uniform(0.3, 1.0))
        cut = int(tau * rate)
        perturbed = wave.samples.copy()
        perturbed[cut:] = rng.uniform(-1, 1, rate - cut).astype(np.float32)
        out = full_pipeline(enc, AudioWave(perturbed, rate), 4)
        frame_dur = 2 / 8
        for i in range(4):
            if (i + 1) * frame_dur <= tau:
                assert torch.equal(base[i], out[i]), f"frame {i} changed, tau={tau}"


def test_feature_file_round_trip(rng, tmp_path, fcfg):
    feats = extract_features(make_wave(rng), fcfg)
    path = tmp_path / "feats.avf"
    save_features(path, feats)
    back = load_features(path)
    assert np.array_equal(back.data, feats.data)
    assert back.feature_rate == feats.feature_rate


def test_layered_features_validation():
    from avflow.audio import LayeredAudioFeatures

    with pytest.raises(ValueError, match="at least 2"):
        LayeredAudioFeatures(np.zeros((1, 10, 4), dtype=np.float32), 50)


def test_encoder_fuse_checks_layer_count(rng):
    enc = AudioEncoder(num_layers=3, in_channels=8, width=16, hidden=8)
    with pytest.raises(ValueError, match="fuses 3 layers"):
        enc.fuse(torch.zeros(4, 10, 8))
