import numpy as np
import pytest

from avflow.codec import CodecConfig, LatentVideo, PixelVideo, decode, encode, encode_reference

from conftest import random_video


def test_shape_contract(video, codec_cfg):
    lat = encode(video, codec_cfg)
    assert lat.data.shape == (4, 16, 16, 96)


def test_constant_zero_video_maps_to_zero_latent(codec_cfg):
    vid = PixelVideo(np.zeros((8, 64, 64, 3), dtype=np.float32))
    assert not encode(vid, codec_cfg).data.any()


def test_round_trip_exact(rng, codec_cfg):
    for _ in range(20):
        vid = random_video(rng, frames=4, size=32)
        lat = encode(vid, codec_cfg)
        back = decode(lat, codec_cfg, fps=vid.fps)
        assert np.array_equal(back.data, vid.data)


def test_decode_shape_and_ones(codec_cfg):
    lat = LatentVideo(np.ones((4, 16, 16, 96), dtype=np.float32))
    vid = decode(lat, codec_cfg)
    assert vid.data.shape == (8, 64, 64, 3)
    assert np.array_equal(vid.data, np.ones_like(vid.data))


def test_encode_decode_identity_on_latents(rng, codec_cfg):
    lat = LatentVideo(rng.uniform(-1, 1, (4, 16, 16, 96)).astype(np.float32))
    again = encode(decode(lat, codec_cfg), codec_cfg)
    assert np.array_equal(again.data, lat.data)


def test_linearity(rng, codec_cfg):
    x = random_video(rng, frames=4, size=32)
    y = random_video(rng, frames=4, size=32)
    a, b = 0.3, 0.5
    mixed = PixelVideo(a * x.data + b * y.data)
    lhs = encode(mixed, codec_cfg).data
    rhs = a * encode(x, codec_cfg).data + b * encode(y, codec_cfg).data
    assert np.allclose(lhs, rhs, atol=1e-7)


def test_divisibility_violation_reports_dimensions(codec_cfg):
    vid = PixelVideo(np.zeros((7, 64, 64, 3), dtype=np.float32))
    with pytest.raises(ValueError, match="F=7"):
        encode(vid, codec_cfg)
    vid = PixelVideo(np.zeros((8, 62, 64, 3), dtype=np.float32))
    with pytest.raises(ValueError, match="H=62"):
        encode(vid, codec_cfg)


def test_decode_rejects_wrong_channels(codec_cfg):
    lat = LatentVideo(np.zeros((4, 16, 16, 95), dtype=np.float32))
    with pytest.raises(ValueError, match="95 channels"):
        decode(lat, codec_cfg)


def test_pixel_video_validation():
    with pytest.raises(ValueError, match="non-finite"):
        PixelVideo(np.full((1, 4, 4, 3), np.nan, dtype=np.float32))
    with pytest.raises(ValueError, match=r"\[-1, 1\]"):
        PixelVideo(np.full((1, 4, 4, 3), 2.0, dtype=np.float32))
    with pytest.raises(ValueError, match="fps"):
        PixelVideo(np.zeros((1, 4, 4, 3), dtype=np.float32), fps=0)


def test_encode_reference_shape_and_zero(codec_cfg):
    img = PixelVideo(np.zeros((1, 64, 64, 3), dtype=np.float32))
    lat = encode_reference(img, codec_cfg)
    assert lat.data.shape == (1, 16, 16, 96)
    assert not lat.data.any()


def test_encode_reference_rejects_multiframe(codec_cfg):
    vid = PixelVideo(np.zeros((2, 64, 64, 3), dtype=np.float32))
    with pytest.raises(ValueError, match="single frame"):
        encode_reference(vid, codec_cfg)


def test_encode_reference_round_trip(rng, codec_cfg):
    img = random_video(rng, frames=1, size=32)
    lat = encode_reference(img, codec_cfg)
    back = decode(lat, codec_cfg)
    expected = np.repeat(img.data, codec_cfg.temporal_factor, axis=0)
    assert np.array_equal(back.data, expected)


def test_codec_config_validation():
    with pytest.raises(ValueError):
        CodecConfig(temporal_factor=0)
    assert CodecConfig(2, 4).latent_channels == 96
