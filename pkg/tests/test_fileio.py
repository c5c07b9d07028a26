import struct
import zlib
from collections import OrderedDict
from dataclasses import fields

import numpy as np
import pytest

from spirdet.backbone import build_model, fuse_model, named_arrays, randomize_bn
from spirdet.config import ConfigError, ModelConfig, toy_config, variant_config
from spirdet.fileio import (ImageFormatError, WeightFormatError, decode_pgm, decode_weights, encode_pgm,
                            encode_weights, load_config, load_model, load_weights, parse_config, read_image,
                            render_config, save_config, save_model, save_weights, write_image)


def sample_arrays(rng):
    return OrderedDict([("a.weight", rng.standard_normal((3, 2, 3, 3)).astype(np.float32)),
                        ("b", rng.standard_normal(5).astype(np.float32)),
                        ("scalar", np.float32(2.5).reshape(())),
                        ("empty", np.zeros((0, 4), np.float32))])


def test_weight_round_trip_bit_exact(tmp_path, rng):
    arrays = sample_arrays(rng)
    save_weights(arrays, tmp_path / "w.spir", fused=True)
    ws = load_weights(tmp_path / "w.spir")
    assert ws.fused and list(ws.arrays) == list(arrays)
    for k in arrays:
        assert ws.arrays[k].dtype == np.float32 and ws.arrays[k].shape == arrays[k].shape
        assert ws.arrays[k].tobytes() == arrays[k].tobytes()
    assert not (tmp_path / "w.spir.tmp").exists()


def test_layout_matches_documented_format(rng):
    data = encode_weights(OrderedDict([("xy", np.array([1.0, 2.0], np.float32))]))
    assert data[:4] == b"SPIR"
    assert struct.unpack_from("<HHI", data, 4) == (1, 0, 1)
    body = data[12:-4]
    assert body == struct.pack("<H", 2) + b"xy" + struct.pack("<BI", 1, 2) + np.array([1, 2], "<f4").tobytes()
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(body)


def test_corrupt_payload_byte_fails_crc(rng):
    data = bytearray(encode_weights(sample_arrays(rng)))
    data[40] ^= 0x01
    with pytest.raises(WeightFormatError, match="CRC"):
        decode_weights(bytes(data))


def test_unknown_version_rejected(rng):
    data = bytearray(encode_weights(sample_arrays(rng)))
    struct.pack_into("<H", data, 4, 7)
    with pytest.raises(WeightFormatError) as e:
        decode_weights(bytes(data))
    assert e.value.offset == 4 and "version" in str(e.value)


def test_bad_magic_and_truncation(rng):
    data = encode_weights(sample_arrays(rng))
    with pytest.raises(WeightFormatError):
        decode_weights(b"NOPE" + data[4:])
    with pytest.raises(WeightFormatError):
        decode_weights(data[:8])
    # a shortened body with a valid checksum is still caught by the structure walk
    cut = data[12:-30]
    fake = data[:12] + cut + struct.pack("<I", zlib.crc32(cut))
    with pytest.raises(WeightFormatError, match="truncated"):
        decode_weights(fake)


def test_model_round_trip(tmp_path):
    cfg = toy_config()
    m = randomize_bn(build_model(cfg, 5), 5)
    for model in (m, fuse_model(m)):
        save_model(model, tmp_path / "m.spir")
        back = load_model(cfg, tmp_path / "m.spir")
        assert back.fused == model.fused
        for (na, a), (nb, b) in zip(named_arrays(model), named_arrays(back)):
            assert na == nb and a.tobytes() == b.tobytes()


def test_weights_must_fit_config(tmp_path):
    save_model(build_model(toy_config()), tmp_path / "m.spir")
    with pytest.raises(ValueError):
        load_model(toy_config(channels_per_stage=(4, 8, 16, 16)), tmp_path / "m.spir")


@pytest.mark.parametrize("cfg", [toy_config(), variant_config("m"), variant_config("t", alpha=0.0123, K=3),
                                 ModelConfig(variant="custom", blocks_per_stage=(1, 1, 1), channels_per_stage=(2, 4, 4),
                                             input_size=(16, 24), coarse_ratio=4, fine_ratio=2, alpha=0.25)])
def test_config_round_trip(tmp_path, cfg):
    assert parse_config(render_config(cfg)) == cfg
    save_config(cfg, tmp_path / "c.cfg")
    back = load_config(tmp_path / "c.cfg")
    for f in fields(ModelConfig):
        assert getattr(back, f.name) == getattr(cfg, f.name)


def test_config_parse_errors():
    with pytest.raises(ConfigError) as e:
        parse_config("variant = lr\nwidth = 3\n")
    assert e.value.field == "width"
    with pytest.raises(ConfigError):
        parse_config("K = 2\nK = 3\n")
    with pytest.raises(ConfigError):
        parse_config("K = two\n")
    with pytest.raises(ConfigError):
        parse_config("just words\n")
    assert parse_config("# comment\nvariant = lr  # trailing\nK = 2\n").K == 2


def test_hand_written_pgm(tmp_path):
    pix = bytes([0, 255, 128, 1, 2, 3, 4, 5, 10, 20, 30, 40, 200, 201, 202, 203])
    (tmp_path / "a.pgm").write_bytes(b"P5\n# made by hand\n4 4\n255\n" + pix)
    x = read_image(tmp_path / "a.pgm")
    assert x.shape == (1, 4, 4) and x.dtype == np.float32
    assert x[0, 0, 0] == 0.0 and x[0, 0, 1] == 1.0
    np.testing.assert_allclose(x[0].ravel(), np.frombuffer(pix, np.uint8) / 255.0, rtol=1e-7)


def test_image_round_trip_8bit(tmp_path, rng):
    img8 = rng.integers(0, 256, (7, 9)).astype(np.uint8)
    for name in ("a.pgm", "a.raw"):
        write_image(img8 / 255.0, tmp_path / name)
        back = read_image(tmp_path / name)
        np.testing.assert_array_equal(np.round(back[0] * 255).astype(np.uint8), img8)
        write_image(back, tmp_path / ("b" + name[1:]))
        assert (tmp_path / ("b" + name[1:])).read_bytes() == (tmp_path / name).read_bytes()


def test_bad_images(tmp_path):
    (tmp_path / "p2.pgm").write_bytes(b"P2\n2 2\n255\n0 0 0 0")
    with pytest.raises(ImageFormatError):
        read_image(tmp_path / "p2.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(5))
    with pytest.raises(ImageFormatError):
        read_image(tmp_path / "short.pgm")
    (tmp_path / "x.raw").write_bytes(bytes(6))
    with pytest.raises(ImageFormatError):
        read_image(tmp_path / "x.raw")
    (tmp_path / "x.raw.dims").write_text("2 2\n")
    with pytest.raises(ImageFormatError):
        read_image(tmp_path / "x.raw")
    with pytest.raises(ImageFormatError):
        write_image(np.zeros((2, 3, 3)), tmp_path / "c.pgm")


def test_pgm_codec_round_trip(rng):
    a = rng.integers(0, 256, (3, 5)).astype(np.uint8)
    np.testing.assert_array_equal(decode_pgm(encode_pgm(a)), a)
