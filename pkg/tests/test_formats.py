import struct
import zlib

import numpy as np
import pytest

from barprune import formats
from barprune.data import Dataset, generate_patterns, make_splits, to_inputs
from barprune.errors import IntegrityError
from barprune.tensor import Rng


def arrays(rng):
    return {
        "w": rng.normal(size=(3, 2, 3, 3)).astype(np.float32),
        "idx": np.array([0, 4, 9], np.uint32),
        "scalar": np.array(1.5, np.float32),
        "empty": np.zeros((0, 4), np.float32),
        "ünï": np.arange(5, dtype=np.uint32),
    }


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_layout_by_hand():
    data = formats.encode_checkpoint({"ab": np.array([[1.0, 2.0]], np.float32)})
    body = b"BARCKPT1" + struct.pack("<I", 1) + struct.pack("<H", 2) + b"ab" + bytes([0, 2])
    body += struct.pack("<2I", 1, 2) + struct.pack("<2f", 1.0, 2.0)
    assert data == body + struct.pack("<I", zlib.crc32(body))


def test_checkpoint_roundtrip_byte_identical(tmp_path, rng):
    src = arrays(rng)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    formats.save_checkpoint(p1, src)
    back = formats.load_checkpoint(p1)
    assert list(back) == list(src)
    for k in src:
        assert back[k].dtype == src[k].dtype and np.array_equal(back[k], src[k])
    formats.save_checkpoint(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_every_single_bit_flip_detected(rng):
    data = bytearray(formats.encode_checkpoint({"w": rng.normal(size=(2, 3)).astype(np.float32)}))
    for byte in range(len(data)):
        for bit in range(8):
            data[byte] ^= 1 << bit
            with pytest.raises(IntegrityError):
                formats.decode_checkpoint(bytes(data))
            data[byte] ^= 1 << bit
    formats.decode_checkpoint(bytes(data))


def test_checkpoint_truncated_and_bad_magic(rng):
    data = formats.encode_checkpoint({"w": np.ones(3, np.float32)})
    with pytest.raises(IntegrityError):
        formats.decode_checkpoint(data[:-7])
    body = b"NOTACKPT" + data[8:-4]
    with pytest.raises(IntegrityError, match="magic"):
        formats.decode_checkpoint(body + struct.pack("<I", zlib.crc32(body)))


def test_checkpoint_error_names_file(tmp_path):
    p = tmp_path / "x.ckpt"
    formats.save_checkpoint(p, {"w": np.ones(3, np.float32)})
    raw = bytearray(p.read_bytes())
    raw[12] ^= 0x10
    p.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError, match="x.ckpt"):
        formats.load_checkpoint(p)


def test_checkpoint_dtype_handling():
    back = formats.decode_checkpoint(formats.encode_checkpoint({"w": np.full(3, 0.1, np.float64)}))
    assert back["w"].dtype == np.float32 and np.array_equal(back["w"], np.full(3, 0.1, np.float32))
    with pytest.raises(TypeError):
        formats.encode_checkpoint({"w": np.ones(3, np.int64)})


# ---------------------------------------------------------------------------
# logits cache


def test_cache_roundtrip_and_layout(tmp_path, rng):
    logits = rng.normal(size=(7, 4)).astype(np.float32)
    data = formats.encode_cache(logits)
    assert data[:8] == b"BARLOGT1"
    assert struct.unpack_from("<2I", data, 8) == (7, 4)
    assert len(data) == 8 + 8 + 7 * 4 * 4 + 4
    p1, p2 = tmp_path / "a.logits", tmp_path / "b.logits"
    formats.save_cache(p1, logits)
    back = formats.load_cache(p1)
    assert np.array_equal(back, logits)
    formats.save_cache(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_cache_bit_flip_detected(rng):
    data = bytearray(formats.encode_cache(rng.normal(size=(3, 2)).astype(np.float32)))
    for byte in range(0, len(data), 3):
        data[byte] ^= 0x01
        with pytest.raises(IntegrityError):
            formats.decode_cache(bytes(data))
        data[byte] ^= 0x01


# ---------------------------------------------------------------------------
# IDX datasets


def test_idx_sizes_and_headers(tmp_path):
    pixels, labels = generate_patterns(500, 4, 16, 3, seed=0)
    ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
    formats.save_idx(ip, lp, pixels, labels)
    raw = ip.read_bytes()
    assert len(raw) == 20 + 500 * 16 * 16 * 3
    assert struct.unpack_from(">5I", raw) == (0x00000803, 500, 16, 16, 3)
    assert len(lp.read_bytes()) == 8 + 500
    assert struct.unpack_from(">2I", lp.read_bytes()) == (0x00000801, 500)


def test_idx_roundtrip_byte_identical(tmp_path):
    pixels, labels = generate_patterns(37, 3, 8, 2, seed=4)
    a = (tmp_path / "a.idx", tmp_path / "al.idx")
    b = (tmp_path / "b.idx", tmp_path / "bl.idx")
    formats.save_idx(*a, pixels, labels)
    p2, l2 = formats.load_idx(*a)
    assert np.array_equal(p2, pixels) and np.array_equal(l2, labels)
    formats.save_idx(*b, p2, l2)
    assert a[0].read_bytes() == b[0].read_bytes() and a[1].read_bytes() == b[1].read_bytes()


def test_idx_corruption(tmp_path):
    pixels, labels = generate_patterns(10, 2, 4, 1, seed=1)
    ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
    formats.save_idx(ip, lp, pixels, labels)
    good_i = ip.read_bytes()
    ip.write_bytes(good_i[:-1])
    with pytest.raises(IntegrityError, match="i.idx"):
        formats.load_idx(ip, lp)
    ip.write_bytes(b"\x00\x00\x08\x01" + good_i[4:])
    with pytest.raises(IntegrityError, match="magic"):
        formats.load_idx(ip, lp)
    ip.write_bytes(good_i)
    formats.save_idx(tmp_path / "x.idx", lp, pixels[:9], labels[:9])
    with pytest.raises(IntegrityError):
        formats.load_idx(ip, lp)


def test_idx_count_mismatch_on_save(tmp_path):
    pixels, labels = generate_patterns(4, 2, 4, 1)
    with pytest.raises(ValueError):
        formats.save_idx(tmp_path / "i", tmp_path / "l", pixels, labels[:3])


# ---------------------------------------------------------------------------
# synthetic data


def test_generator_deterministic_and_streams_differ():
    a = generate_patterns(50, seed=3)
    b = generate_patterns(50, seed=3)
    c = generate_patterns(50, seed=3, stream=1)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], c[0])


def test_generator_balanced_labels():
    _, labels = generate_patterns(500, 4, seed=0)
    assert np.bincount(labels, minlength=4).tolist() == [125] * 4


def test_generator_shapes():
    pixels, labels = generate_patterns(6, 3, 10, 2)
    assert pixels.shape == (6, 10, 10, 2) and pixels.dtype == np.uint8
    assert labels.max() < 3


def test_inputs_scaling():
    x = to_inputs(np.full((1, 2, 2, 3), 255, np.uint8))
    assert x.shape == (1, 3, 2, 2) and x.dtype == np.float32
    assert np.allclose(x, 2.0)


def test_dataset_validation_and_batches():
    pixels, labels = generate_patterns(10, 2, 4, 1)
    with pytest.raises(ValueError):
        Dataset(pixels, labels, 1)
    with pytest.raises(ValueError):
        Dataset(pixels[:9], labels, 2)
    ds = Dataset(pixels, labels, 2)
    seen = np.concatenate([idx for idx, _, _ in ds.batches(4, Rng(0))])
    assert sorted(seen.tolist()) == list(range(10))
    ordered = [idx.tolist() for idx, _, _ in ds.batches(4)]
    assert ordered == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]


def test_classes_recoverable_by_spectral_logistic_regression():
    """Independent learnability oracle: orientation shows up in the power spectrum."""
    tr, _ = make_splits(train=800, eval_=10)
    feats = np.log1p(np.abs(np.fft.fft2(tr.x.mean(axis=1))) ** 2).reshape(len(tr), -1)
    feats = (feats - feats.mean(0)) / (feats.std(0) + 1e-8)
    w = np.zeros((feats.shape[1], 4))
    onehot = np.eye(4)[tr.y]
    for _ in range(300):
        z = feats @ w
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        w -= 0.5 * feats.T @ (p - onehot) / len(feats)
    assert ((feats @ w).argmax(1) == tr.y).mean() > 0.8
