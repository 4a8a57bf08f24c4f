"""Image I/O, patch sampling, config text, CSV, and atomic-write tests."""

import os

import numpy as np
import pytest

from qrcodec.data import (
    ConfigError, ImageBuffer, PatchDataset, PPMError, atomic_write_bytes,
    config_hash, extract_patches, load_config, load_image_dir, load_ppm,
    parse_config_text, read_csv, resolve_seed, save_ppm, write_csv,
)


# --------------------------------------------------------------------------
# PPM
# --------------------------------------------------------------------------

def write_bytes(path, data):
    with open(path, "wb") as f:
        f.write(data)
    return str(path)


def test_golden_two_pixel_file(tmp_path):
    path = write_bytes(tmp_path / "two.ppm",
                       b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255]))
    buf = load_ppm(path)
    assert (buf.width, buf.height) == (2, 1)
    np.testing.assert_array_equal(buf.pixels[:, 0, 0], [255, 0, 0])
    np.testing.assert_array_equal(buf.pixels[:, 0, 1], [0, 0, 255])
    assert buf.source == "two.ppm"


def test_load_save_roundtrip_byte_stable(tmp_path):
    rng = np.random.default_rng(0)
    buf = ImageBuffer(rng.integers(0, 256, size=(3, 5, 7), dtype=np.uint8))
    p1, p2 = str(tmp_path / "a.ppm"), str(tmp_path / "b.ppm")
    save_ppm(buf, p1)
    save_ppm(load_ppm(p1), p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_comments_in_header(tmp_path):
    raw = b"P6 # format\n# a comment line\n2\n# width done\n1 255\n" + bytes(6)
    buf = load_ppm(write_bytes(tmp_path / "c.ppm", raw))
    assert (buf.width, buf.height) == (2, 1)
    np.testing.assert_array_equal(buf.pixels, 0)


def test_truncated_names_byte_offset(tmp_path):
    path = write_bytes(tmp_path / "t.ppm", b"P6\n2 2\n255\n" + bytes(10))
    with pytest.raises(PPMError, match="byte offset 21"):
        load_ppm(path)  # header is 11 bytes, need 12 pixel bytes, got 10


def test_bad_headers_rejected(tmp_path):
    cases = [
        (b"P5\n2 1\n255\n" + bytes(6), "magic"),
        (b"P6\n2 1\n65535\n" + bytes(6), "maxval"),
        (b"P6\n2 x\n255\n" + bytes(6), "height"),
        (b"P6\n0 1\n255\n", "dimensions"),
        (b"P6\n2", "ended early"),
    ]
    for i, (raw, pattern) in enumerate(cases):
        with pytest.raises(PPMError, match=pattern):
            load_ppm(write_bytes(tmp_path / f"bad{i}.ppm", raw))


def test_unit_conversion_exact_roundtrip():
    rng = np.random.default_rng(1)
    buf = ImageBuffer(rng.integers(0, 256, size=(3, 4, 4), dtype=np.uint8))
    again = ImageBuffer.from_unit(buf.to_unit())
    np.testing.assert_array_equal(again.pixels, buf.pixels)
    clipped = ImageBuffer.from_unit(np.array([[[-0.2]], [[0.5]], [[1.7]]]))
    np.testing.assert_array_equal(clipped.pixels.ravel(), [0, 128, 255])


def test_image_buffer_validation():
    with pytest.raises(ValueError, match="uint8"):
        ImageBuffer(np.zeros((3, 2, 2)))
    with pytest.raises(ValueError, match=r"\(3,H,W\)"):
        ImageBuffer(np.zeros((1, 2, 2), dtype=np.uint8))


def test_load_image_dir_sorted(tmp_path):
    for name in ("b.ppm", "a.ppm", "skip.txt"):
        write_bytes(tmp_path / name, b"P6\n1 1\n255\n" + bytes(3))
    bufs = load_image_dir(str(tmp_path))
    assert [b.source for b in bufs] == ["a.ppm", "b.ppm"]
    os.mkdir(tmp_path / "empty")
    with pytest.raises(FileNotFoundError, match="no .ppm"):
        load_image_dir(str(tmp_path / "empty"))


# --------------------------------------------------------------------------
# patches
# --------------------------------------------------------------------------

def coordinate_image(h, w):
    # channel 0 encodes the row index, channel 1 the column index
    pix = np.zeros((3, h, w), dtype=np.uint8)
    pix[0] = np.arange(h)[:, None]
    pix[1] = np.arange(w)[None, :]
    return ImageBuffer(pix, source=f"coord{h}x{w}.ppm")


def test_exact_size_image_gives_full_patch():
    ds = PatchDataset([coordinate_image(4, 4)], patch_size=4)
    batch = extract_patches(ds, 3, seed=0)
    assert batch.shape == (3, 3, 4, 4)
    for i in range(3):
        np.testing.assert_array_equal(batch[i], ds.units[0])


def test_same_seed_same_patches():
    ds = PatchDataset([coordinate_image(16, 16)], patch_size=8)
    a = extract_patches(ds, 10, seed=42)
    b = extract_patches(ds, 10, seed=42)
    np.testing.assert_array_equal(a, b)
    c = extract_patches(ds, 10, seed=43)
    assert not np.array_equal(a, c)


def test_small_images_skipped_with_warning():
    big, small = coordinate_image(8, 8), coordinate_image(4, 8)
    with pytest.warns(UserWarning, match="smaller than"):
        ds = PatchDataset([big, small], patch_size=8)
    assert len(ds) == 1
    with pytest.raises(ValueError, match="no images"), \
            pytest.warns(UserWarning):
        PatchDataset([small], patch_size=8)


def test_offset_histogram_uniform():
    # patch 2 in a 9x9 image: 8x8 equally likely (top, left) cells
    ds = PatchDataset([coordinate_image(9, 9)], patch_size=2)
    n = 100_000
    batch = extract_patches(ds, n, seed=7)
    tops = np.rint(batch[:, 0, 0, 0] * 255).astype(int)
    lefts = np.rint(batch[:, 1, 0, 0] * 255).astype(int)
    counts = np.zeros((8, 8))
    np.add.at(counts, (tops, lefts), 1)
    expected = n / 64
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < 110  # chi-square_{0.999, 63 dof} ~= 103.4


def test_image_choice_roughly_uniform():
    first, second = coordinate_image(4, 4), coordinate_image(4, 4)
    second.pixels[2] = 9  # marker channel identifies the source image
    ds = PatchDataset([first, second], patch_size=4)
    batch = extract_patches(ds, 4000, seed=3)
    from_second = (np.rint(batch[:, 2, 0, 0] * 255) == 9).sum()
    assert 1700 < from_second < 2300


# --------------------------------------------------------------------------
# config text
# --------------------------------------------------------------------------

def test_parse_config_text():
    cfg = parse_config_text(
        "# training setup\n"
        "profile = desk\n"
        "\n"
        "q = 2\n"
        "lr = 1e-4\n")
    assert cfg == {"profile": "desk", "q": "2", "lr": "1e-4"}


def test_config_errors():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("just words")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("a = 1\na = 2")
    with pytest.raises(ConfigError, match="empty key"):
        parse_config_text("= 3")


def test_load_config(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("seed = 9\nalpha = 0.001\n")
    assert load_config(str(path)) == {"seed": "9", "alpha": "0.001"}


def test_config_hash_stable_and_order_free():
    a = config_hash({"a": "1", "b": "2"})
    b = config_hash({"b": "2", "a": "1"})
    assert a == b and len(a) == 16
    assert config_hash({"a": "1", "b": "3"}) != a


def test_resolve_seed_env_override(monkeypatch):
    monkeypatch.delenv("QRCODEC_SEED", raising=False)
    assert resolve_seed(5) == 5
    monkeypatch.setenv("QRCODEC_SEED", "1234")
    assert resolve_seed(5) == 1234
    monkeypatch.setenv("QRCODEC_SEED", "soup")
    with pytest.raises(ConfigError, match="QRCODEC_SEED"):
        resolve_seed(5)


# --------------------------------------------------------------------------
# atomic writes and CSV
# --------------------------------------------------------------------------

def test_atomic_write_leaves_no_temp_files(tmp_path):
    path = str(tmp_path / "out.bin")
    atomic_write_bytes(path, b"one")
    atomic_write_bytes(path, b"two")  # atomic replace
    assert open(path, "rb").read() == b"two"
    assert sorted(p.name for p in tmp_path.iterdir()) == ["out.bin"]


def test_csv_roundtrip_with_comments(tmp_path):
    path = str(tmp_path / "log.csv")
    rows = [{"epoch": 0, "loss": 1.5}, {"epoch": 1, "loss": 0.75}]
    write_csv(path, ["epoch", "loss"], rows,
              comments=["config 0123abcd", "seed 7"])
    comments, back = read_csv(path)
    assert comments == ["config 0123abcd", "seed 7"]
    assert back == [{"epoch": "0", "loss": "1.5"}, {"epoch": "1", "loss": "0.75"}]
