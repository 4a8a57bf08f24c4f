"""Image files, patch sampling, flat config text, CSV logs, atomic writes.

Images travel as binary PPM (P6, maxval 255): dependency-free and bit-exact
to test.  Storage is 8-bit; compute is real [0,1] via v/255 one way and
round(v*255) clamped the other, so 8-bit-representable values roundtrip
exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io
import os
import tempfile
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PPMError", "ConfigError", "ImageBuffer", "load_ppm", "save_ppm",
    "load_image_dir", "PatchDataset", "extract_patches",
    "parse_config_text", "load_config", "config_hash", "resolve_seed",
    "atomic_write_bytes", "atomic_write_text", "write_csv", "read_csv",
]

SEED_ENV_VAR = "QRCODEC_SEED"


class PPMError(ValueError):
    """Malformed, truncated, or unsupported PPM file."""


class ConfigError(ValueError):
    """Malformed configuration text."""


@dataclass
class ImageBuffer:
    """8-bit RGB image stored channel-first as (3, H, W) uint8."""

    pixels: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"expected (3,H,W) pixels, got {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise ValueError(f"expected uint8 samples, got {self.pixels.dtype}")

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    def to_unit(self) -> np.ndarray:
        """Real-valued view in [0,1], float64."""
        return self.pixels.astype(np.float64) / 255.0

    @classmethod
    def from_unit(cls, arr: np.ndarray, source: str = "") -> "ImageBuffer":
        arr = np.asarray(arr, dtype=np.float64)
        samples = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
        return cls(samples, source)


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    # whitespace and '#' comments may separate any header tokens
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PPMError(f"header ended early at byte offset {start}")
    return data[start:pos], pos


def load_ppm(path: str) -> ImageBuffer:
    with open(path, "rb") as f:
        data = f.read()
    magic, pos = _read_token(data, 0)
    if magic != b"P6":
        raise PPMError(f"{path}: not a binary PPM (magic {magic!r}, need P6)")
    fields = []
    for name in ("width", "height", "maxval"):
        tok, pos = _read_token(data, pos)
        if not tok.isdigit():
            raise PPMError(f"{path}: bad {name} token {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PPMError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise PPMError(f"{path}: maxval {maxval} unsupported, need 255")
    pos += 1  # single whitespace byte after maxval
    need = 3 * width * height
    pixels = data[pos:pos + need]
    if len(pixels) < need:
        raise PPMError(f"{path}: truncated pixel data at byte offset "
                       f"{pos + len(pixels)} (need {pos + need} bytes total)")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
    return ImageBuffer(arr.transpose(2, 0, 1).copy(), source=os.path.basename(path))


def save_ppm(buf: ImageBuffer, path: str):
    header = f"P6\n{buf.width} {buf.height}\n255\n".encode("ascii")
    body = buf.pixels.transpose(1, 2, 0).tobytes()
    atomic_write_bytes(path, header + body)


def load_image_dir(path: str) -> list[ImageBuffer]:
    """All .ppm files under a directory, sorted by name."""
    names = sorted(n for n in os.listdir(path) if n.lower().endswith(".ppm"))
    if not names:
        raise FileNotFoundError(f"no .ppm images in {path}")
    return [load_ppm(os.path.join(path, n)) for n in names]


@dataclass
class PatchDataset:
    """Fixed-size random crops from a pool of images.

    Images smaller than the patch size are skipped with a warning; an empty
    usable pool is an error.  A fixed seed yields an identical patch
    sequence.
    """

    images: list
    patch_size: int = 64
    units: list = field(init=False)

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError(f"patch size {self.patch_size} < 1")
        self.units = []
        for buf in self.images:
            if buf.height < self.patch_size or buf.width < self.patch_size:
                warnings.warn(f"skipping {buf.source or 'image'}: "
                              f"{buf.width}x{buf.height} smaller than "
                              f"patch size {self.patch_size}")
                continue
            self.units.append(buf.to_unit())
        if not self.units:
            raise ValueError(f"no images at least {self.patch_size}px in "
                             f"both dimensions")

    def __len__(self):
        return len(self.units)


def extract_patches(dataset: PatchDataset, n: int, seed: int) -> np.ndarray:
    """n patches as (n, 3, P, P) float64; offsets uniform over valid positions."""
    rng = np.random.default_rng(seed)
    p = dataset.patch_size
    out = np.empty((n, 3, p, p))
    for i in range(n):
        img = dataset.units[rng.integers(len(dataset.units))]
        top = rng.integers(img.shape[1] - p + 1)
        left = rng.integers(img.shape[2] - p + 1)
        out[i] = img[:, top:top + p, left:left + p]
    return out


# --------------------------------------------------------------------------
# Config text: flat `key = value`, '#' comments, no nesting
# --------------------------------------------------------------------------

def parse_config_text(text: str) -> dict:
    cfg = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in cfg:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        cfg[key] = value
    return cfg


def load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())


def config_hash(cfg: dict) -> str:
    """Stable short digest of a config mapping, for log headers."""
    canon = "\n".join(f"{k} = {cfg[k]}" for k in sorted(cfg))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def resolve_seed(cfg_seed: int) -> int:
    """Config seed, unless the QRCODEC_SEED environment variable overrides."""
    env = os.environ.get(SEED_ENV_VAR)
    if env is None:
        return cfg_seed
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV_VAR}={env!r} is not an integer")


# --------------------------------------------------------------------------
# Atomic writes and CSV logs
# --------------------------------------------------------------------------

def atomic_write_bytes(path: str, data: bytes):
    """Write whole-file atomically: temp file in place, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_csv(path: str, fieldnames: list, rows: list, comments: list):
    """CSV with '#' comment header lines (config hash, seed) above the data."""
    buf = io.StringIO()
    for line in comments:
        buf.write(f"# {line}\n")
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())


def read_csv(path: str) -> tuple[list, list]:
    """Inverse of write_csv: returns (comment lines, row dicts)."""
    comments, body = [], []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for line in f:
            if line.startswith("#"):
                comments.append(line[1:].strip())
            else:
                body.append(line)
    rows = list(csv.DictReader(body))
    return comments, rows
