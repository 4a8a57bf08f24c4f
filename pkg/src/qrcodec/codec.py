"""The compression pipeline: analysis transform, quantizer, rectifier stack,
synthesis transform, plus whole-image compress/decompress and checkpoints.

Latents downsample the image 8x through three stride-2 convolutions; the
decoder mirrors them with transposed convolutions.  The rectifier (a stack
of zero or more QR blocks) runs decoder-side only: it predicts the
unquantized latent from the quantized one, so the coded payload is
independent of whether rectification is enabled.

Checkpoint format (little-endian): magic "QRCM", format version u16,
profile id u8, rectifier block count u8, quality u8, parameter count u32,
then per parameter: element count u32 followed by float64 values, in
declaration order.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .entropy import FactorizedEntropyModel
from .layers import Conv2d, ConvTranspose2d, GroupedResBlocks, Module, MultiHeadAttention
from .rangecoder import (
    BitstreamHeader, CdfTableSet, pack, range_decode, range_encode, unpack,
)
from .tensor import ShapeError, Tensor

__all__ = [
    "Profile", "PROFILES", "profile_by_id", "pad_to_multiple", "QRBlock",
    "CodecModel", "CheckpointError", "param_hash", "checkpoint_bytes",
    "model_from_bytes", "save_checkpoint", "load_checkpoint",
    "CHECKPOINT_MAGIC", "CHECKPOINT_VERSION",
]

DOWNSAMPLE = 8          # three stride-2 stages
ENC_MID = 32            # hidden width of the analysis/synthesis transforms

CHECKPOINT_MAGIC = b"QRCM"
CHECKPOINT_VERSION = 1
_CKPT_FMT = "<4sHBBBI"
_CKPT_SIZE = struct.calcsize(_CKPT_FMT)


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


@dataclass(frozen=True)
class Profile:
    """Architecture scale; 'desk' trains on a CPU, 'paper' is full scale."""

    name: str
    profile_id: int
    latent_channels: int   # C_y
    qr_width: int          # entry-conv output channels D
    qr_groups: int         # grouped res-block group count G
    qr_group_dim: int      # channels per group d (G*d == D)
    attn_heads: int
    attn_head_dim: int
    patch_size: int

    def __post_init__(self):
        if self.qr_groups * self.qr_group_dim != self.qr_width:
            raise ValueError(f"profile {self.name}: groups*dim "
                             f"({self.qr_groups}*{self.qr_group_dim}) "
                             f"!= width {self.qr_width}")


PROFILES = {
    "desk": Profile("desk", 0, latent_channels=32, qr_width=64, qr_groups=4,
                    qr_group_dim=16, attn_heads=2, attn_head_dim=16,
                    patch_size=64),
    "paper": Profile("paper", 1, latent_channels=192, qr_width=512,
                     qr_groups=8, qr_group_dim=64, attn_heads=4,
                     attn_head_dim=32, patch_size=256),
}


def profile_by_id(profile_id: int) -> Profile:
    for p in PROFILES.values():
        if p.profile_id == profile_id:
            return p
    raise CheckpointError(f"unknown profile id {profile_id}")


def pad_to_multiple(image: np.ndarray, multiple: int = DOWNSAMPLE) -> np.ndarray:
    """Reflect-pad (3,H,W) bottom/right to dimension multiples; images too
    narrow to reflect fall back to symmetric (edge-repeating) padding."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected (3,H,W) image, got {image.shape}")
    _, h, w = image.shape
    pad_h, pad_w = (-h) % multiple, (-w) % multiple
    if pad_h == 0 and pad_w == 0:
        return image
    mode = "reflect" if min(h, w) > max(pad_h, pad_w) else "symmetric"
    return np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)), mode=mode)


class QRBlock(Module):
    """One rectifier block; with its exit projection zero-initialized the
    block is exactly the identity, so a fresh stack changes nothing."""

    def __init__(self, profile: Profile, rng: np.random.Generator, name: str):
        super().__init__()
        c_y, d_width = profile.latent_channels, profile.qr_width
        g, d = profile.qr_groups, profile.qr_group_dim
        self.entry = self._register(Conv2d(c_y, d_width, 7, rng,
                                           f"{name}.entry", padding=3))
        self.set1 = self._register(GroupedResBlocks(g, d, rng, f"{name}.set1"))
        self.attn = self._register(MultiHeadAttention(
            d_width, profile.attn_heads, profile.attn_head_dim, rng,
            f"{name}.attn"))
        self.set2 = self._register(GroupedResBlocks(g, d, rng, f"{name}.set2"))
        self.set3 = self._register(GroupedResBlocks(2 * g, d, rng, f"{name}.set3"))
        self.exit = self._register(Conv2d(2 * d_width, c_y, 1, rng,
                                          f"{name}.exit", zero_init=True))

    def __call__(self, y_hat: Tensor) -> Tensor:
        e = self.entry(y_hat)
        s1 = self.set1(e)
        s1 = T.add(s1, self.attn(s1))
        s2 = self.set2(s1)
        s3 = self.set3(T.concat([s2, e], axis=1))
        return T.add(y_hat, self.exit(s3))


class CodecModel(Module):
    """Encoder (analysis), decoder (synthesis), entropy model, rectifier.

    Parameter declaration order is encoder, decoder, entropy, rectifier
    blocks; checkpoints and cross-model parameter copies rely on an n-block
    model's parameter list being a prefix of an (n+1)-block model's.
    """

    def __init__(self, profile: Profile, n_qr: int, rng: np.random.Generator):
        super().__init__()
        if n_qr < 0 or n_qr > 255:
            raise ValueError(f"rectifier block count {n_qr} outside [0, 255]")
        self.profile = profile
        self.n_qr = n_qr
        c_y = profile.latent_channels
        self.enc1 = self._register(Conv2d(3, ENC_MID, 5, rng, "enc.conv1",
                                          stride=2, padding=2))
        self.enc2 = self._register(Conv2d(ENC_MID, ENC_MID, 5, rng, "enc.conv2",
                                          stride=2, padding=2))
        self.enc3 = self._register(Conv2d(ENC_MID, c_y, 5, rng, "enc.conv3",
                                          stride=2, padding=2))
        self.dec1 = self._register(ConvTranspose2d(
            c_y, ENC_MID, 5, rng, "dec.conv1", stride=2, padding=2,
            output_padding=1))
        self.dec2 = self._register(ConvTranspose2d(
            ENC_MID, ENC_MID, 5, rng, "dec.conv2", stride=2, padding=2,
            output_padding=1))
        self.dec3 = self._register(ConvTranspose2d(
            ENC_MID, 3, 5, rng, "dec.conv3", stride=2, padding=2,
            output_padding=1))
        self.entropy = self._register(FactorizedEntropyModel(c_y))
        self.qr_blocks = [self._register(QRBlock(profile, rng, f"qr{i}"))
                          for i in range(n_qr)]

    # -- parameter groups ----------------------------------------------------

    def phi_parameters(self) -> list[Tensor]:
        """Encoder + entropy model (frozen in the predictive phase)."""
        out = []
        for m in (self.enc1, self.enc2, self.enc3, self.entropy):
            out.extend(m.parameters())
        return out

    def theta_parameters(self) -> list[Tensor]:
        """Decoder."""
        out = []
        for m in (self.dec1, self.dec2, self.dec3):
            out.extend(m.parameters())
        return out

    def psi_parameters(self, n_qr: int | None = None) -> list[Tensor]:
        """Rectifier blocks (optionally only the first n_qr)."""
        n = self.n_qr if n_qr is None else n_qr
        out = []
        for blk in self.qr_blocks[:n]:
            out.extend(blk.parameters())
        return out

    # -- pipeline stages -----------------------------------------------------

    def encode_analysis(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (N,3,H,W) image batch, got {x.shape}")
        h, w = x.shape[2], x.shape[3]
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise ShapeError(
                f"H,W must be multiples of {DOWNSAMPLE}; pad "
                f"{h}x{w} to {h + (-h) % DOWNSAMPLE}x{w + (-w) % DOWNSAMPLE}")
        y = T.leaky_relu(self.enc1(x))
        y = T.leaky_relu(self.enc2(y))
        return self.enc3(y)

    def quantize(self, y: Tensor, mode: str,
                 rng: np.random.Generator | None = None) -> Tensor:
        if mode == "round":
            return T.round_half_away(y)
        if mode == "noise":
            if not T.recording():
                raise ValueError("noise quantization is training-only; "
                                 "compression rounds")
            if rng is None:
                raise ValueError("noise quantization needs the training rng")
            return T.uniform_noise(y, rng)
        raise ValueError(f"unknown quantization mode {mode!r}")

    def rectify(self, y_hat: Tensor, n_qr: int | None = None) -> Tensor:
        n = self.n_qr if n_qr is None else n_qr
        if n > self.n_qr:
            raise ValueError(f"model has {self.n_qr} rectifier blocks, "
                             f"asked for {n}")
        z = y_hat
        for blk in self.qr_blocks[:n]:
            z = blk(z)
        return z

    def decode_synthesis(self, z: Tensor) -> Tensor:
        if z.data.ndim != 4 or z.shape[1] != self.profile.latent_channels:
            raise ShapeError(f"expected (N,{self.profile.latent_channels},h,w) "
                             f"latents, got {z.shape}")
        x = T.leaky_relu(self.dec1(z))
        x = T.leaky_relu(self.dec2(x))
        return self.dec3(x)

    # -- whole-image coding ----------------------------------------------------

    def _clamped(self, y_hat: np.ndarray,
                 tables: CdfTableSet) -> np.ndarray:
        """Integer latents exactly as coded: clamped into each channel's
        table range (so the escape path stays unused)."""
        lat = y_hat.astype(np.int64)
        for c in range(lat.shape[0]):
            lo = tables.lows[c]
            np.clip(lat[c], lo, lo + tables.n_regular(c) - 1, out=lat[c])
        return lat

    def _coded_latents(self, padded: np.ndarray) -> tuple[np.ndarray, CdfTableSet]:
        with T.no_grad():
            y = self.encode_analysis(Tensor(padded[None]))
            y_hat = self.quantize(y, "round")
        tables = CdfTableSet.from_model(self.entropy)
        return self._clamped(y_hat.data[0], tables), tables

    def latent_pipeline(self, image: np.ndarray,
                        n_qr: int | None = None) -> tuple[np.ndarray, ...]:
        """(y, y_hat, y_tilde) arrays (C,h,w) for one image.

        y_hat is the as-coded integer latent; y_tilde applies the first
        n_qr rectifier blocks (default all) to it.
        """
        padded = pad_to_multiple(image)
        with T.no_grad():
            y = self.encode_analysis(Tensor(padded[None]))
            rounded = self.quantize(y, "round")
            lat = self._clamped(rounded.data[0],
                                CdfTableSet.from_model(self.entropy))
            y_tilde = self.rectify(Tensor(lat[None].astype(np.float64)), n_qr)
        return y.data[0], lat.astype(np.float64), y_tilde.data[0]

    def compress(self, image: np.ndarray) -> bytes:
        """Image (3,H,W) in [0,1] to a framed bitstream.

        The image is reflect-padded to multiples of 8 (symmetric padding for
        images narrower than the pad), latents are rounded and clamped into
        each channel's table range, and coded channel-major in raster order.
        """
        _, h, w = np.shape(image)
        if h > 0xFFFF or w > 0xFFFF:
            raise ValueError(f"image {w}x{h} exceeds header field range")
        lat, tables = self._coded_latents(pad_to_multiple(image))
        c_y, lh, lw = lat.shape
        symbols = lat.reshape(c_y, -1).ravel()
        channels = np.repeat(np.arange(c_y), lh * lw)
        payload = range_encode(symbols, channels, tables)
        header = BitstreamHeader(self.profile.profile_id, w, h, c_y, lh, lw)
        return pack(header, payload)

    def decompress(self, data: bytes) -> np.ndarray:
        """Framed bitstream back to an image (3,H,W) in [0,1]."""
        header, payload = unpack(data)
        if header.profile_id != self.profile.profile_id:
            raise ValueError(f"bitstream profile id {header.profile_id} does "
                             f"not match model profile "
                             f"{self.profile.profile_id}")
        c_y = self.profile.latent_channels
        if header.channels != c_y:
            raise ValueError(f"bitstream carries {header.channels} latent "
                             f"channels, model expects {c_y}")
        lh, lw = header.latent_h, header.latent_w
        tables = CdfTableSet.from_model(self.entropy)
        channels = np.repeat(np.arange(c_y), lh * lw)
        symbols = range_decode(payload, channels, tables)
        lat = symbols.reshape(c_y, lh, lw).astype(np.float64)
        with T.no_grad():
            z = self.rectify(Tensor(lat[None]))
            xhat = self.decode_synthesis(z)
        img = np.clip(xhat.data[0], 0.0, 1.0)
        return img[:, :header.height, :header.width]

    # -- copies ---------------------------------------------------------------

    def truncated_copy(self, n_qr: int) -> "CodecModel":
        """Independent copy keeping the first n_qr rectifier blocks."""
        if n_qr > self.n_qr:
            raise ValueError(f"cannot extend {self.n_qr} blocks to {n_qr}")
        clone = CodecModel(self.profile, n_qr, np.random.default_rng(0))
        for dst, src in zip(clone.parameters(), self.parameters()):
            dst.data = src.data.copy()
        return clone


def param_hash(params) -> str:
    """Order-sensitive digest of parameter shapes and exact values."""
    h = hashlib.sha256()
    for p in params:
        h.update(str(p.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def checkpoint_bytes(model: CodecModel, quality: int) -> bytes:
    params = model.parameters()
    head = struct.pack(_CKPT_FMT, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                       model.profile.profile_id, model.n_qr, quality,
                       len(params))
    chunks = [head]
    for p in params:
        flat = np.ascontiguousarray(p.data, dtype="<f8")
        chunks.append(struct.pack("<I", flat.size))
        chunks.append(flat.tobytes())
    return b"".join(chunks)


def save_checkpoint(model: CodecModel, quality: int, path: str):
    """Serialize the model; writes are whole-file atomic."""
    from .data import atomic_write_bytes
    atomic_write_bytes(path, checkpoint_bytes(model, quality))


def model_from_bytes(data: bytes) -> tuple[CodecModel, int]:
    if len(data) < _CKPT_SIZE:
        raise CheckpointError(f"checkpoint shorter than header ({len(data)} bytes)")
    magic, version, profile_id, n_qr, quality, n_params = \
        struct.unpack_from(_CKPT_FMT, data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    model = CodecModel(profile_by_id(profile_id), n_qr, np.random.default_rng(0))
    params = model.parameters()
    if n_params != len(params):
        raise CheckpointError(f"checkpoint has {n_params} parameters, "
                              f"model needs {len(params)}")
    off = _CKPT_SIZE
    for p in params:
        if off + 4 > len(data):
            raise CheckpointError("checkpoint truncated in parameter headers")
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        if count != p.size:
            raise CheckpointError(f"parameter {p.name}: checkpoint has "
                                  f"{count} values, model needs {p.size}")
        end = off + 8 * count
        if end > len(data):
            raise CheckpointError(f"checkpoint truncated in {p.name}")
        p.data = np.frombuffer(data[off:end], dtype="<f8").reshape(p.shape).copy()
        off = end
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes after parameters")
    return model, quality


def load_checkpoint(path: str) -> tuple[CodecModel, int]:
    """Rebuild a model from a checkpoint; returns (model, quality)."""
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
