"""End-to-end image compression: PPM in, bitstream out, PPM back.

Uses a freshly initialized desk-scale model, so the numbers are those of an
untrained codec; the point here is the plumbing. The script also shows two
contracts worth knowing: bitstreams are deterministic, and the rectifier
stack never changes what gets written to the file.
"""

import os
import tempfile

import numpy as np

from qrcodec import metrics
from qrcodec.codec import PROFILES, CodecModel, load_checkpoint, save_checkpoint
from qrcodec.data import ImageBuffer, load_ppm, save_ppm
from qrcodec.rangecoder import HEADER_SIZE, unpack

workdir = tempfile.mkdtemp(prefix="qrcodec-demo-")

# A smooth synthetic photo stand-in; band-limited content compresses, unlike
# white noise. Stored as binary PPM (P6), the codec's mandatory format.
size = 96
yy, xx = np.mgrid[0:size, 0:size] / size
unit = np.stack([
    0.5 + 0.3 * np.sin(4 * np.pi * xx) * np.cos(2 * np.pi * yy),
    0.4 + 0.3 * xx,
    0.5 + 0.25 * np.cos(3 * np.pi * (xx + yy)),
])
img = ImageBuffer.from_unit(unit)
src = os.path.join(workdir, "input.ppm")
save_ppm(img, src)
print("wrote", src, f"({img.width}x{img.height})")

# Build a model with one rectifier block and persist it; load_checkpoint
# reproduces it bit-for-bit along with its quality index.
model = CodecModel(PROFILES["desk"], n_qr=1, rng=np.random.default_rng(3))
ckpt = os.path.join(workdir, "model.ckpt")
save_checkpoint(model, quality=2, path=ckpt)
model, quality = load_checkpoint(ckpt)
print("checkpoint:", os.path.getsize(ckpt), "bytes, quality", quality,
      "rectifier blocks:", model.n_qr)

# Compress. The blob is a fixed header plus the range-coded latent payload.
image = load_ppm(src)
blob = model.compress(image.to_unit())
header, payload = unpack(blob)
pixels = image.width * image.height
print(f"\nbitstream: {len(blob)} bytes "
      f"(header {HEADER_SIZE}, payload {len(payload)})")
print(f"latent grid {header.channels}x{header.latent_h}x{header.latent_w}, "
      f"payload {metrics.bpp(len(payload), image.width, image.height):.4f} bpp")

# Same input, same model -> same bytes. Always.
assert model.compress(image.to_unit()) == blob

# Decompress and score. An untrained model reconstructs poorly.
recon = model.decompress(blob)
print(f"PSNR {metrics.psnr(image.to_unit(), recon):.2f} dB, "
      f"MS-SSIM {metrics.ms_ssim(image.to_unit(), recon):.4f}")

out = os.path.join(workdir, "recon.ppm")
save_ppm(ImageBuffer.from_unit(recon), out)
print("wrote", out)

# The rectifier runs only on the decoder side: strip it and the compressed
# bytes do not move. (Reconstruction is what changes once training gives the
# rectifier something to say.)
bare = model.truncated_copy(0)
assert bare.compress(image.to_unit()) == blob
print("\npayload with 0 rectifier blocks == payload with 1:",
      bare.compress(image.to_unit()) == blob)

# Arbitrary sizes work: inputs are reflect-padded to a multiple of 8 before
# analysis and cropped back after synthesis.
odd = ImageBuffer.from_unit(unit[:, :41, :77])
r = model.decompress(model.compress(odd.to_unit()))
print("41x77 roundtrip shape:", r.shape)
