"""The two training phases, end to end at miniature scale.

Phase one trains everything jointly with uniform noise standing in for
rounding. Phase two freezes the encoder and entropy model (so compressed
files stop moving), switches to hard rounding, and trains only the decoder
and the rectifier. Afterwards the rectifier's job is visible directly: the
latent it hands the decoder sits closer to the unquantized latent than the
rounded integers do, while the bitstream bytes are untouched.

Runs in well under a minute on a single core.
"""

import numpy as np

from qrcodec import metrics
from qrcodec.codec import PROFILES, CodecModel, checkpoint_bytes, model_from_bytes
from qrcodec.data import ImageBuffer, PatchDataset
from qrcodec.rangecoder import HEADER_SIZE
from qrcodec.training import TrainingConfig, train_predictive_phase, train_soft_phase


def smooth_image(size: int, seed: int) -> ImageBuffer:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    planes = []
    for _ in range(3):
        f1, f2 = rng.uniform(1.0, 4.0, 2)
        p1, p2 = rng.uniform(0, 2 * np.pi, 2)
        base = 0.5 + 0.25 * np.sin(2 * np.pi * f1 * xx + p1) \
                   + 0.15 * np.cos(2 * np.pi * f2 * yy + p2)
        planes.append(np.clip(base, 0.0, 1.0))
    return ImageBuffer.from_unit(np.stack(planes))


train = [smooth_image(64, 100 + i) for i in range(8)]
held = smooth_image(64, 999)
ds = PatchDataset(train, patch_size=64)

model = CodecModel(PROFILES["desk"], n_qr=1, rng=np.random.default_rng(0))

# Phase one. alpha weights the rectifier's prediction loss; it is huge here
# because at this miniature scale the pixel-domain distortion gradient dwarfs
# the latent-distance one, and the rectifier would otherwise train too slowly
# to see anything in a demo-length run.
soft_cfg = TrainingConfig(q=2, alpha=100.0, epochs=8, batch=4, lr=1e-3,
                          seed=0, n_qr=1, patience=8)
model, history = train_soft_phase(model, ds, soft_cfg)
print("soft phase:")
print(f"  {'epoch':>5} {'rate bpp':>9} {'distortion':>11} "
      f"{'feat dist':>10} {'loss':>9}")
for row in history:
    print(f"  {row['epoch']:>5} {row['rate_bpp']:>9.4f} "
          f"{row['distortion']:>11.6f} {row['feature_distance']:>10.4f} "
          f"{row['loss']:>9.5f}")

# Snapshot what phase one produced; the frozen half must survive phase two
# byte for byte, and that is easiest to prove on the bitstream itself.
soft_blob = checkpoint_bytes(model, soft_cfg.q)
soft_model, _ = model_from_bytes(soft_blob)
payload_before = soft_model.compress(held.to_unit())

pred_cfg = TrainingConfig(q=2, alpha=100.0, epochs=8, batch=4, lr=3e-4,
                          seed=0, n_qr=1, phase="predictive", patience=8)
model, history = train_predictive_phase(model, ds, pred_cfg)
print("\npredictive phase (encoder and entropy model frozen):")
for row in history:
    print(f"  epoch {row['epoch']}  distortion {row['distortion']:.6f}  "
          f"feat dist {row['feature_distance']:.4f}  loss {row['loss']:.5f}")

# Quantization error on the held-out image: distance between the latent the
# decoder actually receives and the real-valued encoder output.
y, y_hat, y_tilde = model.latent_pipeline(held.to_unit())
eps_rounded = metrics.quantization_error(y, y_hat)
eps_rectified = metrics.quantization_error(y, y_tilde)
print(f"\neps_Q with rounded latents:   {eps_rounded:.4f}")
print(f"eps_Q after rectification:    {eps_rectified:.4f}")

payload_after = model.compress(held.to_unit())
print("bitstream before == after predictive phase:",
      payload_before == payload_after)
assert payload_before == payload_after

recon = model.decompress(payload_after)
print(f"held-out PSNR {metrics.psnr(held.to_unit(), recon):.2f} dB "
      f"at {metrics.bpp(len(payload_after) - HEADER_SIZE, held.width, held.height):.3f} bpp")
