"""Walkthrough: preprocessing and the stage-1 autoencoder.

Builds a small synthetic ROI dataset, shows the normalization and
ROI-extraction steps, then trains the vector-quantized autoencoder for a
couple of minutes and reports reconstruction quality. Run from the repo
root:

    python3 demos/01_preprocess_and_reconstruct.py
"""

import numpy as np
import torch

from roigen import training
from roigen.metrics import psnr, ssim3d
from roigen.volumes import extract_roi, make_synthetic_roi, normalize

# --- preprocessing ---------------------------------------------------------
# Raw scans come in arbitrary intensity units; everything downstream expects
# [-1, 1]. ROI extraction drops all-zero slices of the mask, then center
# crops/pads around the nonzero region.
raw = np.abs(np.random.default_rng(0).normal(2.0, 1.0, (40, 40, 40))).astype(np.float32)
mask = np.zeros_like(raw)
mask[8:30, 10:28, 6:26] = 1.0
roi = normalize(extract_roi(raw, mask, target=32))
print(f"extracted ROI: shape={roi.shape}, range=[{roi.min():.2f}, {roi.max():.2f}]")

# --- a tiny stage-1 run ----------------------------------------------------
volumes = [make_synthetic_roi(seed, edge=32, blobs=3) for seed in range(4)]
cfg = training.RunConfig(
    in_edge=32, latent_edge=4, base_channels=8, n_z=8, num_codes=32,
    s1_epochs=60, s1_lr=1e-3, s1_batch=2,
    adv_warmup_steps=10 ** 9,  # keep the demo purely reconstructive
)
print("training stage 1 (a minute or two on CPU)...")
payload = training.train_stage1(cfg, volumes)

from roigen.codebook import usage_stats  # noqa: E402

encoder, decoder, codebook, _ = training.restore_stage1(payload)
all_indices = []
with torch.no_grad():
    for i, v in enumerate(volumes):
        z = encoder(torch.from_numpy(v))
        indices, zq = codebook.quantize(z)
        all_indices.append(indices)
        recon = decoder(zq)[0, 0].numpy()
        print(f"volume {i}: PSNR={psnr(v, recon):6.2f} dB  "
              f"3D-SSIM={ssim3d(v, recon):.3f}")

_, perplexity = usage_stats(torch.cat([i.reshape(-1) for i in all_indices]),
                            cfg.num_codes)
print(f"codebook perplexity: {perplexity:.1f} of {cfg.num_codes} codes")
