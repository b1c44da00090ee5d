"""roigen: two-stage vector-quantized generative pipeline for 3D tumor ROIs.

Stage 1 is a 3D vector-quantized adversarial autoencoder; stage 2 is a
masked-token transformer over the learned codebook indices. The package
also ships the evaluation metric suite and an imbalanced-classification
harness for using generated volumes as augmented data.
"""

from .codebook import Codebook, codebook_loss, usage_stats
from .metrics import (fid_plane, mmd2, ms_ssim_pairwise, nearest_real, psnr,
                      ssim3d)
from .networks import NetworkConfig, PerceptualExtractor
from .training import RunConfig, generate_batch, generate_volume, train_stage1, train_stage2
from .volumes import (ManifestEntry, extract_roi, load_volume, make_synthetic_roi,
                      normalize, save_volume, slice_plane)

__all__ = [
    "Codebook", "codebook_loss", "usage_stats",
    "NetworkConfig", "PerceptualExtractor",
    "RunConfig", "train_stage1", "train_stage2", "generate_volume", "generate_batch",
    "ManifestEntry", "normalize", "extract_roi", "slice_plane",
    "make_synthetic_roi", "load_volume", "save_volume",
    "psnr", "ssim3d", "mmd2", "ms_ssim_pairwise", "fid_plane", "nearest_real",
]

__version__ = "0.1.0"
