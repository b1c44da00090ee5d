"""Stage-1 training objectives: pixel, perceptual, feature-matching,
3D image gradient, hinge adversarial, and their weighted aggregation.

All reconstruction losses are mean-reduced so magnitudes do not depend on
volume resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

N_PERCEPTUAL_SLICES = 3


@dataclass
class LossWeights:
    """Weights for the five stage-1 terms plus the adversarial schedule."""
    l1: float = 4.0
    perceptual: float = 1.0
    match: float = 4.0
    gradient: float = 4.0
    codebook: float = 1.0
    adv_weight: float = 1.0
    adv_warmup_steps: int = 2000


@dataclass
class LossComponents:
    l1: torch.Tensor = field(default_factory=lambda: torch.zeros(()))
    perceptual: torch.Tensor = field(default_factory=lambda: torch.zeros(()))
    match: torch.Tensor = field(default_factory=lambda: torch.zeros(()))
    gradient: torch.Tensor = field(default_factory=lambda: torch.zeros(()))
    codebook: torch.Tensor = field(default_factory=lambda: torch.zeros(()))
    adv: torch.Tensor = field(default_factory=lambda: torch.zeros(()))


def _check_shapes(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")


def l1_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    _check_shapes(x, x_hat)
    return (x - x_hat).abs().mean()


def perceptual_loss(x: torch.Tensor, x_hat: torch.Tensor, extractor,
                    rng: np.random.Generator) -> torch.Tensor:
    """Squared feature distance over three shared random axial slices.

    The same rng draw picks the slice indices for both volumes, so
    identical inputs give exactly zero for any seed.
    """
    _check_shapes(x, x_hat)
    vx = x.reshape(x.shape[-3:])
    vy = x_hat.reshape(x_hat.shape[-3:])
    n_axial = vx.shape[2]
    idx = rng.integers(0, n_axial, size=N_PERCEPTUAL_SLICES)
    total = vx.new_zeros(())
    for j in idx:
        fx = extractor(vx[:, :, j])
        fy = extractor(vy[:, :, j])
        for a, b in zip(fx, fy):
            total = total + (a - b).pow(2).mean()
    return total


def feature_matching_loss(feats_real, feats_fake) -> torch.Tensor:
    if len(feats_real) != len(feats_fake):
        raise ValueError("tap lists differ in length")
    terms = []
    for a, b in zip(feats_real, feats_fake):
        _check_shapes(a, b)
        terms.append((a - b).abs().mean())
    return torch.stack(terms).mean()


def gradient_3d_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Sum over axial/coronal/sagittal planes of the mean squared difference
    of in-plane finite-difference gradients, averaged over all slices."""
    _check_shapes(x, x_hat)
    vx = x.reshape(-1, *x.shape[-3:])
    vy = x_hat.reshape(-1, *x_hat.shape[-3:])
    total = x.new_zeros(())
    for plane_axis in (2, 1, 0):  # axial, coronal, sagittal
        for gx, gy in zip(_inplane_grads_batch(vx, plane_axis),
                          _inplane_grads_batch(vy, plane_axis)):
            total = total + (gx - gy).pow(2).mean()
    return total


def _inplane_grads_batch(v: torch.Tensor, plane_axis: int):
    axes = [a + 1 for a in range(3) if a != plane_axis]
    return [torch.diff(v, dim=a) for a in axes]


def hinge_disc_loss(scores_real: torch.Tensor, scores_fake: torch.Tensor) -> torch.Tensor:
    return (torch.relu(1.0 - scores_real).mean()
            + torch.relu(1.0 + scores_fake).mean())


def generator_adv_loss(scores_fake: torch.Tensor, w: LossWeights,
                       step: int) -> torch.Tensor:
    """Hinge generator term -mean(D(x_hat)); zero during warm-up."""
    if step < w.adv_warmup_steps:
        return scores_fake.new_zeros(())
    return -w.adv_weight * scores_fake.mean()


def total_stage1_loss(c: LossComponents, w: LossWeights) -> torch.Tensor:
    return (w.l1 * c.l1 + w.perceptual * c.perceptual + w.match * c.match
            + w.gradient * c.gradient + w.codebook * c.codebook + c.adv)
