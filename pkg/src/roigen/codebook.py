"""Learnable discrete vocabulary: nearest-neighbor quantization with a
straight-through gradient, EMA codebook re-estimation and the commitment loss."""

from __future__ import annotations

import torch
import torch.nn as nn

COMMITMENT_BETA = 0.25


class Codebook(nn.Module):
    """K embedding vectors of dimension n_z with EMA accumulators.

    Embeddings are buffers, not parameters: they are re-estimated by
    `ema_update`, never by gradient descent.
    """

    def __init__(self, num_codes: int = 512, dim: int = 64, decay: float = 0.99,
                 eps: float = 1e-5, revival_patience: int = 100):
        super().__init__()
        if num_codes < 2:
            raise ValueError("need at least 2 codes")
        # endpoints admitted so closed-form update tests can pin gamma=0/1
        if not 0.0 <= decay <= 1.0 or eps <= 0:
            raise ValueError("decay must be in [0,1] and eps positive")
        self.num_codes = num_codes
        self.dim = dim
        self.decay = decay
        self.eps = eps
        self.revival_patience = revival_patience
        self.register_buffer("embeddings", torch.randn(num_codes, dim) * 0.1)
        self.register_buffer("ema_cluster_size", torch.zeros(num_codes))
        self.register_buffer("ema_embed_sum", self.embeddings.clone())
        self.register_buffer("unused_steps", torch.zeros(num_codes, dtype=torch.long))
        self.register_buffer("step", torch.zeros((), dtype=torch.long))

    def _check_dim(self, z: torch.Tensor) -> None:
        if z.shape[-1] != self.dim:
            raise ValueError(f"latent dim {z.shape[-1]} != codebook dim {self.dim}")

    def nearest(self, z: torch.Tensor) -> torch.Tensor:
        """Index of the closest code per position; ties break to the lowest
        index. Distances are evaluated in float64 so the result agrees with a
        direct brute-force scan."""
        self._check_dim(z)
        if not torch.all(torch.isfinite(z)):
            raise ValueError("non-finite latent input")
        flat = z.reshape(-1, self.dim).double()
        emb = self.embeddings.double()
        d2 = (flat.unsqueeze(1) - emb.unsqueeze(0)).pow(2).sum(-1)
        return d2.argmin(dim=1).reshape(z.shape[:-1])

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        if indices.numel() and (indices.min() < 0 or indices.max() >= self.num_codes):
            raise ValueError(f"token index out of range [0, {self.num_codes})")
        return self.embeddings[indices]

    def quantize(self, z: torch.Tensor):
        """Returns (indices, straight-through quantized field).

        The quantized field is z + sg[zq - z]: values equal the looked-up
        embeddings, gradients flow to z unchanged.
        """
        indices = self.nearest(z)
        zq = self.lookup(indices)
        zq_st = z + (zq - z).detach()
        return indices, zq_st

    def forward(self, z: torch.Tensor):
        indices, zq = self.quantize(z)
        return indices, zq, codebook_loss(z, self.lookup(indices))

    @torch.no_grad()
    def ema_update(self, z: torch.Tensor, assignments: torch.Tensor) -> None:
        """EMA re-estimation with Laplace smoothing of cluster sizes."""
        self._check_dim(z)
        flat = z.reshape(-1, self.dim)
        idx = assignments.reshape(-1)
        if idx.numel() != flat.shape[0]:
            raise ValueError("assignments do not match latent vectors")
        onehot = torch.zeros(flat.shape[0], self.num_codes, dtype=flat.dtype)
        onehot.scatter_(1, idx.unsqueeze(1), 1.0)
        counts = onehot.sum(0)
        sums = onehot.t() @ flat

        g = self.decay
        self.ema_cluster_size.mul_(g).add_(counts, alpha=1 - g)
        self.ema_embed_sum.mul_(g).add_(sums, alpha=1 - g)
        total = self.ema_cluster_size.sum()
        smoothed = (self.ema_cluster_size + self.eps) / (total + self.num_codes * self.eps) * total
        self.embeddings.copy_(self.ema_embed_sum / smoothed.unsqueeze(1))

        self.unused_steps.add_(1)
        self.unused_steps[counts > 0] = 0
        self.step.add_(1)
        dead = self.unused_steps >= self.revival_patience
        if dead.any() and flat.shape[0] > 0:
            # re-seed collapsed codes from current encoder outputs
            gen = torch.Generator().manual_seed(int(self.step.item()))
            pick = torch.randint(flat.shape[0], (int(dead.sum()),), generator=gen)
            self.embeddings[dead] = flat[pick]
            self.ema_embed_sum[dead] = flat[pick]
            self.ema_cluster_size[dead] = 1.0
            self.unused_steps[dead] = 0

    def state(self) -> dict:
        return {
            "embeddings": self.embeddings.clone(),
            "ema_cluster_size": self.ema_cluster_size.clone(),
            "ema_embed_sum": self.ema_embed_sum.clone(),
            "unused_steps": self.unused_steps.clone(),
            "step": self.step.clone(),
        }


def codebook_loss(z: torch.Tensor, zq: torch.Tensor) -> torch.Tensor:
    """||sg[z] - zq||^2 + 0.25 ||sg[zq] - z||^2, mean over positions.

    Only the commitment term backpropagates to z; with EMA codebooks the
    first term carries no gradient either (embeddings are buffers) but its
    value is kept so the reported loss matches the full objective.
    """
    if z.shape != zq.shape:
        raise ValueError(f"shape mismatch {tuple(z.shape)} vs {tuple(zq.shape)}")
    sq = lambda a, b: (a - b).pow(2).sum(-1).reshape(-1).mean()
    return sq(z.detach(), zq) + COMMITMENT_BETA * sq(zq.detach(), z)


def usage_stats(indices: torch.Tensor, num_codes: int):
    """Per-code counts and the perplexity of the empirical code distribution."""
    counts = torch.bincount(indices.reshape(-1), minlength=num_codes).float()
    probs = counts / counts.sum()
    nz = probs[probs > 0]
    entropy = -(nz * nz.log()).sum()
    return counts, entropy.exp().item()
