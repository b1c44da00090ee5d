"""Stage 2: masked token modeling over codebook indices and autoregressive
sampling of new token grids.

Token grids are (L, L, L) integer arrays; sequences are their raster-scan
(row-major) linearization. The transformer is causal: the prediction for
sequence position i sees the start token and corrupted tokens before i.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def linearize(grid) -> np.ndarray:
    """Raster-scan order: depth-major, then height, then width."""
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ValueError(f"expected a 3D token grid, got shape {grid.shape}")
    return grid.reshape(-1).copy()


def delinearize(seq, shape) -> np.ndarray:
    seq = np.asarray(seq)
    d, h, w = shape
    if seq.size != d * h * w:
        raise ValueError(f"sequence length {seq.size} != {d}*{h}*{w}")
    return seq.reshape(d, h, w).copy()


def mask_count(ratio: float, length: int) -> int:
    # round-half-up for determinism
    return int(math.floor(ratio * length + 0.5))


@dataclass
class MaskSpec:
    """m[i] = 1 means position i was left untouched, 0 means corrupted."""
    mask: np.ndarray
    ratio: float
    seed: int


def apply_mask(seq, ratio: float, seed: int, num_codes: int):
    """Corrupt round(ratio*S) positions with uniformly random indices."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("mask ratio must be in [0, 1]")
    seq = np.asarray(seq).copy()
    s = seq.size
    n_masked = mask_count(ratio, s)
    rng = np.random.default_rng(seed)
    positions = rng.choice(s, size=n_masked, replace=False)
    corrupted = seq.copy()
    corrupted[positions] = rng.integers(0, num_codes, size=n_masked)
    mask = np.ones(s, dtype=np.int64)
    mask[positions] = 0
    return corrupted, MaskSpec(mask=mask, ratio=ratio, seed=seed)


@dataclass
class TransformerConfig:
    num_codes: int = 512
    seq_len: int = 512  # latent_edge ** 3
    layers: int = 8
    heads: int = 8
    model_dim: int = 512

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")

    @property
    def vocab(self) -> int:
        return self.num_codes + 1  # codes plus the start-of-sequence symbol

    @property
    def start_token(self) -> int:
        return self.num_codes


class _CausalBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(),
                                 nn.Linear(4 * dim, dim))

    def forward(self, x):
        b, s, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        shape = (b, s, self.heads, d // self.heads)
        q, k, v = (t.view(shape).transpose(1, 2) for t in (q, k, v))
        att = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        x = x + self.proj(att.transpose(1, 2).reshape(b, s, d))
        return x + self.mlp(self.ln2(x))


class MaskedTokenTransformer(nn.Module):
    """Causal decoder over [start, t_0, ..., t_{S-1}]; output position i
    gives the logits for token i conditioned on the prefix."""

    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab, cfg.model_dim)
        self.pos_emb = nn.Embedding(cfg.seq_len + 1, cfg.model_dim)
        self.blocks = nn.ModuleList(
            _CausalBlock(cfg.model_dim, cfg.heads) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.model_dim)
        self.head = nn.Linear(cfg.model_dim, cfg.num_codes, bias=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, S) corrupted token ids -> (B, S, K) logits."""
        if tokens.dim() == 1:
            tokens = tokens[None]
        b, s = tokens.shape
        if s != self.cfg.seq_len:
            raise ValueError(f"sequence length {s} != configured {self.cfg.seq_len}")
        start = torch.full((b, 1), self.cfg.start_token, dtype=torch.long)
        x = torch.cat([start, tokens.long()], dim=1)
        h = self.tok_emb(x) + self.pos_emb(torch.arange(s + 1))[None]
        for block in self.blocks:
            h = block(h)
        return self.head(self.ln_f(h))[:, :-1]


def masked_ce_loss(logits: torch.Tensor, targets: torch.Tensor,
                   mask: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Cross entropy averaged over masked (m=0) positions only."""
    if logits.dim() == 2:
        logits = logits[None]
    if isinstance(targets, np.ndarray):
        targets = torch.from_numpy(targets)
    if targets.dim() == 1:
        targets = targets[None]
    if isinstance(mask, np.ndarray):
        mask = torch.from_numpy(mask)
    if mask.dim() == 1:
        mask = mask[None].expand(targets.shape[0], -1)
    sel = mask.reshape(-1) == 0
    if not sel.any():
        return logits.new_zeros(())
    flat_logits = logits.reshape(-1, logits.shape[-1])[sel]
    flat_targets = targets.reshape(-1).long()[sel]
    return F.cross_entropy(flat_logits, flat_targets)


@torch.no_grad()
def sample_tokens(model: MaskedTokenTransformer, grid_shape, seed: int,
                  temperature: float = 1.0, top_k: int = 100) -> np.ndarray:
    """Draw a token grid: first latent token uniform over the codebook, the
    rest completed autoregressively in raster order.

    temperature <= 0 selects the greedy argmax continuation.
    """
    cfg = model.cfg
    s = int(np.prod(grid_shape))
    if s != cfg.seq_len:
        raise ValueError(f"grid {grid_shape} incompatible with seq_len {cfg.seq_len}")
    model.eval()
    rng = np.random.default_rng(seed)
    seq = np.zeros(s, dtype=np.int64)
    seq[0] = rng.integers(0, cfg.num_codes)
    for i in range(1, s):
        logits = model(torch.from_numpy(seq))[0, i].double()
        if temperature <= 0:
            seq[i] = int(logits.argmax())
            continue
        logits = logits / temperature
        if top_k and top_k < cfg.num_codes:
            kth = torch.topk(logits, top_k).values[-1]
            logits = torch.where(logits < kth, torch.tensor(-torch.inf, dtype=logits.dtype), logits)
        probs = F.softmax(logits, dim=-1).numpy()
        seq[i] = rng.choice(cfg.num_codes, p=probs)
    return delinearize(seq, grid_shape)
