"""Stage-1 networks: 3D encoder/decoder, patch discriminator, and a fixed
2D feature extractor used by the perceptual loss and slice-FID.

Encoder: five 4^3 conv layers (LeakyReLU, batch norm) interleaved with five
residual blocks; stride-2 placement is derived from in_edge/latent_edge.
Decoder mirrors it with nearest-upsample + 3^3 conv (ReLU) and a tanh head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

N_CONV_LAYERS = 5


@dataclass
class NetworkConfig:
    in_edge: int = 128
    latent_edge: int = 8
    base_channels: int = 32
    max_channels: int = 256
    n_z: int = 64
    norm: bool = True

    def __post_init__(self):
        if self.latent_edge not in (4, 8):
            raise ValueError("latent_edge must be 4 or 8")
        ratio = self.in_edge / self.latent_edge
        if ratio < 1 or 2 ** int(math.log2(ratio)) != ratio:
            raise ValueError("in_edge / latent_edge must be a power of 2")

    @property
    def n_down(self) -> int:
        n = int(math.log2(self.in_edge // self.latent_edge))
        if n > N_CONV_LAYERS:
            raise ValueError("too many downsamplings for five conv layers")
        return n

    def channels(self) -> list[int]:
        ch, out = self.base_channels, []
        for i in range(N_CONV_LAYERS):
            out.append(ch)
            if i < self.n_down:
                ch = min(ch * 2, self.max_channels)
        return out


def _norm(channels: int, enabled: bool) -> nn.Module:
    return nn.BatchNorm3d(channels) if enabled else nn.Identity()


class ResBlock3d(nn.Module):
    def __init__(self, channels: int, norm: bool, act: str = "relu"):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)
        self.n1 = _norm(channels, norm)
        self.n2 = _norm(channels, norm)
        self.act = F.relu if act == "relu" else lambda t: F.leaky_relu(t, 0.2)

    def forward(self, x):
        h = self.act(self.n1(self.conv1(x)))
        h = self.n2(self.conv2(h))
        return self.act(x + h)


class Encoder3d(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.channels()
        layers = []
        prev = 1
        for i, ch in enumerate(chans):
            if i < cfg.n_down:
                conv = nn.Conv3d(prev, ch, 4, stride=2, padding=1)
            else:
                conv = nn.Conv3d(prev, ch, 3, stride=1, padding=1)
            layers += [conv, _norm(ch, cfg.norm), nn.LeakyReLU(0.2),
                       ResBlock3d(ch, cfg.norm, act="leaky")]
            prev = ch
        self.body = nn.Sequential(*layers)
        self.to_latent = nn.Conv3d(prev, cfg.n_z, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 1, E, E, E) volume -> (B, L, L, L, n_z) latent field."""
        if x.dim() == 3:
            x = x[None, None]
        e = self.cfg.in_edge
        if tuple(x.shape[-3:]) != (e, e, e):
            raise ValueError(f"expected edge {e}, got {tuple(x.shape[-3:])}")
        z = self.to_latent(self.body(x))
        return z.permute(0, 2, 3, 4, 1).contiguous()


class Decoder3d(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        chans = list(reversed(cfg.channels()))
        self.from_latent = nn.Conv3d(cfg.n_z, chans[0], 1)
        stages = []
        n_up = cfg.n_down
        prev = chans[0]
        for i, ch in enumerate(chans):
            # upsample on the last n_up stages so the edge lands on in_edge
            stages.append(_DecoderStage(prev, ch, upsample=i >= N_CONV_LAYERS - n_up,
                                        norm=cfg.norm))
            prev = ch
        self.stages = nn.Sequential(*stages)
        self.head = nn.Conv3d(prev, 1, 3, padding=1)

    def forward(self, zq: torch.Tensor) -> torch.Tensor:
        """(B, L, L, L, n_z) latent field -> (B, 1, E, E, E) volume in (-1, 1)."""
        if zq.dim() == 4:
            zq = zq[None]
        le = self.cfg.latent_edge
        if tuple(zq.shape[1:]) != (le, le, le, self.cfg.n_z):
            raise ValueError(
                f"expected latent field {le}^3 x {self.cfg.n_z}, got {tuple(zq.shape[1:])}")
        h = self.from_latent(zq.permute(0, 4, 1, 2, 3).contiguous())
        return torch.tanh(self.head(self.stages(h)))


class _DecoderStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, upsample: bool, norm: bool):
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.n = _norm(out_ch, norm)
        self.res = ResBlock3d(out_ch, norm)

    def forward(self, x):
        if self.upsample:
            # nearest-neighbor resize + conv avoids checkerboard artifacts
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.res(F.relu(self.n(self.conv(x))))


class Discriminator3d(nn.Module):
    """Five 4^3 stride-2 conv layers with LeakyReLU; patch-level score map
    plus the four intermediate activations for feature matching."""

    def __init__(self, base_channels: int = 32, max_channels: int = 256, norm: bool = True):
        super().__init__()
        chans = []
        ch = base_channels
        for _ in range(N_CONV_LAYERS - 1):
            chans.append(ch)
            ch = min(ch * 2, max_channels)
        self.blocks = nn.ModuleList()
        prev = 1
        for i, c in enumerate(chans):
            block = [nn.Conv3d(prev, c, 4, stride=2, padding=1)]
            if norm and i > 0:
                block.append(nn.BatchNorm3d(c))
            block.append(nn.LeakyReLU(0.2))
            self.blocks.append(nn.Sequential(*block))
            prev = c
        self.head = nn.Conv3d(prev, 1, 4, stride=2, padding=1)

    def forward(self, x: torch.Tensor):
        if x.dim() == 3:
            x = x[None, None]
        feats = []
        h = x
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        return self.head(h), feats


class PerceptualExtractor(nn.Module):
    """Fixed (never trained) 2D conv net with three tap layers.

    The default is a seeded randomly-initialized network; any module that
    maps a (B, 3, H, W) image to a list of feature maps can substitute for
    it (e.g. an imported pretrained backbone).
    """

    def __init__(self, seed: int = 0, base_channels: int = 16):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        c = base_channels
        self.conv1 = nn.Conv2d(3, c, 3, padding=1)
        self.conv2 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1)
        for conv in (self.conv1, self.conv2, self.conv3):
            nn.init.kaiming_normal_(conv.weight, generator=gen)
            nn.init.zeros_(conv.bias)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, img: torch.Tensor) -> list[torch.Tensor]:
        if img.dim() == 2:
            img = img[None, None]
        elif img.dim() == 3:
            img = img[:, None]
        if img.shape[1] == 1:
            img = img.expand(-1, 3, -1, -1)
        f1 = F.leaky_relu(self.conv1(img), 0.2)
        f2 = F.leaky_relu(self.conv2(f1), 0.2)
        f3 = F.leaky_relu(self.conv3(f2), 0.2)
        return [f1, f2, f3]


def init_networks(cfg: NetworkConfig, seed: int = 0):
    """Deterministically initialized (encoder, decoder, discriminator)."""
    torch.manual_seed(seed)
    return Encoder3d(cfg), Decoder3d(cfg), Discriminator3d(
        base_channels=cfg.base_channels, max_channels=cfg.max_channels, norm=cfg.norm)
