"""Frozen visual backbone: fixed band-pass conv features with a random
projection head, frozen at a fixed seed.

Stands in for a pretrained vision-language encoder: its parameters never
receive gradients and its embedding is a pure function of the image. The
scene renderer draws goals, objects, and the arm at distinct intensity
levels, so the backbone first expands the grayscale image into per-intensity
channels (a fixed pointwise nonlinearity), spatially smooths each channel
with a depthwise Gaussian (a fixed conv), and average-pools to a coarse grid.
The pooled responses vary smoothly with scene-element positions, which a
random linear projection preserves; projecting raw sparse pixels instead
would bury small scene elements below the variance of large ones. Freezing
is verified by parameter-hash equality in tests.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

_BAND_CENTERS = (0.3, 0.6, 1.0)  # renderer intensities: goal, object, arm
_BAND_WIDTH = 0.12
_BLUR_SIGMA = 6.0
_BLUR_SIZE = 19
_POOL = 8  # 64x64 -> 8x8 grid per band


class FrozenVisualBackbone(nn.Module):
    def __init__(self, d_visual: int, seed: int = 7):
        super().__init__()
        self.d_visual = d_visual
        n_features = len(_BAND_CENTERS) * _POOL * _POOL
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.proj = nn.Linear(n_features, d_visual, bias=False)
            nn.init.orthogonal_(self.proj.weight)
        x = torch.arange(_BLUR_SIZE, dtype=torch.float32) - (_BLUR_SIZE - 1) / 2
        k = torch.exp(-(x**2) / (2 * _BLUR_SIGMA**2))
        self.register_buffer("_blur_1d", k / k.sum())
        self.norm = nn.LayerNorm(d_visual, elementwise_affine=False)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # stays in eval mode; freezing is permanent
        return super().train(False)

    def _band_expand(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 64, 64) grayscale -> (B, n_bands, 64, 64) per-intensity maps."""
        bands = torch.stack(
            [torch.exp(-(((images - c) / _BAND_WIDTH) ** 2)) for c in _BAND_CENTERS],
            dim=1,
        )
        return bands * (images > 0.05).to(bands.dtype).unsqueeze(1)

    def _blur(self, x: torch.Tensor) -> torch.Tensor:
        c = x.shape[1]
        k = self._blur_1d.to(x.dtype)
        kx = k.view(1, 1, 1, -1).expand(c, 1, 1, _BLUR_SIZE)
        ky = k.view(1, 1, -1, 1).expand(c, 1, _BLUR_SIZE, 1)
        x = F.conv2d(x, kx, padding=(0, _BLUR_SIZE // 2), groups=c)
        return F.conv2d(x, ky, padding=(_BLUR_SIZE // 2, 0), groups=c)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images: (B, 64, 64) in [0, 1] -> (B, d_visual)."""
        if images.dim() == 2:
            images = images.unsqueeze(0)
        x = self._blur(self._band_expand(images))
        pooled = F.avg_pool2d(x, images.shape[-1] // _POOL).flatten(1)
        return self.norm(pooled @ self.proj.weight.T.to(pooled.dtype))


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over parameter names and little-endian float32 payloads."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        arr = p.detach().cpu().numpy().astype("<f4")
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
