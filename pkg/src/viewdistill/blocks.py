"""Network building blocks: stabilized global max pooling, embedding and
feature-selection heads, and attention-mask extraction from feature maps."""
from __future__ import annotations

import warnings
from typing import Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F



def stabilized_gmp(fmap: torch.Tensor, kernel: int) -> torch.Tensor:
    """Global max over a stride-1 average-pooled feature map.

    Per channel, every kernel x kernel window (no padding) is averaged and
    the maximum averaged window is returned.  kernel=1 reduces to plain
    global max pooling; kernel covering the whole map reduces to global
    average pooling.  The kernel is clamped to each spatial dim.  On ties
    the gradient routes to the first maximal window in row-major order.

    Accepts (N, C, H, W) or (C, H, W); returns (N, C) or (C,).
    """
    if kernel < 1:
        raise ValueError(f"kernel must be >= 1, got {kernel}")
    squeeze = fmap.dim() == 3
    if squeeze:
        fmap = fmap.unsqueeze(0)
    if fmap.dim() != 4:
        raise ValueError(f"expected (N,C,H,W) or (C,H,W), got {tuple(fmap.shape)}")
    n, c, h, w = fmap.shape
    if h == 0 or w == 0:
        raise ValueError("empty feature map")
    kh, kw = min(kernel, h), min(kernel, w)
    avg = F.avg_pool2d(fmap, kernel_size=(kh, kw), stride=1)
    flat = avg.reshape(n, c, -1)
    # gather at argmax keeps the backward pass on a single deterministic window
    idx = flat.argmax(dim=2, keepdim=True)
    out = flat.gather(2, idx).squeeze(2)
    return out.squeeze(0) if squeeze else out


def global_avg_pool(fmap: torch.Tensor) -> torch.Tensor:
    return fmap.mean(dim=(-2, -1))


def global_max_pool(fmap: torch.Tensor) -> torch.Tensor:
    return fmap.amax(dim=(-2, -1))


class EmbeddingBlock(nn.Module):
    """FC + BN head mapping pooled features to a retrieval embedding."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, out_dim, bias=False)
        self.bn = nn.BatchNorm1d(out_dim)

    def forward(self, x):
        return self.bn(self.fc(x))


class FeatSelFMFB(nn.Module):
    """1x1 conv + BN + ReLU selecting view-relevant feature-map channels."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=1, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class FeatSelRFB(nn.Module):
    """FC + BN + ReLU selecting view-relevant embedding components."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, out_dim, bias=False)
        self.bn = nn.BatchNorm1d(out_dim)

    def forward(self, x):
        return F.relu(self.bn(self.fc(x)))


class MappingBlock(nn.Module):
    """FC + BN projecting into a teacher's representation space."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, out_dim, bias=False)
        self.bn = nn.BatchNorm1d(out_dim)

    def forward(self, x):
        return self.bn(self.fc(x))


def channel_l1_mask(fmap: torch.Tensor) -> Tuple[np.ndarray, bool]:
    """Per-location L1 norm over channels, min-max normalized to [0, 1].

    Returns (mask, degenerate).  A constant norm map cannot be normalized;
    the mask is then all ones (pass-through) and degenerate is True.
    """
    if fmap.dim() != 3:
        raise ValueError(f"expected (C,H,W) feature map, got {tuple(fmap.shape)}")
    with torch.no_grad():
        norm = fmap.abs().sum(dim=0)
        lo, hi = norm.min(), norm.max()
        if (hi - lo).item() == 0.0:
            return np.ones(tuple(norm.shape), dtype=np.float32), True
        mask = (norm - lo) / (hi - lo)
    return mask.cpu().numpy().astype(np.float32), False


def extract_attention_mask(fmap: torch.Tensor, original: np.ndarray,
                           interpolation: str = "bilinear") -> np.ndarray:
    """Overlay the feature map's channel-L1 attention onto the original image.

    The mask is computed at feature-map resolution, resized to the image
    size, and multiplied pixelwise with the image.  A degenerate (constant)
    norm map produces a pass-through overlay and a warning.
    """
    original = np.asarray(original)
    h, w = original.shape[:2]
    if fmap.shape[-2] > h or fmap.shape[-1] > w:
        raise ValueError(
            f"feature map {tuple(fmap.shape[-2:])} larger than image ({h}, {w})")
    mask, degenerate = channel_l1_mask(fmap)
    if degenerate:
        warnings.warn("constant attention norm map; emitting pass-through mask")
        return original.astype(np.uint8).copy()
    mask_t = torch.from_numpy(mask)[None, None]
    big = F.interpolate(mask_t, size=(h, w), mode=interpolation,
                        align_corners=False)[0, 0].numpy()
    if original.ndim == 3:
        big = big[:, :, None]
    overlay = original.astype(np.float32) * big
    return np.clip(np.round(overlay), 0, 255).astype(np.uint8)


__all__ = [
    "stabilized_gmp", "global_avg_pool", "global_max_pool",
    "EmbeddingBlock", "FeatSelFMFB", "FeatSelRFB", "MappingBlock",
    "channel_l1_mask", "extract_attention_mask",
]
