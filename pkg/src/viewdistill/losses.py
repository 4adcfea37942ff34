"""Loss kernels: batch-sum classification loss, masked representation
regression, and the weighted total used for distillation.

The classification loss is a sum over the batch (not a mean); the scale is
absorbed into the learning rate.  Regression losses normalize by the count
of unmasked samples so the per-sample scale is stable when masking fires.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

# A (sample, view) pair stops contributing to the regression losses when the
# erase rectangle covers strictly more than this fraction of the view.
MASK_OVERLAP_THRESHOLD = 0.4


@dataclass
class LossWeights:
    """Weights of the two regression sums and the number of active views."""

    alpha: float = 4.0
    beta: float = 2.0
    view_count: int = 7

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.view_count < 1:
            raise ValueError("view_count must be >= 1")


@dataclass
class MaskCounters:
    """Running tallies of how often masking fired."""

    fully_masked_batches: int = 0
    masked_samples: int = 0

    def as_dict(self) -> dict:
        return {"fully_masked_batches": self.fully_masked_batches,
                "masked_samples": self.masked_samples}


def cls_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Sum over the batch of -log softmax(logits_i)[label_i].

    Labels are 0-based class indices in [0, C).
    """
    if logits.dim() != 2:
        raise ValueError(f"expected (N, C) logits, got {tuple(logits.shape)}")
    n, c = logits.shape
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {tuple(labels.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    logp = F.log_softmax(logits, dim=1)
    return -logp.gather(1, labels.unsqueeze(1)).sum()


def regression_loss(targets: torch.Tensor, preds: torch.Tensor,
                    mask: Optional[torch.Tensor] = None,
                    counters: Optional[MaskCounters] = None) -> torch.Tensor:
    """Half mean squared distance between targets and predictions.

    (1/2N') * sum over unmasked samples of ||target - pred||^2 with N' the
    unmasked count.  ``mask`` is a per-sample bool tensor, True meaning the
    sample contributes.  A fully masked batch yields exactly 0 (and bumps
    the counter); masked samples are excluded from the graph entirely.
    """
    if targets.shape != preds.shape:
        raise ValueError(
            f"target/pred shape mismatch: {tuple(targets.shape)} vs "
            f"{tuple(preds.shape)}")
    n = preds.shape[0]
    if mask is None:
        mask = torch.ones(n, dtype=torch.bool, device=preds.device)
    mask = mask.to(torch.bool)
    n_active = int(mask.sum())
    if counters is not None:
        counters.masked_samples += n - n_active
    if n_active == 0:
        if counters is not None:
            counters.fully_masked_batches += 1
        return preds.new_zeros(())
    diff = targets[mask] - preds[mask]
    return diff.pow(2).sum() / (2.0 * n_active)


def total_loss(cls: torch.Tensor,
               attr: Mapping[str, torch.Tensor],
               metric: Mapping[str, torch.Tensor],
               weights: LossWeights) -> Tuple[torch.Tensor, dict]:
    """cls + (alpha/K) * sum(attr) + (beta/K) * sum(metric), plus a breakdown.

    Zero-weighted sums are omitted from the computation graph, so the total
    is genuinely independent of the corresponding branch parameters.  The
    breakdown reports every term as a float for logging.
    """
    k = weights.view_count
    if len(attr) != k or len(metric) != k:
        raise ValueError(
            f"expected {k} attr and metric terms, got {len(attr)}/{len(metric)}")
    total = cls
    if weights.alpha != 0.0:
        total = total + (weights.alpha / k) * sum(attr.values())
    if weights.beta != 0.0:
        total = total + (weights.beta / k) * sum(metric.values())
    breakdown = {"cls": _scalar(cls), "total": _scalar(total)}
    for name, term in attr.items():
        breakdown[f"attr/{name}"] = _scalar(term)
    for name, term in metric.items():
        breakdown[f"metric/{name}"] = _scalar(term)
    return total, breakdown


def _scalar(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def view_masks(overlaps: np.ndarray,
               threshold: float = MASK_OVERLAP_THRESHOLD) -> torch.Tensor:
    """Per-sample, per-view contributes flag from erase overlap fractions.

    A sample is masked out of a view's regression losses exactly when its
    overlap is strictly greater than the threshold (an overlap of exactly
    0.4 still contributes).
    """
    overlaps = np.asarray(overlaps, dtype=np.float64)
    return torch.from_numpy(overlaps <= threshold)
