"""Reconstruction, pairwise difficulty-ranking, and segmentation losses.

Tensors are batched: per-patch quantities are ``(B, N)``, masks are boolean
``(B, N)`` with the same number of masked patches in every row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

ROLES = ("ground_truth_rec", "student_predicted", "teacher_predicted")


@dataclass
class LossVector:
    values: torch.Tensor  # (N,) or (B, N)
    role: str
    mask: Optional[torch.Tensor] = None  # entries defined where True

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown loss-vector role {self.role!r}")


def _as_batch(x):
    return x.unsqueeze(0) if x.dim() == 1 else x


def gather_masked(x, mask):
    """Select the masked rows of ``x`` (B, N, ...) -> (B, M, ...)."""
    B, N = mask.shape
    M = int(mask[0].sum())
    if not torch.all(mask.sum(1) == M):
        raise ValueError("every sample must mask the same number of patches")
    idx = torch.nonzero(mask, as_tuple=False)[:, 1].view(B, M)
    if x.dim() == 2:
        return torch.gather(x, 1, idx)
    return torch.gather(x, 1, idx[..., None].expand(B, M, x.shape[-1]))


def rec_loss(predictions, targets, mask):
    """Masked-patch MSE.

    ``predictions`` (B, M, L) are for the masked patches in ascending index
    order; ``targets`` (B, N, L) are the normalized patches of the full
    sequence. Returns ``(total, per_patch)`` where ``per_patch`` is (B, N),
    zero at unmasked positions, and ``total`` averages over masked patches.
    """
    mask = _as_batch(mask).bool()
    if predictions.dim() == 2:
        predictions, targets = predictions[None], targets[None]
    tgt = gather_masked(targets, mask)
    if tgt.shape != predictions.shape:
        raise ValueError(
            f"predictions {tuple(predictions.shape)} vs masked targets {tuple(tgt.shape)}"
        )
    per_masked = ((predictions - tgt) ** 2).mean(-1)
    per_patch = torch.zeros(mask.shape, dtype=per_masked.dtype, device=per_masked.device)
    per_patch = per_patch.masked_scatter(mask, per_masked)
    return per_masked.mean(), per_patch


def pair_indicators(ground_truth, mask):
    """``(plus, minus)`` boolean (B, N, N) pair indicators.

    ``plus[b, i, j]`` iff both patches are masked and gt_i > gt_j;
    ``minus`` is its transpose.
    """
    g = _as_batch(ground_truth)
    m = _as_batch(mask).bool()
    both = m[:, :, None] & m[:, None, :]
    plus = (g[:, :, None] > g[:, None, :]) & both
    minus = (g[:, :, None] < g[:, None, :]) & both
    return plus, minus


def pred_loss(student_pred, ground_truth, mask):
    """Pairwise logistic ranking loss over ordered pairs of masked patches.

    For every ordered pair (i, j) of masked patches with gt_i > gt_j the term
    ``-log sigmoid(s_i - s_j)`` is added, and ``-log(1 - sigmoid(s_i - s_j))``
    when gt_i < gt_j; tied pairs contribute nothing. The sum is taken per
    sample and averaged over the batch. ``ground_truth`` is detached.
    """
    s = _as_batch(student_pred)
    g = _as_batch(ground_truth).detach()
    if s.shape != g.shape:
        raise ValueError(f"prediction {tuple(s.shape)} vs ground truth {tuple(g.shape)}")
    plus, minus = pair_indicators(g, mask)
    d = s[:, :, None] - s[:, None, :]
    zero = torch.zeros((), dtype=d.dtype, device=d.device)
    # log(1 - sigmoid(d)) == logsigmoid(-d)
    terms = torch.where(plus, F.logsigmoid(d), zero) + torch.where(minus, F.logsigmoid(-d), zero)
    return -terms.sum((1, 2)).mean()


def pred_loss_gradient_check(student_pred, ground_truth, mask, step=1e-4, floor=1e-6):
    """Max relative error between the autograd gradient of :func:`pred_loss`
    and central finite differences, both in float64.

    Relative error per component is ``|a - f| / max(|a|, |f|, floor)``.
    """
    s = torch.as_tensor(np.asarray(student_pred), dtype=torch.float64)
    g = torch.as_tensor(np.asarray(ground_truth), dtype=torch.float64)
    m = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
    s_req = s.clone().requires_grad_(True)
    pred_loss(s_req, g, m).backward()
    analytic = s_req.grad.numpy().reshape(-1)

    flat = s.reshape(-1)
    fd = np.zeros_like(analytic)
    with torch.no_grad():
        for k in range(flat.numel()):
            up = flat.clone()
            dn = flat.clone()
            up[k] += step
            dn[k] -= step
            f_up = pred_loss(up.view_as(s), g, m).item()
            f_dn = pred_loss(dn.view_as(s), g, m).item()
            fd[k] = (f_up - f_dn) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    return float(np.max(np.abs(analytic - fd) / denom)), analytic, fd


def soft_dice_loss(logits, labels, smooth=1e-5):
    """1 - mean soft Dice over the classes present in ``labels``."""
    K = logits.shape[1]
    probs = logits.softmax(1)
    onehot = F.one_hot(labels.long(), K).movedim(-1, 1).to(probs.dtype)
    dims = (0,) + tuple(range(2, probs.dim()))
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = (2 * inter + smooth) / (denom + smooth)
    present = onehot.sum(dims) > 0
    return 1.0 - dice[present].mean()


def seg_loss(logits, labels):
    """Mean of soft Dice loss and voxel-wise cross-entropy.

    ``logits`` (B, K, H, W, D), ``labels`` (B, H, W, D) integer in [0, K).
    """
    K = logits.shape[1]
    if logits.shape[2:] != labels.shape[1:] or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"labels must lie in [0, {K})")
    ce = F.cross_entropy(logits, labels.long())
    return 0.5 * (soft_dice_loss(logits, labels) + ce)


def total_pretrain_loss(l_rec, l_pred, w_pred=1.0):
    if w_pred < 0:
        raise ValueError("w_pred must be non-negative")
    return l_rec + w_pred * l_pred
