"""Smoothed cross entropy, the SSC loss and the adversarial losses."""
from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn.functional as F

from .discriminator import DiscScore
from .voxel_data import IGNORE

SCORE_EPS = 1e-7
# logit(1 - SCORE_EPS): clamping logits here equals clamping scores to [eps, 1 - eps]
_LOGIT_CLAMP = math.log((1 - SCORE_EPS) / SCORE_EPS)


def smooth_ce(logits: torch.Tensor, target: torch.Tensor, eps: float = 0.1,
              mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Cross entropy against label-smoothed targets, averaged over scored cells.

    ``logits`` is (B, K, ...) with K = C + 1 and ``target`` (B, ...). The true
    class gets weight 1 - eps and each of the other K - 1 classes eps / (K - 1).
    Cells labelled IGNORE, or False in ``mask``, are skipped.
    """
    if not 0 <= eps < 1:
        raise ValueError("eps must lie in [0, 1)")
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} disagree")
    k = logits.shape[1]
    target = target.long()
    keep = target != IGNORE
    if mask is not None:
        keep = keep & mask.bool()
    if not bool(keep.any()):
        raise ValueError("every cell is ignored")
    logp = F.log_softmax(logits, dim=1)
    safe = torch.where(keep, target, torch.zeros_like(target))
    nll_true = -logp.gather(1, safe.unsqueeze(1)).squeeze(1)
    if eps > 0:
        nll_rest = -logp.sum(dim=1) - nll_true
        loss = (1 - eps) * nll_true + eps / (k - 1) * nll_rest
    else:
        loss = nll_true
    return loss[keep].mean()


def upsample_2d_logits(logits2d: torch.Tensor, size) -> torch.Tensor:
    return F.interpolate(logits2d, size=tuple(size), mode="nearest")


def ssc_loss(logits3d, labels3d, logits2d, labels2d, lam: float = 0.25, eps: float = 0.1,
             mask3d=None):
    """3D smoothed CE plus ``lam`` times the 2D one. The 2D logits are
    nearest-upsampled to the label image size first."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    loss = smooth_ce(logits3d, labels3d, eps, mask3d)
    if lam > 0 and logits2d is not None:
        up = upsample_2d_logits(logits2d, labels2d.shape[-2:])
        loss = loss + lam * smooth_ce(up, labels2d, eps)
    return loss


def _neg_log_score(score: DiscScore):
    # -log(clamp(p)) evaluated stably from the logit
    return F.softplus(-score.logit.clamp(-_LOGIT_CLAMP, _LOGIT_CLAMP))


def _neg_log_one_minus(score: DiscScore):
    return F.softplus(score.logit.clamp(-_LOGIT_CLAMP, _LOGIT_CLAMP))


def adv_losses(d_real: DiscScore, d_gen: DiscScore, d_geo: Optional[DiscScore] = None,
               d_sem: Optional[DiscScore] = None, literal: bool = False):
    """Discriminator and generator adversarial losses.

    L_D = -[log D(Y) + log(1 - D(Y_hat)) + log(1 - D(Y_geo)) + log(1 - D(Y_sem))],
    batch-averaged, with absent fake kinds dropped. The generator term is the
    non-saturating -log D(Y_hat), or log(1 - D(Y_hat)) when ``literal``.
    Scores are clamped to [1e-7, 1 - 1e-7] before the logs.

    Pass ``d_gen`` computed on a detached prediction for the D step; the
    returned generator term only carries gradient through ``d_gen``.
    """
    loss_d = _neg_log_score(d_real).mean() + _neg_log_one_minus(d_gen).mean()
    for fake in (d_geo, d_sem):
        if fake is not None:
            loss_d = loss_d + _neg_log_one_minus(fake).mean()
    if literal:
        loss_g = -_neg_log_one_minus(d_gen).mean()
    else:
        loss_g = _neg_log_score(d_gen).mean()
    return loss_d, loss_g
