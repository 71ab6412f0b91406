"""Disagreement losses between victim and student outputs.

Every loss takes batched tensors shaped ``(B, K)`` (a bare ``(K,)`` vector is
treated as a batch of one), reduces over the component axis with a sum and
then averages over the batch.
"""
from __future__ import annotations

from typing import NamedTuple

import torch

PROB_FLOOR = 1e-7


def _pair(v, s) -> tuple[torch.Tensor, torch.Tensor]:
    v = torch.as_tensor(v)
    s = torch.as_tensor(s)
    if not v.is_floating_point():
        v = v.double()
    s = s.to(v.dtype) if not s.is_floating_point() else s
    if v.shape != s.shape:
        raise ValueError(f"shape mismatch: {tuple(v.shape)} vs {tuple(s.shape)}")
    if v.dim() == 1:
        v, s = v.unsqueeze(0), s.unsqueeze(0)
    return v, s


def _clamp(p: torch.Tensor, floor: float) -> torch.Tensor:
    return p.clamp(min=floor, max=1.0)


def l1_loss(v_out, s_out) -> torch.Tensor:
    v, s = _pair(v_out, s_out)
    return (v - s).abs().sum(dim=1).mean()


def mse_loss(v_box, s_box) -> torch.Tensor:
    # sum of squares over the coordinates, no square root
    v, s = _pair(v_box, s_box)
    return (v - s).pow(2).sum(dim=1).mean()


def kl_loss(v_probs, s_probs, floor: float = PROB_FLOOR) -> torch.Tensor:
    v, s = _pair(v_probs, s_probs)
    v, s = _clamp(v, floor), _clamp(s, floor)
    return (v * (v.log() - s.log())).sum(dim=1).mean()


def cross_entropy(target, pred, floor: float = PROB_FLOOR) -> torch.Tensor:
    """``-sum(target * log(pred))`` with ``pred`` clamped to ``[floor, 1]``."""
    t, p = _pair(target, pred)
    return -(t * _clamp(p, floor).log()).sum(dim=1).mean()


def binary_cross_entropy(target, pred, floor: float = PROB_FLOOR) -> torch.Tensor:
    """Cross-entropy applied to each sigmoid unit's (p, 1 - p) pair, summed over units.

    Used to train per-class sigmoid heads: plain cross-entropy against a
    one-hot target only pushes the true class up and never the others down.
    """
    t, p = _pair(target, pred)
    t2 = torch.stack([t, 1 - t], dim=-1).flatten(1)
    p2 = torch.stack([p, 1 - p], dim=-1).flatten(1)
    return cross_entropy(t2, p2, floor)


def rmsle(pred_box, true_box, eps: float = 0.0) -> torch.Tensor:
    """Root mean squared log1p error per image, averaged over the batch.

    ``eps`` is added under the square root; pass a tiny value when the loss is
    differentiated, since the root has an infinite slope at zero.
    """
    p, t = _pair(pred_box, true_box)
    if (p < 0).any() or (t < 0).any():
        raise ValueError("rmsle requires non-negative components")
    msle = (torch.log1p(p) - torch.log1p(t)).pow(2).mean(dim=1)
    return (msle + eps).sqrt().mean()


# Logit recovery keeps everything a float32 probability can express: an
# overconfident victim still reports its losing classes as tiny but nonzero
# probabilities, and the 1e-7 floor would erase that ranking.
LOGIT_FLOOR = float(torch.finfo(torch.float32).tiny)
LOGIT_CEIL = 1.0 - 2.0 ** -24  # largest float32 below 1


def logit(p: torch.Tensor, floor: float = LOGIT_FLOOR, ceil: float = LOGIT_CEIL) -> torch.Tensor:
    """Inverse sigmoid, evaluated in float64 on ``p`` clamped to ``[floor, ceil]``."""
    q = torch.as_tensor(p)
    q64 = q.double().clamp(floor, ceil)
    return (torch.log(q64) - torch.log1p(-q64)).to(q.dtype if q.is_floating_point() else torch.float64)


class LossValues(NamedTuple):
    l_cls: torch.Tensor
    l_reg: torch.Tensor
    l_total: torch.Tensor
    weights: tuple[float, float]


def total_loss(v_out, s_out, weights=(1.0, 1.0), mode: str = "prob") -> LossValues:
    """Combined classification (l1) + box (squared error) disagreement.

    ``v_out`` is a victim detection with ``probs`` and ``box``; ``s_out`` a
    student output with ``pre_label``, ``label`` and ``box``. In ``"prob"``
    mode the l1 term compares probabilities; ``"logit_l1"`` compares the
    student's pre-activation scores with the logits recovered from the
    victim's clamped probabilities.
    """
    if v_out.box.shape[0] != s_out.box.shape[0]:
        raise ValueError("victim and student batch sizes differ")
    if mode == "prob":
        l_cls = l1_loss(v_out.probs, s_out.label)
    elif mode == "logit_l1":
        l_cls = l1_loss(logit(v_out.probs), s_out.pre_label)
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    l_reg = mse_loss(v_out.box, s_out.box)
    w_cls, w_reg = weights
    return LossValues(l_cls, l_reg, w_cls * l_cls + w_reg * l_reg, (w_cls, w_reg))


def per_sample_total(v_out, s_out, weights=(1.0, 1.0), mode: str = "prob") -> torch.Tensor:
    """Unreduced ``l_total`` per image, shape ``(B,)``; its batch mean equals ``total_loss``."""
    w_cls, w_reg = weights
    if mode == "prob":
        cls = (v_out.probs - s_out.label).abs().sum(dim=1)
    elif mode == "logit_l1":
        cls = (logit(v_out.probs) - s_out.pre_label).abs().sum(dim=1)
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    return w_cls * cls + w_reg * (v_out.box - s_out.box).pow(2).sum(dim=1)
