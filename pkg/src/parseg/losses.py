"""Objectives for both training stages.

All probability tensors here use the global channel layout ``(B, K + 1, H, W)``
(channel 0 is background, channel ``o`` is organ ``o``); partial models are
expanded with :func:`parseg.segnet.to_global` first. Label tensors hold global
organ indices.

Sign conventions: the prediction-difference term is an overlap penalty that is
*added* (minimizing overlap is the same as maximizing the Dice loss against the
other dataset's organs), and cosine terms are cosine *distances*, so the
feature-difference term is subtracted to push features apart and the dynamic
feature-similarity term is added to pull the weaker model toward the stronger.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import torch

DICE_EPS = 1e-5
NORM_EPS = 1e-8
PROB_FLOOR = 1e-8
COSINE_SEMANTICS = ("distance", "similarity")


@dataclass
class StageHyperParams:
    lambda_l: float = 0.1
    lambda_f: float = 0.1
    beta_l: float = 0.1
    beta_f: float = 0.1
    cosine_semantics: str = "distance"

    def validate(self) -> None:
        for name in ("lambda_l", "lambda_f", "beta_l", "beta_f"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.cosine_semantics not in COSINE_SEMANTICS:
            raise ValueError(f"cosine_semantics must be one of {COSINE_SEMANTICS}")


@dataclass
class PairwiseDecision:
    similarity: float
    mask: int
    ce_own: float
    ce_peer: float

    def __post_init__(self):
        if self.mask not in (0, 1):
            raise ValueError("mask must be 0 or 1")
        if self.mask != transfer_direction_mask(self.ce_own, self.ce_peer):
            raise ValueError("mask inconsistent with cross-entropy comparison")


@dataclass
class Stage1Terms:
    dice: torch.Tensor
    pd: Optional[torch.Tensor] = None
    fd: Optional[torch.Tensor] = None


@dataclass
class Stage2Terms:
    dice: torch.Tensor
    ps: Optional[torch.Tensor] = None
    dfs: Optional[torch.Tensor] = None


def _organ_list(organ_set: Iterable[int]) -> list[int]:
    organs = sorted(int(o) for o in organ_set)
    if not organs:
        raise ValueError("organ set must be non-empty")
    return organs


def _soft_dice(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    # sums run over the whole batch
    inter = (p * g).sum()
    return (2 * inter + DICE_EPS) / (p.sum() + g.sum() + DICE_EPS)


def dice_loss(prob: torch.Tensor, target: torch.Tensor, organ_set: Iterable[int]) -> torch.Tensor:
    """Mean over organs of ``1 - soft Dice``; pixels of other organs count as background."""
    organs = _organ_list(organ_set)
    if prob.shape[0] != target.shape[0] or prob.shape[2:] != target.shape[1:]:
        raise ValueError(f"prob {tuple(prob.shape)} and target {tuple(target.shape)} are not aligned")
    if organs[-1] >= prob.shape[1]:
        raise ValueError(f"organ {organs[-1]} has no channel in a {prob.shape[1]}-channel prediction")
    losses = [1 - _soft_dice(prob[:, o], (target == o).to(prob.dtype)) for o in organs]
    return torch.stack(losses).mean()


def soft_union(prob: torch.Tensor, organ_set: Iterable[int]) -> torch.Tensor:
    organs = _organ_list(organ_set)
    return prob[:, organs].sum(dim=1).clamp(max=1.0)


def prediction_difference_loss(
    pred_i_on_j: torch.Tensor, gt_j: torch.Tensor, organ_i: Iterable[int], organ_j: Iterable[int]
) -> torch.Tensor:
    """Soft Dice overlap between model i's predicted organs and dataset j's labeled organs."""
    oi, oj = _organ_list(organ_i), _organ_list(organ_j)
    if set(oi) & set(oj):
        raise ValueError(f"organ sets overlap: {sorted(set(oi) & set(oj))}")
    u = soft_union(pred_i_on_j, oi)
    g = torch.isin(gt_j, torch.tensor(oj, device=gt_j.device)).to(u.dtype)
    return _soft_dice(u, g)


def cosine_distance(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """``1 - cos(u, v)`` along the last axis, with norms floored by ``NORM_EPS``."""
    if u.shape[-1] != v.shape[-1]:
        raise ValueError(f"feature dimension mismatch: {u.shape[-1]} vs {v.shape[-1]}")
    dot = (u * v).sum(-1)
    return 1 - dot / ((u.norm(dim=-1) + NORM_EPS) * (v.norm(dim=-1) + NORM_EPS))


def cosine_term(u: torch.Tensor, v: torch.Tensor, semantics: str = "distance") -> torch.Tensor:
    d = cosine_distance(u, v)
    if semantics == "distance":
        return d
    if semantics == "similarity":
        return 1 - d
    raise ValueError(f"unknown cosine semantics {semantics!r}")


def feature_difference_loss(
    f_own: torch.Tensor, f_peers: Sequence[torch.Tensor], semantics: str = "distance"
) -> torch.Tensor:
    """Mean cosine distance from own features to each (detached) peer's, batch-averaged."""
    if not f_peers:
        raise ValueError("need at least one peer")
    terms = [cosine_term(f_own, p.detach(), semantics).mean() for p in f_peers]
    return torch.stack(terms).mean()


def stage1_total_loss(terms: Sequence[Stage1Terms], hp: StageHyperParams) -> torch.Tensor:
    hp.validate()
    if len(terms) < 2:
        raise ValueError("need N >= 2 models")
    total = None
    for t in terms:
        row = t.dice
        if hp.lambda_l != 0 and t.pd is not None:
            row = row + hp.lambda_l * t.pd
        if hp.lambda_f != 0 and t.fd is not None:
            row = row - hp.lambda_f * t.fd
        total = row if total is None else total + row
    return total


def masked_cross_entropy(prob: torch.Tensor, true_labels: torch.Tensor, organ_set: Iterable[int]) -> torch.Tensor:
    """Pixel-mean NLL over the classes ``{background} + organ_set``.

    Channels of organs outside ``organ_set`` are folded into background, so models
    with different channel sets are scored on the same class alphabet.
    """
    organs = _organ_list(organ_set)
    if organs[-1] >= prob.shape[1]:
        raise ValueError(f"organ {organs[-1]} has no channel in a {prob.shape[1]}-channel prediction")
    total = prob.sum(dim=1)
    if not torch.allclose(total, torch.ones_like(total), atol=1e-4):
        raise ValueError("probabilities are not normalized over channels")
    keep = torch.zeros(prob.shape[1], dtype=torch.bool, device=prob.device)
    keep[organs] = True
    background = prob[:, ~keep].sum(dim=1, keepdim=True)
    eff = torch.cat([background, prob[:, organs]], dim=1)
    cls = torch.zeros_like(true_labels, dtype=torch.long)
    for k, o in enumerate(organs, start=1):
        cls = torch.where(true_labels == o, torch.full_like(cls, k), cls)
    p_true = eff.gather(1, cls.unsqueeze(1)).squeeze(1)
    return -torch.log(p_true.clamp(min=PROB_FLOOR)).mean()


def transfer_direction_mask(ce_own: float, ce_peer: float) -> int:
    """0 when the peer scores better than the model itself (transfer peer -> own), else 1."""
    ce_own, ce_peer = float(ce_own), float(ce_peer)
    if math.isnan(ce_own) or math.isnan(ce_peer):
        raise ValueError("cross-entropy is NaN")
    return 0 if ce_own > ce_peer else 1


def prediction_similarity_loss(pred_i_on_j: torch.Tensor, gt_j: torch.Tensor, organ_j: Iterable[int]) -> torch.Tensor:
    """Dice loss of a full model on another dataset, scored on that dataset's true organs only."""
    return dice_loss(pred_i_on_j, gt_j, organ_j)


def dynamic_feature_similarity_loss(
    f_own: torch.Tensor, f_peer: torch.Tensor, mask: int, semantics: str = "distance"
) -> torch.Tensor:
    """``(1 - mask) * cos_distance(f_own, detach(f_peer))``, batch-averaged."""
    if f_own.shape[-1] != f_peer.shape[-1]:
        raise ValueError(f"feature dimension mismatch: {f_own.shape[-1]} vs {f_peer.shape[-1]}")
    if mask not in (0, 1):
        raise ValueError("mask must be 0 or 1")
    if mask == 1:
        return f_own.new_zeros(())
    return cosine_term(f_own, f_peer.detach(), semantics).mean()


def stage2_total_loss(terms: Sequence[Stage2Terms], hp: StageHyperParams) -> torch.Tensor:
    hp.validate()
    if len(terms) < 2:
        raise ValueError("need N >= 2 models")
    total = None
    for t in terms:
        row = t.dice
        if hp.beta_l != 0 and t.ps is not None:
            row = row + hp.beta_l * t.ps
        if hp.beta_f != 0 and t.dfs is not None:
            row = row + hp.beta_f * t.dfs
        total = row if total is None else total + row
    return total
