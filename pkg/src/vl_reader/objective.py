"""MVLR loss: masked-patch MSE, target-set cross-entropy and their weighted sum."""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from .errors import EmptyTargetSet, ShapeMismatch
from .models import LossReport, Phase
from .textcodec import EOS_ID, TokenSeq

NORM_PIX_EPS = 1e-6

Scalar = Union[float, torch.Tensor]


def standardize_patches(patches: torch.Tensor, eps: float = NORM_PIX_EPS) -> torch.Tensor:
    """Per-patch zero mean, unit variance."""
    mean = patches.mean(dim=-1, keepdim=True)
    var = patches.var(dim=-1, unbiased=False, keepdim=True)
    return (patches - mean) / torch.sqrt(var + eps)


def visual_loss(
    pixels: torch.Tensor,
    target: torch.Tensor,
    visual_mask: Optional[torch.Tensor],
    norm_pix_loss: bool = False,
) -> Tuple[torch.Tensor, List[torch.Tensor], int]:
    """Squared error over masked-patch pixels, averaged by pixel count and layers.

    ``pixels`` is (N_d, B, N, D), ``target`` (B, N, D), ``visual_mask`` (B, N).
    Returns (L_v, per-layer values, masked pixel count); L_v is 0 when nothing is masked.
    """
    if pixels.shape[1:] != target.shape:
        raise ShapeMismatch(tuple(target.shape), tuple(pixels.shape[1:]), what="reconstruction")
    n_layers = pixels.shape[0]
    if visual_mask is None or not bool(visual_mask.any()):
        zero = pixels.sum() * 0.0
        return zero, [zero for _ in range(n_layers)], 0

    if norm_pix_loss:
        target = standardize_patches(target)
    weights = visual_mask.to(pixels.dtype)[..., None]
    masked_pixels = int(visual_mask.sum()) * target.shape[-1]

    per_layer = [((pixels[n] - target) ** 2 * weights).sum() / masked_pixels for n in range(n_layers)]
    return torch.stack(per_layer).mean(), per_layer, masked_pixels


def linguistic_loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    target_mask: torch.Tensor,
) -> Tuple[torch.Tensor, List[torch.Tensor], int]:
    """Cross-entropy at the selected query rows, averaged by row count and layers.

    ``logits`` is (N_d, B, L_q, V); ``targets`` and ``target_mask`` are (B, L_q).
    """
    if logits.shape[1:3] != targets.shape or targets.shape != target_mask.shape:
        raise ShapeMismatch(tuple(targets.shape), tuple(logits.shape[1:3]), what="logits")
    count = int(target_mask.sum())
    if count == 0:
        raise EmptyTargetSet()

    selected = targets[target_mask]
    per_layer = [
        F.cross_entropy(logits[n][target_mask], selected, reduction="sum") / count
        for n in range(logits.shape[0])
    ]
    return torch.stack(per_layer).mean(), per_layer, count


def total_loss(l_v: Scalar, l_l: Scalar, lambda_v: float, lambda_l: float) -> Scalar:
    """lambda_v * L_v + lambda_l * L_l; a zero weight drops its term from the graph."""
    if lambda_v < 0 or lambda_l < 0:
        raise ValueError("loss weights must be non-negative")
    total: Scalar = 0.0
    if lambda_v:
        total = total + lambda_v * l_v
    if lambda_l:
        total = total + lambda_l * l_l
    return total


def linguistic_targets(
    seqs: Sequence[TokenSeq], query_len: int, phase: Phase
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-row target ids and the rows that are supervised.

    MVLR supervises the linguistically masked characters only; fine-tuning
    supervises every character and the EOS slot.
    """
    targets = torch.full((len(seqs), query_len), EOS_ID, dtype=torch.long)
    mask = torch.zeros((len(seqs), query_len), dtype=torch.bool)
    for i, seq in enumerate(seqs):
        length = len(seq)
        if length + 1 > query_len:
            raise ShapeMismatch((query_len,), (length + 1,), what="label")
        targets[i, :length] = torch.tensor(seq.ids, dtype=torch.long)
        if phase == Phase.MVLR:
            for column in seq.masked_positions:
                mask[i, column - 1] = True
        else:
            mask[i, : length + 1] = True
    return targets, mask


@dataclass
class LossTerms:
    """Differentiable loss pieces of one batch."""

    total: torch.Tensor
    l_v: torch.Tensor
    l_l: torch.Tensor
    per_layer_v: List[torch.Tensor]
    per_layer_l: List[torch.Tensor]
    masked_pixels: int
    target_tokens: int

    def report(self) -> LossReport:
        return LossReport(
            l_v=float(self.l_v),
            l_l=float(self.l_l),
            total=float(self.total),
            per_layer_v=[float(v) for v in self.per_layer_v],
            per_layer_l=[float(v) for v in self.per_layer_l],
            masked_pixels=self.masked_pixels,
            target_tokens=self.target_tokens,
            visual_defined=self.masked_pixels > 0,
        )


def mvlr_loss(
    pixels: torch.Tensor,
    logits: torch.Tensor,
    target_pixels: torch.Tensor,
    visual_mask: Optional[torch.Tensor],
    targets: torch.Tensor,
    target_mask: torch.Tensor,
    lambda_v: float,
    lambda_l: float,
    norm_pix_loss: bool = False,
) -> LossTerms:
    """Both terms of the objective for one decoder trace."""
    l_v, per_layer_v, masked_pixels = visual_loss(pixels, target_pixels, visual_mask, norm_pix_loss)
    l_l, per_layer_l, target_tokens = linguistic_loss(logits, targets, target_mask)
    total = total_loss(l_v, l_l, lambda_v, lambda_l)
    if not isinstance(total, torch.Tensor):
        total = l_l * 0.0
    return LossTerms(
        total=total,
        l_v=l_v.detach(),
        l_l=l_l.detach(),
        per_layer_v=[v.detach() for v in per_layer_v],
        per_layer_l=[v.detach() for v in per_layer_l],
        masked_pixels=masked_pixels,
        target_tokens=target_tokens,
    )
