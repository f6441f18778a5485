"""Mask-level refinement of pixel OOD decisions using foreground proposals.

Proposals come from an external class-agnostic segmenter. Each proposal is
voted on as a whole: if strictly more than half of its pixels are flagged
OOD, the entire mask is OOD; otherwise it is assigned the plurality class of
its non-OOD pixels. The refined OOD map is the union of the OOD masks, so
pixels outside every surviving proposal are never OOD after refinement.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .detect import OODDecision
from .errors import EmptyProposalMaskError, ShapeMismatchError, ThresholdOutOfRangeError

DEFAULT_DETECTOR_THRESHOLD = 0.2


@dataclass(eq=False)
class Proposal:
    mask: np.ndarray
    score: float
    source_id: str = ""


@dataclass(frozen=True)
class MaskVerdict:
    is_ood: bool
    ood_fraction: float
    assigned_class: int | None = None  # None when the mask is OOD


@dataclass(eq=False)
class RefinedDecision:
    ood: np.ndarray
    verdicts: list[MaskVerdict]


def filter_proposals(proposals: list[Proposal], detector_threshold: float) -> list[Proposal]:
    """Keep proposals with score >= detector_threshold, preserving order."""
    if not 0.0 <= detector_threshold <= 1.0:
        raise ThresholdOutOfRangeError(f"detector threshold {detector_threshold} outside [0, 1]")
    return [p for p in proposals if p.score >= detector_threshold]


def vote_mask(mask: np.ndarray, decision: OODDecision) -> MaskVerdict:
    """Majority vote over one proposal mask; an exact tie is not a majority."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != decision.ood.shape:
        raise ShapeMismatchError(f"proposal mask {mask.shape} does not match decision {decision.ood.shape}")
    total = int(mask.sum())
    if total == 0:
        raise EmptyProposalMaskError("proposal mask has no foreground pixels")
    inside = int((decision.ood & mask).sum())
    fraction = inside / total
    return MaskVerdict(is_ood=fraction > 0.5, ood_fraction=fraction)


def refine_ood(
    decision: OODDecision,
    proposals: list[Proposal],
    detector_threshold: float = DEFAULT_DETECTOR_THRESHOLD,
) -> RefinedDecision:
    """Vote every surviving proposal and union the OOD ones into the refined map.

    Overlap between an OOD and a non-OOD mask resolves to OOD (union wins).
    Non-OOD masks are labelled with the plurality class of their non-OOD
    pixels, falling back to all pixels if none remain; ties pick the lowest
    class index.
    """
    ood = np.zeros_like(decision.ood, dtype=bool)
    verdicts: list[MaskVerdict] = []
    for proposal in filter_proposals(proposals, detector_threshold):
        verdict = vote_mask(proposal.mask, decision)
        mask = np.asarray(proposal.mask, dtype=bool)
        if verdict.is_ood:
            ood |= mask
        else:
            pool = mask & ~decision.ood
            if not pool.any():
                pool = mask
            counts = np.bincount(decision.labels[pool].ravel())
            verdict = replace(verdict, assigned_class=int(counts.argmax()))
        verdicts.append(verdict)
    return RefinedDecision(ood=ood, verdicts=verdicts)
