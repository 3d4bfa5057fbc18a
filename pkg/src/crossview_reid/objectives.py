"""Training losses and the staged total objective.

Stage 1 optimizes the standard video re-identification pair
(batch-hard triplet + cross-entropy, center optional).  Stage 2 adds the
clip-to-memory contrastive term, center loss, the temporal-stream agreement
penalty, and the cross-view consistency pair (contrastive + anchor
alignment) folded into a single weighted component.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import ViewId
from .errors import ConfigError, ValidationError
from .layers import LowRankAffine, scaled_width


@dataclass
class LossWeights:
    """Stage-2 component weights and shared loss hyperparameters.

    Defaults follow the instantiation used throughout: triplet up-weighted
    for ranking, a tiny center coefficient against feature collapse, and
    modest weights on the auxiliary temporal/cross-view regularizers.
    """

    v2m: float = 1.0
    triplet: float = 2.0
    ce: float = 1.0
    center: float = 5e-4
    temporal: float = 0.1
    multiview: float = 0.2
    cons: float = 1.0
    align: float = 1.0
    temperature: float = 0.07
    margin: float = 0.3

    def __post_init__(self) -> None:
        for name in ("v2m", "triplet", "ce", "center", "temporal", "multiview",
                     "cons", "align", "margin"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be non-negative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")


def cross_view_consistency_loss(
    features: Tensor,
    ids: Sequence,
    views: Sequence,
    temperature: float = 0.07,
) -> Tensor:
    """Temperature-scaled contrastive pull between same-identity clips of
    different views.

    For every ordered pair of distinct views present in the batch, averages
    ``-log sigmoid(cos(f_i, f_j) / temperature)`` over same-identity clip
    pairs and sums over view pairs.  Batches without a qualifying cross-view
    positive contribute 0.  Features must be unit-normalized.
    """
    ids = list(ids)
    parsed = [ViewId.parse(v) for v in views]
    if features.shape[0] != len(ids) or len(ids) != len(parsed):
        raise ValidationError("features, ids and views must align")
    if not torch.allclose(
        features.norm(dim=-1), torch.ones_like(features[:, 0]), atol=1e-5
    ):
        raise ValidationError("consistency loss expects normalized features")
    sims = features @ features.T / temperature
    total = features.new_zeros(())
    present = sorted(set(parsed))
    for v1 in present:
        for v2 in present:
            if v1 == v2:
                continue
            terms = [
                -F.logsigmoid(sims[i, j])
                for i in range(len(ids))
                for j in range(len(ids))
                if parsed[i] == v1 and parsed[j] == v2 and ids[i] == ids[j]
            ]
            if terms:
                total = total + torch.stack(terms).mean()
    return total


class AnchorProjector(nn.Module):
    """Projector forming a fused per-identity anchor from view features.

    Residual with a zero-init up-projection, so the anchor starts as the
    plain mean of the per-view features.
    """

    def __init__(self, d: int, rank: int | None = None, *,
                 gen: torch.Generator, dtype: torch.dtype = torch.float64):
        super().__init__()
        rank = rank if rank is not None else scaled_width(110, d)
        self.proj = LowRankAffine(d, d, rank, gen=gen, dtype=dtype, zero_init=True)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.proj(x)


def alignment_penalty(view_features: Tensor, anchor: Tensor) -> Tensor:
    """Sum of squared distances from the anchor to each view feature."""
    if view_features.shape[-1] != anchor.shape[-1]:
        raise ValidationError("anchor and view features disagree on width")
    return ((anchor - view_features) ** 2).sum()


def multiview_alignment_loss(
    features: Tensor,
    ids: Sequence,
    views: Sequence,
    projector: AnchorProjector,
) -> Tensor:
    """Anchor-alignment penalty averaged over the identities in the batch.

    Per identity: per-view mean features, a fused anchor from their mean
    through the projector, then the summed squared anchor-to-view distances.
    """
    ids = list(ids)
    parsed = [ViewId.parse(v) for v in views]
    total = features.new_zeros(())
    unique_ids = sorted(set(ids))
    for pid in unique_ids:
        rows = [i for i, x in enumerate(ids) if x == pid]
        id_views = sorted({parsed[i] for i in rows})
        view_feats = torch.stack([
            features[[i for i in rows if parsed[i] == v]].mean(dim=0)
            for v in id_views
        ])
        anchor = projector(view_feats.mean(dim=0))
        total = total + alignment_penalty(view_feats, anchor)
    return total / len(unique_ids)


def batch_hard_triplet_loss(
    features: Tensor, ids: Sequence, margin: float = 0.3
) -> Tensor:
    """Batch-hard triplet: per anchor, hardest positive minus hardest
    negative Euclidean distance, hinged at the margin.  Anchors without a
    positive (single-clip identity) or without a negative are skipped.
    """
    ids = list(ids)
    n = features.shape[0]
    if n != len(ids):
        raise ValidationError("features and ids must align")
    dist = torch.cdist(features, features)
    losses = []
    for a in range(n):
        pos = [j for j in range(n) if j != a and ids[j] == ids[a]]
        neg = [j for j in range(n) if ids[j] != ids[a]]
        if not pos or not neg:
            continue
        hardest_pos = dist[a, pos].max()
        hardest_neg = dist[a, neg].min()
        losses.append(F.relu(hardest_pos - hardest_neg + margin))
    if not losses:
        return features.new_zeros(())
    return torch.stack(losses).mean()


def cross_entropy_loss(logits: Tensor, ids: Tensor) -> Tensor:
    """Softmax cross-entropy over identity logits."""
    ids = torch.as_tensor(ids, dtype=torch.long)
    if int(ids.max()) >= logits.shape[-1] or int(ids.min()) < 0:
        raise IndexError(
            f"identity index out of range for {logits.shape[-1]} classes"
        )
    return F.cross_entropy(logits, ids)


def center_loss(features: Tensor, ids: Sequence, centers: Tensor) -> Tensor:
    """Mean squared distance between features and their identity centers."""
    idx = torch.as_tensor(list(ids), dtype=torch.long)
    return ((features - centers[idx]) ** 2).sum(dim=-1).mean()


def v2m_contrastive_loss(
    descriptors: Tensor, contexts: Tensor, temperature: float = 0.07
) -> Tensor:
    """Symmetric clip-to-memory contrastive loss.

    Each clip's positive is its own retrieved memory context; the other
    clips' contexts in the batch act as negatives (and vice versa for the
    memory-to-clip direction).  Cosine similarities scaled by temperature.
    """
    if descriptors.shape != contexts.shape:
        raise ValidationError("descriptors and contexts must align")
    d_n = descriptors / descriptors.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    c_n = contexts / contexts.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    logits = d_n @ c_n.T / temperature
    target = torch.arange(descriptors.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def temporal_agreement_loss(stream_descriptors: Tensor) -> Tensor:
    """Mean pairwise squared distance between a clip's per-rate descriptors.

    ``stream_descriptors`` is ``[..., n_streams, d]``; the mean runs over the
    unordered stream pairs and any leading batch dimensions.
    """
    n = stream_descriptors.shape[-2]
    if n < 2:
        raise ValidationError("need at least two temporal streams")
    pairs = [
        ((stream_descriptors[..., i, :] - stream_descriptors[..., j, :]) ** 2).sum(dim=-1)
        for i in range(n)
        for j in range(i + 1, n)
    ]
    return torch.stack(pairs).mean()


def multiview_loss(cons: Tensor, align: Tensor, weights: LossWeights) -> Tensor:
    """Fold the consistency pair into one component: ``alpha*cons + beta*align``."""
    return weights.cons * cons + weights.align * align


STAGE1_KEYS = ("triplet", "ce")
STAGE2_KEYS = ("v2m", "triplet", "ce", "center", "temporal", "multiview")
STAGE2_BASIC_KEYS = ("triplet", "ce", "cons", "align")


def total_loss(
    components: Mapping[str, Tensor],
    weights: LossWeights,
    stage: int,
    *,
    include_center: bool = False,
    variant: str = "full",
) -> Tensor:
    """Weighted stage objective.

    Stage 1 reads only the triplet and cross-entropy components (plus center
    when ``include_center``); the consistency/temporal components are never
    accessed.  Stage 2 ``full`` combines all six weighted components with the
    multiview pair pre-folded; ``basic`` is the plain sum
    ``triplet + ce + alpha*cons + beta*align``.
    """
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage}")

    def get(key: str) -> Tensor:
        try:
            return components[key]
        except KeyError:
            raise ConfigError(f"missing loss component {key!r} for stage {stage}") from None

    if stage == 1:
        total = weights.triplet * get("triplet") + weights.ce * get("ce")
        if include_center:
            total = total + weights.center * get("center")
        return total
    if variant == "basic":
        return (
            get("triplet") + get("ce")
            + weights.cons * get("cons") + weights.align * get("align")
        )
    if variant != "full":
        raise ConfigError(f"unknown stage-2 variant {variant!r}")
    return (
        weights.v2m * get("v2m")
        + weights.triplet * get("triplet")
        + weights.ce * get("ce")
        + weights.center * get("center")
        + weights.temporal * get("temporal")
        + weights.multiview * get("multiview")
    )
