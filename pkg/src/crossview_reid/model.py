"""The full adapter chain over a frozen frame encoder.

Forward order: encode -> view normalization -> scale harmonization ->
identity-memory fusion -> motion gating -> temporal pyramid -> cross-view
alignment -> temporal-spatial pooling -> classifier.  Every adapter
preserves the ``[T, Np+1, d]`` token shape; a freshly constructed model is
an exact identity around the encoder except for the memory blend, which
starts as an even mix only once the bank holds prototypes.

The memory blend operates on the descriptor pooled mid-chain and re-enters
the token stream as a broadcast residual ``tokens += fused - pooled``;
because pooling is linear, the downstream pooled descriptor then carries
exactly the fused value.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import Tensor, nn

from .align import CrossViewAligner
from .core import EncoderSpec, ToyFrameEncoder, ViewId, clip_pool
from .errors import BudgetError, ConfigError, ValidationError
from .layers import count_parameters, seeded_linear
from .memory import FusionGate, IdentityMemoryBank
from .objectives import AnchorProjector
from .temporal import MotionGate, TemporalPyramid
from .view_scale import ScaleHarmonizer, ViewNormalizer

logger = logging.getLogger(__name__)

ADAPTER_BUDGET_TOTAL = 2_500_000
ADAPTER_BUDGET_AT_768 = {
    "view_normalizer": 220_000,
    "scale_harmonizer": 350_000,
    "motion_gate": 320_000,
    "cross_view_aligner": 320_000,
    "temporal_pyramid": 250_000,
    "anchor_projector": 170_000,
}


@dataclass
class ModelConfig:
    d: int = 768
    t_frames: int = 8
    image_h: int = 256
    image_w: int = 128
    patch_size: int = 16
    num_ids: int = 100
    memory_slots: int = 3
    memory_momentum: float = 0.2
    memory_temperature: Optional[float] = None
    inference_top_k: Optional[int] = 5
    num_summaries: int = 4
    activation: str = "silu"
    injection: str = "residual-on-tokens"
    view_norm_hidden: Optional[int] = None
    scale_hidden: Optional[int] = None
    motion_rank: Optional[int] = None
    gate_rank: Optional[int] = None
    attn_rank: Optional[int] = None
    pyramid_rank: Optional[int] = None
    fusion_hidden: Optional[int] = None
    anchor_rank: Optional[int] = None
    encoder_seed: int = 0
    seed: int = 0
    dtype: str = "float64"

    def torch_dtype(self) -> torch.dtype:
        try:
            return {"float64": torch.float64, "float32": torch.float32}[self.dtype]
        except KeyError:
            raise ConfigError(f"unsupported dtype {self.dtype!r}") from None

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(
            patch_size=self.patch_size, image_h=self.image_h,
            image_w=self.image_w, d=self.d, seed=self.encoder_seed,
        )


@dataclass
class ModelOutput:
    descriptor: Tensor          # [B, d] pooled clip descriptors
    logits: Tensor              # [B, num_ids]
    memory_query: Tensor        # [B, d] descriptors that queried the bank
    memory_context: Optional[Tensor]   # [B, d] or None when memory is off
    memory_slots: list          # argmax slot per clip (training mode only)
    stream_descriptors: Tensor  # [B, 4, d] per-rate temporal descriptors


class ReIDModel(nn.Module):
    def __init__(self, cfg: ModelConfig, encoder: Optional[nn.Module] = None):
        super().__init__()
        self.cfg = cfg
        dtype = cfg.torch_dtype()
        gen = torch.Generator().manual_seed(cfg.seed)
        self.encoder = encoder if encoder is not None else ToyFrameEncoder(
            cfg.encoder_spec(), dtype=dtype
        )
        d = cfg.d
        self.view_normalizer = ViewNormalizer(
            d, cfg.view_norm_hidden, cfg.activation, gen=gen, dtype=dtype
        )
        self.scale_harmonizer = ScaleHarmonizer(
            d, cfg.scale_hidden, cfg.activation, gen=gen, dtype=dtype
        )
        self.memory = IdentityMemoryBank(
            cfg.num_ids, d, slots=cfg.memory_slots, momentum=cfg.memory_momentum,
            temperature=cfg.memory_temperature, dtype=dtype,
        )
        self.fusion_gate = FusionGate(d, gen=gen, dtype=dtype)
        self.motion_gate = MotionGate(
            d, cfg.motion_rank, cfg.gate_rank, gen=gen, dtype=dtype
        )
        self.temporal_pyramid = TemporalPyramid(
            d, cfg.pyramid_rank, cfg.fusion_hidden, cfg.injection, gen=gen, dtype=dtype
        )
        self.cross_view_aligner = CrossViewAligner(
            d, cfg.num_summaries, cfg.attn_rank, gen=gen, dtype=dtype
        )
        self.anchor_projector = AnchorProjector(
            d, cfg.anchor_rank, gen=gen, dtype=dtype
        )
        self.classifier = seeded_linear(d, cfg.num_ids, gen=gen, dtype=dtype, std=0.01)
        self._check_budget()

    # ---- parameter accounting -------------------------------------------

    def adapter_parameter_counts(self) -> dict[str, int]:
        counts = {
            "view_normalizer": count_parameters(self.view_normalizer),
            "scale_harmonizer": count_parameters(self.scale_harmonizer),
            "memory_gate": count_parameters(self.fusion_gate),
            "motion_gate": count_parameters(self.motion_gate),
            "temporal_pyramid": count_parameters(self.temporal_pyramid),
            "cross_view_aligner": count_parameters(self.cross_view_aligner),
            "anchor_projector": count_parameters(self.anchor_projector),
        }
        counts["total"] = sum(counts.values())
        return counts

    def _check_budget(self) -> None:
        counts = self.adapter_parameter_counts()
        if self.cfg.d == 768:
            if counts["total"] > ADAPTER_BUDGET_TOTAL:
                raise BudgetError(
                    f"adapter parameters {counts['total']} exceed the "
                    f"{ADAPTER_BUDGET_TOTAL} budget at d=768"
                )
            for name, target in ADAPTER_BUDGET_AT_768.items():
                if not 0.7 * target <= counts[name] <= 1.3 * target:
                    raise BudgetError(
                        f"{name} has {counts[name]} parameters, outside +-30% "
                        f"of its {target} budget at d=768"
                    )
        logger.debug("adapter parameter counts: %s", counts)

    def parameter_group_modules(self) -> dict[str, nn.Module]:
        """Adapter and head modules keyed by their training-group name."""
        return {
            "view_normalizer": self.view_normalizer,
            "scale_harmonizer": self.scale_harmonizer,
            "memory_gate": self.fusion_gate,
            "motion_gate": self.motion_gate,
            "cross_view_aligner": self.cross_view_aligner,
            "temporal_pyramid": self.temporal_pyramid,
            "anchor_projector": self.anchor_projector,
            "classifier": self.classifier,
        }

    # ---- forward ----------------------------------------------------------

    def forward(
        self,
        frames: Tensor,
        views: Sequence,
        ids: Optional[Sequence[int]] = None,
        memory_mode: str = "train",
    ) -> ModelOutput:
        """Run the full chain on a batch of clips ``[B, T, H, W, 3]``.

        ``memory_mode``: "train" retrieves from the ground-truth slice (needs
        ``ids``), "topk" retrieves class-agnostically, "off" skips the blend.
        Contexts are detached: gradients reach the gate and the descriptors,
        never the bank.
        """
        if frames.dim() == 4:
            frames = frames.unsqueeze(0)
        if memory_mode not in ("train", "topk", "off"):
            raise ConfigError(f"unknown memory mode {memory_mode!r}")
        views = [ViewId.parse(v) for v in views]
        if len(views) != frames.shape[0]:
            raise ValidationError("one view per clip required")

        tokens = self.encoder(frames)
        tokens = self.view_normalizer(tokens, views)
        tokens = self.scale_harmonizer(tokens)

        query = clip_pool(tokens)
        context = None
        slots: list = []
        if memory_mode == "train":
            if ids is None:
                raise ValidationError("training-mode memory retrieval needs ids")
            ctx_rows = []
            for b in range(frames.shape[0]):
                c, slot = self.memory.retrieve(query[b], int(ids[b]), views[b])
                ctx_rows.append(c.detach())
                slots.append(slot)
            context = torch.stack(ctx_rows)
        elif memory_mode == "topk":
            context = torch.stack([
                self.memory.retrieve_inference(query[b], self.cfg.inference_top_k).detach()
                for b in range(frames.shape[0])
            ])
        if context is not None:
            fused = self.fusion_gate(query, context)
            tokens = tokens + (fused - query).unsqueeze(-2).unsqueeze(-2)

        tokens = self.motion_gate(tokens)
        tokens, stream_descs, clip_vec = self.temporal_pyramid(tokens)
        tokens = self.cross_view_aligner(tokens, views)

        descriptor = clip_pool(tokens)
        if self.temporal_pyramid.injection == "concat-to-descriptor":
            descriptor = self.temporal_pyramid.merge_descriptor(descriptor, clip_vec)
        logits = self.classifier(descriptor)
        return ModelOutput(
            descriptor=descriptor,
            logits=logits,
            memory_query=query,
            memory_context=context,
            memory_slots=slots,
            stream_descriptors=stream_descs,
        )

    @torch.no_grad()
    def encode_pooled(self, frames: Tensor) -> Tensor:
        """Frozen-encoder descriptor (encode + pool only): the population
        features written into the memory bank before adapter training."""
        if frames.dim() == 4:
            frames = frames.unsqueeze(0)
        return clip_pool(self.encoder(frames))
