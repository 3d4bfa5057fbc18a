"""Batch-level cross-view context exchange diffused back into frame tokens.

Each clip is condensed to K summary tokens (attention pooling with learned
seed queries, refined by one self-attention pass).  Within a batch, refined
summaries are averaged into one prototype per view; every clip then
cross-attends only to the prototypes of views other than its own.  The
retrieved context is pooled and injected into all frame tokens through a
gated residual projector that is zero at init, so the whole block starts as
the identity and single-view batches (empty complementary set) are left
untouched.
"""

from __future__ import annotations

from collections.abc import Sequence

import torch
from torch import Tensor, nn

from .core import ViewId, check_tokens
from .errors import ValidationError
from .layers import LowRankAffine, scaled_width


class CrossViewAligner(nn.Module):
    def __init__(
        self,
        d: int,
        num_summaries: int = 4,
        attn_rank: int | None = None,
        *,
        gen: torch.Generator,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if num_summaries < 1:
            raise ValidationError("need at least one summary token")
        rank = attn_rank if attn_rank is not None else scaled_width(24, d)
        self.d = d
        self.num_summaries = num_summaries
        # Zero seeds make the initial summaries plain global token means.
        self.seeds = nn.Parameter(torch.zeros(num_summaries, d, dtype=dtype))
        self.q_proj = LowRankAffine(d, d, rank, gen=gen, dtype=dtype, bias=False)
        self.k_proj = LowRankAffine(d, d, rank, gen=gen, dtype=dtype, bias=False)
        self.v_proj = LowRankAffine(d, d, rank, gen=gen, dtype=dtype, bias=False)
        self.o_proj = LowRankAffine(d, d, rank, gen=gen, dtype=dtype, zero_init=True)
        self.cross_q = LowRankAffine(d, d, rank, gen=gen, dtype=dtype, bias=False)
        self.cross_k = LowRankAffine(d, d, rank, gen=gen, dtype=dtype, bias=False)
        self.diffuse_proj = LowRankAffine(d, d, rank, gen=gen, dtype=dtype,
                                          bias=False, zero_init=True)
        self.diffuse_gate = LowRankAffine(d, d, rank, gen=gen, dtype=dtype)
        self.scale = d ** -0.5

    def summarize(self, tokens: Tensor) -> Tensor:
        """Condense a clip's tokens to K refined summaries ``[..., K, d]``."""
        check_tokens(tokens)
        flat = tokens.reshape(*tokens.shape[:-3], -1, self.d)
        attn = torch.softmax(self.seeds @ flat.transpose(-1, -2) * self.scale, dim=-1)
        raw = attn @ flat
        q, k, v = self.q_proj(raw), self.k_proj(raw), self.v_proj(raw)
        self_attn = torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1)
        return raw + self.o_proj(self_attn @ v)

    def exchange(
        self, summaries: Tensor, views: Sequence["ViewId | int"]
    ) -> Tensor:
        """Per-clip cross-view context ``[B, K, d]`` from complementary views.

        Prototypes are per-view means of the refined summaries; a clip whose
        batch contains no other view receives a zero context.  Attention
        values are the raw prototypes, so a single complementary prototype is
        passed through exactly.
        """
        if summaries.dim() != 3:
            raise ValidationError("exchange expects batched summaries [B, K, d]")
        if len(views) == 0:
            raise ValidationError("batch must be non-empty")
        parsed = [ViewId.parse(v) for v in views]
        if len(parsed) != summaries.shape[0]:
            raise ValidationError("one view per clip required")
        prototypes = {
            v: summaries[[i for i, w in enumerate(parsed) if w == v]].mean(dim=0)
            for v in set(parsed)
        }
        contexts = []
        for b, v in enumerate(parsed):
            others = [prototypes[w] for w in sorted(prototypes) if w != v]
            if not others:
                contexts.append(torch.zeros_like(summaries[b]))
                continue
            keys_raw = torch.cat(others, dim=0)
            q = self.cross_q(summaries[b])
            k = self.cross_k(keys_raw)
            attn = torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1)
            contexts.append(attn @ keys_raw)
        return torch.stack(contexts)

    def diffuse(self, tokens: Tensor, context: Tensor) -> Tensor:
        """Gated residual injection of the pooled context into every token.

        The projector carries no bias and is zero at init, so a zero context
        (or a fresh module) leaves the tokens unchanged.
        """
        check_tokens(tokens)
        if context.shape[-1] != self.d:
            raise ValidationError("context and tokens disagree on channel width")
        pooled = context.mean(dim=-2)
        update = torch.sigmoid(self.diffuse_gate(pooled)) * self.diffuse_proj(pooled)
        return tokens + update.unsqueeze(-2).unsqueeze(-2)

    def forward(self, tokens: Tensor, views: Sequence["ViewId | int"]) -> Tensor:
        """Full summarize -> exchange -> diffuse pass over a batch of clips."""
        if tokens.dim() != 4:
            raise ValidationError("forward expects batched tokens [B, T, Np+1, d]")
        summaries = self.summarize(tokens)
        context = self.exchange(summaries, views)
        return self.diffuse(tokens, context)
