"""Per-frame view-bias correction and multi-scale token harmonization.

Both adapters are residual and initialize to the exact identity map, so a
freshly built model reproduces the frozen backbone until training moves
the zero-initialized output layers.
"""

from __future__ import annotations

from collections.abc import Sequence

import torch
from torch import Tensor, nn

from .core import NUM_VIEWS, ViewId, check_tokens
from .errors import ValidationError
from .layers import ResidualMLP, scaled_width, seeded_linear

SCALE_LABELS = ("half", "native", "double")


class ViewNormalizer(nn.Module):
    """View-conditioned residual correction of frame tokens.

    Each view owns a broadcast offset (first-order bias) and a small MLP
    (higher-order residual): ``out = mlp_v(tokens + offset_v) + tokens``.
    The MLP's final layer is zero at init, so the module starts as identity.
    """

    def __init__(
        self,
        d: int,
        hidden: int | None = None,
        activation: str = "silu",
        *,
        gen: torch.Generator,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        hidden = hidden if hidden is not None else scaled_width(46, d)
        self.d = d
        offsets = torch.empty(NUM_VIEWS, d, dtype=dtype)
        with torch.no_grad():
            offsets.normal_(0.0, 0.02, generator=gen)
        self.offsets = nn.Parameter(offsets)
        self.mlps = nn.ModuleList(
            ResidualMLP(d, hidden, activation, gen=gen, dtype=dtype, residual=False)
            for _ in range(NUM_VIEWS)
        )

    def _one(self, tokens: Tensor, view: ViewId) -> Tensor:
        shifted = tokens + self.offsets[view]
        return self.mlps[view](shifted) + tokens

    def forward(self, tokens: Tensor, view: "ViewId | int | Sequence") -> Tensor:
        check_tokens(tokens)
        if tokens.dim() == 3:
            return self._one(tokens, ViewId.parse(view))
        if not isinstance(view, Sequence) and not torch.is_tensor(view):
            raise ValidationError("batched tokens need one view per clip")
        views = [ViewId.parse(v) for v in view]
        if len(views) != tokens.shape[0]:
            raise ValidationError(
                f"{len(views)} views for batch of {tokens.shape[0]} clips"
            )
        return torch.stack([self._one(tokens[b], v) for b, v in enumerate(views)])


class ScaleHarmonizer(nn.Module):
    """Content-adaptive blend of three parallel token-space scale streams.

    The scales are "virtual zooms": per-scale feed-forward blocks, never an
    image resample.  A softmax head over the frame's mean token weighs the
    three streams; the blocks are residual with zero-init output layers, so
    at init every stream is identity and the convex blend returns the input.
    """

    def __init__(
        self,
        d: int,
        hidden: int | None = None,
        activation: str = "silu",
        *,
        gen: torch.Generator,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        hidden = hidden if hidden is not None else scaled_width(75, d)
        self.d = d
        self.streams = nn.ModuleList(
            ResidualMLP(d, hidden, activation, gen=gen, dtype=dtype)
            for _ in SCALE_LABELS
        )
        self.weight_head = seeded_linear(d, len(SCALE_LABELS), gen=gen, dtype=dtype, zero=True)

    def scale_weights(self, frame_tokens: Tensor) -> Tensor:
        """Softmax scale weights from the mean token; shape ``[..., 3]``."""
        if not torch.isfinite(frame_tokens).all():
            raise ValidationError("frame tokens contain non-finite values")
        logits = self.weight_head(frame_tokens.mean(dim=-2))
        return torch.softmax(logits, dim=-1)

    def forward(self, tokens: Tensor) -> Tensor:
        check_tokens(tokens)
        alpha = self.scale_weights(tokens)  # [..., T, 3]
        out = torch.zeros_like(tokens)
        for s, stream in enumerate(self.streams):
            out = out + alpha[..., s, None, None] * stream(tokens)
        return out
