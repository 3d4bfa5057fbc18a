"""Short-range motion gating and multi-rate temporal streams.

Motion gating blends each frame's appearance tokens with motion tokens
encoded from frame differences, through a per-channel sigmoid gate shared
across the tokens of a frame.  The temporal pyramid summarizes the clip at
rates {1, 2, 4, 8}: coarser streams average frames over blocks and are
linearly interpolated back to T positions (block centers, edge-clamped).
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .core import check_tokens
from .errors import ConfigError, ValidationError
from .layers import LowRankAffine, scaled_width, seeded_linear

PYRAMID_SCALES = (1, 2, 4, 8)


def frame_diff(tokens: Tensor) -> Tensor:
    """Temporal differences along the frame axis; the first frame maps to 0."""
    check_tokens(tokens)
    diff = torch.zeros_like(tokens)
    if tokens.shape[-3] > 1:
        diff[..., 1:, :, :] = tokens[..., 1:, :, :] - tokens[..., :-1, :, :]
    return diff


class MotionGate(nn.Module):
    """Motion-aware blend ``g * appearance + (1 - g) * motion``.

    The motion encoder is a (factorized) affine map applied per token to the
    frame differences; the gate head maps the concatenated frame means of
    appearance and motion to per-channel logits.  At init the motion encoder
    is zero and the gate bias is large-positive, so the module passes
    appearance through nearly unchanged.
    """

    def __init__(
        self,
        d: int,
        motion_rank: int | None = None,
        gate_rank: int | None = None,
        gate_bias_init: float = 10.0,
        *,
        gen: torch.Generator,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        motion_rank = motion_rank if motion_rank is not None else scaled_width(100, d)
        gate_rank = gate_rank if gate_rank is not None else scaled_width(70, d)
        self.motion_enc = LowRankAffine(
            d, d, motion_rank, gen=gen, dtype=dtype, zero_init=True
        )
        self.gate_head = LowRankAffine(2 * d, d, gate_rank, gen=gen, dtype=dtype)
        with torch.no_grad():
            self.gate_head.up.bias.fill_(gate_bias_init)

    def forward(self, tokens: Tensor) -> Tensor:
        check_tokens(tokens)
        motion = self.motion_enc(frame_diff(tokens))
        summary = torch.cat([tokens.mean(dim=-2), motion.mean(dim=-2)], dim=-1)
        g = torch.sigmoid(self.gate_head(summary)).unsqueeze(-2)
        return g * tokens + (1.0 - g) * motion


def _stream_matrix(t: int, scale: int, dtype: torch.dtype) -> Tensor:
    """Linear operator for one temporal stream: block-mean then interpolate.

    Frames are partitioned into ceil(t / scale) contiguous blocks; each block
    contributes its mean at the block-center position, and values at the T
    frame positions are recovered by linear interpolation with edge clamping.
    The whole stream is linear in the input, so it is a fixed [T, T] matrix.
    """
    n_blocks = -(-t // scale)
    pool = torch.zeros(n_blocks, t, dtype=dtype)
    centers = []
    for b in range(n_blocks):
        members = range(b * scale, min((b + 1) * scale, t))
        pool[b, list(members)] = 1.0 / len(members)
        centers.append(sum(members) / len(members))
    interp = torch.zeros(t, n_blocks, dtype=dtype)
    for pos in range(t):
        if pos <= centers[0]:
            interp[pos, 0] = 1.0
        elif pos >= centers[-1]:
            interp[pos, -1] = 1.0
        else:
            j = max(b for b in range(n_blocks) if centers[b] <= pos)
            lam = (pos - centers[j]) / (centers[j + 1] - centers[j])
            interp[pos, j] = 1.0 - lam
            interp[pos, j + 1] = lam
    return interp @ pool


_STREAM_CACHE: dict[tuple[int, int, torch.dtype], Tensor] = {}


def temporal_stream(seq: Tensor, scale: int) -> Tensor:
    """Resample a per-frame sequence ``[..., T, d]`` at one temporal rate."""
    if scale not in PYRAMID_SCALES:
        raise ConfigError(f"scale {scale} not in {PYRAMID_SCALES}")
    if not torch.isfinite(seq).all():
        raise ValidationError("sequence contains non-finite values")
    if scale == 1:
        return seq
    t = seq.shape[-2]
    key = (t, scale, seq.dtype)
    if key not in _STREAM_CACHE:
        _STREAM_CACHE[key] = _stream_matrix(t, scale, seq.dtype)
    return _STREAM_CACHE[key] @ seq


class TemporalPyramid(nn.Module):
    """Multi-rate temporal context over frame-mean descriptors.

    Per frame, the four projected streams are concatenated and fused by a
    small MLP whose final layer is zero at init; in the default
    ``residual-on-tokens`` mode the fused vector is added to every token of
    its frame, so the module starts as the identity.  ``concat-to-descriptor``
    mode leaves tokens untouched and instead exposes a per-clip temporal
    vector to be merged into the pooled descriptor.
    """

    def __init__(
        self,
        d: int,
        proj_rank: int | None = None,
        fusion_hidden: int | None = None,
        injection: str = "residual-on-tokens",
        *,
        gen: torch.Generator,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if injection not in ("residual-on-tokens", "concat-to-descriptor"):
            raise ConfigError(f"unknown injection mode {injection!r}")
        proj_rank = proj_rank if proj_rank is not None else scaled_width(30, d)
        fusion_hidden = fusion_hidden if fusion_hidden is not None else scaled_width(16, d)
        self.injection = injection
        self.d = d
        self.projections = nn.ModuleList(
            LowRankAffine(d, d, proj_rank, gen=gen, dtype=dtype, zero_init=True)
            for _ in PYRAMID_SCALES
        )
        self.fuse_in = seeded_linear(len(PYRAMID_SCALES) * d, fusion_hidden, gen=gen, dtype=dtype)
        self.fuse_out = seeded_linear(fusion_hidden, d, gen=gen, dtype=dtype, zero=True)
        if injection == "concat-to-descriptor":
            merge = nn.Linear(2 * d, d, bias=True, dtype=dtype)
            with torch.no_grad():
                merge.weight.zero_()
                merge.weight[:, :d] = torch.eye(d, dtype=dtype)
                merge.bias.zero_()
            self.descriptor_merge = merge

    def forward(self, tokens: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (output tokens, per-clip stream descriptors ``[..., 4, d]``,
        per-clip fused temporal vector ``[..., d]``)."""
        check_tokens(tokens)
        per_frame = tokens.mean(dim=-2)  # [..., T, d]
        streams = [temporal_stream(per_frame, s) for s in PYRAMID_SCALES]
        projected = [u + proj(u) for proj, u in zip(self.projections, streams)]
        stream_descs = torch.stack([p.mean(dim=-2) for p in projected], dim=-2)
        fused = self.fuse_out(torch.tanh(self.fuse_in(torch.cat(projected, dim=-1))))
        clip_vec = fused.mean(dim=-2)
        if self.injection == "residual-on-tokens":
            return tokens + fused.unsqueeze(-2), stream_descs, clip_vec
        return tokens, stream_descs, clip_vec

    def merge_descriptor(self, pooled: Tensor, clip_vec: Tensor) -> Tensor:
        """Concat-mode merge of the temporal vector into the pooled descriptor."""
        if self.injection != "concat-to-descriptor":
            raise ConfigError("merge_descriptor only applies in concat-to-descriptor mode")
        return self.descriptor_merge(torch.cat([pooled, clip_vec], dim=-1))
