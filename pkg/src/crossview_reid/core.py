"""Domain types, the pluggable frame encoder, and shared pooling.

The frame encoder maps a clip of RGB frames to a token tensor of shape
``[T, Np + 1, d]`` where index 0 along the token axis is the class token
and the remaining ``Np`` tokens correspond to image patches in row-major
order.  Every adapter downstream preserves this shape.

The toy encoder included here is a fixed, seeded linear projection of
flattened patches plus a fixed positional encoding; it has no trainable
parameters so desk-scale tests never depend on pretrained weights.  Any
module exposing the same interface (``forward(frames) -> tokens``, a
``blocks`` list, and ``d``/``num_patches`` attributes) can be plugged in
as a real backbone.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import DegenerateInputError, ValidationError


class ViewId(enum.IntEnum):
    """Camera platform. Integer order is fixed for serialization."""

    AERIAL = 0
    GROUND = 1
    WEARABLE = 2

    @classmethod
    def parse(cls, value: "ViewId | int | str") -> "ViewId":
        if isinstance(value, ViewId):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                valid = ", ".join(v.name.lower() for v in cls)
                raise ValidationError(
                    f"unknown view {value!r}; valid views: {valid}"
                ) from None
        return cls(int(value))

    @property
    def label(self) -> str:
        return self.name.lower()


NUM_VIEWS = len(ViewId)


@dataclass(frozen=True)
class EncoderSpec:
    """Geometry and seeding of the frame encoder.

    ``image_h`` and ``image_w`` must be divisible by ``patch_size``;
    the patch-token count is ``Np = (image_h / patch) * (image_w / patch)``.
    """

    patch_size: int = 16
    image_h: int = 256
    image_w: int = 128
    d: int = 768
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ValidationError(
                f"image dims {self.image_h}x{self.image_w} not divisible by "
                f"patch size {self.patch_size}"
            )

    @property
    def num_patches(self) -> int:
        return (self.image_h // self.patch_size) * (self.image_w // self.patch_size)


def _check_frames(frames: Tensor, spec: EncoderSpec) -> None:
    if frames.dim() not in (4, 5) or frames.shape[-1] != 3:
        raise ValidationError(
            f"expected frames [T, H, W, 3] or [B, T, H, W, 3], got {tuple(frames.shape)}"
        )
    if frames.shape[-4] < 1:
        raise ValidationError("clip must contain at least one frame")
    if frames.shape[-3] != spec.image_h or frames.shape[-2] != spec.image_w:
        raise ValidationError(
            f"frame size {tuple(frames.shape[-3:-1])} does not match encoder "
            f"spec {(spec.image_h, spec.image_w)}"
        )
    if not torch.isfinite(frames).all():
        raise ValidationError("frames contain non-finite pixels")


class ToyFrameEncoder(nn.Module):
    """Deterministic stand-in for a pretrained vision transformer.

    Patch tokens are ``flatten(patch) @ proj + pos``; the class token is all
    zeros.  ``proj`` and ``pos`` are seeded buffers, never trainable, so the
    encoder is a pure function of (frames, spec).
    """

    def __init__(self, spec: EncoderSpec, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.spec = spec
        self.d = spec.d
        self.num_patches = spec.num_patches
        gen = torch.Generator().manual_seed(spec.seed)
        patch_dim = spec.patch_size * spec.patch_size * 3
        proj = torch.empty(patch_dim, spec.d, dtype=dtype)
        proj.normal_(0.0, patch_dim ** -0.5, generator=gen)
        pos = torch.empty(spec.num_patches, spec.d, dtype=dtype)
        pos.normal_(0.0, 0.02, generator=gen)
        self.register_buffer("proj", proj)
        self.register_buffer("pos", pos)

    @property
    def blocks(self) -> list[nn.Module]:
        """Transformer blocks eligible for selective unfreezing (none here)."""
        return []

    def forward(self, frames: Tensor) -> Tensor:
        _check_frames(frames, self.spec)
        frames = frames.to(self.proj.dtype)
        p = self.spec.patch_size
        *lead, H, W, _ = frames.shape
        patches = frames.reshape(*lead, H // p, p, W // p, p, 3)
        patches = patches.movedim(-4, -3).reshape(*lead, self.num_patches, p * p * 3)
        tokens = patches @ self.proj + self.pos
        cls = tokens.new_zeros(*lead, 1, self.d)
        return torch.cat([cls, tokens], dim=-2)


_ENCODER_CACHE: dict[tuple[EncoderSpec, torch.dtype], ToyFrameEncoder] = {}


def encode_frames(
    frames: Tensor, spec: EncoderSpec, dtype: torch.dtype = torch.float64
) -> Tensor:
    """Encode a clip (or batch of clips) with the toy encoder for ``spec``."""
    key = (spec, dtype)
    if key not in _ENCODER_CACHE:
        _ENCODER_CACHE[key] = ToyFrameEncoder(spec, dtype=dtype)
    return _ENCODER_CACHE[key](frames)


def check_tokens(tokens: Tensor) -> None:
    if tokens.dim() not in (3, 4):
        raise ValidationError(
            f"expected tokens [T, Np+1, d] or [B, T, Np+1, d], got {tuple(tokens.shape)}"
        )
    if not torch.isfinite(tokens).all():
        raise ValidationError("tokens contain non-finite values")


def clip_pool(tokens: Tensor) -> Tensor:
    """Temporal-spatial average: mean over all T*(Np+1) token vectors.

    The class token participates in the mean.  No normalization is applied.
    """
    check_tokens(tokens)
    return tokens.mean(dim=(-3, -2))


def normalize_descriptor(f: Tensor, eps: float = 0.0) -> Tensor:
    """Scale descriptor(s) to unit Euclidean norm, preserving direction."""
    norm = f.norm(dim=-1, keepdim=True)
    if (norm <= eps).any():
        raise DegenerateInputError("cannot normalize a zero descriptor")
    return f / norm


def is_normalized(f: Tensor, tol: float = 1e-6) -> bool:
    return bool((f.norm(dim=-1) - 1.0).abs().max() <= tol)
