"""View-aware identity memory: attention retrieval, gated fusion, EMA updates.

The bank stores ``S`` prototype descriptors per (identity, view) pair.
During training a clip descriptor attends to its ground-truth slice and the
most-attended prototype is EMA-updated.  At inference retrieval is
class-agnostic: prototypes are selected across the whole bank by feature
similarity alone — the inference path never sees identity or view labels
of query clips, which is enforced by its signature.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .core import NUM_VIEWS, ViewId
from .errors import PreconditionError, ValidationError
from .layers import seeded_linear


def attend_prototypes(
    f: Tensor, prototypes: Tensor, temperature: float
) -> tuple[Tensor, Tensor, int]:
    """Softmax attention of descriptor ``f`` over a prototype set ``[S, d]``.

    Returns (context, attention weights, index of the most-attended slot).
    """
    if prototypes.dim() != 2 or prototypes.shape[0] < 1:
        raise PreconditionError("prototype set must be non-empty [S, d]")
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    scores = prototypes @ f / temperature
    weights = torch.softmax(scores, dim=0)
    context = weights @ prototypes
    return context, weights, int(torch.argmax(scores).item())


class IdentityMemoryBank(nn.Module):
    """EMA prototype store indexed by (identity, view, slot).

    ``init_mode="first-write"`` keeps slots cold (all-zero) until their first
    assignment, which copies the descriptor directly; later writes are convex
    EMA steps, so prototype norms never exceed the largest written descriptor.
    """

    def __init__(
        self,
        num_ids: int,
        d: int,
        slots: int = 3,
        momentum: float = 0.2,
        temperature: float | None = None,
        init_mode: str = "first-write",
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if slots < 1:
            raise ValidationError("slot count must be >= 1")
        if not 0.0 < momentum < 1.0:
            raise ValidationError("EMA momentum must lie in (0, 1)")
        if init_mode not in ("zeros", "first-write"):
            raise ValidationError(f"unknown init_mode {init_mode!r}")
        self.num_ids = num_ids
        self.d = d
        self.slots = slots
        self.momentum = momentum
        self.temperature = temperature if temperature is not None else math.sqrt(d)
        self.init_mode = init_mode
        self.register_buffer(
            "prototypes", torch.zeros(num_ids, NUM_VIEWS, slots, d, dtype=dtype)
        )
        self.register_buffer(
            "written", torch.zeros(num_ids, NUM_VIEWS, slots, dtype=torch.bool)
        )

    def _check_index(self, id_index: int, view: ViewId) -> None:
        if not 0 <= id_index < self.num_ids:
            raise IndexError(f"identity index {id_index} out of range [0, {self.num_ids})")
        ViewId(view)

    def retrieve(self, f: Tensor, id_index: int, view: ViewId) -> tuple[Tensor, int]:
        """Attend over the (identity, view) slice; returns (context, argmax slot)."""
        self._check_index(id_index, view)
        context, _, slot = attend_prototypes(
            f, self.prototypes[id_index, view], self.temperature
        )
        return context, slot

    @torch.no_grad()
    def update(self, id_index: int, view: ViewId, f: Tensor, slot: int) -> None:
        """EMA-update exactly one slot; every other slot stays bitwise intact."""
        self._check_index(id_index, view)
        if not 0 <= slot < self.slots:
            raise IndexError(f"slot {slot} out of range [0, {self.slots})")
        if not torch.isfinite(f).all():
            raise ValidationError("descriptor contains non-finite values")
        f = f.detach().to(self.prototypes.dtype)
        if self.init_mode == "first-write" and not bool(self.written[id_index, view, slot]):
            self.prototypes[id_index, view, slot] = f
        else:
            eta = self.momentum
            self.prototypes[id_index, view, slot] = (
                (1.0 - eta) * self.prototypes[id_index, view, slot] + eta * f
            )
        self.written[id_index, view, slot] = True

    @torch.no_grad()
    def write_initial(self, id_index: int, view: ViewId, f: Tensor) -> None:
        """Population pass: fill cold slots first, then EMA the attended slot."""
        self._check_index(id_index, view)
        cold = (~self.written[id_index, view]).nonzero()
        if len(cold) > 0:
            slot = int(cold[0].item())
        else:
            _, slot = self.retrieve(f.detach(), id_index, view)
        self.update(id_index, view, f, slot)

    def written_prototypes(self) -> Tensor:
        """All written prototypes flattened to ``[M, d]`` (training-set only)."""
        return self.prototypes[self.written]

    def retrieve_inference(self, f: Tensor, k: int | None = 5) -> Tensor:
        """Class-agnostic retrieval: top-k by cosine similarity, then the same
        softmax attention as the training path.  ``k=None`` attends over the
        full bank.  Takes only (descriptor, k) — no labels, by design."""
        protos = self.written_prototypes()
        if protos.shape[0] == 0:
            raise PreconditionError("memory bank is empty; populate it from training data")
        if k is not None and k < 1:
            raise ValidationError("k must be >= 1")
        if k is not None and k < protos.shape[0]:
            sims = (protos / protos.norm(dim=1, keepdim=True).clamp_min(1e-12)) @ (
                f / f.norm().clamp_min(1e-12)
            )
            top = torch.topk(sims, k).indices
            protos = protos[top]
        context, _, _ = attend_prototypes(f, protos, self.temperature)
        return context


class FusionGate(nn.Module):
    """Scalar-gated blend of a clip descriptor with its memory context.

    ``g = sigmoid(W [f; c])`` and ``fused = g * f + (1 - g) * c``; the gate
    weight starts at zero, i.e. an even blend.
    """

    def __init__(self, d: int, *, gen: torch.Generator, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.lin = seeded_linear(2 * d, 1, gen=gen, dtype=dtype, zero=True)

    def gate(self, f: Tensor, c: Tensor) -> Tensor:
        return torch.sigmoid(self.lin(torch.cat([f, c], dim=-1)))

    def forward(self, f: Tensor, c: Tensor) -> Tensor:
        if f.shape != c.shape:
            raise ValidationError(
                f"descriptor/context shapes differ: {tuple(f.shape)} vs {tuple(c.shape)}"
            )
        g = self.gate(f, c)
        return g * f + (1.0 - g) * c
