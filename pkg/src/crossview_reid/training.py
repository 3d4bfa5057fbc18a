"""Two-stage training: frozen-encoder adapter training, then integration
with selective unfreezing, per-group learning rates, and gradient clipping.

Stage 1 first populates the identity memory bank by frozen-encoder
inference over the training manifest, then optimizes the view/scale/memory/
motion/alignment adapters plus the classifier with triplet + cross-entropy.
Stage 2 resumes from a stage-1 checkpoint, additionally trains the temporal
pyramid and the consistency head (and any unfrozen encoder blocks), and
optimizes the full weighted objective.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .data import FrameStore, Manifest, epoch_batches
from .errors import ConfigError, PreconditionError, TrainingError, ValidationError
from .model import ModelConfig, ReIDModel
from .objectives import (
    LossWeights,
    batch_hard_triplet_loss,
    center_loss,
    cross_entropy_loss,
    cross_view_consistency_loss,
    multiview_alignment_loss,
    multiview_loss,
    temporal_agreement_loss,
    total_loss,
    v2m_contrastive_loss,
)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

ADAPTER_GROUPS = (
    "view_normalizer", "scale_harmonizer", "memory_gate",
    "motion_gate", "cross_view_aligner",
)
STAGE2_GROUPS = ("temporal_pyramid", "anchor_projector")


@dataclass
class StageConfig:
    stage: int = 1
    epochs: int = 150
    batch_size: int = 64
    k_clips: int = 4
    base_lr: float = 1e-4
    warmup_epochs: int = 10
    schedule: str = "cosine"
    milestones: tuple = (40, 70, 90)
    gamma: float = 0.1
    clip_max_norm: float = 1.0
    weight_decay: float = 5e-4
    lr_multipliers: dict = field(default_factory=dict)
    include_center: bool = False
    require_mixed_views: bool = True
    variant: str = "full"
    center_momentum: float = 0.2
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ConfigError("stage must be 1 or 2")
        if self.epochs <= 0:
            raise ConfigError("epochs must be positive")
        if self.schedule not in ("cosine", "multistep"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        self.milestones = tuple(self.milestones)
        if self.schedule == "multistep" and self.milestones:
            if list(self.milestones) != sorted(set(self.milestones)):
                raise ConfigError("milestones must be strictly increasing")
            if self.milestones[-1] >= self.epochs:
                raise ConfigError("milestones must lie before the last epoch")
        if any(m <= 0 for m in self.lr_multipliers.values()):
            raise ConfigError("lr multipliers must be positive")
        if self.batch_size % self.k_clips:
            raise ConfigError("batch_size must be a multiple of k_clips")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("warmup_epochs must lie within the epoch budget")

    @property
    def p_ids(self) -> int:
        return self.batch_size // self.k_clips

    @classmethod
    def stage1(cls, **overrides) -> "StageConfig":
        base = dict(stage=1, epochs=150, batch_size=64, base_lr=1e-4,
                    warmup_epochs=10, schedule="cosine")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def stage2(cls, **overrides) -> "StageConfig":
        base = dict(
            stage=2, epochs=100, batch_size=32, base_lr=5e-6,
            warmup_epochs=0, schedule="multistep", milestones=(40, 70, 90),
            gamma=0.1,
            lr_multipliers={
                "temporal_pyramid": 0.5, "anchor_projector": 2.0, "classifier": 10.0,
            },
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class ParameterGroup:
    name: str
    members: list
    lr_multiplier: float = 1.0
    trainable: bool = True

    def size(self) -> int:
        return sum(p.numel() for p in self.members)


def unfrozen_block_indices(n_blocks: int) -> list[int]:
    """1-indexed encoder blocks unfrozen in stage 2: the top ceil(5n/12).

    For a 12-block encoder this is exactly blocks 8 through 12; smaller
    encoders unfreeze proportionally (logged as a fallback).
    """
    if n_blocks <= 0:
        return []
    top = math.ceil(5 * n_blocks / 12)
    if n_blocks < 12:
        logger.warning(
            "encoder has %d < 12 blocks; unfreezing the top %d", n_blocks, top
        )
    return list(range(n_blocks - top + 1, n_blocks + 1))


def select_trainable(model: ReIDModel, stage: int,
                     lr_multipliers: Optional[dict] = None) -> list[ParameterGroup]:
    """Partition every model parameter into named groups with train flags.

    Stage 1: the five adapter groups plus the classifier train; the encoder
    is completely frozen.  Stage 2 additionally trains the temporal pyramid,
    the consistency head, and the top encoder blocks.
    """
    if stage not in (1, 2):
        raise ConfigError("stage must be 1 or 2")
    multipliers = lr_multipliers or {}
    trainable_names = set(ADAPTER_GROUPS) | {"classifier"}
    if stage == 2:
        trainable_names |= set(STAGE2_GROUPS)
    groups = []
    for name, module in model.parameter_group_modules().items():
        groups.append(ParameterGroup(
            name=name,
            members=list(module.parameters()),
            lr_multiplier=float(multipliers.get(name, 1.0)),
            trainable=name in trainable_names,
        ))
    blocks = list(getattr(model.encoder, "blocks", []))
    block_params = []
    unfrozen = set(unfrozen_block_indices(len(blocks))) if stage == 2 else set()
    frozen_members, unfrozen_members = [], []
    for i, block in enumerate(blocks, start=1):
        params = list(block.parameters())
        block_params.extend(params)
        (unfrozen_members if i in unfrozen else frozen_members).extend(params)
    groups.append(ParameterGroup("encoder_frozen_blocks", frozen_members, 1.0, False))
    groups.append(ParameterGroup(
        "encoder_unfrozen_blocks", unfrozen_members,
        float(multipliers.get("encoder_unfrozen_blocks", 1.0)), True,
    ))
    block_param_ids = {id(p) for p in block_params}
    grouped_ids = {id(p) for g in groups for p in g.members}
    base = [p for p in model.encoder.parameters()
            if id(p) not in block_param_ids and id(p) not in grouped_ids]
    groups.append(ParameterGroup("encoder_base", base, 1.0, False))

    total = sum(1 for _ in model.parameters())
    covered = sum(len(g.members) for g in groups)
    if total != covered:
        raise ValidationError(
            f"parameter partition mismatch: {covered} grouped, {total} present"
        )
    return groups


def lr_at(epoch: int, group: ParameterGroup, cfg: StageConfig) -> float:
    """Learning rate for a group at an epoch.

    Linear warm-up from zero over ``warmup_epochs``; afterwards either a
    cosine anneal to zero at the final epoch or multi-step decay by
    ``gamma`` at each passed milestone.  The group multiplier scales the
    result.
    """
    if not 0 <= epoch < cfg.epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        base = cfg.base_lr * epoch / cfg.warmup_epochs
    elif cfg.schedule == "cosine":
        span = max(1, cfg.epochs - cfg.warmup_epochs)
        progress = (epoch - cfg.warmup_epochs) / span
        base = cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    else:
        passed = sum(1 for m in cfg.milestones if m <= epoch)
        base = cfg.base_lr * cfg.gamma ** passed
    return base * group.lr_multiplier


def clip_gradients(grads: Sequence[Tensor], max_norm: float) -> tuple[list[Tensor], float]:
    """Rescale gradients in place so their global L2 norm is at most
    ``max_norm``; returns (gradients, pre-clip norm).  Non-finite gradients
    abort training."""
    total = 0.0
    for g in grads:
        if not torch.isfinite(g).all():
            raise TrainingError("non-finite gradient encountered")
        total += float((g.double() ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        with torch.no_grad():
            for g in grads:
                g.mul_(scale)
    return list(grads), norm


class CenterStore:
    """EMA-maintained identity centers (first write copies the feature)."""

    def __init__(self, num_ids: int, d: int, momentum: float = 0.2,
                 dtype: torch.dtype = torch.float64):
        self.centers = torch.zeros(num_ids, d, dtype=dtype)
        self.written = torch.zeros(num_ids, dtype=torch.bool)
        self.momentum = momentum

    @torch.no_grad()
    def update(self, ids: Sequence[int], features: Tensor) -> None:
        feats = features.detach().to(self.centers.dtype)
        for pid in sorted(set(int(i) for i in ids)):
            rows = [b for b, i in enumerate(ids) if int(i) == pid]
            mean = feats[rows].mean(dim=0)
            if self.written[pid]:
                self.centers[pid] = (
                    (1 - self.momentum) * self.centers[pid] + self.momentum * mean
                )
            else:
                self.centers[pid] = mean
                self.written[pid] = True

    def state_dict(self) -> dict:
        return {"centers": self.centers, "written": self.written,
                "momentum": self.momentum}

    def load_state_dict(self, state: dict) -> None:
        self.centers = state["centers"]
        self.written = state["written"]
        self.momentum = state["momentum"]


# ---- checkpoints -----------------------------------------------------------


def save_checkpoint(
    path: Path | str,
    model: ReIDModel,
    centers: CenterStore,
    stage_cfg: StageConfig,
    weights: LossWeights,
    epoch: int,
    optimizer_state: Optional[dict] = None,
    id_to_index: Optional[dict] = None,
    completed: bool = True,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "stage": stage_cfg.stage,
        "epoch": epoch,
        "completed": completed,
        "model_config": asdict(model.cfg),
        "model_state": model.state_dict(),
        "centers_state": centers.state_dict(),
        "stage_config": asdict(stage_cfg),
        "loss_weights": asdict(weights),
        "optimizer_state": optimizer_state,
        "id_to_index": id_to_index or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: Path | str) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(
            f"unsupported checkpoint version {payload.get('version')}"
        )
    return payload


def model_from_checkpoint(payload: dict) -> ReIDModel:
    model = ReIDModel(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["model_state"])
    return model


# ---- the training loop ------------------------------------------------------


@dataclass
class TrainingData:
    manifest: Manifest
    store: FrameStore
    t_frames: int = 8

    def __post_init__(self) -> None:
        self.id_to_index = {pid: i for i, pid in enumerate(self.manifest.person_ids())}


def _load_batch(data: TrainingData, batch: list[int], rng: np.random.Generator,
                dtype: torch.dtype, augment: bool = True):
    clips, views, ids = [], [], []
    for idx in batch:
        record = data.manifest.records[idx]
        clip = data.store.load_clip(record, data.t_frames).to(dtype)
        if augment and rng.random() < 0.5:
            clip = torch.flip(clip, dims=[2])  # horizontal flip, whole clip
        clips.append(clip)
        views.append(record.view)
        ids.append(data.id_to_index[record.person_id])
    return torch.stack(clips), views, ids


def populate_memory(model: ReIDModel, data: TrainingData) -> None:
    """Fill the memory bank with frozen-encoder descriptors of every
    training tracklet (runs before any adapter optimization)."""
    for record in data.manifest.records:
        clip = data.store.load_clip(record, data.t_frames)
        f = model.encode_pooled(clip)[0]
        model.memory.write_initial(data.id_to_index[record.person_id], record.view, f)


def _batch_components(model, out, views, ids, centers, weights, cfg):
    ids_t = torch.as_tensor(ids, dtype=torch.long)
    components = {
        "triplet": batch_hard_triplet_loss(out.descriptor, ids, weights.margin),
        "ce": cross_entropy_loss(out.logits, ids_t),
    }
    if cfg.stage == 2 or cfg.include_center:
        components["center"] = center_loss(
            out.descriptor, ids, centers.centers.detach()
        )
    if cfg.stage == 2:
        components["v2m"] = v2m_contrastive_loss(
            out.memory_query, out.memory_context, weights.temperature
        )
        components["temporal"] = temporal_agreement_loss(out.stream_descriptors)
        normalized = out.descriptor / out.descriptor.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        cons = cross_view_consistency_loss(
            normalized, ids, views, weights.temperature
        )
        align = multiview_alignment_loss(
            normalized, ids, views, model.anchor_projector
        )
        components["cons"] = cons
        components["align"] = align
        components["multiview"] = multiview_loss(cons, align, weights)
    return components


def run_stage(
    model: ReIDModel,
    data: TrainingData,
    cfg: StageConfig,
    weights: Optional[LossWeights] = None,
    out_dir: Path | str = "runs",
    from_stage1: Optional[Path | str] = None,
    resume_from: Optional[Path | str] = None,
) -> tuple[Path, list[dict]]:
    """Train one stage; returns (final checkpoint path, epoch history).

    Stage 2 refuses to run without a completed stage-1 checkpoint, whose
    model/bank/centers state seeds the run.  Deterministic under a fixed
    seed in single-process mode.
    """
    weights = weights or LossWeights()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    centers = CenterStore(
        model.cfg.num_ids, model.cfg.d, cfg.center_momentum, model.cfg.torch_dtype()
    )

    start_epoch = 0
    if cfg.stage == 2:
        if from_stage1 is None:
            raise PreconditionError("stage 2 requires a stage-1 checkpoint")
        prior = load_checkpoint(from_stage1)
        if prior["stage"] != 1 or not prior.get("completed", False):
            raise PreconditionError(
                "stage 2 must start from a completed stage-1 checkpoint"
            )
        model.load_state_dict(prior["model_state"])
        centers.load_state_dict(prior["centers_state"])

    groups = select_trainable(model, cfg.stage, cfg.lr_multipliers)
    for group in groups:
        for p in group.members:
            p.requires_grad_(group.trainable)
    active = [g for g in groups if g.trainable and g.members]
    optimizer = torch.optim.AdamW(
        [{"params": g.members, "lr": cfg.base_lr, "name": g.name} for g in active],
        weight_decay=cfg.weight_decay,
    )

    if cfg.stage == 1 and resume_from is None:
        populate_memory(model, data)

    if resume_from is not None:
        prior = load_checkpoint(resume_from)
        if prior["stage"] != cfg.stage:
            raise PreconditionError("resume checkpoint belongs to a different stage")
        model.load_state_dict(prior["model_state"])
        centers.load_state_dict(prior["centers_state"])
        if prior.get("optimizer_state"):
            optimizer.load_state_dict(prior["optimizer_state"])
        start_epoch = prior["epoch"] + 1

    log_path = out_dir / f"stage{cfg.stage}_log.jsonl"
    history: list[dict] = []
    trainable_params = [p for g in active for p in g.members]
    with log_path.open("a", encoding="utf-8") as log_file:
        for epoch in range(start_epoch, cfg.epochs):
            lrs = {}
            for g, og in zip(active, optimizer.param_groups):
                og["lr"] = lr_at(epoch, g, cfg)
                lrs[g.name] = og["lr"]
            batches = epoch_batches(
                data.manifest, cfg.p_ids, cfg.k_clips,
                require_mixed_views=cfg.require_mixed_views,
                seed=cfg.seed + epoch,
            )
            aug_rng = np.random.default_rng([cfg.seed, cfg.stage, epoch])
            epoch_loss, comp_sums, grad_norms = 0.0, {}, []
            for step, batch in enumerate(batches):
                frames, views, ids = _load_batch(
                    data, batch, aug_rng, model.cfg.torch_dtype()
                )
                out = model(frames, views, ids, memory_mode="train")
                components = _batch_components(
                    model, out, views, ids, centers, weights, cfg
                )
                loss = total_loss(
                    components, weights, cfg.stage,
                    include_center=cfg.include_center, variant=cfg.variant,
                )
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} step {step}: "
                        + ", ".join(
                            f"{k}={float(v.detach()):.4g}" for k, v in components.items()
                        )
                    )
                optimizer.zero_grad()
                loss.backward()
                try:
                    _, norm = clip_gradients(
                        [p.grad for p in trainable_params if p.grad is not None],
                        cfg.clip_max_norm,
                    )
                except TrainingError as exc:
                    raise TrainingError(f"{exc} (epoch {epoch}, step {step})") from None
                optimizer.step()
                with torch.no_grad():
                    for b, idx in enumerate(ids):
                        model.memory.update(
                            idx, views[b], out.memory_query[b].detach(),
                            out.memory_slots[b],
                        )
                    centers.update(ids, out.descriptor)
                grad_norms.append(norm)
                epoch_loss += float(loss.detach())
                for k, v in components.items():
                    comp_sums[k] = comp_sums.get(k, 0.0) + float(v.detach())
            record = {
                "stage": cfg.stage,
                "epoch": epoch,
                "loss": epoch_loss / max(1, len(batches)),
                "components": {k: v / max(1, len(batches)) for k, v in comp_sums.items()},
                "lrs": lrs,
                "grad_norm": sum(grad_norms) / max(1, len(grad_norms)),
                "time": time.time(),
            }
            history.append(record)
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()
            logger.info("stage %d epoch %d loss %.6f", cfg.stage, epoch, record["loss"])
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(
                    out_dir / f"stage{cfg.stage}_epoch{epoch:04d}.pt",
                    model, centers, cfg, weights, epoch,
                    optimizer_state=optimizer.state_dict(),
                    id_to_index=data.id_to_index, completed=False,
                )
    final = save_checkpoint(
        out_dir / f"stage{cfg.stage}_final.pt", model, centers, cfg, weights,
        cfg.epochs - 1, optimizer_state=optimizer.state_dict(),
        id_to_index=data.id_to_index, completed=True,
    )
    return final, history
