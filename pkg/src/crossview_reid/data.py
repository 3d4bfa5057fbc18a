"""Tracklet manifests, frame sampling, identity-balanced batches, and a
synthetic cross-view dataset for desk-scale experiments.

Manifest file format (JSON lines, append-friendly and diff-friendly):

  line 1   header object
             kind        always "manifest"
             version     integer format version (currently 1)
             split       "train" | "query" | "gallery"
             direction   "a2g" | "g2a" (evaluation pairing metadata)
  line 2+  one object per tracklet record
             tracklet_id unique string key
             person_id   identity label (shared across views)
             view        "aerial" | "ground" | "wearable"
             altitude_m  integer meters, present iff view is aerial
             frames      ordered list of frame references

Synthetic frame payloads are stored as one ``.npy`` array per tracklet
(``[L, H, W, 3]`` float32 in [0, 1], file named after the tracklet id);
frame references take the form ``"<file>.npy:<index>"``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
from scipy import ndimage

from .core import ViewId
from .errors import ConfigError, ValidationError

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SPLITS = ("train", "query", "gallery")
DIRECTIONS = ("a2g", "g2a")
ALTITUDES = (15, 30, 80, 120)


@dataclass
class TrackletRecord:
    tracklet_id: str
    person_id: str
    view: ViewId
    altitude_m: Optional[int]
    frames: list[str]

    def __post_init__(self) -> None:
        self.view = ViewId.parse(self.view)
        if not self.frames:
            raise ValidationError(f"tracklet {self.tracklet_id} has no frames")
        if (self.view == ViewId.AERIAL) != (self.altitude_m is not None):
            raise ValidationError(
                f"tracklet {self.tracklet_id}: altitude must be present iff aerial"
            )

    def to_json(self) -> dict:
        return {
            "tracklet_id": self.tracklet_id,
            "person_id": self.person_id,
            "view": self.view.label,
            "altitude_m": self.altitude_m,
            "frames": self.frames,
        }


@dataclass
class Manifest:
    records: list[TrackletRecord]
    split: str = "train"
    direction: str = "a2g"

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}; use one of {SPLITS}")
        if self.direction not in DIRECTIONS:
            raise ValidationError(
                f"unknown direction {self.direction!r}; use one of {DIRECTIONS}"
            )
        seen = set()
        for r in self.records:
            if r.tracklet_id in seen:
                raise ValidationError(f"duplicate tracklet id {r.tracklet_id!r}")
            seen.add(r.tracklet_id)

    def person_ids(self) -> list[str]:
        return sorted({r.person_id for r in self.records})

    def by_person(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for i, r in enumerate(self.records):
            out.setdefault(r.person_id, []).append(i)
        return out


def write_manifest(manifest: Manifest, path: Path | str) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {
            "kind": "manifest",
            "version": MANIFEST_VERSION,
            "split": manifest.split,
            "direction": manifest.direction,
        }
        fh.write(json.dumps(header) + "\n")
        for record in manifest.records:
            fh.write(json.dumps(record.to_json()) + "\n")


def read_manifest(path: Path | str) -> Manifest:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise ValidationError(f"empty manifest file {path}")
    header = json.loads(lines[0])
    if header.get("kind") != "manifest":
        raise ValidationError(f"{path} is not a manifest file")
    records = [TrackletRecord(**json.loads(line)) for line in lines[1:]]
    return Manifest(records, split=header["split"], direction=header["direction"])


def sample_frames(record: TrackletRecord, t: int = 8) -> list[str]:
    """Uniformly sample ``t`` frame references: index ``floor(i * L / t)``.

    Shorter tracklets duplicate frames through the same formula, so the
    index sequence is always monotone non-decreasing.
    """
    if not record.frames:
        raise ValidationError("cannot sample from an empty tracklet")
    length = len(record.frames)
    return [record.frames[(i * length) // t] for i in range(t)]


def epoch_batches(
    manifest: Manifest,
    p_ids: int,
    k_clips: int,
    *,
    require_mixed_views: bool = False,
    seed: int = 0,
) -> list[list[int]]:
    """Identity-balanced batches for one epoch: ``p_ids`` identities with
    ``k_clips`` tracklets each (sampled with replacement when an identity has
    fewer).  Every identity appears at least once per epoch; a short final
    group is topped up with extra identities.

    With ``require_mixed_views``, identities recorded from several views get
    clips spanning at least two of them; single-view identities are included
    with a warning.
    """
    groups = manifest.by_person()
    eligible = [pid for pid, idxs in groups.items() if len(idxs) >= k_clips]
    if len(groups) < p_ids:
        raise ConfigError(
            f"need at least {p_ids} identities, manifest has {len(groups)}"
        )
    if len(eligible) < p_ids:
        raise ConfigError(
            f"need at least {p_ids} identities with >= {k_clips} clips; "
            f"only {len(eligible)} qualify"
        )
    rng = np.random.default_rng(seed)
    pids = sorted(groups)
    order = [pids[i] for i in rng.permutation(len(pids))]
    batches = []
    for start in range(0, len(order), p_ids):
        chunk = order[start:start + p_ids]
        if len(chunk) < p_ids:
            extras = [pid for pid in order if pid not in chunk]
            take = rng.permutation(len(extras))[: p_ids - len(chunk)]
            chunk = chunk + [extras[i] for i in take]
        batch: list[int] = []
        for pid in chunk:
            idxs = groups[pid]
            views = {manifest.records[i].view for i in idxs}
            chosen: list[int] = []
            if require_mixed_views:
                if len(views) >= 2:
                    two = rng.permutation(len(sorted(views)))[:2]
                    vlist = sorted(views)
                    for v in (vlist[two[0]], vlist[two[1]]):
                        cand = [i for i in idxs if manifest.records[i].view == v]
                        chosen.append(int(cand[rng.integers(len(cand))]))
                else:
                    logger.warning(
                        "identity %s has a single view; cannot mix views", pid
                    )
            while len(chosen) < k_clips:
                chosen.append(int(idxs[rng.integers(len(idxs))]))
            batch.extend(chosen[:k_clips])
        batches.append(batch)
    return batches


def make_batch_sampler(
    manifest: Manifest,
    p_ids: int,
    k_clips: int,
    *,
    require_mixed_views: bool = False,
    seed: int = 0,
) -> Iterator[list[int]]:
    """Iterator over one epoch of identity-balanced batches."""
    return iter(epoch_batches(
        manifest, p_ids, k_clips,
        require_mixed_views=require_mixed_views, seed=seed,
    ))


# ---- synthetic dataset ----------------------------------------------------


@dataclass
class SynthSpec:
    num_ids: int = 10
    views: tuple = (ViewId.AERIAL, ViewId.GROUND)
    altitudes: tuple = ALTITUDES
    frames_per_tracklet: int = 12
    tracklets_per_view: int = 2
    image_h: int = 64
    image_w: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        self.views = tuple(ViewId.parse(v) for v in self.views)
        if self.num_ids < 1 or self.frames_per_tracklet < 1:
            raise ConfigError("num_ids and frames_per_tracklet must be positive")
        if not self.views:
            raise ConfigError("need at least one view")


def _identity_latent(spec: SynthSpec, id_index: int) -> dict:
    rng = np.random.default_rng([spec.seed, 7, id_index])
    return {
        # Saturated, well-separated base colors carry the identity signal.
        "color": 0.25 + 0.65 * rng.random(3),
        "freq": 1.0 + 3.0 * rng.random(2),
        "orient": rng.random() * math.pi,
        "cadence": 0.5 + 1.5 * rng.random(),
    }


def _render_base(spec: SynthSpec, latent: dict, phase: float) -> np.ndarray:
    h, w = spec.image_h, spec.image_w
    ys, xs = np.meshgrid(
        np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij"
    )
    u = xs * math.cos(latent["orient"]) + ys * math.sin(latent["orient"])
    v = -xs * math.sin(latent["orient"]) + ys * math.cos(latent["orient"])
    wave = np.sin(
        2 * math.pi * (latent["freq"][0] * u + latent["freq"][1] * v) + phase
    )
    img = latent["color"][None, None, :] * (0.55 + 0.4 * wave[..., None])
    return np.clip(img, 0.0, 1.0)


def _apply_view(
    img: np.ndarray, view: ViewId, altitude: Optional[int], jitter: tuple[int, int]
) -> np.ndarray:
    if view == ViewId.AERIAL:
        sigma = 0.5 + altitude / 40.0
        img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0))
        shift = min(0.3, altitude * 0.002)
        img = img.copy()
        img[..., 2] += shift * (1.0 - img[..., 2])
        img[..., 0] *= 1.0 - 0.5 * shift
    elif view == ViewId.WEARABLE:
        img = np.roll(img, jitter, axis=(0, 1))
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SynthSpec, out_dir: Path | str) -> Manifest:
    """Render the synthetic cross-view set and write per-tracklet payloads.

    Each identity owns a latent appearance (base color, grating frequency,
    orientation, gait-like cadence); frames advance an identity-specific
    phase so temporal structure also carries identity.  Aerial tracklets are
    blurred and color-shifted by altitude, wearable ones get crop jitter.
    Deterministic in the spec seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for idx in range(spec.num_ids):
        person_id = f"id{idx:04d}"
        latent = _identity_latent(spec, idx)
        for view in spec.views:
            for k in range(spec.tracklets_per_view):
                tracklet_id = f"{person_id}_{view.label}_{k}"
                trng = np.random.default_rng([spec.seed, 11, idx, int(view), k])
                phase0 = trng.random() * 2 * math.pi
                altitude = (
                    int(spec.altitudes[(idx * spec.tracklets_per_view + k) % len(spec.altitudes)])
                    if view == ViewId.AERIAL else None
                )
                frames = np.empty(
                    (spec.frames_per_tracklet, spec.image_h, spec.image_w, 3),
                    dtype=np.float32,
                )
                for t in range(spec.frames_per_tracklet):
                    phase = phase0 + latent["cadence"] * t
                    jitter = (
                        int(trng.integers(-spec.image_h // 8, spec.image_h // 8 + 1)),
                        int(trng.integers(-spec.image_w // 8, spec.image_w // 8 + 1)),
                    )
                    img = _render_base(spec, latent, phase)
                    frames[t] = _apply_view(img, view, altitude, jitter)
                fname = f"{tracklet_id}.npy"
                np.save(out_dir / fname, frames)
                records.append(TrackletRecord(
                    tracklet_id=tracklet_id,
                    person_id=person_id,
                    view=view,
                    altitude_m=altitude,
                    frames=[f"{fname}:{t}" for t in range(spec.frames_per_tracklet)],
                ))
    return Manifest(records, split="train")


class FrameStore:
    """Resolves ``"<file>.npy:<index>"`` frame references with a small cache."""

    def __init__(self, root: Path | str, dtype: torch.dtype = torch.float64):
        self.root = Path(root)
        self.dtype = dtype
        self._cache: dict[str, np.ndarray] = {}

    def _load_file(self, name: str) -> np.ndarray:
        if name not in self._cache:
            if len(self._cache) > 256:
                self._cache.clear()
            self._cache[name] = np.load(self.root / name)
        return self._cache[name]

    def frame(self, ref: str) -> np.ndarray:
        name, _, idx = ref.rpartition(":")
        return self._load_file(name)[int(idx)]

    def load_clip(self, record: TrackletRecord, t: int = 8) -> torch.Tensor:
        """Uniformly sampled clip tensor ``[t, H, W, 3]`` in the store dtype."""
        refs = sample_frames(record, t)
        stack = np.stack([self.frame(ref) for ref in refs])
        return torch.as_tensor(stack, dtype=self.dtype)
