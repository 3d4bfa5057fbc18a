"""Cross-view video person re-identification with lightweight adapters.

Seven residual adapter blocks specialize a frozen frame encoder for
aerial/ground/wearable matching: view-bias normalization, multi-scale
harmonization, an identity memory with gated fusion, motion gating,
a multi-rate temporal pyramid, batch-level cross-view alignment, and a
cross-view consistency loss head.  Training runs in two stages (frozen
encoder, then selective unfreezing); evaluation reports CMC/mAP per
direction and altitude with optional k-reciprocal re-ranking.
"""

from .align import CrossViewAligner
from .core import (
    EncoderSpec,
    ToyFrameEncoder,
    ViewId,
    clip_pool,
    encode_frames,
    normalize_descriptor,
)
from .data import (
    FrameStore,
    Manifest,
    SynthSpec,
    TrackletRecord,
    generate_synthetic,
    make_batch_sampler,
    read_manifest,
    sample_frames,
    write_manifest,
)
from .evaluation import (
    MetricsReport,
    cmc_map,
    compute_distances,
    evaluate,
    k_reciprocal_rerank,
    measure_throughput,
)
from .memory import FusionGate, IdentityMemoryBank, attend_prototypes
from .model import ModelConfig, ReIDModel
from .objectives import (
    AnchorProjector,
    LossWeights,
    alignment_penalty,
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
from .temporal import MotionGate, TemporalPyramid, frame_diff, temporal_stream
from .training import (
    ParameterGroup,
    StageConfig,
    TrainingData,
    clip_gradients,
    load_checkpoint,
    lr_at,
    run_stage,
    save_checkpoint,
    select_trainable,
)
from .view_scale import ScaleHarmonizer, ViewNormalizer

__version__ = "0.1.0"
