"""diffavg: concept prototypes from diffusion models.

Jointly optimizes many noise latents so their bottleneck activations converge
to a shared mean along the denoising trajectory, yielding a single sharp
prototype image per concept.  Ships a desk-scale toy diffusion substrate,
mode discovery, distillation-style baselines and ablations, and evaluation
metrics; external large models plug in through the adapter interface.
"""

from ._version import __version__
from .adapter import (
    AdapterWeights,
    AffineDenoiser,
    ConditioningSpec,
    Denoiser,
    apply_conditioning,
    decode_image,
    encode_image,
    predict_noise,
    predict_with_activation,
)
from .averaging import (
    AverageConfig,
    AverageResult,
    LatentBatch,
    RunState,
    align_latent,
    decode_prototypes,
    init_latents,
    mean_activation,
    sample,
    trajectory_average,
)
from .baselines import (
    BaselineConfig,
    avg_codec_prototype,
    mode_guidance_run,
    precomputed_mean_run,
    replacement_run,
    run_baseline,
    sdedit_prototype,
    single_step_run,
)
from .errors import NumericFailure, TrainingFailure
from .metrics import (
    DistanceBackend,
    aggregate_report,
    consistency,
    cosine_backend,
    pixel_mse_backend,
    render_grid,
    representativeness,
)
from .modes import (
    ClusterAssignment,
    RefinementArtifact,
    cluster_samples,
    map_labels_to_latents,
    per_cluster_average,
    train_inversion_embedding,
    train_lowrank_adapter,
)
from .schedule import DiffusionSchedule, GuidanceSpec, build_schedule, cfg_combine

__all__ = [
    "AdapterWeights",
    "AffineDenoiser",
    "AverageConfig",
    "AverageResult",
    "BaselineConfig",
    "ClusterAssignment",
    "ConditioningSpec",
    "Denoiser",
    "DiffusionSchedule",
    "DistanceBackend",
    "GuidanceSpec",
    "LatentBatch",
    "NumericFailure",
    "RefinementArtifact",
    "RunState",
    "TrainingFailure",
    "__version__",
    "aggregate_report",
    "align_latent",
    "apply_conditioning",
    "avg_codec_prototype",
    "build_schedule",
    "cfg_combine",
    "cluster_samples",
    "consistency",
    "cosine_backend",
    "decode_image",
    "decode_prototypes",
    "encode_image",
    "init_latents",
    "map_labels_to_latents",
    "mean_activation",
    "mode_guidance_run",
    "per_cluster_average",
    "pixel_mse_backend",
    "precomputed_mean_run",
    "predict_noise",
    "predict_with_activation",
    "render_grid",
    "replacement_run",
    "representativeness",
    "run_baseline",
    "sample",
    "sdedit_prototype",
    "single_step_run",
    "train_inversion_embedding",
    "train_lowrank_adapter",
    "trajectory_average",
]
