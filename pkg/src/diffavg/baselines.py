"""Comparison and ablation generators.

Six prototype generators sharing the averaging run's seeded latent sets so
comparisons are paired:

- ``avg-latent``: decode the mean of the fully-denoised latents.
- ``sdedit``: noise that mean partway back and denoise it (single-prototype
  adaptation of noise-injection distillation).
- ``mode-guidance``: steer denoising toward the mean clean latent by
  modifying the predicted noise during the first guided steps.
- ``precomputed-mean``: alignment against per-step activation means frozen
  from independent denoising passes.
- ``single-step``: alignment at exactly one sampler step.
- ``replacement``: overwrite the bottleneck activation with the batch mean
  during denoising, no latent optimization.

Each generator's degenerate parameter collapses to plain sampling or a pure
mean decode, bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch

from .adapter import ConditioningSpec, Denoiser, decode_image, predict_noise
from .averaging import (
    CHUNK,
    AverageConfig,
    _align_chunk,
    _anchored_mean,
    _batch_activations,
    _decode_indices,
    init_latents,
    sample,
)
from .errors import NumericFailure
from .schedule import DiffusionSchedule, GuidanceSpec, cfg_combine

__all__ = [
    "BASELINE_KINDS",
    "BaselineConfig",
    "BaselineResult",
    "avg_codec_prototype",
    "mode_guidance_run",
    "precomputed_mean_run",
    "replacement_run",
    "run_baseline",
    "sdedit_prototype",
    "single_step_run",
]

BASELINE_KINDS = (
    "avg-latent",
    "sdedit",
    "mode-guidance",
    "precomputed-mean",
    "single-step",
    "replacement",
)


@dataclass(frozen=True)
class BaselineConfig:
    """Kind selector plus the union of per-kind parameters.

    ``inject_steps`` (sdedit) counts denoising steps run after injection, so
    0 adds no noise and decodes the mean directly.  ``mode_weight`` and
    ``guided_steps`` drive mode guidance; ``opt_step`` picks the single
    aligned step; ``align_until`` is the replacement / precomputed cutoff.
    """

    kind: str
    num_latents: int = 1000
    guidance: GuidanceSpec = field(default_factory=lambda: GuidanceSpec(scale=7.0))
    seed: int = 0
    noise_seed: Optional[int] = None
    decode_count: int = 1
    inject_steps: int = 6
    mode_weight: float = 0.1
    guided_steps: int = 10
    opt_step: int = 0
    align_until: int = 10
    opt_steps: int = 300
    lr: float = 2e-2
    tap: str = "bottleneck"
    capture_branch: str = "conditional"
    parallel: bool = False

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"unknown baseline kind {self.kind!r}; known: {BASELINE_KINDS}")
        if self.num_latents < 1:
            raise ValueError("num_latents must be >= 1")
        if self.mode_weight < 0:
            raise ValueError("mode_weight must be >= 0")
        if self.inject_steps < 0 or self.guided_steps < 0 or self.align_until < 0:
            raise ValueError("step parameters must be >= 0")

    def to_average_config(self) -> AverageConfig:
        return AverageConfig(
            num_latents=self.num_latents,
            opt_steps=self.opt_steps,
            lr=self.lr,
            align_until=self.align_until,
            guidance=self.guidance,
            tap=self.tap,
            capture_branch=self.capture_branch,
            seed=self.seed,
            decode_count=self.decode_count,
            parallel=self.parallel,
        )


@dataclass
class BaselineResult:
    kind: str
    prototypes: torch.Tensor  # (m, 3, H, W) decoded images
    latents: Optional[torch.Tensor]  # final latent batch where one exists
    info: dict


def _sequential_mean(latents: torch.Tensor) -> torch.Tensor:
    """Elementwise average accumulated in index order (brute-force order)."""
    if latents.shape[0] == 0:
        raise ValueError("latent set is empty")
    total = latents[0].clone()
    for row in latents[1:]:
        total = total + row
    return total / latents.shape[0]


def avg_codec_prototype(model: Denoiser, clean_latents: torch.Tensor) -> torch.Tensor:
    """Decode the mean of fully-denoised latents; one decode only."""
    return decode_image(model, _sequential_mean(clean_latents))


def sdedit_prototype(
    model: Denoiser,
    schedule: DiffusionSchedule,
    cond: ConditioningSpec,
    clean_latents: torch.Tensor,
    inject_steps: int,
    noise_seed: int,
    guidance: GuidanceSpec,
) -> torch.Tensor:
    """Noise the clean-latent mean to the level ``inject_steps`` from the end,
    then denoise those remaining steps and decode."""
    S = schedule.num_steps
    if not 0 <= inject_steps <= S:
        raise ValueError(f"inject_steps {inject_steps} outside [0, {S}]")
    m = _sequential_mean(clean_latents)
    gen = torch.Generator().manual_seed(noise_seed)
    eps = torch.randn(m.shape, generator=gen, dtype=m.dtype)
    start = S - inject_steps
    z = schedule.forward_noise(m, start, eps)[None]
    with torch.no_grad():
        for t in range(start, S):
            pred = predict_noise(model, schedule, z, t, cond, guidance)
            z = schedule.ddim_step(z, pred, t)
    return decode_image(model, z[0])


def mode_guidance_run(
    model: Denoiser,
    schedule: DiffusionSchedule,
    cond: ConditioningSpec,
    latents: torch.Tensor,
    clean_mean: torch.Tensor,
    weight: float,
    guided_steps: int,
    guidance: GuidanceSpec,
) -> torch.Tensor:
    """Denoise with the predicted noise pulled toward the mean clean latent.

    For the first ``guided_steps`` steps the prediction becomes
    ``eps - sqrt(1 - alpha_bar_t) * weight * (clean_mean - z0_hat)`` where
    ``z0_hat`` is the pre-modification clean estimate.  ``weight == 0`` or
    ``guided_steps == 0`` reproduce plain sampling bitwise.
    """
    S = schedule.num_steps
    if weight < 0:
        raise ValueError("weight must be >= 0")
    if not 0 <= guided_steps <= S:
        raise ValueError(f"guided_steps {guided_steps} outside [0, {S}]")
    z = latents.clone()
    with torch.no_grad():
        for t in range(S):
            eps = predict_noise(model, schedule, z, t, cond, guidance)
            if t < guided_steps:
                z0_hat = schedule.reconstruct_clean(z, eps, t)
                direction = clean_mean[None] - z0_hat
                ab = float(schedule.alpha_bar[t])
                eps = eps - math.sqrt(1.0 - ab) * weight * direction
            z = schedule.ddim_step(z, eps, t)
    return z


@dataclass
class PrecomputedMeanResult:
    prototypes: torch.Tensor
    latents: torch.Tensor
    targets: list[torch.Tensor]  # one frozen mean per sampler step


def precomputed_mean_run(
    model: Denoiser,
    schedule: DiffusionSchedule,
    cond: ConditioningSpec,
    config: AverageConfig,
    latents: Optional[torch.Tensor] = None,
) -> PrecomputedMeanResult:
    """Two-phase ablation: freeze per-step activation means from independent
    denoising passes, then rerun alignment from the original latents against
    those frozen targets."""
    S = schedule.num_steps
    if config.align_until > S:
        raise ValueError(f"align_until ({config.align_until}) exceeds schedule steps ({S})")
    if latents is None:
        latents = init_latents(
            config.num_latents, model.latent_shape, config.seed, getattr(model, "dtype", torch.float32)
        )
    elif latents.shape[0] != config.num_latents:
        raise ValueError("config.num_latents must match the provided batch")
    chunk = CHUNK if config.parallel else 1

    targets = []
    z = latents.clone()
    with torch.no_grad():
        for t in range(S):
            acts = _batch_activations(
                model, schedule, z, t, cond, config.guidance, config.tap,
                config.capture_branch, chunk,
            )
            targets.append(_anchored_mean(acts))
            eps = predict_noise(model, schedule, z, t, cond, config.guidance)
            z = schedule.ddim_step(z, eps, t)

    z = latents.clone()
    for t in range(S):
        if t <= config.align_until and config.opt_steps > 0:
            z_next = z.clone()
            for base in range(0, z.shape[0], chunk):
                rows, _ = _align_chunk(
                    model, schedule, z[base : base + chunk], targets[t], config.opt_steps,
                    config.lr, t, cond, config.guidance, config.tap, config.capture_branch, base,
                )
                with torch.no_grad():
                    z_next[base : base + chunk] = rows
            z = z_next
        with torch.no_grad():
            eps = predict_noise(model, schedule, z, t, cond, config.guidance)
            if not torch.isfinite(eps).all():
                raise NumericFailure("noise prediction is not finite", step=t)
            z = schedule.ddim_step(z, eps, t)

    prototypes = decode_image(model, z[_decode_indices(config, z.shape[0])])
    return PrecomputedMeanResult(prototypes=prototypes, latents=z, targets=targets)


def single_step_run(
    model: Denoiser,
    schedule: DiffusionSchedule,
    cond: ConditioningSpec,
    config: AverageConfig,
    opt_step: int,
    latents: Optional[torch.Tensor] = None,
):
    """Alignment executed only at sampler step ``opt_step``; plain elsewhere."""
    S = schedule.num_steps
    if not 0 <= opt_step < S:
        raise ValueError(f"opt_step {opt_step} outside [0, {S})")
    if latents is None:
        latents = init_latents(
            config.num_latents, model.latent_shape, config.seed, getattr(model, "dtype", torch.float32)
        )
    elif latents.shape[0] != config.num_latents:
        raise ValueError("config.num_latents must match the provided batch")
    chunk = CHUNK if config.parallel else 1
    z = latents.clone()
    for t in range(S):
        if t == opt_step and config.opt_steps > 0:
            acts = _batch_activations(
                model, schedule, z, t, cond, config.guidance, config.tap,
                config.capture_branch, chunk,
            )
            target = _anchored_mean(acts)
            z_next = z.clone()
            for base in range(0, z.shape[0], chunk):
                rows, _ = _align_chunk(
                    model, schedule, z[base : base + chunk], target, config.opt_steps,
                    config.lr, t, cond, config.guidance, config.tap, config.capture_branch, base,
                )
                with torch.no_grad():
                    z_next[base : base + chunk] = rows
            z = z_next
        with torch.no_grad():
            eps = predict_noise(model, schedule, z, t, cond, config.guidance)
            z = schedule.ddim_step(z, eps, t)
    prototypes = decode_image(model, z[_decode_indices(config, z.shape[0])])
    return BaselineResult(
        kind="single-step", prototypes=prototypes, latents=z, info={"opt_step": opt_step}
    )


def replacement_run(
    model: Denoiser,
    schedule: DiffusionSchedule,
    cond: ConditioningSpec,
    latents: torch.Tensor,
    align_until: int,
    tap: str = "bottleneck",
    guidance: GuidanceSpec = GuidanceSpec(),
) -> torch.Tensor:
    """Overwrite every latent's tap activation with the batch mean while
    denoising; no optimization, skip connections untouched.

    The substitution happens in the same conditional-branch pass whose
    activation the averaging run taps, so the ablation is like-for-like.
    With a single latent the substitution is an identity.
    """
    S = schedule.num_steps
    if align_until > S:
        raise ValueError(f"align_until ({align_until}) exceeds schedule steps ({S})")
    model.check_tap(tap)
    z = latents.clone()
    K = z.shape[0]
    with torch.no_grad():
        for t in range(S):
            tau = schedule.timestep(t)
            rc = model.resolve_conditioning(cond)
            if t <= align_until:
                acts = model.activation(z, tau, rc, tap)
                target = _anchored_mean(acts)
                rep = target[None].expand(K, *target.shape).contiguous()
                eps_c, _ = model.forward_raw(z, tau, rc, replace={tap: rep})
            else:
                eps_c, _ = model.forward_raw(z, tau, rc)
            if guidance.needs_unconditional:
                eps_u, _ = model.forward_raw(z, tau, model.resolve_negative(cond))
                eps = cfg_combine(eps_c, eps_u, guidance)
            else:
                eps = eps_c
            z = schedule.ddim_step(z, eps, t)
    return z


def run_baseline(
    model: Denoiser,
    schedule: DiffusionSchedule,
    cond: ConditioningSpec,
    config: BaselineConfig,
    latents: Optional[torch.Tensor] = None,
) -> BaselineResult:
    """Dispatch a baseline run from its config.

    All kinds consume the identical seeded latent set an averaging run with
    the same seed would use, so comparisons stay paired.
    """
    if latents is None:
        latents = init_latents(
            config.num_latents, model.latent_shape, config.seed, getattr(model, "dtype", torch.float32)
        )
    kind = config.kind
    if kind in ("avg-latent", "sdedit", "mode-guidance"):
        clean = sample(model, schedule, cond, config.guidance, latents)
        if kind == "avg-latent":
            proto = avg_codec_prototype(model, clean)
            return BaselineResult(kind, proto[None], None, {})
        if kind == "sdedit":
            noise_seed = config.noise_seed if config.noise_seed is not None else config.seed
            proto = sdedit_prototype(
                model, schedule, cond, clean, config.inject_steps, noise_seed, config.guidance
            )
            return BaselineResult(
                kind, proto[None], None,
                {"inject_steps": config.inject_steps, "noise_seed": noise_seed},
            )
        m = _sequential_mean(clean)
        final = mode_guidance_run(
            model, schedule, cond, latents, m, config.mode_weight, config.guided_steps,
            config.guidance,
        )
        proto = decode_image(model, final[_decode_indices(config.to_average_config(), final.shape[0])])
        return BaselineResult(
            kind, proto, final,
            {"mode_weight": config.mode_weight, "guided_steps": config.guided_steps},
        )
    if kind == "precomputed-mean":
        res = precomputed_mean_run(model, schedule, cond, config.to_average_config(), latents)
        return BaselineResult(kind, res.prototypes, res.latents, {"num_targets": len(res.targets)})
    if kind == "single-step":
        return single_step_run(
            model, schedule, cond, config.to_average_config(), config.opt_step, latents
        )
    final = replacement_run(
        model, schedule, cond, latents, config.align_until, config.tap, config.guidance
    )
    proto = decode_image(model, final[_decode_indices(config.to_average_config(), final.shape[0])])
    return BaselineResult(kind, proto, final, {"align_until": config.align_until})
