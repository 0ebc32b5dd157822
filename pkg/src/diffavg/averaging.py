"""Progressive alignment of a latent batch toward its mean bottleneck activation.

At each sampler step up to an inclusive cutoff, the batch's activations at a
designated tap are averaged once, every latent is optimized to match that
fixed mean with adaptive-moment gradient descent, and the whole batch is then
DDIM-stepped.  Decoding any surviving latent yields a prototype image for the
conditioning concept.

Degenerate settings collapse exactly to plain sampling: a single latent, zero
optimization iterations, or a cutoff below the first step all reproduce the
standard DDIM batch bitwise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import torch

from .adapter import ConditioningSpec, Denoiser, decode_image, predict_noise
from .errors import NumericFailure
from .hashing import canonical_hash
from .schedule import DiffusionSchedule, GuidanceSpec, cfg_combine

__all__ = [
    "AverageConfig",
    "AverageResult",
    "LatentBatch",
    "RunState",
    "RunTrace",
    "StepTrace",
    "align_latent",
    "config_dict",
    "decode_prototypes",
    "init_latents",
    "mean_activation",
    "sample",
    "trajectory_average",
]

# Gradient passes are chunked at this batch size; fixed so that runs on the
# same machine are bit-reproducible regardless of available memory.
CHUNK = 128


@dataclass(frozen=True)
class AverageConfig:
    """Hyperparameters of one averaging run.

    ``num_latents`` latents are jointly aligned for ``opt_steps`` Adam
    iterations per latent at every sampler step ``t <= align_until``
    (inclusive cutoff); the remaining steps are plain DDIM.  ``parallel``
    optimizes all latents of a chunk concurrently against the same fixed
    target instead of sequentially in index order; results agree up to
    floating-point batching effects.
    """

    num_latents: int = 1000
    opt_steps: int = 300
    lr: float = 2e-2
    align_until: int = 10
    guidance: GuidanceSpec = field(default_factory=lambda: GuidanceSpec(scale=7.0))
    tap: str = "bottleneck"
    capture_branch: str = "conditional"
    seed: int = 0
    decode_count: int = 1
    decode_indices: Optional[tuple[int, ...]] = None
    parallel: bool = False

    def __post_init__(self):
        if self.num_latents < 1:
            raise ValueError("num_latents must be >= 1")
        if self.opt_steps < 0:
            raise ValueError("opt_steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.align_until < 0:
            raise ValueError("align_until must be >= 0")
        if self.decode_count < 1:
            raise ValueError("decode_count must be >= 1")


def config_dict(config: AverageConfig) -> dict:
    d = asdict(config)
    if d.get("decode_indices") is not None:
        d["decode_indices"] = list(d["decode_indices"])
    return d


@dataclass
class LatentBatch:
    """The jointly-optimized latents at one sampler step."""

    latents: torch.Tensor  # (K, C, H, W)
    step: int
    concept: str
    seed: int
    opt_m: Optional[torch.Tensor] = None  # first-moment accumulators, mid-step only
    opt_v: Optional[torch.Tensor] = None  # second-moment accumulators, mid-step only

    def __post_init__(self):
        if not torch.isfinite(self.latents).all():
            raise NumericFailure("latent batch contains non-finite values", step=self.step)


@dataclass
class RunState:
    """Resumable snapshot at a completed-step boundary."""

    batch: LatentBatch
    config_hash: str
    completed_steps: int
    rng_state: Optional[bytes] = None


@dataclass
class StepTrace:
    step: int
    tau: int
    aligned: bool
    mean_count: int
    loss_initial: Optional[float] = None
    loss_final: Optional[float] = None
    activation_spread: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunTrace:
    steps: list[StepTrace]
    config: dict
    latent_seed: int

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "latent_seed": self.latent_seed,
            "steps": [s.to_dict() for s in self.steps],
        }

    def content_hash(self) -> str:
        return canonical_hash(self.to_dict())


@dataclass
class AverageResult:
    prototypes: Optional[torch.Tensor]  # decoded images, None if stopped early
    latents: torch.Tensor  # latent batch at the last completed step
    trace: RunTrace
    state: RunState


def init_latents(num: int, latent_shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    """``num`` independent standard-normal latents, deterministic per seed."""
    if num < 1:
        raise ValueError("num must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    return torch.randn((num, *latent_shape), generator=gen, dtype=dtype)


def _branch_activation(model, schedule, z, step, cond, guidance, tap, branch):
    """Activation at ``tap`` from the configured guidance branch; grad-capable."""
    tau = schedule.timestep(step)
    if branch == "conditional":
        return model.activation(z, tau, model.resolve_conditioning(cond), tap)
    if branch == "unconditional":
        return model.activation(z, tau, model.resolve_negative(cond), tap)
    if branch == "guided":
        act_c = model.activation(z, tau, model.resolve_conditioning(cond), tap)
        act_u = model.activation(z, tau, model.resolve_negative(cond), tap)
        return cfg_combine(act_c, act_u, guidance)
    raise ValueError(f"unknown capture branch {branch!r}")


def _batch_activations(model, schedule, latents, step, cond, guidance, tap, branch, chunk):
    parts = []
    with torch.no_grad():
        for start in range(0, latents.shape[0], chunk):
            parts.append(
                _branch_activation(
                    model, schedule, latents[start : start + chunk], step, cond, guidance, tap, branch
                )
            )
    acts = torch.cat(parts) if len(parts) > 1 else parts[0]
    if not torch.isfinite(acts).all():
        raise NumericFailure("activation is not finite", step=step)
    return acts


def _anchored_mean(acts: torch.Tensor) -> torch.Tensor:
    # Anchoring at the first row makes a batch of identical activations
    # average to itself exactly, so degenerate batches see a zero gradient.
    return (acts[0] + (acts - acts[0]).mean(dim=0)).detach()


def _pairwise_spread(acts: torch.Tensor) -> float:
    if acts.shape[0] < 2:
        return 0.0
    flat = acts.reshape(acts.shape[0], -1).double()
    dists = torch.cdist(flat, flat)
    n = acts.shape[0]
    return float(dists.sum() / (n * (n - 1)))


def _row_losses(acts: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return (acts - target).pow(2).reshape(acts.shape[0], -1).sum(dim=1)


def mean_activation(
    model: Denoiser,
    schedule: DiffusionSchedule,
    latents: torch.Tensor,
    step: int,
    cond: ConditioningSpec,
    guidance: GuidanceSpec,
    tap: str = "bottleneck",
    branch: str = "conditional",
) -> torch.Tensor:
    """Arithmetic mean of the batch's tap activations, detached.

    Computed in a fixed order (anchored at the first element), so the result
    is a constant target: no gradient flows into it during alignment.
    """
    if latents.shape[0] < 1:
        raise ValueError("latent batch is empty")
    model.check_tap(tap)
    acts = _batch_activations(model, schedule, latents, step, cond, guidance, tap, branch, CHUNK)
    return _anchored_mean(acts)


def _align_chunk(
    model, schedule, z0, target, opt_steps, lr, step, cond, guidance, tap, branch, latent_base
):
    """Optimize one chunk of latents against a fixed target.

    Returns (aligned latents, per-row final losses).  Fresh Adam state per
    call: each (latent, step) pair is an independent subproblem.
    """
    if opt_steps == 0:
        with torch.no_grad():
            final = _row_losses(
                _branch_activation(model, schedule, z0, step, cond, guidance, tap, branch), target
            )
        return z0, final
    z = z0.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([z], lr=lr, betas=(0.9, 0.999), eps=1e-8)
    for i in range(opt_steps):
        act = _branch_activation(model, schedule, z, step, cond, guidance, tap, branch)
        losses = _row_losses(act, target)
        loss = losses.sum()
        if not torch.isfinite(loss):
            bad = int(torch.nonzero(~torch.isfinite(losses))[0]) if losses.numel() else 0
            raise NumericFailure(
                "alignment loss is not finite", step=step, latent=latent_base + bad, iteration=i
            )
        grad = torch.autograd.grad(loss, z)[0]
        opt.zero_grad()
        z.grad = grad
        opt.step()
    with torch.no_grad():
        final = _row_losses(
            _branch_activation(model, schedule, z.detach(), step, cond, guidance, tap, branch),
            target,
        )
    return z.detach(), final


def align_latent(
    model: Denoiser,
    schedule: DiffusionSchedule,
    z: torch.Tensor,
    target: torch.Tensor,
    opt_steps: int,
    lr: float,
    step: int,
    cond: ConditioningSpec,
    guidance: GuidanceSpec,
    tap: str = "bottleneck",
    branch: str = "conditional",
) -> torch.Tensor:
    """Optimize a latent so its tap activation matches ``target``.

    Runs ``opt_steps`` Adam iterations on the squared-L2 activation gap.
    ``opt_steps == 0`` returns the latent unchanged; a target equal to the
    latent's own activation is a zero-gradient fixed point.
    """
    model.check_tap(tap)
    batched = z.dim() == 4
    zb = z if batched else z[None]
    if opt_steps == 0:
        return z
    out, _ = _align_chunk(
        model, schedule, zb, target.detach(), opt_steps, lr, step, cond, guidance, tap, branch, 0
    )
    return out if batched else out[0]


def sample(
    model: Denoiser,
    schedule: DiffusionSchedule,
    cond: ConditioningSpec,
    guidance: GuidanceSpec,
    latents: torch.Tensor,
) -> torch.Tensor:
    """Plain DDIM denoising of a latent batch (no alignment)."""
    z = latents.clone()
    with torch.no_grad():
        for t in range(schedule.num_steps):
            eps = predict_noise(model, schedule, z, t, cond, guidance)
            if not torch.isfinite(eps).all():
                raise NumericFailure("noise prediction is not finite", step=t)
            z = schedule.ddim_step(z, eps, t)
    return z


def decode_prototypes(model: Denoiser, latents: torch.Tensor, indices) -> torch.Tensor:
    """Decode the selected latents to images, in index order."""
    indices = list(indices)
    for i in indices:
        if not 0 <= i < latents.shape[0]:
            raise ValueError(f"prototype index {i} outside [0, {latents.shape[0]})")
    return decode_image(model, latents[indices])


def _decode_indices(config: AverageConfig, num: int) -> list[int]:
    if config.decode_indices is not None:
        return list(config.decode_indices)
    return list(range(min(config.decode_count, num)))


def trajectory_average(
    model: Denoiser,
    schedule: DiffusionSchedule,
    cond: ConditioningSpec,
    config: AverageConfig,
    *,
    latents: Optional[torch.Tensor] = None,
    resume: Optional[RunState] = None,
    stop_after: Optional[int] = None,
) -> AverageResult:
    """Run the full averaging loop and decode the configured prototypes.

    ``latents`` injects a pre-seeded batch (paired baseline comparisons);
    by default the batch is drawn from ``config.seed``.  ``resume`` continues
    from a snapshot bitwise-identically to the uninterrupted run on the same
    machine; ``stop_after`` ends the loop after that sampler step and leaves
    ``prototypes`` unset.
    """
    S = schedule.num_steps
    if config.align_until > S:
        raise ValueError(f"align_until ({config.align_until}) exceeds schedule steps ({S})")
    model.check_tap(config.tap)
    cfg_hash = canonical_hash(config_dict(config))

    rng_state = None
    if resume is not None:
        if resume.config_hash != cfg_hash:
            raise ValueError("resume state was produced under a different config")
        z = resume.batch.latents.clone()
        start = resume.completed_steps
        rng_state = resume.rng_state
    else:
        if latents is None:
            gen = torch.Generator().manual_seed(config.seed)
            z = torch.randn(
                (config.num_latents, *model.latent_shape),
                generator=gen,
                dtype=getattr(model, "dtype", torch.float32),
            )
            rng_state = bytes(gen.get_state().numpy().tobytes())
        else:
            if latents.shape[0] != config.num_latents:
                raise ValueError(
                    f"config.num_latents ({config.num_latents}) must match the "
                    f"provided batch ({latents.shape[0]})"
                )
            z = latents.clone()
        start = 0

    K = z.shape[0]
    end = S if stop_after is None else min(S, stop_after + 1)
    steps: list[StepTrace] = []
    for t in range(start, end):
        tau = schedule.timestep(t)
        if t <= config.align_until:
            # One mean per optimized step, fixed before any latent moves.
            # The activation pass mirrors the alignment batching so that a
            # degenerate batch sees an exactly-zero gradient.
            chunk = CHUNK if config.parallel else 1
            acts = _batch_activations(
                model, schedule, z, t, cond, config.guidance, config.tap,
                config.capture_branch, chunk,
            )
            target = _anchored_mean(acts)
            spread = _pairwise_spread(acts)
            init_losses = _row_losses(acts, target)
            if config.opt_steps > 0:
                z_next = z.clone()
                finals = torch.empty(K, dtype=init_losses.dtype)
                for base in range(0, K, chunk):
                    rows, fin = _align_chunk(
                        model, schedule, z[base : base + chunk], target, config.opt_steps,
                        config.lr, t, cond, config.guidance, config.tap,
                        config.capture_branch, base,
                    )
                    with torch.no_grad():
                        z_next[base : base + chunk] = rows
                    finals[base : base + len(fin)] = fin
                z = z_next
            else:
                finals = init_losses
            steps.append(
                StepTrace(
                    step=t,
                    tau=tau,
                    aligned=True,
                    mean_count=1,
                    loss_initial=float(init_losses.mean()),
                    loss_final=float(finals.mean()),
                    activation_spread=spread,
                )
            )
        else:
            steps.append(StepTrace(step=t, tau=tau, aligned=False, mean_count=0))
        with torch.no_grad():
            eps = predict_noise(model, schedule, z, t, cond, config.guidance)
            if not torch.isfinite(eps).all():
                raise NumericFailure("noise prediction is not finite", step=t)
            z = schedule.ddim_step(z, eps, t)

    trace = RunTrace(steps=steps, config=config_dict(config), latent_seed=config.seed)
    batch = LatentBatch(latents=z, step=end, concept=cond.concept, seed=config.seed)
    state = RunState(batch=batch, config_hash=cfg_hash, completed_steps=end, rng_state=rng_state)
    prototypes = None
    if end == S:
        prototypes = decode_prototypes(model, z, _decode_indices(config, K))
    return AverageResult(prototypes=prototypes, latents=z, trace=trace, state=state)
