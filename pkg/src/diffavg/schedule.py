"""Diffusion schedule kernels: DDIM stepping, forward noising, and
classifier-free guidance combination.

Everything here is a pure function of the schedule arrays and its inputs.
Coefficients are stored as float64 scalars, so the elementwise update
formulas work unchanged on numpy arrays and torch tensors of any dtype.

Step-index convention: a schedule with S sampler steps denoises
``z^(0) -> z^(1) -> ... -> z^(S)``, where step 0 is pure noise and step S
is clean.  ``alpha_bar`` has S+1 entries, one per latent state, and the
terminal entry is exactly 1 so the last update decodes a clean estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DiffusionSchedule",
    "GuidanceSpec",
    "build_schedule",
    "cfg_combine",
    "training_alpha_bar",
]


@dataclass(frozen=True)
class GuidanceSpec:
    """Classifier-free guidance scale plus the combination convention.

    ``conventional`` blends ``eps_u + scale * (eps_c - eps_u)``, so scale 1
    returns the conditional prediction exactly.  ``verbatim`` keeps the
    alternative printed form ``(1 - scale) * eps_c - scale * eps_u`` for
    fidelity audits; it is not used by default anywhere.
    """

    scale: float = 1.0
    convention: str = "conventional"

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.scale}")
        if self.convention not in ("conventional", "verbatim"):
            raise ValueError(f"unknown guidance convention {self.convention!r}")

    @property
    def needs_unconditional(self) -> bool:
        return self.convention == "verbatim" or self.scale != 1.0


def cfg_combine(eps_cond, eps_uncond, spec: GuidanceSpec):
    """Blend conditional and unconditional noise predictions."""
    if hasattr(eps_cond, "shape") and eps_cond.shape != eps_uncond.shape:
        raise ValueError(
            f"shape mismatch: cond {tuple(eps_cond.shape)} vs uncond {tuple(eps_uncond.shape)}"
        )
    w = spec.scale
    if spec.convention == "conventional":
        return eps_uncond + w * (eps_cond - eps_uncond)
    return (1.0 - w) * eps_cond - w * eps_uncond


@dataclass(frozen=True)
class DiffusionSchedule:
    """Sampler-step timesteps and cumulative noise-retention coefficients.

    Attributes:
        model_timesteps: (S,) int64, model-native timesteps, strictly
            decreasing as denoising progresses.
        alpha_bar: (S+1,) float64 cumulative signal coefficients, strictly
            increasing toward the clean end, with ``alpha_bar[S] == 1.0``.
    """

    model_timesteps: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.model_timesteps, dtype=np.int64)
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "model_timesteps", ts)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.shape != (ts.shape[0] + 1,):
            raise ValueError("alpha_bar must have one more entry than model_timesteps")
        if not (np.all(ab > 0.0) and np.all(ab <= 1.0)):
            raise ValueError("alpha_bar values must lie in (0, 1]")
        if np.any(np.diff(ab) <= 0):
            raise ValueError("alpha_bar must increase strictly toward the clean end")
        if ab[-1] != 1.0:
            raise ValueError("terminal alpha_bar must be exactly 1")
        if ts.size > 1 and np.any(np.diff(ts) >= 0):
            raise ValueError("model_timesteps must be strictly decreasing")

    @property
    def num_steps(self) -> int:
        return int(self.model_timesteps.shape[0])

    def timestep(self, step: int) -> int:
        """Model-native timestep fed to the denoiser at sampler step ``step``."""
        if not 0 <= step < self.num_steps:
            raise ValueError(f"step {step} outside [0, {self.num_steps})")
        return int(self.model_timesteps[step])

    def ddim_step(self, z_t, eps, step: int):
        """Deterministic (eta=0) DDIM update from step ``step`` to ``step+1``.

        ``z' = sqrt(ab') * (z - sqrt(1-ab) * eps) / sqrt(ab) + sqrt(1-ab') * eps``
        where ``ab = alpha_bar[step]`` and ``ab' = alpha_bar[step+1]``.
        """
        if hasattr(z_t, "shape") and z_t.shape != eps.shape:
            raise ValueError(
                f"shape mismatch: z {tuple(z_t.shape)} vs eps {tuple(eps.shape)}"
            )
        if not 0 <= step < self.num_steps:
            raise ValueError(f"step {step} outside [0, {self.num_steps})")
        ab_t = float(self.alpha_bar[step])
        ab_next = float(self.alpha_bar[step + 1])
        x0 = (z_t - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
        return math.sqrt(ab_next) * x0 + math.sqrt(1.0 - ab_next) * eps

    def forward_noise(self, z_0, step: int, eps):
        """Noise a clean latent to the level of sampler step ``step``.

        ``z = sqrt(ab) * z_0 + sqrt(1-ab) * eps`` with ``ab = alpha_bar[step]``.
        ``step == num_steps`` is the clean boundary and returns ``z_0``.
        """
        if hasattr(z_0, "shape") and z_0.shape != eps.shape:
            raise ValueError(
                f"shape mismatch: z0 {tuple(z_0.shape)} vs eps {tuple(eps.shape)}"
            )
        if not 0 <= step <= self.num_steps:
            raise ValueError(f"step {step} outside [0, {self.num_steps}]")
        ab = float(self.alpha_bar[step])
        return math.sqrt(ab) * z_0 + math.sqrt(1.0 - ab) * eps

    def reconstruct_clean(self, z_t, eps, step: int):
        """Invert :meth:`forward_noise`: the x0 estimate implied by ``eps``."""
        if not 0 <= step <= self.num_steps:
            raise ValueError(f"step {step} outside [0, {self.num_steps}]")
        ab = float(self.alpha_bar[step])
        return (z_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)


def training_alpha_bar(
    train_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> np.ndarray:
    """Cumulative products of ``1 - beta`` over the full training range.

    ``result[tau]`` is the signal coefficient at model-native timestep
    ``tau`` for a linear beta ramp; float64, length ``train_steps``.
    """
    if train_steps < 1:
        raise ValueError(f"train_steps must be positive, got {train_steps}")
    betas = np.linspace(beta_start, beta_end, train_steps, dtype=np.float64)
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ValueError("betas must lie strictly in (0, 1)")
    return np.cumprod(1.0 - betas)


def build_schedule(
    num_steps: int,
    train_steps: int,
    *,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    betas=None,
) -> DiffusionSchedule:
    """Build a leading-spaced DDIM schedule over a trained beta range.

    Sampler timesteps are ``(S-1-s) * (train_steps // num_steps)`` (uniform
    leading spacing), and ``alpha_bar`` entries are the cumulative products
    of ``1 - beta`` evaluated at those timesteps, with the terminal clean
    boundary pinned to 1.  ``betas`` overrides the linear ramp when given.
    """
    if num_steps < 1:
        raise ValueError(f"num_steps must be positive, got {num_steps}")
    if train_steps < 1:
        raise ValueError(f"train_steps must be positive, got {train_steps}")
    if num_steps > train_steps:
        raise ValueError(
            f"num_steps ({num_steps}) cannot exceed train_steps ({train_steps})"
        )
    if betas is None:
        betas = np.linspace(beta_start, beta_end, train_steps, dtype=np.float64)
    else:
        betas = np.asarray(betas, dtype=np.float64)
        if betas.shape != (train_steps,):
            raise ValueError(f"betas must have shape ({train_steps},)")
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ValueError("betas must lie strictly in (0, 1)")

    cumprod = np.cumprod(1.0 - betas)
    stride = train_steps // num_steps
    taus = np.array([(num_steps - 1 - s) * stride for s in range(num_steps)], dtype=np.int64)
    alpha_bar = np.empty(num_steps + 1, dtype=np.float64)
    alpha_bar[:num_steps] = cumprod[taus]
    alpha_bar[num_steps] = 1.0
    return DiffusionSchedule(model_timesteps=taus, alpha_bar=alpha_bar)
