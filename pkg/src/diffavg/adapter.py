"""Uniform denoiser interface.

Every probe model, bundled or external, is driven through the same small
surface: noise prediction, named internal-activation taps, a latent/image
codec, and conditioning.  The functions in this module are the only way the
rest of the package talks to a model, so an out-of-tree adapter for a large
pretrained denoiser only has to subclass :class:`Denoiser`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch

from .schedule import DiffusionSchedule, GuidanceSpec, build_schedule, cfg_combine

__all__ = [
    "AdapterWeights",
    "AffineDenoiser",
    "Codec",
    "ConditioningSpec",
    "Denoiser",
    "IdentityCodec",
    "apply_conditioning",
    "check_denoiser_contract",
    "decode_image",
    "encode_image",
    "predict_noise",
    "predict_with_activation",
]

CAPTURE_BRANCHES = ("conditional", "unconditional", "guided")


@dataclass
class AdapterWeights:
    """Low-rank deltas on a model's conditioning pathway.

    ``down[name]`` has shape (rank, d_in) and ``up[name]`` (d_out, rank) for
    each named conditioning projection; the patched projection computes
    ``W x + scale * up @ (down @ x)``.  Zero-initialized ``up`` factors make
    the adapter an exact no-op.
    """

    rank: int
    down: dict[str, torch.Tensor]
    up: dict[str, torch.Tensor]
    scale: float = 1.0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"adapter rank must be >= 1, got {self.rank}")
        if set(self.down) != set(self.up):
            raise ValueError("adapter down/up factors must cover the same layers")

    def delta(self, name: str, x: torch.Tensor) -> torch.Tensor:
        d, u = self.down[name], self.up[name]
        return self.scale * ((x @ d.T) @ u.T)

    def detached(self) -> "AdapterWeights":
        return AdapterWeights(
            rank=self.rank,
            down={k: v.detach().clone() for k, v in self.down.items()},
            up={k: v.detach().clone() for k, v in self.up.items()},
            scale=self.scale,
        )


@dataclass
class ConditioningSpec:
    """What the denoiser is conditioned on for one run.

    ``concept`` names a prompt / class the model understands; ``negative``
    optionally names the unconditional slot (model default when None).
    ``learned_embedding`` replaces the concept's native embedding vector and
    ``adapter_weights`` patch the conditioning pathway; both are produced by
    the mode-refinement trainers.
    """

    concept: str
    negative: Optional[str] = None
    learned_embedding: Optional[torch.Tensor] = None
    adapter_weights: Optional[AdapterWeights] = None

    @property
    def refinement(self) -> str:
        """Which refinement combination is active, for run manifests."""
        has_emb = self.learned_embedding is not None
        has_ad = self.adapter_weights is not None
        if has_emb and has_ad:
            return "embedding+adapter"
        if has_emb:
            return "embedding"
        if has_ad:
            return "adapter"
        return "none"


class Codec:
    """Latent <-> image pair; identity for pixel-space toy models."""

    kind = "abstract"

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class IdentityCodec(Codec):
    """Pixel-space codec: decode clamps to the render range, encode is identity."""

    kind = "identity"

    def __init__(self, value_range=(-1.0, 1.0)):
        self.value_range = value_range

    def decode(self, z):
        lo, hi = self.value_range
        return z.detach().clamp(lo, hi)

    def encode(self, x):
        return x


class Denoiser:
    """Base interface for a loaded denoiser.

    Subclasses set ``latent_shape``, ``train_steps``, ``activation_layers``,
    ``bottleneck_layer`` (the designated semantic tap, always a member of
    ``activation_layers``), and ``codec``, and implement the three methods
    below.  All methods must be deterministic functions of (weights, inputs).
    """

    latent_shape: tuple[int, int, int]
    train_steps: int
    activation_layers: tuple[str, ...]
    bottleneck_layer: str
    codec: Codec

    def resolve_conditioning(self, spec: ConditioningSpec):
        """Model-specific conditioning payload for the conditional branch."""
        raise NotImplementedError

    def resolve_negative(self, spec: ConditioningSpec):
        """Conditioning payload for the unconditional / negative branch."""
        raise NotImplementedError

    def forward_raw(self, z, tau: int, cond, *, taps=(), replace=None):
        """One forward pass: returns (eps, {tap: activation}).

        ``replace`` maps tap names to tensors substituted for that layer's
        output inside the pass (skip connections unaffected).  Activations
        are captured from the live graph, so they are differentiable w.r.t.
        ``z`` whenever ``z`` requires grad.
        """
        raise NotImplementedError

    def activation(self, z, tau: int, cond, tap: str) -> torch.Tensor:
        """Activation at ``tap`` only; subclasses may stop the pass early."""
        _, acts = self.forward_raw(z, tau, cond, taps=(tap,))
        return acts[tap]

    def check_tap(self, tap: str) -> str:
        if tap not in self.activation_layers:
            raise ValueError(
                f"unknown activation tap {tap!r}; available: {self.activation_layers}"
            )
        return tap

    def sampling_schedule(self, num_steps: int) -> DiffusionSchedule:
        """Leading-spaced schedule over this model's training range."""
        return build_schedule(num_steps, self.train_steps)


def predict_noise(
    model: Denoiser,
    schedule: DiffusionSchedule,
    z: torch.Tensor,
    step: int,
    cond: ConditioningSpec,
    guidance: GuidanceSpec,
) -> torch.Tensor:
    """Guidance-combined noise prediction at sampler step ``step``.

    Runs a single conditional pass when the guidance spec reduces to the
    conditional prediction, two passes otherwise.
    """
    tau = schedule.timestep(step)
    eps_c, _ = model.forward_raw(z, tau, model.resolve_conditioning(cond))
    if not guidance.needs_unconditional:
        return eps_c
    eps_u, _ = model.forward_raw(z, tau, model.resolve_negative(cond))
    return cfg_combine(eps_c, eps_u, guidance)


def predict_with_activation(
    model: Denoiser,
    schedule: DiffusionSchedule,
    z: torch.Tensor,
    step: int,
    cond: ConditioningSpec,
    guidance: GuidanceSpec,
    tap: str,
    branch: str = "conditional",
):
    """Noise prediction plus the activation at ``tap``.

    ``branch`` selects which forward pass feeds the activation when guidance
    needs two passes: the conditional one (default), the unconditional one,
    or the guidance-combined activation.  The noise component is bitwise
    identical to :func:`predict_noise`.
    """
    model.check_tap(tap)
    if branch not in CAPTURE_BRANCHES:
        raise ValueError(f"unknown capture branch {branch!r}; use one of {CAPTURE_BRANCHES}")
    tau = schedule.timestep(step)
    eps_c, acts_c = model.forward_raw(z, tau, model.resolve_conditioning(cond), taps=(tap,))
    if not guidance.needs_unconditional:
        return eps_c, acts_c[tap]
    eps_u, acts_u = model.forward_raw(z, tau, model.resolve_negative(cond), taps=(tap,))
    eps = cfg_combine(eps_c, eps_u, guidance)
    if branch == "conditional":
        act = acts_c[tap]
    elif branch == "unconditional":
        act = acts_u[tap]
    else:
        act = cfg_combine(acts_c[tap], acts_u[tap], guidance)
    return eps, act


def decode_image(model: Denoiser, z: torch.Tensor) -> torch.Tensor:
    return model.codec.decode(z)


def encode_image(model: Denoiser, x: torch.Tensor) -> torch.Tensor:
    return model.codec.encode(x)


class _RefinedDenoiser(Denoiser):
    """View of a base denoiser with refinement baked into every call."""

    def __init__(self, base: Denoiser, spec: ConditioningSpec):
        self._base = base
        self._spec = spec
        self.latent_shape = base.latent_shape
        self.train_steps = base.train_steps
        self.activation_layers = base.activation_layers
        self.bottleneck_layer = base.bottleneck_layer
        self.codec = base.codec

    def _merge(self, spec: ConditioningSpec) -> ConditioningSpec:
        return replace(
            spec,
            learned_embedding=(
                spec.learned_embedding
                if spec.learned_embedding is not None
                else self._spec.learned_embedding
            ),
            adapter_weights=(
                spec.adapter_weights
                if spec.adapter_weights is not None
                else self._spec.adapter_weights
            ),
        )

    def resolve_conditioning(self, spec: ConditioningSpec):
        return self._base.resolve_conditioning(self._merge(spec))

    def resolve_negative(self, spec: ConditioningSpec):
        return self._base.resolve_negative(self._merge(spec))

    def forward_raw(self, z, tau, cond, *, taps=(), replace=None):
        return self._base.forward_raw(z, tau, cond, taps=taps, replace=replace)

    def activation(self, z, tau, cond, tap):
        return self._base.activation(z, tau, cond, tap)


def apply_conditioning(model: Denoiser, spec: ConditioningSpec) -> Denoiser:
    """Handle whose forward passes use ``spec``'s refinements.

    The base handle is never mutated; the returned view shares its weights
    read-only.  Learned embedding / adapter shapes are validated eagerly by
    resolving the spec once.
    """
    model.resolve_conditioning(spec)
    if spec.learned_embedding is None and spec.adapter_weights is None:
        return model
    return _RefinedDenoiser(model, spec)


class AffineDenoiser(Denoiser):
    """Mock denoiser: a chain of elementwise affine blocks.

    ``h_0 = z``, ``h_{i+1} = scale_i * h_i + shift_i``; the noise prediction
    is the final block output plus a per-concept offset.  Taps are the block
    outputs (``block_0`` ... ``block_{n-1}``) with the final block designated
    as the bottleneck, mirroring how transformer denoisers expose every block
    with a last-block default.  Used as an oracle target and for adapter
    conformance tests; everything is exactly linear in ``z``.
    """

    def __init__(
        self,
        scales,
        shifts,
        latent_shape=(3, 8, 8),
        train_steps: int = 1000,
        concept_offsets: Optional[dict[str, torch.Tensor]] = None,
        dtype=torch.float64,
    ):
        scales = [torch.as_tensor(a, dtype=dtype) for a in scales]
        shifts = [torch.as_tensor(b, dtype=dtype) for b in shifts]
        if len(scales) != len(shifts) or not scales:
            raise ValueError("need equally many scales and shifts, at least one")
        self.scales = [a.expand(latent_shape).clone() for a in scales]
        self.shifts = [b.expand(latent_shape).clone() for b in shifts]
        self.latent_shape = tuple(latent_shape)
        self.train_steps = int(train_steps)
        self.activation_layers = tuple(f"block_{i}" for i in range(len(scales)))
        self.bottleneck_layer = self.activation_layers[-1]
        self.codec = IdentityCodec()
        self.concept_offsets = {
            k: torch.as_tensor(v, dtype=dtype).expand(latent_shape).clone()
            for k, v in (concept_offsets or {}).items()
        }
        self.dtype = dtype

    def effective_affine(self, concept: Optional[str] = None):
        """Collapsed (scale, shift) of the whole chain, as numpy arrays."""
        a = np.ones(self.latent_shape, dtype=np.float64)
        b = np.zeros(self.latent_shape, dtype=np.float64)
        for ai, bi in zip(self.scales, self.shifts):
            a = ai.numpy() * a
            b = ai.numpy() * b + bi.numpy()
        if concept is not None and concept in self.concept_offsets:
            b = b + self.concept_offsets[concept].numpy()
        return a, b

    def resolve_conditioning(self, spec: ConditioningSpec):
        if spec.learned_embedding is not None:
            return spec.learned_embedding.to(self.dtype)
        if spec.concept in self.concept_offsets:
            return self.concept_offsets[spec.concept]
        if spec.concept in (None, "", "null"):
            return torch.zeros(self.latent_shape, dtype=self.dtype)
        raise ValueError(f"unknown concept {spec.concept!r}")

    def resolve_negative(self, spec: ConditioningSpec):
        if spec.negative is None:
            return torch.zeros(self.latent_shape, dtype=self.dtype)
        return self.resolve_conditioning(ConditioningSpec(concept=spec.negative))

    def forward_raw(self, z, tau, cond, *, taps=(), replace=None):
        for tap in taps:
            self.check_tap(tap)
        replace = replace or {}
        for tap in replace:
            self.check_tap(tap)
        h = z
        acts = {}
        for i, (a, b) in enumerate(zip(self.scales, self.shifts)):
            name = f"block_{i}"
            h = a * h + b
            if name in replace:
                h = replace[name]
            if name in taps:
                acts[name] = h
        return h + cond, acts


def check_denoiser_contract(
    model: Denoiser,
    schedule: DiffusionSchedule,
    cond: ConditioningSpec,
    *,
    batch: int = 2,
    seed: int = 0,
) -> None:
    """Interface-conformance check any adapter implementation must pass.

    Raises AssertionError on the first violated clause.  Exercised in-tree
    against the bundled models; external adapters should run it too.
    """
    assert len(model.activation_layers) >= 1, "at least one activation tap required"
    assert model.bottleneck_layer in model.activation_layers, (
        "designated bottleneck must be a member of activation_layers"
    )
    gen = torch.Generator().manual_seed(seed)
    dtype = getattr(model, "dtype", torch.float32)
    z = torch.randn((batch, *model.latent_shape), generator=gen, dtype=dtype)
    guidance = GuidanceSpec(scale=1.0)
    step = 0

    eps1 = predict_noise(model, schedule, z, step, cond, guidance)
    eps2 = predict_noise(model, schedule, z, step, cond, guidance)
    assert torch.equal(eps1, eps2), "prediction must be deterministic"
    assert eps1.shape == z.shape, "noise prediction must match latent shape"

    for tap in model.activation_layers:
        eps3, act = predict_with_activation(model, schedule, z, step, cond, guidance, tap)
        assert torch.equal(eps3, eps1), "activation capture must not perturb the prediction"
        _, act2 = predict_with_activation(model, schedule, z, step, cond, guidance, tap)
        assert torch.equal(act, act2), "activation capture must be deterministic"

    zs = torch.cat([z[:1], z[:1]])
    eps_pair = predict_noise(model, schedule, zs, step, cond, guidance)
    assert torch.equal(eps_pair[0], eps_pair[1]), "identical batch rows must agree"

    img = decode_image(model, torch.zeros((1, *model.latent_shape), dtype=dtype))
    back = encode_image(model, img)
    dec2 = decode_image(model, back)
    assert torch.equal(img, dec2), "codec decode/encode/decode must be stable"

    zg = z.clone().requires_grad_(True)
    _, act = predict_with_activation(
        model, schedule, zg, step, cond, guidance, model.bottleneck_layer
    )
    act.pow(2).sum().backward()
    assert zg.grad is not None and torch.isfinite(zg.grad).all(), (
        "bottleneck activation must be differentiable w.r.t. the latent"
    )
