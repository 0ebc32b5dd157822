"""Trainable desk-scale conditional denoiser.

A small encoder/decoder with skip connections; the spatially-coarsest middle
block is the designated "bottleneck" activation tap.  Class conditioning
enters through per-block projection layers that are separate from the
timestep pathway, so learned embeddings can replace a class vector and
low-rank adapters can patch exactly the conditioning projections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..adapter import AdapterWeights, ConditioningSpec, Denoiser, IdentityCodec
from ..errors import TrainingFailure
from ..schedule import DiffusionSchedule, build_schedule, training_alpha_bar
from .data import ToyDataset

__all__ = ["ToyConditioning", "ToyDenoiser", "train_toy_denoiser"]

NULL_CONCEPT = "null"

_TIME_DIM = 64


@dataclass
class ToyConditioning:
    """Resolved conditioning: an embedding vector plus optional adapter."""

    vec: torch.Tensor  # (D,) or (B, D)
    adapter: Optional[AdapterWeights] = None


def _timestep_embedding(tau: torch.Tensor, dim: int, dtype, device) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=dtype, device=device) * (-math.log(10000.0) / (half - 1))
    )
    args = tau.to(dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class _Block(nn.Module):
    """Residual conv block with additive timestep and conditioning biases."""

    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time_proj = nn.Linear(emb_dim, cout)
        self.cond_proj = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, h, t_emb, c_emb, cond_delta=None):
        x = self.conv1(F.silu(self.norm1(h)))
        bias = self.time_proj(t_emb) + self.cond_proj(c_emb)
        if cond_delta is not None:
            bias = bias + cond_delta
        x = x + bias[:, :, None, None]
        x = self.conv2(F.silu(self.norm2(x)))
        return x + self.skip(h)


_ENCODER_TAPS = ("enc_full", "enc_half", "enc_quarter", "bottleneck")
_DECODER_TAPS = ("dec_quarter", "dec_half", "dec_full")


class ToyDenoiser(nn.Module, Denoiser):
    """Noise-prediction U-Net over pixel-space latents with an identity codec."""

    def __init__(
        self,
        class_names: list[str],
        image_size: int = 32,
        base_channels: int = 16,
        emb_dim: int = 96,
        train_steps: int = 1000,
        beta_start: float = 1e-4,
        beta_end: float = 0.02,
        seed: int = 0,
    ):
        super().__init__()
        if base_channels % 8 != 0:
            raise ValueError("base_channels must be a multiple of 8")
        if image_size % 8 != 0:
            raise ValueError("image_size must be a multiple of 8")
        if NULL_CONCEPT in class_names:
            raise ValueError(f"{NULL_CONCEPT!r} is reserved for the unconditional slot")
        self.class_names = list(class_names)
        self.class_to_idx = {n: i for i, n in enumerate(self.class_names)}
        self.null_index = len(self.class_names)
        self.emb_dim = emb_dim
        self.base_channels = base_channels
        self.image_size = image_size
        self.train_steps = train_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.init_seed = seed

        self.latent_shape = (3, image_size, image_size)
        self.activation_layers = _ENCODER_TAPS + _DECODER_TAPS
        self.bottleneck_layer = "bottleneck"
        self.codec = IdentityCodec()

        c1, c2, c3 = base_channels, 2 * base_channels, 4 * base_channels
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.time_mlp = nn.Sequential(
                nn.Linear(_TIME_DIM, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
            )
            self.class_embed = nn.Embedding(len(self.class_names) + 1, emb_dim)
            self.conv_in = nn.Conv2d(3, c1, 3, padding=1)
            self.enc_full = _Block(c1, c1, emb_dim)
            self.down_half = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
            self.enc_half = _Block(c2, c2, emb_dim)
            self.down_quarter = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
            self.enc_quarter = _Block(c3, c3, emb_dim)
            self.down_eighth = nn.Conv2d(c3, c3, 3, stride=2, padding=1)
            self.mid = _Block(c3, c3, emb_dim)
            self.up_quarter = nn.Conv2d(c3, c3, 3, padding=1)
            self.dec_quarter = _Block(2 * c3, c3, emb_dim)
            self.up_half = nn.Conv2d(c3, c2, 3, padding=1)
            self.dec_half = _Block(2 * c2, c2, emb_dim)
            self.up_full = nn.Conv2d(c2, c1, 3, padding=1)
            self.dec_full = _Block(2 * c1, c1, emb_dim)
            self.norm_out = nn.GroupNorm(8, c1)
            self.conv_out = nn.Conv2d(c1, 3, 3, padding=1)

        self.register_buffer(
            "train_alpha_bar",
            torch.from_numpy(training_alpha_bar(train_steps, beta_start, beta_end)),
        )
        self.training_log: dict = {}

    # --- conditioning -------------------------------------------------

    @property
    def dtype(self):
        return self.conv_in.weight.dtype

    def concept_index(self, name: str) -> int:
        if name == NULL_CONCEPT:
            return self.null_index
        if name not in self.class_to_idx:
            raise ValueError(f"unknown concept {name!r}; classes: {self.class_names}")
        return self.class_to_idx[name]

    def concept_vector(self, name: str) -> torch.Tensor:
        return self.class_embed.weight[self.concept_index(name)].detach().clone()

    def conditioning_layer_shapes(self) -> dict[str, tuple[int, int]]:
        """(out, in) dims of every conditioning projection, for adapters."""
        shapes = {}
        for name, module in self.named_modules():
            if isinstance(module, _Block):
                lin = module.cond_proj
                shapes[f"{name}.cond_proj"] = (lin.out_features, lin.in_features)
        return shapes

    def _validate_adapter(self, adapter: AdapterWeights) -> AdapterWeights:
        shapes = self.conditioning_layer_shapes()
        for name, down in adapter.down.items():
            if name not in shapes:
                raise ValueError(f"adapter targets unknown layer {name!r}")
            d_out, d_in = shapes[name]
            up = adapter.up[name]
            if tuple(down.shape) != (adapter.rank, d_in) or tuple(up.shape) != (d_out, adapter.rank):
                raise ValueError(
                    f"adapter shape mismatch at {name!r}: down {tuple(down.shape)}, "
                    f"up {tuple(up.shape)}, expected ({adapter.rank}, {d_in}) / ({d_out}, {adapter.rank})"
                )
        return adapter

    def resolve_conditioning(self, spec: ConditioningSpec) -> ToyConditioning:
        if spec.learned_embedding is not None:
            vec = torch.as_tensor(spec.learned_embedding, dtype=self.dtype)
            if vec.shape != (self.emb_dim,):
                raise ValueError(
                    f"learned embedding must have shape ({self.emb_dim},), got {tuple(vec.shape)}"
                )
        else:
            vec = self.class_embed.weight[self.concept_index(spec.concept)]
        adapter = self._validate_adapter(spec.adapter_weights) if spec.adapter_weights else None
        return ToyConditioning(vec=vec, adapter=adapter)

    def resolve_negative(self, spec: ConditioningSpec) -> ToyConditioning:
        idx = self.concept_index(spec.negative) if spec.negative else self.null_index
        adapter = self._validate_adapter(spec.adapter_weights) if spec.adapter_weights else None
        return ToyConditioning(vec=self.class_embed.weight[idx], adapter=adapter)

    # --- forward ------------------------------------------------------

    def _embeddings(self, z, tau, cond: ToyConditioning):
        B = z.shape[0]
        if isinstance(tau, int):
            tau = torch.full((B,), tau, dtype=torch.long, device=z.device)
        t_emb = self.time_mlp(_timestep_embedding(tau, _TIME_DIM, self.dtype, z.device))
        vec = cond.vec.to(self.dtype)
        c_emb = vec.expand(B, -1) if vec.dim() == 1 else vec
        deltas = None
        if cond.adapter is not None:
            deltas = {
                name: cond.adapter.delta(name, c_emb)
                for name in cond.adapter.down
            }
        return t_emb, c_emb, deltas

    def _block(self, name: str, h, t_emb, c_emb, deltas):
        block = getattr(self, name)
        delta = deltas.get(f"{name}.cond_proj") if deltas else None
        return block(h, t_emb, c_emb, cond_delta=delta)

    def _encode(self, z, t_emb, c_emb, deltas, taps, replace, stop_at=None):
        acts = {}

        def tap(name, h):
            if name in replace:
                h = replace[name]
            if name in taps:
                acts[name] = h
            return h

        h1 = tap("enc_full", self._block("enc_full", self.conv_in(z), t_emb, c_emb, deltas))
        if stop_at == "enc_full":
            return None, None, acts
        h2 = tap("enc_half", self._block("enc_half", self.down_half(h1), t_emb, c_emb, deltas))
        if stop_at == "enc_half":
            return None, None, acts
        h3 = tap(
            "enc_quarter", self._block("enc_quarter", self.down_quarter(h2), t_emb, c_emb, deltas)
        )
        if stop_at == "enc_quarter":
            return None, None, acts
        m = tap("bottleneck", self._block("mid", self.down_eighth(h3), t_emb, c_emb, deltas))
        return m, (h1, h2, h3), acts

    def forward_raw(self, z, tau, cond: ToyConditioning, *, taps=(), replace=None):
        for t in taps:
            self.check_tap(t)
        replace = replace or {}
        for t in replace:
            self.check_tap(t)
        t_emb, c_emb, deltas = self._embeddings(z, tau, cond)
        m, (h1, h2, h3), acts = self._encode(z, t_emb, c_emb, deltas, taps, replace)

        def up(conv, h):
            return conv(F.interpolate(h, scale_factor=2, mode="nearest"))

        def tap(name, h):
            if name in replace:
                h = replace[name]
            if name in taps:
                acts[name] = h
            return h

        u3 = tap(
            "dec_quarter",
            self._block(
                "dec_quarter", torch.cat([up(self.up_quarter, m), h3], dim=1), t_emb, c_emb, deltas
            ),
        )
        u2 = tap(
            "dec_half",
            self._block(
                "dec_half", torch.cat([up(self.up_half, u3), h2], dim=1), t_emb, c_emb, deltas
            ),
        )
        u1 = tap(
            "dec_full",
            self._block(
                "dec_full", torch.cat([up(self.up_full, u2), h1], dim=1), t_emb, c_emb, deltas
            ),
        )
        eps = self.conv_out(F.silu(self.norm_out(u1)))
        return eps, acts

    def activation(self, z, tau, cond: ToyConditioning, tap: str) -> torch.Tensor:
        """Activation at ``tap``; encoder-side taps stop the pass early."""
        self.check_tap(tap)
        if tap not in _ENCODER_TAPS:
            _, acts = self.forward_raw(z, tau, cond, taps=(tap,))
            return acts[tap]
        t_emb, c_emb, deltas = self._embeddings(z, tau, cond)
        _, _, acts = self._encode(z, t_emb, c_emb, deltas, (tap,), {}, stop_at=tap)
        return acts[tap]

    def sampling_schedule(self, num_steps: int) -> DiffusionSchedule:
        """Schedule matching this model's training beta range."""
        return build_schedule(
            num_steps, self.train_steps, beta_start=self.beta_start, beta_end=self.beta_end
        )


def train_toy_denoiser(
    dataset: ToyDataset,
    epochs: int = 40,
    seed: int = 0,
    *,
    batch_size: int = 64,
    lr: float = 2e-3,
    base_channels: int = 16,
    emb_dim: int = 96,
    train_steps: int = 1000,
    uncond_prob: float = 0.1,
) -> ToyDenoiser:
    """Train the denoiser on a toy dataset with the standard noise-prediction loss.

    A fraction of examples is trained against the null class so that
    classifier-free guidance has an unconditional branch.  Deterministic for
    a fixed (dataset, seed) on one machine.
    """
    if len(dataset.images) == 0:
        raise ValueError("dataset is empty")
    model = ToyDenoiser(
        dataset.class_names,
        image_size=dataset.spec.image_size,
        base_channels=base_channels,
        emb_dim=emb_dim,
        train_steps=train_steps,
        seed=seed,
    )
    x_all = torch.from_numpy(dataset.images)
    y_all = torch.from_numpy(dataset.class_ids)
    alpha_bar = model.train_alpha_bar.to(torch.float32)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)

    losses = []
    model.train()
    for _ in range(epochs):
        perm = torch.randperm(len(x_all), generator=gen)
        for start in range(0, len(perm), batch_size):
            idx = perm[start : start + batch_size]
            x, y = x_all[idx], y_all[idx].clone()
            t = torch.randint(0, train_steps, (len(idx),), generator=gen)
            noise = torch.randn(x.shape, generator=gen)
            drop = torch.rand(len(idx), generator=gen) < uncond_prob
            y[drop] = model.null_index
            ab = alpha_bar[t].view(-1, 1, 1, 1)
            z = ab.sqrt() * x + (1 - ab).sqrt() * noise
            eps_hat, _ = model.forward_raw(z, t, ToyConditioning(vec=model.class_embed(y)))
            loss = F.mse_loss(eps_hat, noise)
            if not torch.isfinite(loss):
                raise TrainingFailure(f"denoiser training diverged at update {len(losses)}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
    model.eval()
    model.training_log = {
        "epochs": epochs,
        "lr": lr,
        "seed": seed,
        "updates": len(losses),
        "loss_first": losses[0],
        "loss_last": float(np.mean(losses[-10:])),
    }
    return model
