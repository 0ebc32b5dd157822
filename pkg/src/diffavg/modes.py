"""Mode discovery and per-cluster averaging.

Samples of one concept are embedded, reduced with PCA, and clustered with a
full-covariance Gaussian mixture; cluster labels map back to the latents that
produced the samples.  Each cluster's conditioning can then be refined with a
learned embedding vector or a low-rank adapter (both trained on the cluster's
images with frozen model weights) before running the averaging loop on the
cluster's latents.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.decomposition import PCA
from sklearn.mixture import GaussianMixture

from .adapter import AdapterWeights, ConditioningSpec, Denoiser, apply_conditioning
from .averaging import AverageConfig, AverageResult, trajectory_average
from .errors import TrainingFailure
from .schedule import DiffusionSchedule, GuidanceSpec
from .toy.denoiser import ToyConditioning

__all__ = [
    "ClusterAssignment",
    "ClusterPrototypes",
    "RefinementArtifact",
    "cluster_samples",
    "map_labels_to_latents",
    "per_cluster_average",
    "train_inversion_embedding",
    "train_lowrank_adapter",
    "zero_adapter",
]

log = logging.getLogger(__name__)

# Inference guidance scales paired with each refinement kind.
REFINEMENT_GUIDANCE = {"adapter": 3.0, "inversion": 7.0}


@dataclass
class ClusterAssignment:
    """Per-sample cluster ids plus the PCA/GMM artifacts that produced them."""

    labels: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    weights: np.ndarray
    pca_components: np.ndarray
    pca_mean: np.ndarray
    pca_explained_variance_ratio: np.ndarray
    embedder_id: str
    pca_dims: int
    n_clusters: int
    seed: int

    def validate(self):
        if self.labels.min() < 0 or self.labels.max() >= self.n_clusters:
            raise ValueError("labels outside [0, n_clusters)")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to 1")
        gram = self.pca_components @ self.pca_components.T
        if np.abs(gram - np.eye(self.pca_dims)).max() > 1e-6:
            raise ValueError("PCA components must be orthonormal")

    def cluster_sizes(self) -> list[int]:
        return [int((self.labels == c).sum()) for c in range(self.n_clusters)]

    def to_dict(self) -> dict:
        return {
            "labels": self.labels.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "weights": self.weights.tolist(),
            "pca_components": self.pca_components.tolist(),
            "pca_mean": self.pca_mean.tolist(),
            "pca_explained_variance_ratio": self.pca_explained_variance_ratio.tolist(),
            "embedder_id": self.embedder_id,
            "pca_dims": self.pca_dims,
            "n_clusters": self.n_clusters,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterAssignment":
        return cls(
            labels=np.array(d["labels"], dtype=np.int64),
            means=np.array(d["means"]),
            covariances=np.array(d["covariances"]),
            weights=np.array(d["weights"]),
            pca_components=np.array(d["pca_components"]),
            pca_mean=np.array(d["pca_mean"]),
            pca_explained_variance_ratio=np.array(d["pca_explained_variance_ratio"]),
            embedder_id=d["embedder_id"],
            pca_dims=d["pca_dims"],
            n_clusters=d["n_clusters"],
            seed=d["seed"],
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "ClusterAssignment":
        return cls.from_dict(json.loads(Path(path).read_text()))


def cluster_samples(
    embeddings,
    pca_dims: int,
    n_clusters: int,
    seed: int,
    embedder_id: str = "",
) -> ClusterAssignment:
    """PCA reduction followed by a full-covariance GMM fit.

    Frozen fit settings: k-means++ init, 5 restarts, tol 1e-4, at most 200 EM
    iterations.  A degenerate covariance is retried with a larger diagonal
    jitter and logged.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("embeddings must be a 2-D matrix")
    n, d = X.shape
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    if n < n_clusters:
        raise ValueError(f"need at least n_clusters ({n_clusters}) rows, got {n}")
    if not 1 <= pca_dims <= min(n, d):
        raise ValueError(f"pca_dims {pca_dims} outside [1, {min(n, d)}]")

    pca = PCA(n_components=pca_dims)
    reduced = pca.fit_transform(X)

    reg = 1e-6
    last_err = None
    for _ in range(4):
        gmm = GaussianMixture(
            n_components=n_clusters,
            covariance_type="full",
            n_init=5,
            tol=1e-4,
            max_iter=200,
            init_params="k-means++",
            reg_covar=reg,
            random_state=seed,
        )
        try:
            labels = gmm.fit_predict(reduced)
            break
        except ValueError as err:  # ill-conditioned covariance
            last_err = err
            reg *= 100.0
            log.warning("GMM fit failed, retrying with reg_covar=%g: %s", reg, err)
    else:
        raise ValueError(f"GMM fit failed even with jitter: {last_err}")

    assignment = ClusterAssignment(
        labels=np.asarray(labels, dtype=np.int64),
        means=gmm.means_,
        covariances=gmm.covariances_,
        weights=gmm.weights_,
        pca_components=pca.components_,
        pca_mean=pca.mean_,
        pca_explained_variance_ratio=np.nan_to_num(pca.explained_variance_ratio_),
        embedder_id=embedder_id,
        pca_dims=pca_dims,
        n_clusters=n_clusters,
        seed=seed,
    )
    assignment.validate()
    return assignment


def map_labels_to_latents(assignment, sample_to_latent: Sequence[int]) -> list[list[int]]:
    """Partition latent indices by cluster via the sample->latent bijection."""
    if isinstance(assignment, ClusterAssignment):
        labels, n_clusters = assignment.labels, assignment.n_clusters
    else:
        labels = np.asarray(assignment, dtype=np.int64)
        n_clusters = int(labels.max()) + 1 if len(labels) else 0
    mapping = list(sample_to_latent)
    if len(mapping) != len(labels):
        raise ValueError(
            f"map covers {len(mapping)} samples but there are {len(labels)} labels"
        )
    if len(set(mapping)) != len(mapping):
        raise ValueError("sample->latent map must be a bijection (duplicate index)")
    parts: list[list[int]] = [[] for _ in range(n_clusters)]
    for s, latent_idx in enumerate(mapping):
        parts[int(labels[s])].append(int(latent_idx))
    return parts


@dataclass
class RefinementArtifact:
    """A trained conditioning refinement plus its training log."""

    kind: str  # "inversion-embedding" | "low-rank-adapter"
    payload: object  # torch.Tensor or AdapterWeights
    log: dict
    source_cluster: Optional[int] = None

    def to_spec(self, concept: str) -> ConditioningSpec:
        if self.kind == "inversion-embedding":
            return ConditioningSpec(concept=concept, learned_embedding=self.payload)
        return ConditioningSpec(concept=concept, adapter_weights=self.payload)


def _training_batches(model, images, steps, batch_size, seed):
    """Seeded (noisy latent, timestep, target noise) batches for refinement."""
    x = torch.as_tensor(np.asarray(images), dtype=model.dtype)
    if x.dim() != 4:
        raise ValueError("images must be a (N, 3, H, W) batch")
    gen = torch.Generator().manual_seed(seed)
    alpha_bar = model.train_alpha_bar.to(model.dtype)
    for _ in range(steps):
        idx = torch.randint(0, len(x), (min(batch_size, len(x)),), generator=gen)
        t = torch.randint(0, model.train_steps, (len(idx),), generator=gen)
        noise = torch.randn((len(idx), *x.shape[1:]), generator=gen, dtype=model.dtype)
        ab = alpha_bar[t].view(-1, 1, 1, 1)
        z = ab.sqrt() * x[idx] + (1 - ab).sqrt() * noise
        yield z, t, noise


def train_inversion_embedding(
    model,
    images,
    *,
    concept: str,
    steps: int = 3000,
    lr: float = 1e-2,
    batch_size: int = 32,
    seed: int = 0,
    source_cluster: Optional[int] = None,
) -> RefinementArtifact:
    """Learn a conditioning vector for a cluster with frozen model weights.

    Initialization is the concept's own embedding, so ``steps == 0`` is an
    exact no-op on model outputs.
    """
    if len(images) == 0:
        raise ValueError("cluster is empty")
    vec = model.concept_vector(concept).clone().requires_grad_(True)
    opt = torch.optim.Adam([vec], lr=lr)
    loss_first = loss_last = None
    for z, t, noise in _training_batches(model, images, steps, batch_size, seed):
        eps_hat, _ = model.forward_raw(z, t, ToyConditioning(vec=vec.expand(len(z), -1)))
        loss = (eps_hat - noise).pow(2).mean()
        if not torch.isfinite(loss):
            raise TrainingFailure("inversion embedding training diverged")
        grad = torch.autograd.grad(loss, vec)[0]
        opt.zero_grad()
        vec.grad = grad
        opt.step()
        loss_last = float(loss.detach())
        if loss_first is None:
            loss_first = loss_last
    return RefinementArtifact(
        kind="inversion-embedding",
        payload=vec.detach(),
        log={"steps": steps, "lr": lr, "seed": seed, "loss_first": loss_first, "loss_last": loss_last},
        source_cluster=source_cluster,
    )


def zero_adapter(model, rank: int = 1, seed: int = 0) -> AdapterWeights:
    """Adapter with seeded down factors and zero up factors: an exact no-op."""
    if rank < 1:
        raise ValueError(f"adapter rank must be >= 1, got {rank}")
    gen = torch.Generator().manual_seed(seed)
    down, up = {}, {}
    for name, (d_out, d_in) in model.conditioning_layer_shapes().items():
        down[name] = torch.randn((rank, d_in), generator=gen, dtype=model.dtype) / d_in**0.5
        up[name] = torch.zeros((d_out, rank), dtype=model.dtype)
    return AdapterWeights(rank=rank, down=down, up=up)


def train_lowrank_adapter(
    model,
    images,
    *,
    concept: str,
    rank: int = 1,
    steps: int = 2000,
    lr: float = 1e-4,
    batch_size: int = 32,
    seed: int = 0,
    source_cluster: Optional[int] = None,
) -> RefinementArtifact:
    """Train low-rank deltas on the conditioning pathway for a cluster.

    Up factors start at zero, so the step-0 model equals the base exactly.
    """
    if len(images) == 0:
        raise ValueError("cluster is empty")
    adapter = zero_adapter(model, rank=rank, seed=seed)
    params = []
    for name in adapter.down:
        adapter.down[name].requires_grad_(True)
        adapter.up[name].requires_grad_(True)
        params += [adapter.down[name], adapter.up[name]]
    vec = model.concept_vector(concept)
    opt = torch.optim.Adam(params, lr=lr)
    loss_first = loss_last = None
    for z, t, noise in _training_batches(model, images, steps, batch_size, seed):
        cond = ToyConditioning(vec=vec.expand(len(z), -1), adapter=adapter)
        eps_hat, _ = model.forward_raw(z, t, cond)
        loss = (eps_hat - noise).pow(2).mean()
        if not torch.isfinite(loss):
            raise TrainingFailure("adapter training diverged")
        grads = torch.autograd.grad(loss, params)
        opt.zero_grad()
        for p, g in zip(params, grads):
            p.grad = g
        opt.step()
        loss_last = float(loss.detach())
        if loss_first is None:
            loss_first = loss_last
    return RefinementArtifact(
        kind="low-rank-adapter",
        payload=adapter.detached(),
        log={
            "steps": steps, "lr": lr, "rank": rank, "seed": seed,
            "loss_first": loss_first, "loss_last": loss_last,
        },
        source_cluster=source_cluster,
    )


@dataclass
class ClusterPrototypes:
    cluster: int
    latent_indices: list[int]
    prototypes: torch.Tensor
    artifact: Optional[RefinementArtifact]
    result: AverageResult


def per_cluster_average(
    model: Denoiser,
    schedule: DiffusionSchedule,
    concept: str,
    latents: torch.Tensor,
    images,
    assignment: ClusterAssignment,
    config: AverageConfig,
    *,
    refinement: str = "none",
    refine_steps: Optional[int] = None,
    refine_lr: Optional[float] = None,
    refine_seed: int = 0,
    guidance_scale: Optional[float] = None,
) -> list[ClusterPrototypes]:
    """Refine conditioning per cluster, then average within each cluster.

    ``refinement`` is "none", "inversion", or "adapter"; the trained kinds use
    their paired inference guidance scales (inversion 7.0, adapter 3.0) unless
    ``guidance_scale`` overrides.  Empty clusters are skipped.
    """
    if refinement not in ("none", "inversion", "adapter"):
        raise ValueError(f"unknown refinement {refinement!r}")
    partition = map_labels_to_latents(assignment, range(len(latents)))
    results = []
    for c, idx in enumerate(partition):
        if not idx:
            log.warning("cluster %d is empty, skipping", c)
            continue
        cluster_images = np.asarray(images)[idx]
        artifact = None
        handle = model
        guide = config.guidance
        if refinement == "inversion":
            artifact = train_inversion_embedding(
                model, cluster_images, concept=concept,
                steps=3000 if refine_steps is None else refine_steps,
                lr=1e-2 if refine_lr is None else refine_lr,
                seed=refine_seed + c, source_cluster=c,
            )
            handle = apply_conditioning(model, artifact.to_spec(concept))
            guide = GuidanceSpec(REFINEMENT_GUIDANCE["inversion"], config.guidance.convention)
        elif refinement == "adapter":
            artifact = train_lowrank_adapter(
                model, cluster_images, concept=concept, rank=1,
                steps=2000 if refine_steps is None else refine_steps,
                lr=1e-4 if refine_lr is None else refine_lr,
                seed=refine_seed + c, source_cluster=c,
            )
            handle = apply_conditioning(model, artifact.to_spec(concept))
            guide = GuidanceSpec(REFINEMENT_GUIDANCE["adapter"], config.guidance.convention)
        if guidance_scale is not None:
            guide = GuidanceSpec(guidance_scale, config.guidance.convention)
        sub_config = replace(config, num_latents=len(idx), guidance=guide)
        res = trajectory_average(
            handle, schedule, ConditioningSpec(concept=concept), sub_config, latents=latents[idx]
        )
        results.append(
            ClusterPrototypes(
                cluster=c, latent_indices=idx, prototypes=res.prototypes,
                artifact=artifact, result=res,
            )
        )
    return results
