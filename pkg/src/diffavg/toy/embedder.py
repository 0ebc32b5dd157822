"""Small trained image encoder standing in for a large semantic embedding space.

Maps images to unit-norm vectors (32-dim by default).  Attribute-conditioned
heads give grounded embeddings that separate by a chosen ground-truth
attribute; classifier heads over classes and modes back the accuracy checks
used throughout the test suite.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import TrainingFailure
from .data import ToyDataset

__all__ = ["ToyEmbedder", "embed", "train_toy_embedder"]


def _as_batch(images, dtype=torch.float32) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        x = images.detach().to(dtype)
    else:
        x = torch.as_tensor(np.asarray(images), dtype=dtype)
    if x.dim() == 3:
        x = x[None]
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) images, got {tuple(x.shape)}")
    if x.abs().max() > 1.0 + 1e-4:
        raise ValueError("images must lie in [-1, 1]")
    return x


class ToyEmbedder(nn.Module):
    def __init__(
        self,
        class_names: list[str],
        mode_names: list[str],
        attribute_values: dict[str, list[str]],
        embed_dim: int = 32,
        attr_dim: int = 16,
        base: int = 16,
        seed: int = 0,
    ):
        super().__init__()
        self.class_names = list(class_names)
        self.mode_names = list(mode_names)
        self.attribute_values = {k: list(v) for k, v in attribute_values.items()}
        self.embed_dim = embed_dim
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.trunk = nn.Sequential(
                nn.Conv2d(3, base, 3, stride=2, padding=1),
                nn.SiLU(),
                nn.Conv2d(base, 2 * base, 3, stride=2, padding=1),
                nn.SiLU(),
                nn.Conv2d(2 * base, 4 * base, 3, stride=2, padding=1),
                nn.SiLU(),
            )
            feat = 4 * base
            self.feat_proj = nn.Linear(feat, embed_dim)
            self.class_head = nn.Linear(feat, len(class_names))
            self.mode_head = nn.Linear(embed_dim, len(mode_names))
            self.attr_proj = nn.ModuleDict(
                {k: nn.Linear(feat, attr_dim) for k in self.attribute_values}
            )
            self.attr_head = nn.ModuleDict(
                {k: nn.Linear(attr_dim, len(v)) for k, v in self.attribute_values.items()}
            )

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk(x).mean(dim=(2, 3))

    def embed_batch(self, images, attribute: str | None = None) -> torch.Tensor:
        x = _as_batch(images)
        f = self.features(x)
        if attribute is None:
            e = self.feat_proj(f)
        else:
            if attribute not in self.attr_proj:
                raise ValueError(
                    f"unknown attribute {attribute!r}; known: {sorted(self.attr_proj)}"
                )
            e = self.attr_proj[attribute](f)
        return F.normalize(e, dim=1)

    @torch.no_grad()
    def predict_class(self, images) -> np.ndarray:
        logits = self.class_head(self.features(_as_batch(images)))
        return logits.argmax(dim=1).numpy()

    @torch.no_grad()
    def predict_mode(self, images) -> np.ndarray:
        logits = self.mode_head(self.feat_proj(self.features(_as_batch(images))))
        return logits.argmax(dim=1).numpy()


def embed(embedder: ToyEmbedder, images, attribute: str | None = None) -> np.ndarray:
    """Unit-norm embedding matrix, one row per image."""
    with torch.no_grad():
        return embedder.embed_batch(images, attribute).numpy()


def train_toy_embedder(
    dataset: ToyDataset,
    seed: int = 0,
    *,
    epochs: int = 30,
    batch_size: int = 64,
    lr: float = 2e-3,
) -> ToyEmbedder:
    """Supervised multi-head training on class, mode, and attribute labels."""
    if len(dataset.images) == 0:
        raise ValueError("dataset is empty")
    attr_values = dataset.attribute_values()
    model = ToyEmbedder(dataset.class_names, dataset.mode_names, attr_values, seed=seed)

    x_all = torch.from_numpy(dataset.images)
    y_class = torch.from_numpy(dataset.class_ids)
    y_mode = torch.from_numpy(dataset.global_mode_ids())
    y_attr = {
        k: torch.tensor([attr_values[k].index(a.get(k)) for a in dataset.attributes])
        for k in attr_values
    }
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)

    model.train()
    final_loss = None
    for _ in range(epochs):
        perm = torch.randperm(len(x_all), generator=gen)
        for start in range(0, len(perm), batch_size):
            idx = perm[start : start + batch_size]
            f = model.features(x_all[idx])
            emb = model.feat_proj(f)
            loss = F.cross_entropy(model.class_head(f), y_class[idx])
            loss = loss + F.cross_entropy(model.mode_head(emb), y_mode[idx])
            for k in attr_values:
                loss = loss + F.cross_entropy(
                    model.attr_head[k](model.attr_proj[k](f)), y_attr[k][idx]
                )
            if not torch.isfinite(loss):
                raise TrainingFailure("embedder training diverged")
            opt.zero_grad()
            loss.backward()
            opt.step()
            final_loss = float(loss.detach())
    model.eval()
    model.training_log = {"epochs": epochs, "lr": lr, "seed": seed, "loss_last": final_loss}
    return model
