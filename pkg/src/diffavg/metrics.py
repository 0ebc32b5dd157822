"""Prototype evaluation: consistency, representativeness, report aggregation,
and grid rendering, over pluggable distance backends.

A backend either embeds images and uses cosine distance, or supplies a direct
pairwise distance.  The bundled backends are the toy embedder (cosine) and
pixel MSE; slots for external perceptual embedders exist but ship no weights.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .hashing import canonical_hash
from .imageio import save_image_png, to_uint8

__all__ = [
    "DistanceBackend",
    "MetricsReport",
    "aggregate_report",
    "consistency",
    "cosine_backend",
    "pairwise_backend",
    "pixel_mse_backend",
    "representativeness",
    "render_grid",
    "resolve_backend",
]

REPORT_SCHEMA_VERSION = 1


@dataclass
class DistanceBackend:
    """Distance between images, via an embedding or a direct pairwise function."""

    id: str
    kind: str  # "cosine" | "pixel-mse" | "perceptual-adapter"
    embed_fn: Optional[Callable] = None  # images -> (N, D) array
    pairwise_fn: Optional[Callable] = None  # (image, image) -> float

    def __post_init__(self):
        if (self.embed_fn is None) == (self.pairwise_fn is None):
            raise ValueError("provide exactly one of embed_fn / pairwise_fn")

    def distance_matrix(self, images_a, images_b) -> np.ndarray:
        """Pairwise distances, float64, rows from a, columns from b."""
        a = _as_images(images_a)
        b = _as_images(images_b)
        if self.embed_fn is not None:
            ea = np.asarray(self.embed_fn(a), dtype=np.float64)
            eb = np.asarray(self.embed_fn(b), dtype=np.float64)
            ea = ea / np.linalg.norm(ea, axis=1, keepdims=True)
            eb = eb / np.linalg.norm(eb, axis=1, keepdims=True)
            return 1.0 - ea @ eb.T
        out = np.empty((len(a), len(b)), dtype=np.float64)
        for i in range(len(a)):
            for j in range(len(b)):
                out[i, j] = float(self.pairwise_fn(a[i], b[j]))
        return out


def _as_images(images) -> np.ndarray:
    if hasattr(images, "detach"):
        images = images.detach().cpu().numpy()
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) images, got shape {arr.shape}")
    return arr


def cosine_backend(embedder, attribute: Optional[str] = None, id: Optional[str] = None) -> DistanceBackend:
    """Cosine distance in a trained embedder's (optionally grounded) space."""
    from .toy.embedder import embed

    backend_id = id or ("toy-cosine" if attribute is None else f"toy-cosine[{attribute}]")
    return DistanceBackend(
        id=backend_id,
        kind="cosine",
        embed_fn=lambda imgs: embed(embedder, imgs, attribute),
    )


def pixel_mse_backend() -> DistanceBackend:
    return DistanceBackend(
        id="pixel-mse",
        kind="pixel-mse",
        pairwise_fn=lambda a, b: float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2)),
    )


def pairwise_backend(id: str, fn: Callable) -> DistanceBackend:
    """Adapter slot for an external perceptual distance (weights not bundled)."""
    return DistanceBackend(id=id, kind="perceptual-adapter", pairwise_fn=fn)


def resolve_backend(name: str, embedder=None, attribute: Optional[str] = None) -> DistanceBackend:
    if name == "pixel-mse":
        return pixel_mse_backend()
    if name == "toy-cosine":
        if embedder is None:
            raise ValueError("toy-cosine backend needs an embedder")
        return cosine_backend(embedder, attribute)
    if name == "image-reward":
        raise NotImplementedError(
            "image-reward is a reserved backend id; plug in an external adapter "
            "via pairwise_backend()"
        )
    raise LookupError(f"unknown backend {name!r}; known: toy-cosine, pixel-mse, image-reward")


def consistency(prototypes, backend: DistanceBackend) -> float:
    """Mean backend distance over all unordered prototype pairs (lower = more
    reliable convergence across initializations)."""
    imgs = _as_images(prototypes)
    n = len(imgs)
    if n < 2:
        raise ValueError(f"consistency needs at least 2 prototypes, got {n}")
    dist = backend.distance_matrix(imgs, imgs)
    pairs = [dist[i, j] for i in range(n) for j in range(i + 1, n)]
    return math.fsum(pairs) / len(pairs)


def representativeness(prototype, samples, backend: DistanceBackend) -> float:
    """Mean backend distance from one prototype to every sample in its set."""
    samples = _as_images(samples)
    if len(samples) == 0:
        raise ValueError("sample set is empty")
    dist = backend.distance_matrix(_as_images(prototype), samples)
    return math.fsum(dist[0].tolist()) / len(samples)


@dataclass
class MetricsReport:
    """Raw metric entries plus group means, exactly recomputable from the rows."""

    entries: list[dict]
    grouping: tuple[str, ...]
    groups: list[dict] = field(default_factory=list)
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "grouping": list(self.grouping),
            "groups": self.groups,
            "entries": self.entries,
            "content_hash": canonical_hash(self.entries),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow([*self.grouping, "mean", "count"])
        for g in self.groups:
            writer.writerow([*(g[k] for k in self.grouping), repr(g["mean"]), g["count"]])
        return buf.getvalue()


ENTRY_KEYS = ("concept", "category", "method", "backend", "metric", "value")


def aggregate_report(
    entries: list[dict],
    grouping: tuple[str, ...] = ("category", "method", "backend", "metric"),
) -> MetricsReport:
    """Group entries and average values within each group, deterministically.

    Every entry needs the standard keys; mixing backends is only allowed when
    the grouping separates them.
    """
    for e in entries:
        missing = [k for k in ENTRY_KEYS if k not in e]
        if missing:
            raise ValueError(f"entry {e} missing keys {missing}")
    for key in grouping:
        if key not in ENTRY_KEYS[:-1]:
            raise ValueError(f"cannot group by unknown key {key!r}")
    backends = {e["backend"] for e in entries}
    if len(backends) > 1 and "backend" not in grouping:
        raise ValueError(
            f"entries mix backends {sorted(backends)} but grouping {grouping} "
            "does not separate them"
        )
    buckets: dict[tuple, list[float]] = {}
    for e in entries:
        buckets.setdefault(tuple(e[k] for k in grouping), []).append(float(e["value"]))
    groups = []
    for key in sorted(buckets):
        values = buckets[key]
        groups.append(
            {
                **dict(zip(grouping, key)),
                "mean": math.fsum(values) / len(values),
                "count": len(values),
            }
        )
    return MetricsReport(entries=list(entries), grouping=tuple(grouping), groups=groups)


def render_grid(
    images,
    cols: Optional[int] = None,
    border: int = 2,
    path=None,
) -> np.ndarray:
    """Tile images into one uint8 grid, row-major; optionally save as PNG."""
    imgs = _as_images(images)
    n = len(imgs)
    if n == 0:
        raise ValueError("no images to render")
    cols = cols or math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    tiles = [to_uint8(img) for img in imgs]
    h, w, _ = tiles[0].shape
    grid = np.zeros((rows * (h + border) + border, cols * (w + border) + border, 3), dtype=np.uint8)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        y = border + r * (h + border)
        x = border + c * (w + border)
        grid[y : y + h, x : x + w] = tile
    if path is not None:
        from PIL import Image

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(grid).save(path, format="PNG")
    return grid
