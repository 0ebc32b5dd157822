"""Deterministic synthetic image sets with controllable modes.

Images are 3-channel float32 arrays in [-1, 1] rendered from small shape
programs (shape kind, color, position/size/color jitter).  Every sample
carries ground-truth class, mode, and attribute labels, and generation is a
pure function of (spec, seed): per-sample RNG streams are derived from
(seed, class index, sample index), so regeneration and per-sample parallel
generation agree bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..imageio import load_image_png, save_image_png

__all__ = [
    "ClassSpec",
    "ModeSpec",
    "PALETTE",
    "SHAPES",
    "ToyDataset",
    "ToyDatasetSpec",
    "default_spec",
    "generate_dataset",
    "load_dataset",
    "save_dataset",
    "single_mode_spec",
    "two_mode_spec",
]

PALETTE = {
    "red": (0.90, -0.55, -0.55),
    "green": (-0.55, 0.80, -0.50),
    "blue": (-0.55, -0.45, 0.90),
    "yellow": (0.90, 0.80, -0.65),
    "magenta": (0.85, -0.60, 0.85),
    "cyan": (-0.60, 0.80, 0.85),
    "white": (0.85, 0.85, 0.85),
}

SHAPES = ("disc", "square", "diamond", "ring", "cross")

BACKGROUND = -0.85


@dataclass(frozen=True)
class ModeSpec:
    """One render program: a shape with jittered placement and color."""

    shape: str
    color: str
    center: tuple[float, float] = (0.5, 0.5)
    size: float = 0.28
    position_jitter: float = 0.0
    size_jitter: float = 0.0
    color_jitter: float = 0.0
    weight: float = 1.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; known: {SHAPES}")
        if self.color not in PALETTE:
            raise ValueError(f"unknown color {self.color!r}; known: {tuple(PALETTE)}")
        if self.weight <= 0:
            raise ValueError("mode weight must be positive")


@dataclass(frozen=True)
class ClassSpec:
    name: str
    modes: tuple[ModeSpec, ...]

    def __post_init__(self):
        if not self.modes:
            raise ValueError(f"class {self.name!r} needs at least one mode")


@dataclass(frozen=True)
class ToyDatasetSpec:
    classes: tuple[ClassSpec, ...]
    samples_per_class: int = 256
    image_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.classes:
            raise ValueError("dataset spec needs at least one class")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")


@dataclass
class ToyDataset:
    """Labeled image set: float32 images in [-1, 1], one row per sample."""

    images: np.ndarray  # (N, 3, H, W)
    class_ids: np.ndarray  # (N,)
    mode_ids: np.ndarray  # (N,) index within the sample's class
    attributes: list[dict]
    spec: ToyDatasetSpec

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.spec.classes]

    @property
    def mode_names(self) -> list[str]:
        """Global mode vocabulary as ``class:index`` strings."""
        names = []
        for c in self.spec.classes:
            names.extend(f"{c.name}:{i}" for i in range(len(c.modes)))
        return names

    def global_mode_ids(self) -> np.ndarray:
        offsets = np.cumsum([0] + [len(c.modes) for c in self.spec.classes[:-1]])
        return offsets[self.class_ids] + self.mode_ids

    def attribute_values(self) -> dict[str, list[str]]:
        values: dict[str, set] = {}
        for att in self.attributes:
            for k, v in att.items():
                values.setdefault(k, set()).add(v)
        return {k: sorted(v) for k, v in sorted(values.items())}

    def subset(self, indices) -> "ToyDataset":
        idx = np.asarray(indices)
        return ToyDataset(
            images=self.images[idx],
            class_ids=self.class_ids[idx],
            mode_ids=self.mode_ids[idx],
            attributes=[self.attributes[i] for i in idx],
            spec=self.spec,
        )


def _mode_counts(weights: np.ndarray, n: int) -> np.ndarray:
    """Largest-remainder allocation; exact counts, no sampling noise."""
    share = weights / weights.sum() * n
    counts = np.floor(share).astype(int)
    remainder = share - counts
    for i in np.argsort(-remainder, kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts


def _signed_distance(shape: str, dx, dy, size: float):
    if shape == "disc":
        return np.sqrt(dx * dx + dy * dy) - size
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) - size
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) - size
    if shape == "ring":
        return np.abs(np.sqrt(dx * dx + dy * dy) - size) - 0.35 * size
    if shape == "cross":
        w = 0.30 * size
        horiz = np.maximum(np.abs(dx) - size, np.abs(dy) - w)
        vert = np.maximum(np.abs(dy) - size, np.abs(dx) - w)
        return np.minimum(horiz, vert)
    raise ValueError(f"unknown shape {shape!r}")


def _render(mode: ModeSpec, image_size: int, rng: np.random.Generator) -> np.ndarray:
    dxy = rng.uniform(-mode.position_jitter, mode.position_jitter, size=2)
    dsize = rng.uniform(-mode.size_jitter, mode.size_jitter)
    dcol = rng.uniform(-mode.color_jitter, mode.color_jitter, size=3)

    cx = mode.center[0] + dxy[0]
    cy = mode.center[1] + dxy[1]
    size = mode.size * (1.0 + dsize)
    color = np.clip(np.array(PALETTE[mode.color]) + dcol, -1.0, 1.0)

    coords = (np.arange(image_size, dtype=np.float64) + 0.5) / image_size
    dy = coords[:, None] - cy
    dx = coords[None, :] - cx
    sdf = _signed_distance(mode.shape, dx, dy, size)
    edge = 1.5 / image_size
    mask = np.clip(0.5 - sdf / edge, 0.0, 1.0)

    img = BACKGROUND + mask[None, :, :] * (color[:, None, None] - BACKGROUND)
    return img.astype(np.float32)


def generate_dataset(spec: ToyDatasetSpec) -> ToyDataset:
    """Render the full labeled set; bitwise deterministic for a given spec."""
    images, class_ids, mode_ids, attributes = [], [], [], []
    for ci, cls in enumerate(spec.classes):
        weights = np.array([m.weight for m in cls.modes], dtype=np.float64)
        counts = _mode_counts(weights, spec.samples_per_class)
        sample_modes = np.repeat(np.arange(len(cls.modes)), counts)
        for k, mi in enumerate(sample_modes):
            rng = np.random.default_rng((spec.seed, ci, k))
            mode = cls.modes[mi]
            images.append(_render(mode, spec.image_size, rng))
            class_ids.append(ci)
            mode_ids.append(int(mi))
            attributes.append({"shape": mode.shape, "color": mode.color})
    return ToyDataset(
        images=np.stack(images),
        class_ids=np.array(class_ids, dtype=np.int64),
        mode_ids=np.array(mode_ids, dtype=np.int64),
        attributes=attributes,
        spec=spec,
    )


def single_mode_spec(
    samples: int = 256,
    seed: int = 0,
    image_size: int = 32,
    jitter: float = 0.16,
) -> ToyDatasetSpec:
    """One class, one mode, with enough jitter that samples visibly vary."""
    cls = ClassSpec(
        name="dot",
        modes=(
            ModeSpec(
                shape="disc",
                color="red",
                size=0.26,
                position_jitter=jitter,
                size_jitter=0.18,
                color_jitter=0.08,
            ),
        ),
    )
    return ToyDatasetSpec(classes=(cls,), samples_per_class=samples, seed=seed, image_size=image_size)


def two_mode_spec(
    samples: int = 256,
    seed: int = 0,
    image_size: int = 32,
) -> ToyDatasetSpec:
    """One class with two well-separated modes (shape and color differ)."""
    cls = ClassSpec(
        name="mark",
        modes=(
            ModeSpec(
                shape="square",
                color="blue",
                center=(0.40, 0.50),
                size=0.22,
                position_jitter=0.07,
                size_jitter=0.10,
                color_jitter=0.05,
            ),
            ModeSpec(
                shape="cross",
                color="yellow",
                center=(0.60, 0.50),
                size=0.30,
                position_jitter=0.07,
                size_jitter=0.10,
                color_jitter=0.05,
            ),
        ),
    )
    return ToyDatasetSpec(classes=(cls,), samples_per_class=samples, seed=seed, image_size=image_size)


def default_spec(samples_per_class: int = 256, seed: int = 0, image_size: int = 32) -> ToyDatasetSpec:
    """Three classes: a jittered single-mode class, a two-mode class, a ring class."""
    dot = single_mode_spec(seed=seed, image_size=image_size).classes[0]
    mark = two_mode_spec(seed=seed, image_size=image_size).classes[0]
    ring = ClassSpec(
        name="ring",
        modes=(
            ModeSpec(
                shape="ring",
                color="green",
                size=0.30,
                position_jitter=0.10,
                size_jitter=0.12,
                color_jitter=0.06,
            ),
        ),
    )
    return ToyDatasetSpec(
        classes=(dot, mark, ring),
        samples_per_class=samples_per_class,
        seed=seed,
        image_size=image_size,
    )


def _spec_to_dict(spec: ToyDatasetSpec) -> dict:
    return {
        "image_size": spec.image_size,
        "samples_per_class": spec.samples_per_class,
        "seed": spec.seed,
        "classes": [
            {
                "name": c.name,
                "modes": [
                    {
                        "shape": m.shape,
                        "color": m.color,
                        "center": list(m.center),
                        "size": m.size,
                        "position_jitter": m.position_jitter,
                        "size_jitter": m.size_jitter,
                        "color_jitter": m.color_jitter,
                        "weight": m.weight,
                    }
                    for m in c.modes
                ],
            }
            for c in spec.classes
        ],
    }


def _spec_from_dict(d: dict) -> ToyDatasetSpec:
    classes = tuple(
        ClassSpec(
            name=c["name"],
            modes=tuple(
                ModeSpec(
                    shape=m["shape"],
                    color=m["color"],
                    center=tuple(m["center"]),
                    size=m["size"],
                    position_jitter=m["position_jitter"],
                    size_jitter=m["size_jitter"],
                    color_jitter=m["color_jitter"],
                    weight=m["weight"],
                )
                for m in c["modes"]
            ),
        )
        for c in d["classes"]
    )
    return ToyDatasetSpec(
        classes=classes,
        samples_per_class=d["samples_per_class"],
        image_size=d["image_size"],
        seed=d["seed"],
    )


def save_dataset(dataset: ToyDataset, root) -> list[Path]:
    """Persist as an image directory plus a JSON-lines labels file."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    written = []
    lines = []
    names = dataset.class_names
    for i in range(len(dataset.images)):
        rel = f"images/{i:06d}.png"
        save_image_png(dataset.images[i], root / rel)
        lines.append(
            json.dumps(
                {
                    "path": rel,
                    "class": names[dataset.class_ids[i]],
                    "mode": int(dataset.mode_ids[i]),
                    "attributes": dataset.attributes[i],
                },
                sort_keys=True,
            )
        )
        written.append(root / rel)
    labels = root / "labels.jsonl"
    labels.write_text("\n".join(lines) + "\n")
    spec_file = root / "spec.json"
    spec_file.write_text(json.dumps(_spec_to_dict(dataset.spec), indent=2, sort_keys=True))
    return written + [labels, spec_file]


def load_dataset(root) -> ToyDataset:
    root = Path(root)
    spec = _spec_from_dict(json.loads((root / "spec.json").read_text()))
    names = {c.name: i for i, c in enumerate(spec.classes)}
    images, class_ids, mode_ids, attributes = [], [], [], []
    for line in (root / "labels.jsonl").read_text().splitlines():
        row = json.loads(line)
        images.append(load_image_png(root / row["path"]))
        class_ids.append(names[row["class"]])
        mode_ids.append(row["mode"])
        attributes.append(row["attributes"])
    return ToyDataset(
        images=np.stack(images),
        class_ids=np.array(class_ids, dtype=np.int64),
        mode_ids=np.array(mode_ids, dtype=np.int64),
        attributes=attributes,
        spec=spec,
    )
