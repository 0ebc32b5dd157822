"""Self-describing binary containers: a weights.npz plus a JSON sidecar.

Models, embedders, refinement artifacts, and run-state checkpoints all use
the same layout, so external adapters can persist through the same seam.
Tensors round-trip bitwise (numpy preserves dtype and bits).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .adapter import AdapterWeights, AffineDenoiser, Denoiser
from .averaging import LatentBatch, RunState
from ._version import __version__

__all__ = [
    "load_artifact",
    "load_container",
    "load_denoiser",
    "load_embedder",
    "load_run_state",
    "save_artifact",
    "save_container",
    "save_denoiser",
    "save_embedder",
    "save_run_state",
]


def save_container(path, arrays: dict[str, np.ndarray], meta: dict) -> list[Path]:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    weights = path / "weights.npz"
    np.savez(weights, **arrays)
    sidecar = path / "meta.json"
    sidecar.write_text(json.dumps({"version": __version__, **meta}, indent=2, sort_keys=True))
    return [weights, sidecar]


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with np.load(path / "weights.npz") as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads((path / "meta.json").read_text())
    return arrays, meta


def _state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, arrays: dict[str, np.ndarray]):
    module.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    module.eval()


def save_denoiser(model: Denoiser, path) -> list[Path]:
    if isinstance(model, AffineDenoiser):
        arrays = {}
        for i, (a, b) in enumerate(zip(model.scales, model.shifts)):
            arrays[f"scale_{i}"] = a.numpy()
            arrays[f"shift_{i}"] = b.numpy()
        for name, off in model.concept_offsets.items():
            arrays[f"offset.{name}"] = off.numpy()
        meta = {
            "kind": "affine-mock",
            "blocks": len(model.scales),
            "latent_shape": list(model.latent_shape),
            "train_steps": model.train_steps,
            "taps": list(model.activation_layers),
            "bottleneck": model.bottleneck_layer,
            "codec": "identity",
        }
        return save_container(path, arrays, meta)

    meta = {
        "kind": "toy-unet",
        "class_names": model.class_names,
        "image_size": model.image_size,
        "base_channels": model.base_channels,
        "emb_dim": model.emb_dim,
        "train_steps": model.train_steps,
        "beta_start": model.beta_start,
        "beta_end": model.beta_end,
        "latent_shape": list(model.latent_shape),
        "taps": list(model.activation_layers),
        "bottleneck": model.bottleneck_layer,
        "codec": "identity",
        "training_log": getattr(model, "training_log", {}),
    }
    return save_container(path, _state_arrays(model), meta)


def load_denoiser(path) -> Denoiser:
    arrays, meta = load_container(path)
    kind = meta["kind"]
    if kind == "affine-mock":
        scales = [arrays[f"scale_{i}"] for i in range(meta["blocks"])]
        shifts = [arrays[f"shift_{i}"] for i in range(meta["blocks"])]
        offsets = {
            k.split(".", 1)[1]: torch.from_numpy(v)
            for k, v in arrays.items()
            if k.startswith("offset.")
        }
        return AffineDenoiser(
            scales,
            shifts,
            latent_shape=tuple(meta["latent_shape"]),
            train_steps=meta["train_steps"],
            concept_offsets=offsets,
        )
    if kind == "toy-unet":
        from .toy.denoiser import ToyDenoiser

        model = ToyDenoiser(
            meta["class_names"],
            image_size=meta["image_size"],
            base_channels=meta["base_channels"],
            emb_dim=meta["emb_dim"],
            train_steps=meta["train_steps"],
            beta_start=meta["beta_start"],
            beta_end=meta["beta_end"],
        )
        _load_state(model, arrays)
        model.training_log = meta.get("training_log", {})
        return model
    raise ValueError(f"unknown model container kind {kind!r}")


def save_embedder(embedder, path) -> list[Path]:
    meta = {
        "kind": "toy-embedder",
        "class_names": embedder.class_names,
        "mode_names": embedder.mode_names,
        "attribute_values": embedder.attribute_values,
        "embed_dim": embedder.embed_dim,
        "training_log": getattr(embedder, "training_log", {}),
    }
    return save_container(path, _state_arrays(embedder), meta)


def load_embedder(path):
    from .toy.embedder import ToyEmbedder

    arrays, meta = load_container(path)
    if meta["kind"] != "toy-embedder":
        raise ValueError(f"not an embedder container: {meta['kind']!r}")
    embedder = ToyEmbedder(
        meta["class_names"],
        meta["mode_names"],
        meta["attribute_values"],
        embed_dim=meta["embed_dim"],
    )
    _load_state(embedder, arrays)
    return embedder


def save_artifact(artifact, path) -> list[Path]:
    from .modes import RefinementArtifact

    assert isinstance(artifact, RefinementArtifact)
    meta = {
        "kind": artifact.kind,
        "log": artifact.log,
        "source_cluster": artifact.source_cluster,
    }
    if artifact.kind == "inversion-embedding":
        arrays = {"payload": artifact.payload.detach().cpu().numpy()}
    else:
        adapter: AdapterWeights = artifact.payload
        arrays = {}
        for name in adapter.down:
            arrays[f"down.{name}"] = adapter.down[name].detach().cpu().numpy()
            arrays[f"up.{name}"] = adapter.up[name].detach().cpu().numpy()
        meta["rank"] = adapter.rank
        meta["scale"] = adapter.scale
    return save_container(path, arrays, meta)


def load_artifact(path):
    from .modes import RefinementArtifact

    arrays, meta = load_container(path)
    if meta["kind"] == "inversion-embedding":
        payload = torch.from_numpy(arrays["payload"])
    else:
        down = {
            k.split(".", 1)[1]: torch.from_numpy(v)
            for k, v in arrays.items()
            if k.startswith("down.")
        }
        up = {
            k.split(".", 1)[1]: torch.from_numpy(v)
            for k, v in arrays.items()
            if k.startswith("up.")
        }
        payload = AdapterWeights(rank=meta["rank"], down=down, up=up, scale=meta["scale"])
    return RefinementArtifact(
        kind=meta["kind"],
        payload=payload,
        log=meta["log"],
        source_cluster=meta["source_cluster"],
    )


def save_run_state(state: RunState, path) -> list[Path]:
    arrays = {"latents": state.batch.latents.detach().cpu().numpy()}
    if state.rng_state is not None:
        arrays["rng_state"] = np.frombuffer(state.rng_state, dtype=np.uint8)
    if state.batch.opt_m is not None:
        arrays["opt_m"] = state.batch.opt_m.numpy()
        arrays["opt_v"] = state.batch.opt_v.numpy()
    meta = {
        "kind": "run-state",
        "step": state.batch.step,
        "concept": state.batch.concept,
        "seed": state.batch.seed,
        "config_hash": state.config_hash,
        "completed_steps": state.completed_steps,
    }
    return save_container(path, arrays, meta)


def load_run_state(path) -> RunState:
    arrays, meta = load_container(path)
    if meta["kind"] != "run-state":
        raise ValueError(f"not a run-state container: {meta['kind']!r}")
    batch = LatentBatch(
        latents=torch.from_numpy(arrays["latents"]),
        step=meta["step"],
        concept=meta["concept"],
        seed=meta["seed"],
        opt_m=torch.from_numpy(arrays["opt_m"]) if "opt_m" in arrays else None,
        opt_v=torch.from_numpy(arrays["opt_v"]) if "opt_v" in arrays else None,
    )
    rng = arrays["rng_state"].tobytes() if "rng_state" in arrays else None
    return RunState(
        batch=batch,
        config_hash=meta["config_hash"],
        completed_steps=meta["completed_steps"],
        rng_state=rng,
    )
