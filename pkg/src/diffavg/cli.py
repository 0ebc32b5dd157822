"""Command-line surface over a content-addressed workspace.

Every subcommand resolves its config from defaults, an optional JSON config
file, and flags (flags win), expands the master seed into per-subsystem
seeds, writes its outputs under the workspace, and records a run manifest.
Rerunning a command whose manifest already matches is a no-op unless
``--force``.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .adapter import ConditioningSpec, decode_image
from .averaging import AverageConfig, init_latents, sample, trajectory_average
from .baselines import BASELINE_KINDS, BaselineConfig, run_baseline
from .hashing import canonical_hash, file_hash
from .imageio import load_image_png, save_image_png
from .manifest import RunManifest, expand_seeds, hash_files, workspace_lock
from .metrics import aggregate_report, consistency, render_grid, representativeness, resolve_backend
from .modes import cluster_samples, per_cluster_average
from .schedule import GuidanceSpec
from .store import load_denoiser, load_embedder, save_artifact, save_denoiser, save_embedder
from .toy.data import default_spec, generate_dataset, load_dataset, save_dataset, single_mode_spec, two_mode_spec
from .toy.denoiser import train_toy_denoiser
from .toy.embedder import embed, train_toy_embedder

__all__ = ["main", "ConfigError", "resolve_config"]


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


@dataclass(frozen=True)
class Opt:
    typ: type
    default: object = None
    help: str = ""
    required: bool = False
    choices: Optional[tuple] = None


_AVERAGE_KEYS = {
    "model": Opt(str, required=True, help="model directory or workspace model name"),
    "concept": Opt(str, required=True, help="concept / class name to condition on"),
    "num_latents": Opt(int, 64, "number of jointly averaged latents"),
    "opt_steps": Opt(int, 20, "optimization iterations per latent per aligned step"),
    "lr": Opt(float, 2e-2, "alignment learning rate"),
    "align_until": Opt(int, 10, "inclusive sampler-step cutoff for alignment"),
    "steps": Opt(int, 20, "sampler steps"),
    "guidance_scale": Opt(float, 1.0, "classifier-free guidance scale"),
    "guidance_convention": Opt(str, "conventional", choices=("conventional", "verbatim")),
    "tap": Opt(str, "bottleneck", "activation tap to align"),
    "capture_branch": Opt(str, "conditional", choices=("conditional", "unconditional", "guided")),
    "decode_count": Opt(int, 1, "how many final latents to decode"),
    "parallel": Opt(bool, False, "optimize latents concurrently instead of sequentially"),
    "seed": Opt(int, 0, "master seed"),
}

COMMAND_SPECS: dict[str, dict[str, Opt]] = {
    "gen-data": {
        "preset": Opt(str, "demo", choices=("demo", "single-mode", "two-mode")),
        "samples_per_class": Opt(int, 256),
        "image_size": Opt(int, 32),
        "seed": Opt(int, 0, "master seed"),
    },
    "train-toy": {
        "dataset": Opt(str, required=True, help="dataset directory or workspace dataset name"),
        "epochs": Opt(int, 40),
        "embedder_epochs": Opt(int, 30),
        "base_channels": Opt(int, 16),
        "emb_dim": Opt(int, 96),
        "train_steps": Opt(int, 1000),
        "lr": Opt(float, 2e-3),
        "batch_size": Opt(int, 64),
        "seed": Opt(int, 0, "master seed"),
    },
    "sample": {
        "model": Opt(str, required=True),
        "concept": Opt(str, required=True),
        "num_latents": Opt(int, 8),
        "steps": Opt(int, 20),
        "guidance_scale": Opt(float, 1.0),
        "guidance_convention": Opt(str, "conventional", choices=("conventional", "verbatim")),
        "decode_count": Opt(int, 8),
        "seed": Opt(int, 0, "master seed"),
    },
    "average": dict(_AVERAGE_KEYS),
    "baseline": {
        "model": Opt(str, required=True),
        "concept": Opt(str, required=True),
        "kind": Opt(str, required=True, choices=BASELINE_KINDS),
        "num_latents": Opt(int, 64),
        "steps": Opt(int, 20),
        "guidance_scale": Opt(float, 1.0),
        "guidance_convention": Opt(str, "conventional", choices=("conventional", "verbatim")),
        "decode_count": Opt(int, 1),
        "inject_steps": Opt(int, 6, "sdedit: denoising steps after noise injection"),
        "mode_weight": Opt(float, 0.1, "mode-guidance weight"),
        "guided_steps": Opt(int, 10, "mode-guidance: guided step count"),
        "opt_step": Opt(int, 0, "single-step: the one aligned step"),
        "align_until": Opt(int, 10, "replacement / precomputed cutoff"),
        "opt_steps": Opt(int, 20),
        "lr": Opt(float, 2e-2),
        "tap": Opt(str, "bottleneck"),
        "parallel": Opt(bool, False),
        "seed": Opt(int, 0, "master seed"),
    },
    "modes": {
        **dict(_AVERAGE_KEYS),
        "embedder": Opt(str, required=True, help="embedder directory or workspace model name"),
        "clusters": Opt(int, 2),
        "pca_dims": Opt(int, 2),
        "attribute": Opt(str, None, "ground clustering on this attribute's embedding"),
        "refinement": Opt(str, "none", choices=("none", "inversion", "adapter")),
        "refine_steps": Opt(int, None, "override refinement training steps"),
        "refine_lr": Opt(float, None, "override refinement learning rate"),
    },
    "ablate": {
        **dict(_AVERAGE_KEYS),
        "param": Opt(
            str, required=True,
            choices=("opt_steps", "align_until", "num_latents", "guidance_scale"),
        ),
        "values": Opt(str, required=True, help="comma-separated sweep values"),
        "embedder": Opt(str, None, "embedder for scoring (pixel MSE when omitted)"),
    },
    "eval": {
        "prototypes": Opt(str, required=True, help="run directory holding prototype PNGs"),
        "proto_pattern": Opt(str, "prototype_*.png"),
        "samples": Opt(str, required=True, help="run directory holding sample PNGs"),
        "sample_pattern": Opt(str, "sample_*.png"),
        "backend": Opt(str, "pixel-mse", choices=("toy-cosine", "pixel-mse", "image-reward")),
        "embedder": Opt(str, None),
        "attribute": Opt(str, None),
        "concept": Opt(str, required=True),
        "category": Opt(str, "uncategorized"),
        "method": Opt(str, required=True),
        "set_id": Opt(str, "set0"),
        "seed": Opt(int, 0),
    },
    "report": {
        "inputs": Opt(str, required=True, help="comma-separated eval.json paths"),
        "group_by": Opt(str, "category,method,backend,metric"),
        "seed": Opt(int, 0),
    },
}

_OUTPUT_DIRS = {"gen-data": "datasets", "train-toy": "models"}


def resolve_config(spec: dict[str, Opt], file_cfg: dict, flag_cfg: dict) -> dict:
    """Pure resolution: defaults <- config file <- flags; fail-fast on every
    unknown key, missing required value, or choice violation at once."""
    violations = []
    config = {k: o.default for k, o in spec.items()}
    for k, v in file_cfg.items():
        if k not in spec:
            violations.append(f"unknown config key {k!r}")
        else:
            config[k] = v
    for k, v in flag_cfg.items():
        config[k] = v
    for k, o in spec.items():
        v = config[k]
        if o.required and v is None:
            violations.append(f"missing required option {k!r}")
            continue
        if v is None:
            continue
        if o.typ in (int, float, str) and not isinstance(v, o.typ):
            try:
                config[k] = o.typ(v)
            except (TypeError, ValueError):
                violations.append(f"option {k!r} expects {o.typ.__name__}, got {v!r}")
                continue
        if o.choices and config[k] not in o.choices:
            violations.append(f"option {k!r} must be one of {o.choices}, got {config[k]!r}")
    if violations:
        raise ConfigError(violations)
    return config


# --- reference resolution ------------------------------------------------


def _resolve_dir(workspace: Path, kind: str, ref: str) -> Path:
    p = Path(ref)
    if p.exists():
        return p
    q = workspace / kind / ref
    if q.exists():
        return q
    raise FileNotFoundError(f"no {kind[:-1]} at {ref!r} (also tried {q})")


def _container(root: Path, sub: str) -> Path:
    if (root / sub / "meta.json").exists():
        return root / sub
    if (root / "meta.json").exists():
        return root
    raise FileNotFoundError(f"no model container under {root}")


def _ref_hash(path: Path) -> str:
    if path.is_file():
        return file_hash(path)
    entries = {
        str(p.relative_to(path)): file_hash(p) for p in sorted(path.rglob("*")) if p.is_file()
    }
    return canonical_hash(entries)


def _load_model(workspace: Path, ref: str):
    root = _resolve_dir(workspace, "models", ref)
    return load_denoiser(_container(root, "denoiser")), root


def _load_embedder(workspace: Path, ref: str):
    root = _resolve_dir(workspace, "models", ref)
    return load_embedder(_container(root, "embedder")), root


def _guidance(config) -> GuidanceSpec:
    return GuidanceSpec(scale=config["guidance_scale"], convention=config["guidance_convention"])


def _average_config(config, seeds) -> AverageConfig:
    return AverageConfig(
        num_latents=config["num_latents"],
        opt_steps=config["opt_steps"],
        lr=config["lr"],
        align_until=config["align_until"],
        guidance=_guidance(config),
        tap=config["tap"],
        capture_branch=config["capture_branch"],
        seed=seeds["latents"],
        decode_count=config["decode_count"],
        parallel=config["parallel"],
    )


def _save_images(images, run_dir: Path, stem: str) -> list[Path]:
    files = [
        save_image_png(images[i], run_dir / f"{stem}_{i:03d}.png") for i in range(len(images))
    ]
    if len(images) > 1:
        grid = run_dir / f"{stem}_grid.png"
        render_grid(images, path=grid)
        files.append(grid)
    return files


def _write_trace(trace, run_dir: Path) -> Path:
    path = run_dir / "trace.json"
    path.write_text(
        json.dumps({"trace": trace.to_dict(), "content_hash": trace.content_hash()}, indent=2)
    )
    return path


# --- executors ------------------------------------------------------------


def _exec_gen_data(config, seeds, run_dir, workspace):
    makers = {"demo": default_spec, "single-mode": single_mode_spec, "two-mode": two_mode_spec}
    maker = makers[config["preset"]]
    if config["preset"] == "demo":
        spec = maker(
            samples_per_class=config["samples_per_class"],
            seed=seeds["dataset"],
            image_size=config["image_size"],
        )
    else:
        spec = maker(
            samples=config["samples_per_class"],
            seed=seeds["dataset"],
            image_size=config["image_size"],
        )
    dataset = generate_dataset(spec)
    files = save_dataset(dataset, run_dir)
    info = {"num_images": len(dataset.images), "classes": dataset.class_names}
    return files, {}, None, info


def _exec_train_toy(config, seeds, run_dir, workspace):
    data_dir = _resolve_dir(workspace, "datasets", config["dataset"])
    dataset = load_dataset(data_dir)
    denoiser = train_toy_denoiser(
        dataset,
        epochs=config["epochs"],
        seed=seeds["training"],
        batch_size=config["batch_size"],
        lr=config["lr"],
        base_channels=config["base_channels"],
        emb_dim=config["emb_dim"],
        train_steps=config["train_steps"],
    )
    embedder = train_toy_embedder(dataset, seed=seeds["embedder"], epochs=config["embedder_epochs"])
    files = save_denoiser(denoiser, run_dir / "denoiser")
    files += save_embedder(embedder, run_dir / "embedder")
    info = {
        "denoiser_loss": denoiser.training_log,
        "embedder_loss": embedder.training_log,
    }
    return files, {"dataset": _ref_hash(data_dir)}, None, info


def _exec_sample(config, seeds, run_dir, workspace):
    model, model_dir = _load_model(workspace, config["model"])
    schedule = model.sampling_schedule(config["steps"])
    cond = ConditioningSpec(concept=config["concept"])
    latents = init_latents(
        config["num_latents"], model.latent_shape, seeds["latents"], model.dtype
    )
    final = sample(model, schedule, cond, _guidance(config), latents)
    images = decode_image(model, final[: config["decode_count"]])
    files = _save_images(images, run_dir, "sample")
    return files, {"model": _ref_hash(model_dir)}, None, {}


def _exec_average(config, seeds, run_dir, workspace):
    model, model_dir = _load_model(workspace, config["model"])
    schedule = model.sampling_schedule(config["steps"])
    cond = ConditioningSpec(concept=config["concept"])
    result = trajectory_average(model, schedule, cond, _average_config(config, seeds))
    files = _save_images(result.prototypes, run_dir, "prototype")
    files.append(_write_trace(result.trace, run_dir))
    info = {"trace_hash": result.trace.content_hash()}
    return files, {"model": _ref_hash(model_dir)}, "trace.json", info


def _exec_baseline(config, seeds, run_dir, workspace):
    model, model_dir = _load_model(workspace, config["model"])
    schedule = model.sampling_schedule(config["steps"])
    cond = ConditioningSpec(concept=config["concept"])
    bcfg = BaselineConfig(
        kind=config["kind"],
        num_latents=config["num_latents"],
        guidance=_guidance(config),
        seed=seeds["latents"],
        noise_seed=seeds["noise"],
        decode_count=config["decode_count"],
        inject_steps=config["inject_steps"],
        mode_weight=config["mode_weight"],
        guided_steps=config["guided_steps"],
        opt_step=config["opt_step"],
        align_until=config["align_until"],
        opt_steps=config["opt_steps"],
        lr=config["lr"],
        tap=config["tap"],
        parallel=config["parallel"],
    )
    result = run_baseline(model, schedule, cond, bcfg)
    files = _save_images(result.prototypes, run_dir, "baseline")
    return files, {"model": _ref_hash(model_dir)}, None, {"kind": result.kind, **result.info}


def _exec_modes(config, seeds, run_dir, workspace):
    model, model_dir = _load_model(workspace, config["model"])
    embedder, emb_dir = _load_embedder(workspace, config["embedder"])
    schedule = model.sampling_schedule(config["steps"])
    cond = ConditioningSpec(concept=config["concept"])
    latents = init_latents(
        config["num_latents"], model.latent_shape, seeds["latents"], model.dtype
    )
    final = sample(model, schedule, cond, _guidance(config), latents)
    images = decode_image(model, final)
    embeddings = embed(embedder, images, config["attribute"])
    assignment = cluster_samples(
        embeddings,
        pca_dims=config["pca_dims"],
        n_clusters=config["clusters"],
        seed=seeds["gmm"],
        embedder_id="toy" if config["attribute"] is None else f"toy[{config['attribute']}]",
    )
    results = per_cluster_average(
        model, schedule, config["concept"], latents, images.numpy(), assignment,
        _average_config(config, seeds),
        refinement=config["refinement"],
        refine_steps=config["refine_steps"],
        refine_lr=config["refine_lr"],
        refine_seed=seeds["refinement"],
    )
    files = [assignment.save(run_dir / "assignment.json")]
    for res in results:
        for j in range(len(res.prototypes)):
            files.append(
                save_image_png(res.prototypes[j], run_dir / f"cluster{res.cluster}_proto_{j:03d}.png")
            )
        if res.artifact is not None:
            files += save_artifact(res.artifact, run_dir / f"cluster{res.cluster}_artifact")
    info = {
        "cluster_sizes": assignment.cluster_sizes(),
        "refinement": config["refinement"],
    }
    inputs = {"model": _ref_hash(model_dir), "embedder": _ref_hash(emb_dir)}
    return files, inputs, None, info


def _parse_values(param: str, raw: str) -> list:
    typ = float if param in ("guidance_scale", "lr") else int
    return [typ(v.strip()) for v in raw.split(",") if v.strip()]


def _exec_ablate(config, seeds, run_dir, workspace):
    model, model_dir = _load_model(workspace, config["model"])
    schedule = model.sampling_schedule(config["steps"])
    cond = ConditioningSpec(concept=config["concept"])
    values = _parse_values(config["param"], config["values"])
    if not values:
        raise ConfigError(["option 'values' is empty"])
    if config["decode_count"] < 2:
        raise ConfigError(["ablate needs decode_count >= 2 to score consistency"])
    if config["embedder"] is not None:
        embedder, _ = _load_embedder(workspace, config["embedder"])
        backend = resolve_backend("toy-cosine", embedder)
    else:
        backend = resolve_backend("pixel-mse")

    summary = []
    files = []
    for value in values:
        child_cfg = dict(config)
        child_cfg[config["param"]] = value
        acfg = _average_config(child_cfg, seeds)
        result = trajectory_average(model, schedule, cond, acfg)
        child_dir = run_dir / f"{config['param']}-{value}"
        child_files = _save_images(result.prototypes, child_dir, "prototype")
        child_files.append(_write_trace(result.trace, child_dir))
        child = RunManifest(
            command="average",
            config=child_cfg,
            seeds=seeds,
            inputs={"model": _ref_hash(model_dir)},
            outputs=hash_files(child_dir, child_files),
            trace_ref="trace.json",
            info={"parent": "ablate", "trace_hash": result.trace.content_hash()},
        )
        child.write(child_dir)
        score = consistency(result.prototypes, backend)
        summary.append({"value": value, "consistency": score, "backend": backend.id})
    summary_path = run_dir / "summary.json"
    summary_path.write_text(
        json.dumps({"param": config["param"], "sweep": summary}, indent=2, sort_keys=True)
    )
    files.append(summary_path)
    info = {"param": config["param"], "values": values, "children": len(values)}
    return files, {"model": _ref_hash(model_dir)}, None, info


def _load_pngs(run_dir: Path, pattern: str) -> np.ndarray:
    paths = sorted(run_dir.glob(pattern))
    if not paths:
        raise FileNotFoundError(f"no images matching {pattern!r} under {run_dir}")
    return np.stack([load_image_png(p) for p in paths])


def _exec_eval(config, seeds, run_dir, workspace):
    proto_dir = _resolve_dir(workspace, "runs", config["prototypes"])
    sample_dir = _resolve_dir(workspace, "runs", config["samples"])
    protos = _load_pngs(proto_dir, config["proto_pattern"])
    samples = _load_pngs(sample_dir, config["sample_pattern"])
    embedder = None
    if config["embedder"] is not None:
        embedder, _ = _load_embedder(workspace, config["embedder"])
    backend = resolve_backend(config["backend"], embedder, config["attribute"])

    labels = {
        "concept": config["concept"],
        "category": config["category"],
        "method": config["method"],
        "backend": backend.id,
        "set_id": config["set_id"],
    }
    entries = [{**labels, "metric": "consistency", "value": consistency(protos, backend)}]
    for i in range(len(protos)):
        entries.append(
            {
                **labels,
                "metric": "representativeness",
                "value": representativeness(protos[i], samples, backend),
                "prototype": i,
            }
        )
    report = aggregate_report(entries)
    eval_json = run_dir / "eval.json"
    eval_json.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    eval_csv = run_dir / "eval.csv"
    eval_csv.write_text(report.to_csv())
    inputs = {"prototypes": _ref_hash(proto_dir), "samples": _ref_hash(sample_dir)}
    return [eval_json, eval_csv], inputs, None, {"num_prototypes": len(protos)}


def _exec_report(config, seeds, run_dir, workspace):
    paths = [Path(p.strip()) for p in config["inputs"].split(",") if p.strip()]
    entries = []
    inputs = {}
    for p in paths:
        payload = json.loads(p.read_text())
        entries.extend(payload["entries"])
        inputs[str(p)] = file_hash(p)
    grouping = tuple(k.strip() for k in config["group_by"].split(",") if k.strip())
    report = aggregate_report(entries, grouping)
    report_json = run_dir / "report.json"
    report_json.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    report_csv = run_dir / "report.csv"
    report_csv.write_text(report.to_csv())
    return [report_json, report_csv], inputs, None, {"num_entries": len(entries)}


_EXECUTORS = {
    "gen-data": _exec_gen_data,
    "train-toy": _exec_train_toy,
    "sample": _exec_sample,
    "average": _exec_average,
    "baseline": _exec_baseline,
    "modes": _exec_modes,
    "ablate": _exec_ablate,
    "eval": _exec_eval,
    "report": _exec_report,
}


# --- driver ----------------------------------------------------------------


def _run(args, command: str) -> int:
    spec = COMMAND_SPECS[command]
    workspace = Path(args.workspace)
    file_cfg = json.loads(Path(args.config).read_text()) if args.config else {}
    flag_cfg = {
        k: getattr(args, k) for k in spec if getattr(args, k, None) is not None
    }
    config = resolve_config(spec, file_cfg, flag_cfg)
    if args.print_config:
        print(json.dumps(config, indent=2, sort_keys=True))
        return 0
    seeds = expand_seeds(config.get("seed", 0))
    cfg_hash = canonical_hash({"command": command, "config": config})
    out_name = args.out or f"{command}-{cfg_hash[:12]}"
    run_dir = workspace / _OUTPUT_DIRS.get(command, "runs") / out_name
    manifest_path = run_dir / "manifest.json"
    if manifest_path.exists() and not args.force:
        existing = RunManifest.read(manifest_path)
        if existing.config == config and existing.command == command:
            print(f"{run_dir} is up to date (--force to rerun)")
            return 0
        raise ConfigError(
            [f"{run_dir} holds a different run; pass --force or a fresh --out"]
        )

    with workspace_lock(workspace):
        run_dir.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        files, inputs, trace_ref, info = _EXECUTORS[command](config, seeds, run_dir, workspace)
        manifest = RunManifest(
            command=command,
            config=config,
            seeds=seeds,
            inputs=inputs,
            outputs=hash_files(run_dir, files),
            info=info,
            trace_ref=trace_ref,
            timings={"wall_seconds": time.perf_counter() - t0},
        )
        manifest.write(run_dir)
    print(f"{command}: wrote {len(files)} outputs to {run_dir}")
    print(f"manifest content hash: {manifest.content_hash()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffavg",
        description="Concept prototypes from diffusion models by trajectory-aligned averaging.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, spec in COMMAND_SPECS.items():
        p = sub.add_parser(command)
        p.add_argument("--workspace", default=None, help="workspace root (env DIFFAVG_WORKSPACE)")
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", default=None, help="output name under the workspace")
        p.add_argument("--force", action="store_true", help="rerun even if up to date")
        p.add_argument("--print-config", action="store_true", dest="print_config")
        for key, opt in spec.items():
            flag = "--" + key.replace("_", "-")
            if opt.typ is bool:
                p.add_argument(flag, action="store_true", default=None, help=opt.help)
            else:
                p.add_argument(flag, type=opt.typ, default=None, help=opt.help)
        p.set_defaults(command_name=command)
    return parser


def main(argv=None) -> int:
    import os

    args = build_parser().parse_args(argv)
    if args.workspace is None:
        args.workspace = os.environ.get("DIFFAVG_WORKSPACE", "workspace")
    try:
        return _run(args, args.command_name)
    except ConfigError as err:
        print(
            json.dumps({"error": "config-validation", "violations": err.violations}),
            file=sys.stderr,
        )
        return 2
    except Exception as err:  # surfaced as machine-readable JSON
        print(
            json.dumps({"error": type(err).__name__, "message": str(err)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
