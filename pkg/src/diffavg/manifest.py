"""Run manifests, master-seed expansion, and workspace discipline.

Every command writes one manifest describing its resolved config, expanded
seeds, input references, and content hashes of everything it produced.  The
manifest's content hash excludes volatile fields (timings), so identical
(config, seed, machine) runs hash identically.
"""

from __future__ import annotations

import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

from ._version import __version__
from .hashing import canonical_hash, file_hash

__all__ = [
    "RunManifest",
    "SEED_ROLES",
    "expand_seeds",
    "find_orphans",
    "hash_files",
    "workspace_lock",
]

SEED_ROLES = ("latents", "dataset", "noise", "gmm", "training", "embedder", "refinement")


def expand_seeds(master: int) -> dict[str, int]:
    """Deterministically derive one sub-seed per subsystem from a master seed."""
    seeds = {"master": int(master)}
    for role in SEED_ROLES:
        digest = hashlib.sha256(f"{master}:{role}".encode()).digest()
        seeds[role] = int.from_bytes(digest[:8], "big") % (2**31)
    return seeds


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)  # label -> content hash
    outputs: dict = field(default_factory=dict)  # path relative to the manifest -> hash
    info: dict = field(default_factory=dict)
    trace_ref: str | None = None
    timings: dict = field(default_factory=dict)
    version: str = __version__

    def content(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "info": self.info,
            "trace_ref": self.trace_ref,
            "version": self.version,
        }

    def content_hash(self) -> str:
        return canonical_hash(self.content())

    def to_dict(self) -> dict:
        return {**self.content(), "timings": self.timings, "content_hash": self.content_hash()}

    def write(self, run_dir) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        return cls(
            command=d["command"],
            config=d["config"],
            seeds=d["seeds"],
            inputs=d["inputs"],
            outputs=d["outputs"],
            info=d.get("info", {}),
            trace_ref=d.get("trace_ref"),
            timings=d.get("timings", {}),
            version=d.get("version", "unknown"),
        )


def hash_files(run_dir, files) -> dict[str, str]:
    """Content hashes keyed by path relative to the run directory."""
    run_dir = Path(run_dir)
    return {str(Path(f).relative_to(run_dir)): file_hash(f) for f in files}


LOCK_NAME = ".lock"


@contextmanager
def workspace_lock(root):
    """Exclusive per-workspace lockfile; raises if another run holds it."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lock = root / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"workspace {root} is locked by another run (stale? remove {lock})"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def find_orphans(root) -> tuple[list[str], list[str]]:
    """Files not owned by any manifest, and files owned by more than one.

    Ownership is membership in a manifest's ``outputs``; manifests own
    themselves.  A clean workspace returns two empty lists.
    """
    root = Path(root)
    owned: dict[str, int] = {}
    for manifest_path in sorted(root.rglob("manifest.json")):
        owned[str(manifest_path.relative_to(root))] = 1
        m = RunManifest.read(manifest_path)
        for rel in m.outputs:
            key = str((manifest_path.parent / rel).relative_to(root))
            owned[key] = owned.get(key, 0) + 1
    orphans, multi = [], []
    for path in sorted(root.rglob("*")):
        if not path.is_file() or path.name == LOCK_NAME:
            continue
        rel = str(path.relative_to(root))
        count = owned.get(rel, 0)
        if count == 0:
            orphans.append(rel)
        elif count > 1:
            multi.append(rel)
    return orphans, multi
