"""Reproducibility sidecars written next to every pipeline artifact.

A manifest records what produced a file: the subcommand, its resolved
parameters, the input and output paths, and the seed. Re-running the same
subcommand with the same manifest contents reproduces deterministic artifacts
byte for byte; `created_at` is wall clock and excluded from that claim.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

from . import __version__


@dataclass(frozen=True)
class RunManifest:
    subcommand: str
    parameters: dict
    inputs: dict
    outputs: dict
    seed: int | None
    tool_version: str
    created_at: str


def make_manifest(subcommand: str, parameters: dict, inputs: dict,
                  outputs: dict, seed: int | None) -> RunManifest:
    return RunManifest(subcommand=subcommand,
                       parameters=dict(parameters),
                       inputs={k: str(v) for k, v in inputs.items()},
                       outputs={k: str(v) for k, v in outputs.items()},
                       seed=seed,
                       tool_version=__version__,
                       created_at=datetime.now(timezone.utc).isoformat())


def manifest_path_for(artifact_path) -> Path:
    path = Path(artifact_path)
    return path.with_name(path.name + ".manifest.json")


def write_manifest(manifest: RunManifest, artifact_path) -> Path:
    """Write the sidecar for one artifact and return its path."""
    path = manifest_path_for(artifact_path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(asdict(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(path) -> RunManifest:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    try:
        return RunManifest(**obj)
    except TypeError as exc:
        raise ValueError(f"{path}: not a run manifest ({exc})") from exc
