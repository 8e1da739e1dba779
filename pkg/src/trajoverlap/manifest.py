"""Run manifests: one ``manifest.json`` per output directory.

A manifest records what produced the directory (command, effective
configuration, content hashes of inputs and outputs, tool version, seed).
Its digest covers everything except wall time and file-system paths, so
re-running a command on the same inputs reproduces the digest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ValidationError
from .ingest import file_digest

MANIFEST_NAME = "manifest.json"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    config_digest: str
    inputs: dict            # role -> {"path": str, "sha256": str}
    outputs: dict           # file name relative to the directory -> sha256
    tool_version: str
    seed: int | None = None
    wall_time_s: float = 0.0
    digest: str = field(default="")

    def content(self) -> dict:
        d = asdict(self)
        d.pop("wall_time_s")
        d.pop("digest")
        d["inputs"] = {k: v["sha256"] for k, v in self.inputs.items()}
        return d

    def compute_digest(self) -> str:
        return hashlib.sha256(canonical_json(self.content()).encode()).hexdigest()

    def to_dict(self) -> dict:
        return asdict(self)


def build_manifest(command: str, config: dict, inputs: dict, directory, outputs, seed: int | None,
                   wall_time_s: float) -> RunManifest:
    """Hash inputs and outputs and assemble a manifest for ``directory``.

    ``inputs`` maps a role (e.g. ``"split"``) to a file or directory path;
    ``outputs`` lists files inside ``directory``.
    """
    from . import __version__

    d = Path(directory)
    ins = {role: {"path": str(p), "sha256": file_digest(p, exclude=(MANIFEST_NAME,))}
           for role, p in sorted(inputs.items())}
    outs = {}
    for p in map(Path, outputs):
        rel = p.relative_to(d) if p.is_relative_to(d) else p
        outs[rel.as_posix()] = file_digest(d / rel)
    m = RunManifest(command, config, config_digest(config), ins, dict(sorted(outs.items())), __version__, seed,
                    round(wall_time_s, 3))
    m.digest = m.compute_digest()
    return m


def write_manifest(manifest: RunManifest, directory) -> Path:
    """Write ``manifest.json``, refusing to overwrite another command's manifest."""
    p = Path(directory) / MANIFEST_NAME
    if p.exists():
        old = read_manifest(p)
        if old.command != manifest.command:
            raise ValidationError(f"{directory} already holds output of '{old.command}'; "
                                  f"use a separate directory for '{manifest.command}'")
    with open(p, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return p


def read_manifest(path) -> RunManifest:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    try:
        with open(p, encoding="utf-8") as fh:
            return RunManifest(**json.load(fh))
    except (OSError, TypeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{p}: unreadable manifest ({exc})") from exc
