"""Run manifests: a sidecar record of what produced each artifact.

Every artifact-writing CLI command drops a manifest next to its outputs
with the invoked command line, the effective configuration, the seeds, and
content digests of all input and output files. The manifest digest covers
exactly the deterministic fields, so re-running a command with the same
inputs must reproduce the digest bit for bit; wall time is recorded but
excluded from the digest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

FORMAT = "colflux-manifest-1"


def file_sha256(path) -> str:
    """Hex digest of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class RunManifest:
    """Provenance for one CLI invocation.

    Attributes:
        command: the argv tokens as invoked.
        config: effective configuration snapshot (column parameters plus
            resolved command options).
        seeds: named seeds in effect.
        inputs: input name -> sha256 of the file consumed.
        artifacts: output path (relative to the manifest) -> sha256.
        wall_time_s: elapsed wall time; informational only.
    """

    command: tuple
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    wall_time_s: float = 0.0

    def deterministic_dict(self) -> dict:
        return {
            "format": FORMAT,
            "command": list(self.command),
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "artifacts": self.artifacts,
        }

    def digest(self) -> str:
        """Digest of the deterministic fields (wall time excluded)."""
        blob = json.dumps(
            self.deterministic_dict(), sort_keys=True, separators=(",", ":")
        )
        return hashlib.sha256(blob.encode()).hexdigest()

    def write(self, path) -> None:
        doc = self.deterministic_dict()
        doc["wall_time_s"] = self.wall_time_s
        doc["digest"] = self.digest()
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format") != FORMAT:
            raise ValueError(f"not a run manifest: {path}")
        man = cls(
            command=tuple(doc["command"]),
            config=doc["config"],
            seeds=doc["seeds"],
            inputs=doc["inputs"],
            artifacts=doc["artifacts"],
            wall_time_s=doc.get("wall_time_s", 0.0),
        )
        stored = doc.get("digest")
        if stored is not None and stored != man.digest():
            raise ValueError(f"manifest digest mismatch in {path}")
        return man
