"""Artifact manifest: content hashes of every output and of the inputs it was built from.

A stage may only consume an artifact whose file still matches its recorded
hash, whose own inputs are unchanged since it was produced, and whose
recorded configuration digest matches the configuration in force now.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

MANIFEST_NAME = "manifest.json"


class ArtifactError(RuntimeError):
    """A prerequisite is missing or stale."""


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


class Manifest:
    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / MANIFEST_NAME
        self.entries: dict[str, dict] = {}
        if self.path.exists():
            self.entries = json.loads(self.path.read_text())

    def save(self) -> None:
        self.path.write_text(json.dumps(self.entries, indent=1, sort_keys=True) + "\n")

    def record(self, name: str, stage: str, config_digest: str, inputs: list[str]) -> None:
        """Register ``name`` (relative to the output directory) as produced now."""
        self.entries[name] = {
            "sha256": file_digest(self.out_dir / name),
            "stage": stage,
            "config": config_digest,
            "inputs": {i: self.entries[i]["sha256"] for i in sorted(inputs)},
        }

    def check(self, name: str, config_digest: str | None = None) -> None:
        """Raise ``ArtifactError`` unless ``name`` is present and up to date."""
        path = self.out_dir / name
        entry = self.entries.get(name)
        if not path.exists() or entry is None:
            raise ArtifactError(f"missing prerequisite artifact: {name}")
        if file_digest(path) != entry["sha256"]:
            raise ArtifactError(f"stale prerequisite artifact: {name} (modified since it was written)")
        if config_digest is not None and entry["config"] != config_digest:
            raise ArtifactError(
                f"stale prerequisite artifact: {name} (built with a different configuration; "
                f"re-run the '{entry['stage']}' stage)"
            )
        for dep, digest in entry["inputs"].items():
            current = self.entries.get(dep, {}).get("sha256")
            if current != digest:
                raise ArtifactError(f"stale prerequisite artifact: {name} (input {dep} changed)")
