"""Run-directory layout and artifact manifest.

Every pipeline stage reads and writes inside one run directory and records
sha256 content hashes of its outputs in ``manifest.json``. ``report`` (and
anything else that summarizes a run) verifies the hashes first, so stale or
hand-edited artifacts are caught. Volatile files (judgment logs written by a
live review service, server configs with secrets) stay out of the manifest.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import ValidationError

SUBDIRS = ("data", "features", "models", "metrics", "audit", "report")
MANIFEST_NAME = "manifest.json"


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDirectory:
    def __init__(self, root):
        self.root = Path(root)

    def prepare(self) -> "RunDirectory":
        for sub in SUBDIRS:
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        if not self.manifest_path.exists():
            self._write({})
        return self

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def _read(self) -> dict:
        if not self.manifest_path.exists():
            return {}
        return json.loads(self.manifest_path.read_text())

    def _write(self, manifest: dict) -> None:
        self.manifest_path.write_text(
            json.dumps(dict(sorted(manifest.items())), indent=2) + "\n"
        )

    def record(self, *paths) -> None:
        """Hash the given files (relative or absolute inside the run) into
        the manifest."""
        manifest = self._read()
        for p in paths:
            p = Path(p)
            rel = p.relative_to(self.root) if p.is_absolute() else p
            manifest[str(rel)] = file_hash(self.root / rel)
        self._write(manifest)

    def verify(self) -> list[str]:
        """Return mismatch descriptions; empty means the run is intact."""
        problems = []
        for rel, expected in self._read().items():
            path = self.root / rel
            if not path.exists():
                problems.append(f"missing artifact: {rel}")
            elif file_hash(path) != expected:
                problems.append(f"hash mismatch: {rel}")
        return problems

    def require(self, *parts) -> Path:
        path = self.path(*parts)
        if not path.exists():
            rel = "/".join(parts)
            raise ValidationError(
                f"missing input {rel!r} in run directory; run the producing stage first"
            )
        return path

    def manifest(self) -> dict:
        return self._read()
