"""Run manifests and deterministic CSV output.

Every CLI run writes a manifest JSON next to its outputs: the exact argv,
config snapshot, seed, package version, and sha256 of every input and output
file. Re-running with the manifest's seed and config must reproduce the
output files byte for byte (single-worker mode), so floats are written with
repr (shortest round-trip form) rather than a fixed precision.
"""
from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

from . import __version__

MANIFEST_NAME = "manifest.json"


def format_cell(value) -> str:
    if isinstance(value, (float,)):
        return repr(float(value))
    if isinstance(value, (int,)):
        return str(value)
    if hasattr(value, "item"):  # numpy scalar
        return format_cell(value.item())
    return str(value)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format_cell(v) for v in row) + "\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Collects run metadata; write() is called once on success or failure."""

    def __init__(self, command: str, argv: list[str], seed, out_dir,
                 config_text: str = ""):
        self.data = {
            "command": command,
            "argv": list(argv),
            "seed": seed,
            "package_version": __version__,
            "config": config_text,
            "started_unix": time.time(),
            "inputs": {},
            "outputs": {},
            "status": "running",
        }
        self.out_dir = Path(out_dir)

    def add_input(self, path) -> None:
        self.data["inputs"][str(path)] = sha256_file(path)

    def add_output(self, path) -> None:
        path = Path(path)
        self.data["outputs"][str(path.relative_to(self.out_dir))] = sha256_file(path)

    def finish(self, status: str = "ok", error: str | None = None) -> Path:
        self.data["status"] = status
        self.data["wall_seconds"] = time.time() - self.data["started_unix"]
        if error is not None:
            self.data["error"] = error
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / MANIFEST_NAME
        with open(path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def load_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def outputs_match(manifest: dict, out_dir) -> list[str]:
    """Names of manifest outputs whose current sha256 differs (or is missing)."""
    out_dir = Path(out_dir)
    bad = []
    for name, digest in manifest["outputs"].items():
        target = out_dir / name
        if not target.exists() or sha256_file(target) != digest:
            bad.append(name)
    return bad
