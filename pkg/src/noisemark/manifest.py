"""Run manifests: what ran, with which config, seeds, and artifacts."""

from __future__ import annotations

import hashlib
import json
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(snapshot: dict) -> str:
    return hashlib.sha256(json.dumps(snapshot, sort_keys=True).encode()).hexdigest()[:16]


def version_string() -> str:
    from . import __version__

    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"noisemark-{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.TimeoutExpired):
        pass
    return f"noisemark-{__version__}"


@dataclass
class RunManifest:
    command: str
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    checkpoint_hashes: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None
    started_at: float = field(default_factory=time.time)
    elapsed_seconds: float = 0.0
    version: str = field(default_factory=version_string)

    def add_output(self, path) -> Path:
        self.outputs.append(str(path))
        return Path(path)

    def add_checkpoint(self, name: str, path) -> None:
        self.checkpoint_hashes[name] = file_sha256(path)

    def finish(self, status: str = "ok", error: str | None = None) -> None:
        self.status = status
        self.error = error
        self.elapsed_seconds = time.time() - self.started_at

    def validate_outputs(self) -> None:
        missing = [p for p in self.outputs if not Path(p).exists()]
        if missing:
            raise RuntimeError(f"manifest lists missing artifacts: {missing}")

    def write(self, path) -> None:
        payload = {
            "command": self.command,
            "config": self.config,
            "config_hash": config_hash(self.config) if self.config else None,
            "seeds": self.seeds,
            "checkpoint_hashes": self.checkpoint_hashes,
            "outputs": self.outputs,
            "metrics": self.metrics,
            "status": self.status,
            "error": self.error,
            "started_at": self.started_at,
            "elapsed_seconds": self.elapsed_seconds,
            "version": self.version,
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
