"""Checkpoints (JSON manifest + raw little-endian float64 values) and run-directory locks."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..diffgraph import Layout
from ..exceptions import ConfigurationError
from ..problems import HyperParams

MANIFEST = "checkpoint.json"
VALUES = "lambda.bin"
LOCK = ".lock"


@dataclass
class Checkpoint:
    lam: HyperParams
    config: dict
    config_hash: str
    iteration: int = 0
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def save_checkpoint(directory, ckpt: Checkpoint) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    values = np.ascontiguousarray(ckpt.lam.values, dtype="<f8")
    manifest = {
        "layout": ckpt.lam.layout.to_json(),
        "dtype": "<f8",
        "values_file": VALUES,
        "size": int(values.size),
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "iteration": int(ckpt.iteration),
        "history": ckpt.history,
        "extra": ckpt.extra,
    }
    # values first, so a manifest never points at a missing or partial file
    tmp = directory / (VALUES + ".tmp")
    tmp.write_bytes(values.tobytes())
    os.replace(tmp, directory / VALUES)
    tmp = directory / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, directory / MANIFEST)
    return directory


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"no checkpoint manifest in {directory}") from None
    layout = Layout.from_json(manifest["layout"])
    raw = (directory / manifest.get("values_file", VALUES)).read_bytes()
    values = np.frombuffer(raw, dtype=manifest.get("dtype", "<f8")).astype(np.float64)
    if values.size != layout.size or values.size != manifest["size"]:
        raise ConfigurationError(f"checkpoint holds {values.size} values, layout needs {layout.size}")
    return Checkpoint(HyperParams(values, layout), manifest["config"], manifest["config_hash"],
                      manifest["iteration"], manifest["history"], manifest.get("extra", {}))


class RunLock:
    """Exclusive ownership of a run directory for the lifetime of the context."""

    def __init__(self, directory):
        self.path = Path(directory) / LOCK
        self._fd = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigurationError(f"run directory {self.path.parent} is locked by another run "
                                     f"(remove {self.path} if that run is gone)") from None
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        os.close(self._fd)
        self.path.unlink(missing_ok=True)
        return False
