"""Artifact serialization: delimited tables, JSON documents and run manifests.

Floats are written with 17 significant digits so every value round-trips
bit-exactly; JSON keys are sorted so reruns produce identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import math
import platform
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from . import __version__

FLOAT_FORMAT = "%.17g"
MANIFEST = "manifest.json"
VOLATILE_KEYS = ("started_at", "wall_time_s")


def write_csv(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def read_csv(path, **kwargs) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip", **kwargs)


def _plain(obj):
    """Convert numpy/pandas scalars and containers to JSON-native values."""
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)  # "nan" / "inf" as strings
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(doc, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_plain(doc), indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def input_digests(*paths) -> dict[str, str]:
    """Digests of every file under each input path, manifests excluded.

    Keys are ``<input name>/<relative path>`` so they do not depend on
    where the inputs live.
    """
    out = {}
    for path in paths:
        if path is None:
            continue
        path = Path(path)
        if path.is_file():
            out[path.name] = sha256(path)
            continue
        for p in sorted(q for q in path.rglob("*") if q.is_file() and q.name != MANIFEST):
            out[f"{path.name}/{p.relative_to(path).as_posix()}"] = sha256(p)
    return out


class Run:
    """Collects a subcommand's outputs and writes its manifest."""

    def __init__(self, command: str, config: Mapping, out_dir, inputs: Mapping[str, str] | None = None):
        self.command = command
        self.config = dict(config)
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs = dict(inputs or {})
        self.outputs: list[Path] = []
        self.started = datetime.now(timezone.utc)
        self._t0 = time.perf_counter()

    def csv(self, frame: pd.DataFrame, name: str) -> Path:
        p = write_csv(frame, self.out / name)
        self.outputs.append(p)
        return p

    def json(self, doc, name: str) -> Path:
        p = write_json(doc, self.out / name)
        self.outputs.append(p)
        return p

    def manifest(self, status: str = "ok", error: Mapping | None = None) -> Path:
        doc = {
            "command": self.command,
            "config": self.config,
            "tool": {"name": "gradegap", "version": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "pandas": pd.__version__},
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {p.name: sha256(p) for p in sorted(self.outputs)},
            "status": status,
            "started_at": self.started.isoformat(),
            "wall_time_s": time.perf_counter() - self._t0,
        }
        if error:
            doc["error"] = dict(error)
        return write_json(doc, self.out / MANIFEST)


def stable_manifest(path) -> dict:
    """Manifest contents without the run timestamp and wall time."""
    doc = read_json(path)
    for k in VOLATILE_KEYS:
        doc.pop(k, None)
    return doc
