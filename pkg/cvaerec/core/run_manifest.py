"""
Run manifest and artifact-directory lock.

Every command writes ``run_manifest.json`` next to its outputs: the config
snapshot, seed, content hashes of the inputs, the artifacts it produced,
library versions and per-stage timings.

A run manifest is a record, not a reproducible artifact: timings and absolute
paths differ between identical reruns. The byte-stable outputs are the split
directory (its ``manifest.json`` included), checkpoints and metric reports;
across reruns only ``inputs`` hashes and ``seed`` of a run manifest must match.
"""

import hashlib
import json
import logging
import os
import platform
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

import numpy as np
import pandas as pd
import scipy
from pydantic import BaseModel, Field

import cvaerec
from cvaerec.core.exceptions import RunLockedError

logger = logging.getLogger(__name__)

LOCK_NAME = ".cvaerec.lock"


def file_fingerprint(path: str, chunk_size: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def library_versions() -> Dict[str, str]:
    return {
        "cvaerec": cvaerec.__version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "scipy": scipy.__version__,
    }


class RunManifest(BaseModel):
    command: str
    seed: int
    config: Dict[str, Any] = Field(default_factory=dict)
    inputs: Dict[str, str] = Field(default_factory=dict, description="path -> sha256")
    artifacts: List[str] = Field(default_factory=list)
    results: Dict[str, Any] = Field(default_factory=dict)
    versions: Dict[str, str] = Field(default_factory=library_versions)
    timings: Dict[str, float] = Field(default_factory=dict)

    def add_input(self, path: Optional[str]) -> None:
        if path and Path(path).is_file():
            self.inputs[str(path)] = file_fingerprint(path)

    def add_artifact(self, path) -> None:
        if str(path) not in self.artifacts:
            self.artifacts.append(str(path))

    @contextmanager
    def timed(self, stage: str) -> Iterator[None]:
        started = time.perf_counter()
        try:
            yield
        finally:
            self.timings[stage] = round(time.perf_counter() - started, 3)

    def write(self, directory) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "run_manifest.json"
        path.write_text(json.dumps(self.model_dump(), indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
        logger.debug(f"Run manifest written to {path}")
        return path


@contextmanager
def directory_lock(directory) -> Iterator[Path]:
    """Exclusive lock on an artifact directory for the duration of one command"""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(str(lock), os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        holder = lock.read_text(encoding="utf-8").strip() if lock.exists() else "unknown"
        raise RunLockedError(f"{out} is in use by another command (pid {holder}); remove {lock} if it is stale")
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield lock
    finally:
        try:
            lock.unlink()
        except FileNotFoundError:
            pass
