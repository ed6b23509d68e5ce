"""Small shared utilities: named child seeds, thread cap, atomic writes."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

THREADS_ENV = "SLIMKIT_THREADS"


def child_seed(seed: int, name: str) -> int:
    """Stable named sub-seed so components are independently reproducible."""
    digest = hashlib.blake2b(f"{seed}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def worker_count() -> int:
    cores = os.cpu_count() or 1
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            return max(1, min(int(cap), cores))
        except ValueError:
            pass
    return cores


def atomic_write_json(obj, path) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
